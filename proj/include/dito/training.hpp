#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "dito/checkpoint.hpp"
#include "dito/data.hpp"
#include "dito/diffusion_core.hpp"
#include "dito/feature_nets.hpp"
#include "dito/optim.hpp"
#include "dito/tokenizer.hpp"

namespace dito {

enum class TimeSampling {
    uniform,     // independent U[0,1] per sample
    stratified,  // one draw per stratum [k/B, (k+1)/B), strata randomly assigned; still U[0,1] per sample
};

struct TrainConfig {
    Objective objective;
    double noise_sync_prob = 0.1;
    double perceptual_weight = 0.0;  // 0.5 for the perceptual variant
    int batch_size = 16;
    int64_t total_steps = 1000;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double grad_clip = 1.0;
    bool freeze_encoder = false;
    TimeSampling time_sampling = TimeSampling::stratified;
    bool augment = true;
    bool repeat = true;
    uint64_t seed = 0;

    // glpto baseline
    double l1_weight = 1.0;
    double lpips_weight = 1.0;
    double gan_weight = 0.5;
    int64_t gan_warmup_steps = -1;  // -1: the 50K/300K fraction of total_steps

    void validate() const;
    int64_t resolved_gan_warmup() const;
    AdamWOptions adam() const;
};

/// Everything the next step depends on besides the batch.
struct TrainState {
    TokenizerModel model;
    AdamW optimizer;
    AdamW disc_optimizer;  // glpto only
    int64_t step = 0;
    at::Generator rng;
    FeatureNet perceptual{nullptr};

    /// Parameters, optimizer moments and RNG state as named arrays.
    NamedTensors arrays() const;
    void load_arrays(const NamedTensors& arrays);
};

/// Builds the model from cfg.seed and wires the optimizers. With
/// cfg.freeze_encoder the encoder is excluded from the optimizer and has
/// requires_grad cleared. The perceptual network is attached when any loss needs it.
TrainState init_train_state(const TokenizerConfig& model_config, const TrainConfig& cfg,
                            const NamedTensors* encoder_init = nullptr);

/// Per-sample times for one batch.
struct TimeDraw {
    torch::Tensor t;       // (B)
    torch::Tensor tau;     // (B), meaningful where synced
    torch::Tensor synced;  // (B) bool
};

/// Draws coin, tau and base time for every sample, in that order, whatever p is,
/// so the RNG stream does not depend on p. Synced samples get t = tau + (1 - tau) u.
TimeDraw sample_training_times(int64_t batch, double noise_sync_prob, TimeSampling sampling, at::Generator& gen);

/// z_tau = alpha_tau z + sigma_tau eps per sample, with the schedule used for pixels.
Latent noise_sync_augment(const Latent& z, const torch::Tensor& tau, const torch::Tensor& eps,
                          const NoiseSchedule& schedule);
/// Draws tau ~ U[0,1] per sample and eps ~ N(0, I) from gen.
std::pair<Latent, torch::Tensor> noise_sync_augment(const Latent& z, at::Generator& gen,
                                                    const NoiseSchedule& schedule);

/// What a step did, for logging and for tests that inspect the code path.
struct StepRecord {
    int64_t step = 0;                           // step count after the update
    std::map<std::string, double> components;   // logged loss values
    std::vector<std::string> loss_terms;        // tensors that contributed gradient
    std::string code_path;
    torch::Tensor t, tau, synced;
    double grad_norm = 0.0;
    bool gan_active = false;
    bool adaptive_weight_clamped = false;
};

/// One AdamW update of encoder + diffusion decoder on the objective's L2 loss,
/// plus perceptual_weight * distance(x_bar, x0) when perceptual_weight > 0.
StepRecord dito_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg);

/// Same step with the perceptual term required (perceptual_weight > 0).
StepRecord dito_lpips_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg);

/// L1 + perceptual + adaptive GAN generator update, then a hinge-loss discriminator update.
StepRecord glpto_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg);

/// Dispatches on the model kind.
StepRecord train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg);

/// Ratio of gradient norms of the reconstruction and GAN losses at `last_layer`,
/// clamped to [0, 1e4]; `clamped` reports whether clamping or a non-finite value occurred.
double adaptive_gan_weight(const torch::Tensor& rec_loss, const torch::Tensor& gan_loss,
                           const torch::Tensor& last_layer, bool* clamped = nullptr);

/// Sample positions step*B .. step*B+B-1 mapped through per-epoch permutations of the
/// dataset. Throws ConfigError when repeat is off and the positions run past one epoch.
std::vector<int64_t> batch_indices(int64_t dataset_size, int batch_size, int64_t step, uint64_t seed, bool repeat);

/// Stacked (B, 3, R, R) batch; each item is augmented with an RNG derived from (seed, position).
torch::Tensor assemble_batch(const Dataset& data, int batch_size, int64_t step, uint64_t seed, bool repeat,
                             bool augment);

struct FitOptions {
    std::filesystem::path output_dir;  // empty: no files written
    int64_t checkpoint_every = 0;      // 0: only the final checkpoint
    nlohmann::json config_snapshot;    // stored in every checkpoint
    std::function<void(const StepRecord&)> on_step;
};

/// Runs cfg.total_steps - state.step steps, appending {step, loss, wall_time} lines to
/// <output_dir>/train_log.jsonl and writing checkpoints at multiples of checkpoint_every
/// and at the final step.
void fit(TrainState& state, const TrainConfig& cfg, const Dataset& data, const FitOptions& options);

Checkpoint make_checkpoint(const TrainState& state, const nlohmann::json& config_snapshot);

/// Rewrites the log at `log_path` keeping only records with step <= last_step.
void truncate_log(const std::filesystem::path& log_path, int64_t last_step);

}  // namespace dito
