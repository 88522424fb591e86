#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "dito/checkpoint.hpp"
#include "dito/data.hpp"
#include "dito/diffusion_core.hpp"
#include "dito/networks.hpp"
#include "dito/optim.hpp"
#include "dito/sampler.hpp"
#include "dito/tokenizer.hpp"
#include "dito/training.hpp"

namespace dito {

struct GenConfig {
    int num_classes = 2;
    double cfg_dropout_prob = 0.1;
    double guidance_scale = 2.0;
    int steps = 50;  // latent sampling steps
    int batch_size = 16;
    int64_t total_steps = 1000;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double grad_clip = 1.0;
    TimeSampling time_sampling = TimeSampling::stratified;
    double sigma_min = 1e-5;
    uint64_t seed = 0;

    std::vector<int> widths{64, 128, 128};
    int blocks_per_stage = 2;
    int t_emb_dim = 256;

    void validate() const;
    LatentGeneratorOptions generator_options(int latent_channels) const;
    /// Flow matching, the same schedule type the tokenizer uses in pixel space.
    Objective objective() const { return {ObjectiveKind::flow_matching_v, sigma_min}; }
};

struct GenState {
    LatentGenerator net{nullptr};
    AdamW optimizer;
    int64_t step = 0;
    at::Generator rng;

    NamedTensors arrays() const;
    void load_arrays(const NamedTensors& arrays);
};

GenState init_gen_state(const GenConfig& cfg, int latent_channels);

struct GenStepRecord {
    int64_t step = 0;
    double loss = 0.0;
    int64_t null_tokens = 0;
    torch::Tensor labels_used;  // after null-token dropout
};

/// Flow-matching v-loss on latents; each label becomes kNullClass with probability cfg_dropout_prob.
GenStepRecord latent_train_step(GenState& state, const torch::Tensor& latents, const torch::Tensor& labels,
                                const GenConfig& cfg);

/// v_uncond + scale (v_cond - v_uncond).
torch::Tensor cfg_combine(const torch::Tensor& v_uncond, const torch::Tensor& v_cond, double scale);

/// Guided Euler integration of the latent field from initial_noise(seed, first_id + i).
/// Scale 0 evaluates only the null branch and scale 1 only the conditional one.
torch::Tensor sample_latents(LatentGeneratorImpl& net, int64_t class_id, int64_t n, const std::vector<int64_t>& shape,
                             const GenConfig& cfg, uint64_t seed, int64_t first_id = 0);

/// Samples latents for class_id and decodes them with the tokenizer. `resolution`
/// is the pixel size; the latent grid is resolution / f.
torch::Tensor generate(LatentGeneratorImpl& net, const TokenizerModel& tokenizer, int64_t class_id, int64_t n,
                       int resolution, const GenConfig& cfg, const SolverConfig& decode, uint64_t seed);

/// Encodes every image (no augmentation) with the frozen tokenizer encoder.
torch::Tensor encode_dataset(const TokenizerModel& tokenizer, const Dataset& data, int batch_size = 64);

struct LatentFitOptions {
    std::filesystem::path output_dir;
    int64_t checkpoint_every = 0;
    nlohmann::json config_snapshot;
    std::function<void(const GenStepRecord&)> on_step;
};

void fit_latent(GenState& state, const GenConfig& cfg, const torch::Tensor& latents, const torch::Tensor& labels,
                const LatentFitOptions& options);

Checkpoint make_gen_checkpoint(const GenState& state, const nlohmann::json& config_snapshot);

}  // namespace dito
