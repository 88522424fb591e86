#include "dito/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dito/errors.hpp"

namespace dito {
namespace fs = std::filesystem;

namespace {

constexpr uint64_t kTrainRngSalt = 0x7472616e;  // separates the training stream from model init
constexpr uint64_t kDataSalt = 0x64617461;

torch::Tensor per_sample_mask(const torch::Tensor& mask, const torch::Tensor& like) {
    std::vector<int64_t> shape(static_cast<size_t>(like.dim()), 1);
    shape[0] = mask.size(0);
    return mask.view(shape);
}

std::string describe(const torch::Tensor& t) {
    std::ostringstream out;
    out << "[";
    auto flat = t.detach().to(torch::kFloat64).flatten();
    for (int64_t i = 0; i < flat.numel(); ++i) {
        out << (i ? ", " : "") << flat[i].item<double>();
    }
    out << "]";
    return out.str();
}

double module_grad_norm(const torch::nn::Module& module) {
    std::vector<torch::Tensor> params;
    for (const auto& p : module.parameters()) params.push_back(p);
    return grad_norm(params);
}

double step_optimizer(AdamW& optimizer, double clip) {
    const auto params = optimizer.param_tensors();
    const double norm = clip > 0.0 ? clip_grad_norm(params, clip) : grad_norm(params);
    optimizer.step();
    return norm;
}

}  // namespace

// --- config ------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(noise_sync_prob >= 0.0 && noise_sync_prob <= 1.0)) {
        throw ConfigError("noise_sync_prob must lie in [0, 1]");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(perceptual_weight >= 0.0)) throw ConfigError("perceptual_weight must be nonnegative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (total_steps < 0) throw ConfigError("total_steps must be nonnegative");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (objective.sigma_min < 0.0 || objective.sigma_min >= 1.0) throw ConfigError("sigma_min must lie in [0, 1)");
}

int64_t TrainConfig::resolved_gan_warmup() const {
    if (gan_warmup_steps >= 0) return gan_warmup_steps;
    return static_cast<int64_t>(std::llround(static_cast<double>(total_steps) * 50.0 / 300.0));
}

AdamWOptions TrainConfig::adam() const {
    AdamWOptions o;
    o.learning_rate = learning_rate;
    o.beta1 = adam_beta1;
    o.beta2 = adam_beta2;
    o.weight_decay = weight_decay;
    return o;
}

// --- state -------------------------------------------------------------------------

NamedTensors TrainState::arrays() const {
    NamedTensors out;
    for (const auto& [name, p] : model.named_parameters()) out.emplace_back("model." + name, p);
    auto opt = optimizer.state("opt.");
    out.insert(out.end(), opt.begin(), opt.end());
    if (!model.is_diffusion()) {
        auto dopt = disc_optimizer.state("dopt.");
        out.insert(out.end(), dopt.begin(), dopt.end());
    }
    out.emplace_back("rng.state", rng.get_state());
    out.emplace_back("train.step", torch::tensor({step}, torch::kInt64));
    return out;
}

void TrainState::load_arrays(const NamedTensors& arrays) {
    model.load_parameters(arrays, "model.");
    optimizer.load_state(arrays, "opt.");
    if (!model.is_diffusion()) disc_optimizer.load_state(arrays, "dopt.");
    bool have_rng = false, have_step = false;
    for (const auto& [name, value] : arrays) {
        if (name == "rng.state") {
            rng.set_state(value);
            have_rng = true;
        } else if (name == "train.step") {
            step = value.item<int64_t>();
            have_step = true;
        }
    }
    if (!have_rng || !have_step) throw IoError("checkpoint is missing the RNG state or step counter");
}

TrainState init_train_state(const TokenizerConfig& model_config, const TrainConfig& cfg,
                            const NamedTensors* encoder_init) {
    cfg.validate();
    TrainState state;
    state.model = TokenizerModel::create(model_config, cfg.objective, cfg.seed);
    if (encoder_init) state.model.load_encoder(*encoder_init, "model.");
    state.model.set_encoder_trainable(!cfg.freeze_encoder);

    NamedTensors params;
    if (!cfg.freeze_encoder) params = named_parameters(*state.model.encoder, "encoder.");
    auto append = [&](const torch::nn::Module& m, const std::string& prefix) {
        auto more = named_parameters(m, prefix);
        params.insert(params.end(), more.begin(), more.end());
    };
    if (state.model.is_diffusion()) {
        append(*state.model.decoder, "decoder.");
    } else {
        append(*state.model.pixel_decoder, "pixel_decoder.");
        state.disc_optimizer = AdamW(named_parameters(*state.model.discriminator, "discriminator."), cfg.adam());
    }
    state.optimizer = AdamW(std::move(params), cfg.adam());
    state.rng = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, kTrainRngSalt));
    if (cfg.perceptual_weight > 0.0 || !state.model.is_diffusion()) {
        state.perceptual = make_perceptual_net();
    }
    return state;
}

// --- sampling ------------------------------------------------------------------------

TimeDraw sample_training_times(int64_t batch, double noise_sync_prob, TimeSampling sampling, at::Generator& gen) {
    auto coin = torch::rand({batch}, gen);
    auto tau = torch::rand({batch}, gen);
    torch::Tensor u;
    if (sampling == TimeSampling::stratified) {
        auto strata = torch::randperm(batch, gen, torch::kFloat32);
        u = (strata + torch::rand({batch}, gen)) / static_cast<double>(batch);
    } else {
        u = torch::rand({batch}, gen);
    }
    auto synced = coin < noise_sync_prob;
    auto t = torch::where(synced, tau + (1.0 - tau) * u, u).clamp(0.0, 1.0);
    return {t, tau, synced};
}

Latent noise_sync_augment(const Latent& z, const torch::Tensor& tau, const torch::Tensor& eps,
                          const NoiseSchedule& schedule) {
    return {add_noise(z.values, eps, schedule, tau), z.normalized};
}

std::pair<Latent, torch::Tensor> noise_sync_augment(const Latent& z, at::Generator& gen,
                                                    const NoiseSchedule& schedule) {
    auto tau = torch::rand({z.values.size(0)}, gen);
    auto eps = torch::randn(z.values.sizes(), gen);
    return {noise_sync_augment(z, tau, eps, schedule), tau};
}

// --- steps ---------------------------------------------------------------------------

StepRecord dito_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg) {
    if (!state.model.is_diffusion()) throw ConfigError("dito_train_step needs a diffusion decoder");
    if (cfg.perceptual_weight > 0.0 && !state.perceptual) {
        throw ConfigError("perceptual_weight > 0 but no perceptual feature network is configured");
    }
    const auto schedule = cfg.objective.schedule();
    const auto ptype = cfg.objective.prediction();
    const auto n = batch.size(0);

    auto draw = sample_training_times(n, cfg.noise_sync_prob, cfg.time_sampling, state.rng);
    auto eps = torch::randn(batch.sizes(), state.rng);

    Latent z;
    if (cfg.freeze_encoder) {
        torch::NoGradGuard no_grad;
        z = state.model.encode(batch);
    } else {
        z = state.model.encode(batch);
    }
    auto eps_z = torch::randn(z.values.sizes(), state.rng);
    Latent z_used = z;
    if (cfg.noise_sync_prob > 0.0) {
        auto z_tau = noise_sync_augment(z, draw.tau, eps_z, schedule);
        z_used.values = torch::where(per_sample_mask(draw.synced, z.values), z_tau.values, z.values);
    }

    auto x_t = add_noise(batch, eps, schedule, draw.t);
    auto target = regression_target(ptype, batch, eps, schedule, draw.t);
    auto pred = state.model.decoder->forward(x_t, draw.t, z_used);

    StepRecord record;
    record.code_path = "diffusion";
    auto diffusion = l2_loss(pred, target);
    auto total = diffusion;
    record.loss_terms.push_back("diffusion");
    record.components["diffusion"] = diffusion.item<double>();
    if (cfg.perceptual_weight > 0.0) {
        auto x_bar = to_sample_prediction(pred, x_t, schedule, draw.t, ptype);
        auto perceptual = state.perceptual->perceptual_distance(x_bar, batch);
        total = total + cfg.perceptual_weight * perceptual;
        record.loss_terms.push_back("perceptual");
        record.components["perceptual"] = perceptual.item<double>();
        record.code_path += "+perceptual";
    }
    const double total_value = total.item<double>();
    if (!std::isfinite(total_value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << total_value << " at step " << state.step + 1 << ", t = " << describe(draw.t);
        throw TrainingError(msg.str());
    }

    state.optimizer.zero_grad();
    total.backward();
    const double norm = grad_norm(state.optimizer.param_tensors());
    if (!std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "non-finite gradient at step " << state.step + 1 << ": encoder |g| = "
            << module_grad_norm(*state.model.encoder) << ", decoder |g| = " << module_grad_norm(*state.model.decoder)
            << ", t = " << describe(draw.t);
        throw TrainingError(msg.str());
    }
    record.grad_norm = step_optimizer(state.optimizer, cfg.grad_clip);
    ++state.step;

    record.step = state.step;
    record.t = draw.t;
    record.tau = draw.tau;
    record.synced = draw.synced;
    return record;
}

StepRecord dito_lpips_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg) {
    if (!(cfg.perceptual_weight > 0.0)) {
        throw ConfigError("the perceptual variant needs perceptual_weight > 0");
    }
    return dito_train_step(state, batch, cfg);
}

double adaptive_gan_weight(const torch::Tensor& rec_loss, const torch::Tensor& gan_loss,
                           const torch::Tensor& last_layer, bool* clamped) {
    auto g_rec = torch::autograd::grad({rec_loss}, {last_layer}, {}, /*retain_graph=*/true)[0];
    auto g_gan = torch::autograd::grad({gan_loss}, {last_layer}, {}, /*retain_graph=*/true)[0];
    double w = g_rec.norm().item<double>() / (g_gan.norm().item<double>() + 1e-4);
    bool was_clamped = false;
    if (std::isnan(w)) {
        w = 0.0;
        was_clamped = true;
    } else if (w < 0.0 || w > 1e4) {
        w = std::clamp(w, 0.0, 1e4);
        was_clamped = true;
    }
    if (was_clamped) std::cerr << "warning: adaptive GAN weight clamped to " << w << "\n";
    if (clamped) *clamped = was_clamped;
    return w;
}

StepRecord glpto_train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg) {
    auto& model = state.model;
    if (!model.discriminator || !model.pixel_decoder) throw ConfigError("glpto_train_step needs a discriminator");
    if (!state.perceptual) throw ConfigError("glpto_train_step needs a perceptual feature network");

    StepRecord record;
    record.code_path = "glpto";
    Latent z;
    if (cfg.freeze_encoder) {
        torch::NoGradGuard no_grad;
        z = model.encode(batch);
    } else {
        z = model.encode(batch);
    }
    auto x_hat = model.pixel_decoder->forward(z.values);
    auto l1 = (x_hat - batch).abs().mean();
    auto perceptual = state.perceptual->perceptual_distance(x_hat, batch);
    auto rec = cfg.l1_weight * l1 + cfg.lpips_weight * perceptual;
    auto total = rec;
    record.loss_terms = {"l1", "perceptual"};
    record.components["l1"] = l1.item<double>();
    record.components["perceptual"] = perceptual.item<double>();
    record.components["gan_g"] = 0.0;
    record.components["gan_d"] = 0.0;

    record.gan_active = state.step >= cfg.resolved_gan_warmup();
    if (record.gan_active) {
        auto gan_g = -model.discriminator->forward(x_hat).mean();
        const double weight =
            adaptive_gan_weight(rec, gan_g, model.pixel_decoder->last_layer()->weight, &record.adaptive_weight_clamped);
        total = total + cfg.gan_weight * weight * gan_g;
        record.loss_terms.push_back("gan_g");
        record.components["gan_g"] = gan_g.item<double>();
        record.components["adaptive_weight"] = weight;
    }
    if (!std::isfinite(total.item<double>())) {
        throw TrainingError("non-finite generator loss at step " + std::to_string(state.step + 1));
    }
    state.optimizer.zero_grad();
    total.backward();
    record.grad_norm = step_optimizer(state.optimizer, cfg.grad_clip);

    if (record.gan_active) {
        state.disc_optimizer.zero_grad();
        auto real = model.discriminator->forward(batch);
        auto fake = model.discriminator->forward(x_hat.detach());
        auto d_loss = 0.5 * (torch::relu(1.0 - real).mean() + torch::relu(1.0 + fake).mean());
        d_loss.backward();
        step_optimizer(state.disc_optimizer, cfg.grad_clip);
        record.components["gan_d"] = d_loss.item<double>();
    }
    ++state.step;
    record.step = state.step;
    return record;
}

StepRecord train_step(TrainState& state, const torch::Tensor& batch, const TrainConfig& cfg) {
    return state.model.is_diffusion() ? dito_train_step(state, batch, cfg) : glpto_train_step(state, batch, cfg);
}

// --- data order ----------------------------------------------------------------------

std::vector<int64_t> batch_indices(int64_t dataset_size, int batch_size, int64_t step, uint64_t seed, bool repeat) {
    if (dataset_size <= 0) throw ConfigError("dataset is empty");
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(batch_size));
    int64_t cached_epoch = -1;
    std::vector<int64_t> perm;
    for (int64_t i = 0; i < batch_size; ++i) {
        const int64_t pos = step * batch_size + i;
        const int64_t epoch = pos / dataset_size;
        if (epoch > 0 && !repeat) {
            throw ConfigError("dataset exhausted after one epoch and repeat is disabled");
        }
        if (epoch != cached_epoch) {
            perm = epoch_permutation(dataset_size, mix_seed(seed, kDataSalt), epoch);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<size_t>(pos % dataset_size)]);
    }
    return out;
}

torch::Tensor assemble_batch(const Dataset& data, int batch_size, int64_t step, uint64_t seed, bool repeat,
                             bool augment_images) {
    const auto indices = batch_indices(static_cast<int64_t>(data.size()), batch_size, step, seed, repeat);
    std::vector<torch::Tensor> items;
    items.reserve(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        const auto& image = data.images[static_cast<size_t>(indices[i])];
        if (augment_images) {
            const auto pos = static_cast<uint64_t>(step * batch_size + static_cast<int64_t>(i));
            std::mt19937_64 rng(mix_seed(mix_seed(seed, kDataSalt + 1), pos));
            items.push_back(augment(image, rng, data.resolution));
        } else {
            items.push_back(center_crop(image, data.resolution));
        }
    }
    return torch::stack(items);
}

// --- fit -------------------------------------------------------------------------------

Checkpoint make_checkpoint(const TrainState& state, const nlohmann::json& config_snapshot) {
    Checkpoint ckpt;
    ckpt.kind = "tokenizer";
    ckpt.step = state.step;
    ckpt.config = config_snapshot;
    ckpt.arrays = state.arrays();
    return ckpt;
}

void truncate_log(const fs::path& log_path, int64_t last_step) {
    if (!fs::exists(log_path)) return;
    std::ifstream in(log_path);
    std::vector<std::string> kept;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (nlohmann::json::parse(line).at("step").get<int64_t>() <= last_step) kept.push_back(line);
    }
    in.close();
    std::ofstream out(log_path, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
}

void fit(TrainState& state, const TrainConfig& cfg, const Dataset& data, const FitOptions& options) {
    cfg.validate();
    if (data.empty()) throw ConfigError("cannot train on an empty dataset");
    const bool write_files = !options.output_dir.empty();
    std::ofstream log;
    if (write_files) {
        fs::create_directories(options.output_dir);
        log.open(options.output_dir / "train_log.jsonl", std::ios::app);
        if (!log) throw IoError("cannot open training log in " + options.output_dir.string());
    }
    const auto start = std::chrono::steady_clock::now();
    int64_t last_saved = -1;
    auto save = [&] {
        if (!write_files) return;
        save_checkpoint(checkpoint_path(options.output_dir, state.step), make_checkpoint(state, options.config_snapshot));
        last_saved = state.step;
    };

    while (state.step < cfg.total_steps) {
        auto batch = assemble_batch(data, cfg.batch_size, state.step, cfg.seed, cfg.repeat, cfg.augment);
        auto record = train_step(state, batch, cfg);
        if (write_files) {
            const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            nlohmann::json line{{"step", record.step}, {"loss", record.components}, {"wall_time", wall}};
            log << line.dump() << '\n';
            log.flush();
        }
        if (options.on_step) options.on_step(record);
        if (options.checkpoint_every > 0 && state.step % options.checkpoint_every == 0) save();
    }
    if (last_saved != state.step) save();
}

}  // namespace dito
