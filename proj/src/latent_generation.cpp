#include "dito/latent_generation.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "dito/errors.hpp"

namespace dito {
namespace fs = std::filesystem;

namespace {
constexpr uint64_t kGenRngSalt = 0x67656e;
constexpr uint64_t kGenInitSalt = 0x696e6974;
}  // namespace

void GenConfig::validate() const {
    if (num_classes <= 0) throw ConfigError("num_classes must be positive");
    if (!(cfg_dropout_prob >= 0.0 && cfg_dropout_prob <= 1.0)) throw ConfigError("cfg_dropout_prob must lie in [0, 1]");
    if (!(guidance_scale >= 0.0)) throw ConfigError("guidance_scale must be nonnegative");
    if (steps < 1) throw ConfigError("latent sampling steps must be at least 1");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (total_steps < 0) throw ConfigError("total_steps must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (widths.empty()) throw ConfigError("generator widths must not be empty");
}

LatentGeneratorOptions GenConfig::generator_options(int latent_channels) const {
    LatentGeneratorOptions o;
    o.latent_channels = latent_channels;
    o.widths = widths;
    o.blocks_per_stage = blocks_per_stage;
    o.t_emb_dim = t_emb_dim;
    o.num_classes = num_classes;
    return o;
}

NamedTensors GenState::arrays() const {
    NamedTensors out = named_parameters(*net, "model.");
    auto opt = optimizer.state("opt.");
    out.insert(out.end(), opt.begin(), opt.end());
    out.emplace_back("rng.state", rng.get_state());
    out.emplace_back("train.step", torch::tensor({step}, torch::kInt64));
    return out;
}

void GenState::load_arrays(const NamedTensors& arrays) {
    torch::NoGradGuard no_grad;
    auto params = named_parameters(*net, "model.");
    for (auto& [name, p] : params) {
        bool found = false;
        for (const auto& [key, value] : arrays) {
            if (key == name) {
                if (value.sizes() != p.sizes()) throw ShapeError("array " + name + " has the wrong shape");
                p.copy_(value);
                found = true;
                break;
            }
        }
        if (!found) throw IoError("checkpoint has no array for parameter " + name);
    }
    optimizer.load_state(arrays, "opt.");
    for (const auto& [key, value] : arrays) {
        if (key == "rng.state") rng.set_state(value);
        if (key == "train.step") step = value.item<int64_t>();
    }
}

GenState init_gen_state(const GenConfig& cfg, int latent_channels) {
    cfg.validate();
    GenState state;
    state.net = LatentGenerator(cfg.generator_options(latent_channels));
    initialize_parameters(*state.net, mix_seed(cfg.seed, kGenInitSalt));
    AdamWOptions o;
    o.learning_rate = cfg.learning_rate;
    o.weight_decay = cfg.weight_decay;
    o.beta1 = cfg.adam_beta1;
    o.beta2 = cfg.adam_beta2;
    state.optimizer = AdamW(named_parameters(*state.net, ""), o);
    state.rng = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, kGenRngSalt));
    return state;
}

GenStepRecord latent_train_step(GenState& state, const torch::Tensor& latents, const torch::Tensor& labels,
                                const GenConfig& cfg) {
    if (labels.dim() != 1 || labels.size(0) != latents.size(0)) throw ShapeError("need one label per latent");
    if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= cfg.num_classes)) {
        throw DomainError("labels must lie in [0, " + std::to_string(cfg.num_classes) + ")");
    }
    const auto objective = cfg.objective();
    const auto schedule = objective.schedule();
    const auto n = latents.size(0);

    auto drop = torch::rand({n}, state.rng) < cfg.cfg_dropout_prob;
    auto draw = sample_training_times(n, 0.0, cfg.time_sampling, state.rng);
    auto eps = torch::randn(latents.sizes(), state.rng);
    auto labels_used = torch::where(drop, torch::full_like(labels, kNullClass), labels);

    auto z_t = add_noise(latents, eps, schedule, draw.t);
    auto target = regression_target(objective.prediction(), latents, eps, schedule, draw.t);
    auto loss = l2_loss(state.net->forward(z_t, draw.t, labels_used), target);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
        throw TrainingError("non-finite latent generator loss at step " + std::to_string(state.step + 1));
    }
    state.optimizer.zero_grad();
    loss.backward();
    const auto params = state.optimizer.param_tensors();
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    state.optimizer.step();
    ++state.step;

    GenStepRecord record;
    record.step = state.step;
    record.loss = value;
    record.null_tokens = (labels_used == kNullClass).sum().item<int64_t>();
    record.labels_used = labels_used;
    return record;
}

torch::Tensor cfg_combine(const torch::Tensor& v_uncond, const torch::Tensor& v_cond, double scale) {
    require_same_shape(v_uncond, v_cond, "cfg_combine");
    return v_uncond + scale * (v_cond - v_uncond);
}

torch::Tensor sample_latents(LatentGeneratorImpl& net, int64_t class_id, int64_t n, const std::vector<int64_t>& shape,
                             const GenConfig& cfg, uint64_t seed, int64_t first_id) {
    torch::NoGradGuard no_grad;
    if (n == 0) {
        std::vector<int64_t> empty_shape{0};
        empty_shape.insert(empty_shape.end(), shape.begin(), shape.end());
        return torch::empty(empty_shape);
    }
    std::vector<torch::Tensor> items;
    for (int64_t i = 0; i < n; ++i) items.push_back(initial_noise(shape, seed, first_id + i));
    auto x = torch::stack(items);
    const double scale = cfg.guidance_scale;
    auto field = [&](const torch::Tensor& z_t, const torch::Tensor& t) -> torch::Tensor {
        auto cond = torch::full({n}, class_id, torch::kInt64);
        auto null = torch::full({n}, kNullClass, torch::kInt64);
        if (scale == 0.0) return net.forward(z_t, t, null);
        if (scale == 1.0) return net.forward(z_t, t, cond);
        auto both = net.forward(torch::cat({z_t, z_t}), torch::cat({t, t}), torch::cat({cond, null}));
        return cfg_combine(both.narrow(0, n, n), both.narrow(0, 0, n), scale);
    };
    return euler_integrate(field, x, cfg.steps);
}

torch::Tensor generate(LatentGeneratorImpl& net, const TokenizerModel& tokenizer, int64_t class_id, int64_t n,
                       int resolution, const GenConfig& cfg, const SolverConfig& decode, uint64_t seed) {
    const int c = tokenizer.config.encoder.latent_channels;
    const int f = tokenizer.config.encoder.downsample_factor;
    if (net.options().latent_channels != c) {
        throw ConfigError("generator produces " + std::to_string(net.options().latent_channels) +
                          "-channel latents but the tokenizer expects " + std::to_string(c));
    }
    if (resolution % f != 0) throw ConfigError("resolution is not divisible by the tokenizer downsample factor");
    if (n == 0) return torch::empty({0, 3, resolution, resolution});
    auto z = sample_latents(net, class_id, n, {c, resolution / f, resolution / f}, cfg, seed);
    torch::NoGradGuard no_grad;
    Latent latent{z, true};
    if (!tokenizer.is_diffusion()) return tokenizer.pixel_decoder.ptr()->forward(z);
    SolverConfig dec = decode;
    dec.seed = mix_seed(seed, 0x646563);
    return euler_decode(*tokenizer.decoder.ptr(), tokenizer.objective, latent, dec);
}

torch::Tensor encode_dataset(const TokenizerModel& tokenizer, const Dataset& data, int batch_size) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch_size)) {
        std::vector<int64_t> idx;
        for (size_t i = start; i < std::min(data.size(), start + static_cast<size_t>(batch_size)); ++i) {
            idx.push_back(static_cast<int64_t>(i));
        }
        out.push_back(tokenizer.encode(stack_images(data, idx)).values);
    }
    return torch::cat(out);
}

Checkpoint make_gen_checkpoint(const GenState& state, const nlohmann::json& config_snapshot) {
    Checkpoint ckpt;
    ckpt.kind = "latent_generator";
    ckpt.step = state.step;
    ckpt.config = config_snapshot;
    ckpt.arrays = state.arrays();
    return ckpt;
}

void fit_latent(GenState& state, const GenConfig& cfg, const torch::Tensor& latents, const torch::Tensor& labels,
                const LatentFitOptions& options) {
    cfg.validate();
    if (latents.size(0) == 0) throw ConfigError("cannot train on an empty latent set");
    const bool write_files = !options.output_dir.empty();
    std::ofstream log;
    if (write_files) {
        fs::create_directories(options.output_dir);
        log.open(options.output_dir / "train_log.jsonl", std::ios::app);
    }
    const auto start = std::chrono::steady_clock::now();
    int64_t last_saved = -1;
    auto save = [&] {
        if (!write_files) return;
        save_checkpoint(checkpoint_path(options.output_dir, state.step),
                        make_gen_checkpoint(state, options.config_snapshot));
        last_saved = state.step;
    };
    while (state.step < cfg.total_steps) {
        auto idx = batch_indices(latents.size(0), cfg.batch_size, state.step, cfg.seed, true);
        auto index = torch::tensor(idx, torch::kInt64);
        auto record = latent_train_step(state, latents.index_select(0, index), labels.index_select(0, index), cfg);
        if (write_files) {
            const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            nlohmann::json line{{"step", record.step}, {"loss", {{"flow_matching", record.loss}}}, {"wall_time", wall}};
            log << line.dump() << '\n';
            log.flush();
        }
        if (options.on_step) options.on_step(record);
        if (options.checkpoint_every > 0 && state.step % options.checkpoint_every == 0) save();
    }
    if (last_saved != state.step) save();
}

}  // namespace dito
