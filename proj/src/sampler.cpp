#include "dito/sampler.hpp"

#include "dito/errors.hpp"
#include "dito/evaluation.hpp"
#include "dito/feature_nets.hpp"

namespace dito {

void SolverConfig::validate() const {
    if (steps < 1) throw ConfigError("solver steps must be at least 1, got " + std::to_string(steps));
}

torch::Tensor initial_noise(const std::vector<int64_t>& item_shape, uint64_t seed, int64_t index) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(seed, static_cast<uint64_t>(index)));
    return torch::randn(item_shape, gen);
}

torch::Tensor euler_integrate(const VelocityField& field, torch::Tensor x, int steps) {
    if (steps < 1) throw ConfigError("solver steps must be at least 1");
    const auto n = x.size(0);
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) / steps;
        const double t_next = 1.0 - static_cast<double>(k + 1) / steps;
        x = x - (t - t_next) * field(x, torch::full({n}, t, torch::kFloat32));
    }
    return x;
}

namespace {

torch::Tensor noise_batch(const std::vector<int64_t>& item_shape, int64_t n, uint64_t seed,
                          const std::vector<int64_t>& ids) {
    if (!ids.empty() && static_cast<int64_t>(ids.size()) != n) {
        throw ShapeError("need one noise id per latent");
    }
    std::vector<torch::Tensor> items;
    items.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) items.push_back(initial_noise(item_shape, seed, ids.empty() ? i : ids[i]));
    return torch::stack(items);
}

torch::Tensor conversion_decode(DiffusionDecoderImpl& decoder, const Objective& objective, const Latent& z,
                                torch::Tensor x, int steps) {
    const auto schedule = objective.schedule();
    const auto ptype = objective.prediction();
    const bool clip = ptype == PredictionType::eps_prediction;
    const double t_max = clip ? 1.0 - kInteriorEps : 1.0;
    for (int k = 0; k < steps; ++k) {
        const double t = t_max * (1.0 - static_cast<double>(k) / steps);
        const double t_next = t_max * (1.0 - static_cast<double>(k + 1) / steps);
        auto pred = decoder.forward(x, t, z);
        auto [x_bar, eps_bar] = to_sample_and_noise(pred, x, schedule, t, ptype);
        if (clip) x_bar = x_bar.clamp(kPixelMin, kPixelMax);
        if (k + 1 == steps) {
            x = x_bar;
        } else {
            const auto next = alpha_sigma(schedule, t_next);
            x = next.alpha * x_bar + next.sigma * eps_bar;
        }
    }
    return x;
}

}  // namespace

torch::Tensor euler_decode(DiffusionDecoderImpl& decoder, const Objective& objective, const Latent& z,
                           const SolverConfig& cfg, const std::vector<int64_t>& ids) {
    cfg.validate();
    torch::NoGradGuard no_grad;
    const int f = decoder.downsample_factor();
    const auto& zv = z.values;
    auto x = noise_batch({3, zv.size(2) * f, zv.size(3) * f}, zv.size(0), cfg.seed, ids);
    if (objective.kind == ObjectiveKind::flow_matching_v) {
        return euler_integrate([&](const torch::Tensor& x_t, const torch::Tensor& t) { return decoder.forward(x_t, t, z); },
                               x, cfg.steps);
    }
    return conversion_decode(decoder, objective, z, x, cfg.steps);
}

torch::Tensor reconstruct(const TokenizerModel& model, const torch::Tensor& images, const SolverConfig& cfg,
                          const std::vector<int64_t>& ids, int batch_size) {
    cfg.validate();
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> outputs;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        const auto len = std::min<int64_t>(batch_size, images.size(0) - start);
        auto chunk = images.narrow(0, start, len);
        auto z = model.encode(chunk);
        if (model.is_diffusion()) {
            std::vector<int64_t> chunk_ids(static_cast<size_t>(len));
            for (int64_t i = 0; i < len; ++i) {
                chunk_ids[static_cast<size_t>(i)] = ids.empty() ? start + i : ids[static_cast<size_t>(start + i)];
            }
            outputs.push_back(euler_decode(*model.decoder.ptr(), model.objective, z, cfg, chunk_ids));
        } else {
            outputs.push_back(model.pixel_decoder.ptr()->forward(z.values));
        }
    }
    if (outputs.empty()) return images.clone();
    return torch::cat(outputs);
}

std::vector<SweepRow> steps_sweep(const TokenizerModel& model, const torch::Tensor& images,
                                  const std::vector<int>& steps_list, uint64_t seed,
                                  const std::vector<int64_t>& ids) {
    if (steps_list.empty()) throw ConfigError("steps_list must not be empty");
    for (size_t i = 1; i < steps_list.size(); ++i) {
        if (steps_list[i] <= steps_list[i - 1]) throw ConfigError("steps_list must be strictly ascending");
    }
    auto fid_net = make_fid_net();
    const auto reference = feature_stats(*fid_net, images);
    std::vector<SweepRow> rows;
    for (int steps : steps_list) {
        SolverConfig cfg{steps, seed};
        auto recon = reconstruct(model, images, cfg, ids);
        SweepRow row;
        row.steps = steps;
        row.rfid = frechet_distance(reference, feature_stats(*fid_net, recon));
        row.psnr = mean_psnr(images, recon);
        row.ssim = ssim(images, recon);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace dito
