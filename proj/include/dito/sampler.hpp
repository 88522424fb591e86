#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "dito/data.hpp"
#include "dito/diffusion_core.hpp"
#include "dito/networks.hpp"
#include "dito/tokenizer.hpp"

namespace dito {

struct SolverConfig {
    int steps = 50;
    uint64_t seed = 0;

    void validate() const;
};

/// Standard-normal (3, H, W)-style noise for item `index`, from (seed, index) alone.
torch::Tensor initial_noise(const std::vector<int64_t>& item_shape, uint64_t seed, int64_t index);

/// Velocity field v(x, t) with t a per-sample (N) tensor.
using VelocityField = std::function<torch::Tensor(const torch::Tensor& x, const torch::Tensor& t)>;

/// x <- x - (t_k - t_{k+1}) v(x, t_k) on the grid t_k = 1 - k/steps, starting at t = 1.
torch::Tensor euler_integrate(const VelocityField& field, torch::Tensor x, int steps);

/// Decodes latents to images starting from initial_noise(seed, ids[i]) for item i
/// (ids defaults to 0..N-1), so an item's noise does not depend on its batch.
/// Flow-matching decoders use plain Euler. Other objectives step through the
/// sample-prediction conversion (x_bar, eps_bar) -> alpha_next x_bar + sigma_next eps_bar,
/// which reduces to the same Euler update for flow matching; eps-prediction
/// starts at t = 1 - kInteriorEps and clips x_bar to the pixel range. The result is not clamped.
torch::Tensor euler_decode(DiffusionDecoderImpl& decoder, const Objective& objective, const Latent& z,
                           const SolverConfig& cfg, const std::vector<int64_t>& ids = {});

/// Encode then decode, in chunks of `batch_size`. Glpto models decode deterministically.
torch::Tensor reconstruct(const TokenizerModel& model, const torch::Tensor& images, const SolverConfig& cfg,
                          const std::vector<int64_t>& ids = {}, int batch_size = 32);

struct SweepRow {
    int steps = 0;
    double rfid = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

/// Reconstruction metrics per step count with the same seed for every row.
std::vector<SweepRow> steps_sweep(const TokenizerModel& model, const torch::Tensor& images,
                                  const std::vector<int>& steps_list, uint64_t seed,
                                  const std::vector<int64_t>& ids = {});

}  // namespace dito
