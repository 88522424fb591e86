#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace dito {

/// Seeds of the two frozen feature networks. Changing either invalidates every
/// perceptual loss and desk-FID value computed so far.
inline constexpr uint64_t kPerceptualNetSeed = 20250101;
inline constexpr uint64_t kFidNetSeed = 20250202;

/// Frozen, randomly initialised conv net (3x3 convs with ReLU, stride 2 after the
/// first layer). Parameters never receive gradients; inputs do.
class FeatureNetImpl : public torch::nn::Module {
public:
    explicit FeatureNetImpl(uint64_t seed, std::vector<int> widths = {16, 32, 64});

    std::vector<torch::Tensor> features(const torch::Tensor& x);

    /// Global-average-pooled last layer, (N, widths.back()).
    torch::Tensor embed(const torch::Tensor& x);

    /// LPIPS-style distance: channel-normalised activations, squared difference
    /// averaged over positions and layers; mean over the batch.
    torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b);

    int embedding_dim() const { return widths_.back(); }

private:
    std::vector<int> widths_;
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(FeatureNet);

FeatureNet make_perceptual_net();
/// d = 64 desk-FID feature extractor.
FeatureNet make_fid_net();

}  // namespace dito
