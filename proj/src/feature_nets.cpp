#include "dito/feature_nets.hpp"

#include <cmath>

#include "dito/diffusion_core.hpp"

namespace dito {

FeatureNetImpl::FeatureNetImpl(uint64_t seed, std::vector<int> widths) : widths_(std::move(widths)) {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    int in = 3;
    for (size_t i = 0; i < widths_.size(); ++i) {
        auto options = torch::nn::Conv2dOptions(in, widths_[i], 3).padding(1).stride(i == 0 ? 1 : 2);
        auto conv = register_module("conv_" + std::to_string(i), torch::nn::Conv2d(options));
        const double fan_in = static_cast<double>(in) * 9.0;
        conv->weight.copy_(torch::randn(conv->weight.sizes(), gen) * std::sqrt(2.0 / fan_in));
        conv->bias.copy_(torch::randn(conv->bias.sizes(), gen) * 0.1);
        conv->weight.set_requires_grad(false);
        conv->bias.set_requires_grad(false);
        convs_.push_back(conv);
        in = widths_[i];
    }
    eval();
}

std::vector<torch::Tensor> FeatureNetImpl::features(const torch::Tensor& x) {
    std::vector<torch::Tensor> out;
    auto h = x;
    for (auto& conv : convs_) {
        h = torch::relu(conv->forward(h));
        out.push_back(h);
    }
    return out;
}

torch::Tensor FeatureNetImpl::embed(const torch::Tensor& x) { return features(x).back().mean({2, 3}); }

torch::Tensor FeatureNetImpl::perceptual_distance(const torch::Tensor& a, const torch::Tensor& b) {
    require_same_shape(a, b, "perceptual_distance");
    const auto fa = features(a);
    const auto fb = features(b);
    auto total = torch::zeros({}, a.options());
    for (size_t i = 0; i < fa.size(); ++i) {
        auto na = fa[i] / (fa[i].pow(2).sum(1, true) + 1e-10).sqrt();
        auto nb = fb[i] / (fb[i].pow(2).sum(1, true) + 1e-10).sqrt();
        total = total + (na - nb).pow(2).sum(1).mean();
    }
    return total / static_cast<double>(fa.size());
}

FeatureNet make_perceptual_net() { return FeatureNet(kPerceptualNetSeed); }

FeatureNet make_fid_net() { return FeatureNet(kFidNetSeed); }

}  // namespace dito
