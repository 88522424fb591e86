#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace dito {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

struct AdamWOptions {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moments are plain named tensors so they
/// can be written to and restored from a checkpoint bit-exactly.
class AdamW {
public:
    AdamW() = default;
    AdamW(NamedTensors params, AdamWOptions options);

    void zero_grad();
    void step();

    int64_t step_count() const { return step_count_; }
    const AdamWOptions& options() const { return options_; }
    const NamedTensors& params() const { return params_; }
    std::vector<torch::Tensor> param_tensors() const;

    /// "<prefix><name>.m", "<prefix><name>.v" for every parameter, plus "<prefix>step".
    NamedTensors state(const std::string& prefix) const;
    void load_state(const NamedTensors& arrays, const std::string& prefix);

private:
    NamedTensors params_;
    std::vector<torch::Tensor> exp_avg_;
    std::vector<torch::Tensor> exp_avg_sq_;
    AdamWOptions options_;
    int64_t step_count_ = 0;
};

/// Scales gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);

/// Global L2 norm of the gradients that are defined.
double grad_norm(const std::vector<torch::Tensor>& params);

/// Named parameters (and buffers) of a module with an optional prefix.
NamedTensors named_parameters(const torch::nn::Module& module, const std::string& prefix);

}  // namespace dito
