#include "dito/optim.hpp"

#include <cmath>
#include <map>

#include "dito/errors.hpp"

namespace dito {

AdamW::AdamW(NamedTensors params, AdamWOptions options) : params_(std::move(params)), options_(options) {
    if (!(options_.learning_rate > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
    for (const auto& [name, p] : params_) {
        exp_avg_.push_back(torch::zeros_like(p));
        exp_avg_sq_.push_back(torch::zeros_like(p));
    }
}

std::vector<torch::Tensor> AdamW::param_tensors() const {
    std::vector<torch::Tensor> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(p);
    return out;
}

void AdamW::zero_grad() {
    for (auto& [name, p] : params_) {
        if (p.grad().defined()) {
            p.mutable_grad().zero_();
        }
    }
}

void AdamW::step() {
    torch::NoGradGuard no_grad;
    ++step_count_;
    const double lr = options_.learning_rate;
    const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
    const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        const auto& g = p.grad();
        if (!g.defined()) continue;
        if (options_.weight_decay != 0.0) {
            p.mul_(1.0 - lr * options_.weight_decay);
        }
        exp_avg_[i].mul_(options_.beta1).add_(g, 1.0 - options_.beta1);
        exp_avg_sq_[i].mul_(options_.beta2).addcmul_(g, g, 1.0 - options_.beta2);
        auto denom = (exp_avg_sq_[i] / bias2).sqrt_().add_(options_.eps);
        p.addcdiv_(exp_avg_[i], denom, -lr / bias1);
    }
}

NamedTensors AdamW::state(const std::string& prefix) const {
    NamedTensors out;
    for (size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back(prefix + params_[i].first + ".m", exp_avg_[i]);
        out.emplace_back(prefix + params_[i].first + ".v", exp_avg_sq_[i]);
    }
    out.emplace_back(prefix + "step", torch::tensor({step_count_}, torch::kInt64));
    return out;
}

void AdamW::load_state(const NamedTensors& arrays, const std::string& prefix) {
    std::map<std::string, torch::Tensor> lookup(arrays.begin(), arrays.end());
    auto fetch = [&](const std::string& key, const torch::Tensor& like) {
        auto it = lookup.find(key);
        if (it == lookup.end()) {
            throw IoError("checkpoint is missing optimizer array " + key);
        }
        if (it->second.sizes() != like.sizes()) {
            throw ShapeError("optimizer array " + key + " has the wrong shape");
        }
        return it->second;
    };
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < params_.size(); ++i) {
        exp_avg_[i].copy_(fetch(prefix + params_[i].first + ".m", exp_avg_[i]));
        exp_avg_sq_[i].copy_(fetch(prefix + params_[i].first + ".v", exp_avg_sq_[i]));
    }
    auto it = lookup.find(prefix + "step");
    if (it == lookup.end()) {
        throw IoError("checkpoint is missing optimizer array " + prefix + "step");
    }
    step_count_ = it->second.item<int64_t>();
}

double grad_norm(const std::vector<torch::Tensor>& params) {
    double total = 0.0;
    for (const auto& p : params) {
        if (p.grad().defined()) {
            total += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
        }
    }
    return std::sqrt(total);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (std::isfinite(norm) && norm > max_norm) {
        torch::NoGradGuard no_grad;
        const double scale = max_norm / (norm + 1e-6);
        for (const auto& p : params) {
            if (p.grad().defined()) p.grad().mul_(scale);
        }
    }
    return norm;
}

NamedTensors named_parameters(const torch::nn::Module& module, const std::string& prefix) {
    NamedTensors out;
    for (const auto& item : module.named_parameters()) {
        out.emplace_back(prefix + item.key(), item.value());
    }
    return out;
}

}  // namespace dito
