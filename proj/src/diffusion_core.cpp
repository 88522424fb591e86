#include "dito/diffusion_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "dito/errors.hpp"

namespace dito {
namespace {

void require_unit_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        std::ostringstream msg;
        msg << "time " << t << " outside [0, 1]";
        throw DomainError(msg.str());
    }
}

void require_unit_time(const torch::Tensor& t) {
    if (t.numel() == 0) {
        return;
    }
    const auto lo = t.min().item<double>();
    const auto hi = t.max().item<double>();
    if (!(lo >= 0.0 && hi <= 1.0)) {
        std::ostringstream msg;
        msg << "times span [" << lo << ", " << hi << "], outside [0, 1]";
        throw DomainError(msg.str());
    }
}

// Reshape a per-sample (N) coefficient so it broadcasts against (N, ...).
torch::Tensor per_sample(const torch::Tensor& coeff, const torch::Tensor& like) {
    if (coeff.dim() != 1 || like.dim() == 0 || coeff.size(0) != like.size(0)) {
        std::ostringstream msg;
        msg << "per-sample coefficient of shape " << coeff.sizes() << " does not match batch " << like.sizes();
        throw ShapeError(msg.str());
    }
    std::vector<int64_t> shape(static_cast<size_t>(like.dim()), 1);
    shape[0] = coeff.size(0);
    return coeff.to(like.dtype()).view(shape);
}

}  // namespace

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what) {
    if (a.sizes() != b.sizes()) {
        std::ostringstream msg;
        msg << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw ShapeError(msg.str());
    }
}

NoiseSchedule Objective::schedule() const {
    return kind == ObjectiveKind::flow_matching_v ? NoiseSchedule::flow_matching(sigma_min) : NoiseSchedule::cosine();
}

PredictionType Objective::prediction() const {
    return kind == ObjectiveKind::cosine_eps ? PredictionType::eps_prediction : PredictionType::v_prediction;
}

std::string_view to_string(ObjectiveKind kind) {
    switch (kind) {
        case ObjectiveKind::flow_matching_v: return "flow_matching_v";
        case ObjectiveKind::cosine_v: return "cosine_v";
        case ObjectiveKind::cosine_eps: return "cosine_eps";
    }
    return "unknown";
}

ObjectiveKind parse_objective(std::string_view name) {
    for (auto kind : {ObjectiveKind::flow_matching_v, ObjectiveKind::cosine_v, ObjectiveKind::cosine_eps}) {
        if (name == to_string(kind)) {
            return kind;
        }
    }
    throw ConfigError("unknown objective '" + std::string(name) +
                      "' (expected flow_matching_v, cosine_v or cosine_eps)");
}

AlphaSigma alpha_sigma(const NoiseSchedule& schedule, double t) {
    require_unit_time(t);
    switch (schedule.kind) {
        case ScheduleKind::flow_matching:
            // Endpoints are pinned so (1, sigma_min) and (0, 1) come out exact.
            if (t == 0.0) return {1.0, schedule.sigma_min};
            if (t == 1.0) return {0.0, 1.0};
            return {1.0 - t, schedule.sigma_min + t * (1.0 - schedule.sigma_min)};
        case ScheduleKind::cosine:
            if (t == 0.0) return {1.0, 0.0};
            if (t == 1.0) return {0.0, 1.0};
            return {std::cos(std::numbers::pi * t / 2.0), std::sin(std::numbers::pi * t / 2.0)};
    }
    throw ConfigError("unknown schedule kind");
}

std::pair<torch::Tensor, torch::Tensor> alpha_sigma(const NoiseSchedule& schedule, const torch::Tensor& t) {
    require_unit_time(t);
    switch (schedule.kind) {
        case ScheduleKind::flow_matching: {
            auto alpha = 1.0 - t;
            auto sigma = schedule.sigma_min + t * (1.0 - schedule.sigma_min);
            sigma = torch::where(t == 0.0, torch::full_like(sigma, schedule.sigma_min), sigma);
            sigma = torch::where(t == 1.0, torch::ones_like(sigma), sigma);
            return {alpha, sigma};
        }
        case ScheduleKind::cosine: {
            auto angle = t * (std::numbers::pi / 2.0);
            auto alpha = torch::where(t == 1.0, torch::zeros_like(t), torch::cos(angle));
            auto sigma = torch::where(t == 0.0, torch::zeros_like(t), torch::sin(angle));
            return {alpha, sigma};
        }
    }
    throw ConfigError("unknown schedule kind");
}

double log_snr(const NoiseSchedule& schedule, double t) {
    const auto [alpha, sigma] = alpha_sigma(schedule, t);
    if (alpha <= 0.0 || sigma <= 0.0) {
        std::ostringstream msg;
        msg << "log-SNR is singular at t=" << t << " (alpha=" << alpha << ", sigma=" << sigma << ")";
        throw SingularityError(msg.str());
    }
    return 2.0 * (std::log(alpha) - std::log(sigma));
}

torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& eps, const NoiseSchedule& schedule, double t) {
    require_same_shape(x0, eps, "add_noise");
    const auto [alpha, sigma] = alpha_sigma(schedule, t);
    return alpha * x0 + sigma * eps;
}

torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& eps, const NoiseSchedule& schedule,
                        const torch::Tensor& t) {
    require_same_shape(x0, eps, "add_noise");
    const auto [alpha, sigma] = alpha_sigma(schedule, t);
    return per_sample(alpha, x0) * x0 + per_sample(sigma, x0) * eps;
}

torch::Tensor regression_target(PredictionType ptype, const torch::Tensor& x0, const torch::Tensor& eps,
                                const NoiseSchedule& schedule, double t) {
    require_same_shape(x0, eps, "regression_target");
    if (ptype == PredictionType::eps_prediction) {
        return eps.clone();
    }
    switch (schedule.kind) {
        case ScheduleKind::flow_matching:
            return (1.0 - schedule.sigma_min) * eps - x0;
        case ScheduleKind::cosine: {
            const auto [alpha, sigma] = alpha_sigma(schedule, t);
            return alpha * eps - sigma * x0;
        }
    }
    throw ConfigError("unsupported prediction/schedule pairing");
}

torch::Tensor regression_target(PredictionType ptype, const torch::Tensor& x0, const torch::Tensor& eps,
                                const NoiseSchedule& schedule, const torch::Tensor& t) {
    require_same_shape(x0, eps, "regression_target");
    if (ptype == PredictionType::eps_prediction) {
        return eps.clone();
    }
    switch (schedule.kind) {
        case ScheduleKind::flow_matching:
            return (1.0 - schedule.sigma_min) * eps - x0;
        case ScheduleKind::cosine: {
            const auto [alpha, sigma] = alpha_sigma(schedule, t);
            return per_sample(alpha, x0) * eps - per_sample(sigma, x0) * x0;
        }
    }
    throw ConfigError("unsupported prediction/schedule pairing");
}

ConversionMatrix ConversionMatrix::inverse() const {
    const double det = determinant();
    if (std::abs(det) < kSingularTolerance) {
        std::ostringstream msg;
        msg << "conversion matrix is singular (det=" << det << ")";
        throw SingularityError(msg.str());
    }
    return {a22 / det, -a12 / det, -a21 / det, a11 / det};
}

ConversionMatrix conversion_matrix(const NoiseSchedule& schedule, PredictionType ptype, double t) {
    require_unit_time(t);
    double alpha = 0.0;
    double sigma = 0.0;
    if (schedule.kind == ScheduleKind::flow_matching) {
        alpha = 1.0 - t;
        sigma = t;
    } else {
        const auto as = alpha_sigma(schedule, t);
        alpha = as.alpha;
        sigma = as.sigma;
    }
    if (ptype == PredictionType::eps_prediction) {
        return {alpha, sigma, 0.0, 1.0};
    }
    if (schedule.kind == ScheduleKind::flow_matching) {
        return {alpha, sigma, -1.0, 1.0};
    }
    // v = alpha*eps - sigma*x0
    return {alpha, sigma, -sigma, alpha};
}

std::pair<torch::Tensor, torch::Tensor> to_sample_and_noise(const torch::Tensor& pred, const torch::Tensor& x_t,
                                                            const NoiseSchedule& schedule, double t,
                                                            PredictionType ptype) {
    require_same_shape(pred, x_t, "to_sample_prediction");
    const auto inv = conversion_matrix(schedule, ptype, t).inverse();
    return {inv.a11 * x_t + inv.a12 * pred, inv.a21 * x_t + inv.a22 * pred};
}

torch::Tensor to_sample_prediction(const torch::Tensor& pred, const torch::Tensor& x_t, const NoiseSchedule& schedule,
                                   double t, PredictionType ptype) {
    return to_sample_and_noise(pred, x_t, schedule, t, ptype).first;
}

torch::Tensor to_sample_prediction(const torch::Tensor& pred, const torch::Tensor& x_t, const NoiseSchedule& schedule,
                                   const torch::Tensor& t, PredictionType ptype) {
    require_same_shape(pred, x_t, "to_sample_prediction");
    require_unit_time(t);
    const auto n = t.size(0);
    auto first = torch::empty({n}, torch::kFloat64);
    auto second = torch::empty({n}, torch::kFloat64);
    auto t_host = t.to(torch::kFloat64).contiguous();
    auto t_acc = t_host.accessor<double, 1>();
    auto f_acc = first.accessor<double, 1>();
    auto s_acc = second.accessor<double, 1>();
    for (int64_t i = 0; i < n; ++i) {
        const auto inv = conversion_matrix(schedule, ptype, t_acc[i]).inverse();
        f_acc[i] = inv.a11;
        s_acc[i] = inv.a12;
    }
    return per_sample(first, x_t) * x_t + per_sample(second, x_t) * pred;
}

WeightingFunction effective_weighting(ObjectiveKind kind) {
    switch (kind) {
        case ObjectiveKind::flow_matching_v:
            // ||v - v_hat||^2 = ||eps - eps_hat||^2 / (1-t)^2 and dt/dlambda = -t(1-t)/2.
            return {[](double lambda) { return std::exp(-lambda / 2.0); }, "flow_matching_v: exp(-lambda/2)"};
        case ObjectiveKind::cosine_v:
            // ||v - v_hat||^2 = ||eps - eps_hat||^2 / alpha^2 and dt/dlambda = -sech(lambda/2) / (2 pi).
            return {[](double lambda) { return std::exp(-lambda / 2.0); }, "cosine_v: exp(-lambda/2)"};
        case ObjectiveKind::cosine_eps:
            // Uniform t only contributes the density of lambda, which peaks at lambda = 0.
            return {[](double lambda) { return 1.0 / std::cosh(lambda / 2.0); }, "cosine_eps: sech(lambda/2)"};
    }
    throw ConfigError("unknown objective kind");
}

ElboReport elbo_condition_check(const WeightingFunction& w, const NoiseSchedule& schedule, int grid_size) {
    if (grid_size < 16) {
        throw DomainError("ELBO check needs grid_size >= 16, got " + std::to_string(grid_size));
    }
    const auto n = static_cast<size_t>(grid_size);
    const double lo = kInteriorEps;
    const double hi = 1.0 - kInteriorEps;
    const double h = (hi - lo) / static_cast<double>(n - 1);

    std::vector<double> times(n);
    std::vector<double> values(n);
    for (size_t i = 0; i < n; ++i) {
        times[i] = i + 1 == n ? hi : lo + h * static_cast<double>(i);
        values[i] = w.w(log_snr(schedule, times[i]));
        if (!std::isfinite(values[i])) {
            std::ostringstream msg;
            msg << "weighting '" << w.label << "' is not finite at t=" << times[i];
            throw EvaluationError(msg.str());
        }
    }

    ElboReport report;
    report.min_derivative = std::numeric_limits<double>::infinity();
    for (size_t i = 1; i + 1 < n; ++i) {
        const double d = (values[i + 1] - values[i - 1]) / (2.0 * h);
        report.min_derivative = std::min(report.min_derivative, d);
        if (d < -kElboTolerance) {
            report.violations.push_back(times[i]);
        }
    }
    report.is_elbo = report.violations.empty();
    report.normalizer = values.back();
    return report;
}

torch::Tensor l2_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    require_same_shape(pred, target, "l2_loss");
    return (pred - target).pow(2).mean();
}

}  // namespace dito
