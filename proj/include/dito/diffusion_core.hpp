#pragma once

// Noise schedules, corruption, regression targets, sample-prediction
// conversion and ELBO weighting analysis. Nothing here depends on a network.

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace dito {

/// Interior clamp used wherever log-SNR or its derivative is evaluated.
inline constexpr double kInteriorEps = 1e-4;
/// Central-difference derivatives at or above -kElboTolerance count as nonnegative.
inline constexpr double kElboTolerance = 1e-6;
/// |det| below this makes the sample-prediction conversion singular.
inline constexpr double kSingularTolerance = 1e-8;

enum class ScheduleKind { flow_matching, cosine };

struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::flow_matching;
    double sigma_min = 1e-5;  // flow_matching only

    static NoiseSchedule flow_matching(double sigma_min = 1e-5) { return {ScheduleKind::flow_matching, sigma_min}; }
    static NoiseSchedule cosine() { return {ScheduleKind::cosine, 0.0}; }
};

enum class PredictionType { v_prediction, eps_prediction };

/// The three training objectives compared in the objective ablation.
enum class ObjectiveKind { flow_matching_v, cosine_v, cosine_eps };

struct Objective {
    ObjectiveKind kind = ObjectiveKind::flow_matching_v;
    double sigma_min = 1e-5;

    NoiseSchedule schedule() const;
    PredictionType prediction() const;
};

std::string_view to_string(ObjectiveKind kind);
ObjectiveKind parse_objective(std::string_view name);

struct AlphaSigma {
    double alpha;
    double sigma;
};

AlphaSigma alpha_sigma(const NoiseSchedule& schedule, double t);

/// Vectorised form: t is a 1-D tensor of per-sample times, returns (alpha, sigma) of the same shape.
std::pair<torch::Tensor, torch::Tensor> alpha_sigma(const NoiseSchedule& schedule, const torch::Tensor& t);

/// lambda_t = log(alpha_t^2 / sigma_t^2).
double log_snr(const NoiseSchedule& schedule, double t);

torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& eps, const NoiseSchedule& schedule, double t);
/// Per-sample times: t has shape (N) and x0 has a leading batch dimension N.
torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& eps, const NoiseSchedule& schedule,
                        const torch::Tensor& t);

torch::Tensor regression_target(PredictionType ptype, const torch::Tensor& x0, const torch::Tensor& eps,
                                const NoiseSchedule& schedule, double t);
torch::Tensor regression_target(PredictionType ptype, const torch::Tensor& x0, const torch::Tensor& eps,
                                const NoiseSchedule& schedule, const torch::Tensor& t);

/// [[alpha, sigma], [A, B]] where the network regresses A*x0 + B*eps.
struct ConversionMatrix {
    double a11, a12, a21, a22;

    double determinant() const { return a11 * a22 - a12 * a21; }
    ConversionMatrix inverse() const;
};

/// Flow matching uses the sigma_min -> 0 coefficients (alpha=1-t, sigma=t, A=-1, B=1), so the
/// inverse is [[1, -t], [1, 1-t]] and the sample prediction is x_t - t*v.
ConversionMatrix conversion_matrix(const NoiseSchedule& schedule, PredictionType ptype, double t);

torch::Tensor to_sample_prediction(const torch::Tensor& pred, const torch::Tensor& x_t, const NoiseSchedule& schedule,
                                   double t, PredictionType ptype);
torch::Tensor to_sample_prediction(const torch::Tensor& pred, const torch::Tensor& x_t, const NoiseSchedule& schedule,
                                   const torch::Tensor& t, PredictionType ptype);

/// Both rows of the inverted conversion: (x_bar, eps_bar).
std::pair<torch::Tensor, torch::Tensor> to_sample_and_noise(const torch::Tensor& pred, const torch::Tensor& x_t,
                                                            const NoiseSchedule& schedule, double t,
                                                            PredictionType ptype);

struct WeightingFunction {
    std::function<double(double)> w;  // over log-SNR lambda
    std::string label;
};

/// Weighting w(lambda) implied by an objective with uniformly sampled t, written
/// against the epsilon-loss integral over lambda (up to a positive constant):
///   flow_matching_v: exp(-lambda/2)
///   cosine_v:        exp(-lambda/2)
///   cosine_eps:      sech(lambda/2)
WeightingFunction effective_weighting(ObjectiveKind kind);

struct ElboReport {
    bool is_elbo = false;
    double min_derivative = 0.0;
    std::vector<double> violations;  // grid times whose derivative estimate is below -tolerance
    double normalizer = 0.0;         // w(lambda) at the last interior grid point; reported, not enforced
};

ElboReport elbo_condition_check(const WeightingFunction& w, const NoiseSchedule& schedule, int grid_size);

torch::Tensor l2_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// Throws ShapeError when the two shapes differ.
void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what);

}  // namespace dito
