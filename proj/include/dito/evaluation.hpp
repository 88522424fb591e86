#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include "dito/feature_nets.hpp"

namespace dito {

/// Pixels live in [-1, 1], so the peak-to-peak range is 2.
inline constexpr double kPixelRange = 2.0;
/// Eigenvalues below this are treated as zero in the matrix square root.
inline constexpr double kEigenClamp = 1e-10;

/// 10 log10(peak^2 / MSE) over all elements; +infinity when the inputs are equal.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = kPixelRange);

/// Mean of per-image PSNR over a (N, 3, H, W) batch.
double mean_psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = kPixelRange);

/// Mean SSIM over every valid window position, channel and image. Uniform
/// window, population statistics, C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 2.
/// Accepts (3, H, W) or (N, 3, H, W).
double ssim(const torch::Tensor& a, const torch::Tensor& b, int window = 7);

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // unbiased, n - 1 denominator
    int64_t n = 0;

    int64_t dim() const { return mean.size(); }
};

/// Sums and outer-product sums; merging is associative and order-insensitive.
class FeatureAccumulator {
public:
    explicit FeatureAccumulator(int64_t dim = 0);

    /// features: (N, d)
    void add(const torch::Tensor& features);
    void merge(const FeatureAccumulator& other);
    /// Throws EvaluationError for fewer than two samples.
    FeatureStats stats() const;
    int64_t count() const { return n_; }

private:
    int64_t dim_;
    int64_t n_ = 0;
    Eigen::VectorXd sum_;
    Eigen::MatrixXd outer_;
};

/// Embeds `images` with the network in chunks and returns their stats.
FeatureStats feature_stats(FeatureNetImpl& net, const torch::Tensor& images, int batch_size = 64);

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). The trace of the square root is
/// taken as Tr((A S2 A)^{1/2}) with A = S1^{1/2}, both symmetric eigendecompositions.
double frechet_distance(const FeatureStats& s1, const FeatureStats& s2);

/// Fixed evaluation subset: the first n entries of a seeded permutation.
/// Throws ConfigError if the dataset holds fewer than n items.
std::vector<int64_t> eval_subset(int64_t dataset_size, int64_t n, uint64_t seed);

/// Maps images and their dataset indices to reconstructions.
using Reconstructor = std::function<torch::Tensor(const torch::Tensor& images, const std::vector<int64_t>& ids)>;
/// Produces n generated images.
using SampleSource = std::function<torch::Tensor(int64_t n)>;

double rfid(const Reconstructor& reconstruct, const torch::Tensor& images, const std::vector<int64_t>& ids,
            FeatureNetImpl& net);
double gfid(const SampleSource& source, const torch::Tensor& reference_images, int64_t n_samples, FeatureNetImpl& net);

struct MetricsReport {
    std::string metric;
    double value = 0.0;
    int64_t n = 0;
    uint64_t seed = 0;
    std::string model_id;
    int solver_steps = 0;
    std::optional<nlohmann::ordered_json> table;

    /// Fixed key order; +infinity is written as the string "+inf".
    std::string to_json() const;
};

}  // namespace dito
