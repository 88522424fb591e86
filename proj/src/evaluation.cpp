#include "dito/evaluation.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "dito/data.hpp"
#include "dito/diffusion_core.hpp"
#include "dito/errors.hpp"

namespace dito {

double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak) {
    require_same_shape(a, b, "psnr");
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double mean_psnr(const torch::Tensor& a, const torch::Tensor& b, double peak) {
    require_same_shape(a, b, "mean_psnr");
    if (a.dim() != 4 || a.size(0) == 0) throw ShapeError("mean_psnr expects a non-empty (N, C, H, W) batch");
    double total = 0.0;
    for (int64_t i = 0; i < a.size(0); ++i) total += psnr(a[i], b[i], peak);
    return total / static_cast<double>(a.size(0));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, int window) {
    require_same_shape(a, b, "ssim");
    if (a.dim() != 3 && a.dim() != 4) throw ShapeError("ssim expects (C, H, W) or (N, C, H, W)");
    if (window < 1 || window % 2 == 0) throw DomainError("ssim window must be a positive odd integer");
    auto x = (a.dim() == 3 ? a.unsqueeze(0) : a).to(torch::kFloat64);
    auto y = (b.dim() == 3 ? b.unsqueeze(0) : b).to(torch::kFloat64);
    if (window > x.size(2) || window > x.size(3)) {
        std::ostringstream msg;
        msg << "ssim window " << window << " exceeds image size " << x.size(2) << "x" << x.size(3);
        throw DomainError(msg.str());
    }
    const double c1 = std::pow(0.01 * kPixelRange, 2);
    const double c2 = std::pow(0.03 * kPixelRange, 2);
    auto pool = [window](const torch::Tensor& t) { return torch::avg_pool2d(t, {window, window}, {1, 1}); };
    auto mu_x = pool(x);
    auto mu_y = pool(y);
    auto var_x = pool(x * x) - mu_x * mu_x;
    auto var_y = pool(y * y) - mu_y * mu_y;
    auto cov = pool(x * y) - mu_x * mu_y;
    auto map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) /
               ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
    return map.mean().item<double>();
}

// --- feature statistics ---------------------------------------------------------------

FeatureAccumulator::FeatureAccumulator(int64_t dim)
    : dim_(dim), sum_(Eigen::VectorXd::Zero(dim)), outer_(Eigen::MatrixXd::Zero(dim, dim)) {}

void FeatureAccumulator::add(const torch::Tensor& features) {
    if (features.dim() != 2) throw ShapeError("features must be (N, d)");
    if (dim_ == 0 && n_ == 0) *this = FeatureAccumulator(features.size(1));
    if (features.size(1) != dim_) throw ShapeError("feature dimension changed between batches");
    auto f = features.detach().to(torch::kFloat64).contiguous();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        f.data_ptr<double>(), f.size(0), f.size(1));
    sum_ += m.colwise().sum().transpose();
    outer_ += m.transpose() * m;
    n_ += f.size(0);
}

void FeatureAccumulator::merge(const FeatureAccumulator& other) {
    if (other.n_ == 0) return;
    if (n_ == 0) {
        *this = other;
        return;
    }
    if (other.dim_ != dim_) throw ShapeError("cannot merge feature accumulators of different dimension");
    sum_ += other.sum_;
    outer_ += other.outer_;
    n_ += other.n_;
}

FeatureStats FeatureAccumulator::stats() const {
    if (n_ < 2) throw EvaluationError("feature statistics need at least two samples");
    FeatureStats s;
    s.n = n_;
    s.mean = sum_ / static_cast<double>(n_);
    s.cov = (outer_ - static_cast<double>(n_) * s.mean * s.mean.transpose()) / static_cast<double>(n_ - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
}

FeatureStats feature_stats(FeatureNetImpl& net, const torch::Tensor& images, int batch_size) {
    torch::NoGradGuard no_grad;
    FeatureAccumulator acc(net.embedding_dim());
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        const auto len = std::min<int64_t>(batch_size, images.size(0) - start);
        acc.add(net.embed(images.narrow(0, start, len)));
    }
    return acc.stats();
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    Eigen::VectorXd values = eig.eigenvalues();
    for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = values[i] < kEigenClamp ? 0.0 : std::sqrt(values[i]);
    return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

double trace_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    double total = 0.0;
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        const double v = eig.eigenvalues()[i];
        if (v >= kEigenClamp) total += std::sqrt(v);
    }
    return total;
}

bool all_finite(const FeatureStats& s) { return s.mean.allFinite() && s.cov.allFinite(); }

}  // namespace

double frechet_distance(const FeatureStats& s1, const FeatureStats& s2) {
    if (s1.dim() != s2.dim() || s1.cov.rows() != s1.dim() || s2.cov.rows() != s2.dim()) {
        throw ShapeError("frechet_distance: feature dimensions differ");
    }
    if (!all_finite(s1) || !all_finite(s2)) throw EvaluationError("frechet_distance: non-finite statistics");
    const Eigen::MatrixXd a = psd_sqrt(s1.cov);
    Eigen::MatrixXd m = a * s2.cov * a;
    m = 0.5 * (m + m.transpose());
    const double fd = (s1.mean - s2.mean).squaredNorm() + s1.cov.trace() + s2.cov.trace() - 2.0 * trace_sqrt(m);
    // rounding can leave a tiny negative value for (near-)identical stats
    return std::max(fd, 0.0);
}

std::vector<int64_t> eval_subset(int64_t dataset_size, int64_t n, uint64_t seed) {
    if (n <= 0) throw ConfigError("evaluation subset size must be positive");
    if (dataset_size < n) {
        throw ConfigError("dataset has " + std::to_string(dataset_size) + " items, fewer than the evaluation subset of " +
                          std::to_string(n));
    }
    auto perm = epoch_permutation(dataset_size, seed, 0);
    perm.resize(static_cast<size_t>(n));
    return perm;
}

double rfid(const Reconstructor& reconstruct, const torch::Tensor& images, const std::vector<int64_t>& ids,
            FeatureNetImpl& net) {
    auto recon = reconstruct(images, ids);
    require_same_shape(images, recon, "rfid reconstruction");
    return frechet_distance(feature_stats(net, images), feature_stats(net, recon));
}

double gfid(const SampleSource& source, const torch::Tensor& reference_images, int64_t n_samples, FeatureNetImpl& net) {
    auto generated = source(n_samples);
    if (generated.size(0) != n_samples) throw EvaluationError("sample source returned the wrong number of images");
    return frechet_distance(feature_stats(net, reference_images), feature_stats(net, generated));
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric;
    if (std::isinf(value)) {
        j["value"] = value > 0 ? "+inf" : "-inf";
    } else {
        j["value"] = value;
    }
    j["n"] = n;
    j["seed"] = seed;
    j["model_id"] = model_id;
    j["solver_steps"] = solver_steps;
    if (table) j["table"] = *table;
    return j.dump(2) + "\n";
}

}  // namespace dito
