#include "doctest_torch.hpp"

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Eigenvalues>

#include "dito/errors.hpp"
#include "dito/evaluation.hpp"

using namespace dito;

namespace {

FeatureStats make_stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
    FeatureStats s;
    s.mean = std::move(mean);
    s.cov = std::move(cov);
    s.n = 100;
    return s;
}

Eigen::MatrixXd random_spd(int d, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXd a(d, d + 3);
    for (int i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    return a * a.transpose() / (d + 3);
}

// Tr sqrt(S1 S2) from the eigenvalues of the (non-symmetric) product, which are real and nonnegative.
double fd_oracle(const FeatureStats& a, const FeatureStats& b) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(a.cov * b.cov);
    double tr = 0.0;
    for (int i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
    return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * tr;
}

// Direct window-by-window SSIM over a single channel.
double ssim_loops(const torch::Tensor& a, const torch::Tensor& b, int w) {
    auto x = a.to(torch::kFloat64).contiguous();
    auto y = b.to(torch::kFloat64).contiguous();
    auto xa = x.accessor<double, 2>();
    auto ya = y.accessor<double, 2>();
    const double c1 = 0.02 * 0.02, c2 = 0.06 * 0.06;
    double total = 0;
    int count = 0;
    for (int64_t i = 0; i + w <= x.size(0); ++i) {
        for (int64_t j = 0; j + w <= x.size(1); ++j) {
            double mx = 0, my = 0;
            for (int p = 0; p < w; ++p)
                for (int q = 0; q < w; ++q) mx += xa[i + p][j + q], my += ya[i + p][j + q];
            mx /= w * w;
            my /= w * w;
            double vx = 0, vy = 0, cxy = 0;
            for (int p = 0; p < w; ++p) {
                for (int q = 0; q < w; ++q) {
                    double dx = xa[i + p][j + q] - mx, dy = ya[i + p][j + q] - my;
                    vx += dx * dx, vy += dy * dy, cxy += dx * dy;
                }
            }
            vx /= w * w, vy /= w * w, cxy /= w * w;
            total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / count;
}

}  // namespace

TEST_CASE("PSNR hand values") {
    auto a = torch::zeros({3, 4, 4});
    auto b = torch::full({3, 4, 4}, 0.1);
    CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0));
    CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(4.0 / 0.01)));
    CHECK(std::isinf(psnr(a, a)));
    CHECK(psnr(a, a) > 0);
    CHECK_THROWS_AS(psnr(a, torch::zeros({3, 4, 5})), ShapeError);
    auto batch_a = torch::zeros({2, 3, 4, 4});
    auto batch_b = torch::stack({torch::full({3, 4, 4}, 0.1), torch::full({3, 4, 4}, 0.2)});
    CHECK(mean_psnr(batch_a, batch_b, 1.0) == doctest::Approx((20.0 + 10 * std::log10(25.0)) / 2));
}

TEST_CASE("SSIM of two constant images") {
    auto a = torch::full({1, 5, 5}, 0.2, torch::kFloat64);
    auto b = torch::full({1, 5, 5}, 0.5, torch::kFloat64);
    const double c1 = 4e-4;
    CHECK(ssim(a, b, 5) == doctest::Approx((0.2 + c1) / (0.29 + c1)).epsilon(1e-9));
    CHECK(ssim(a, a, 5) == doctest::Approx(1.0));
}

TEST_CASE("SSIM matches a direct windowed computation") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    auto a = torch::rand({1, 12, 10}, gen) * 2 - 1;
    auto b = (a + 0.3 * torch::randn({1, 12, 10}, gen)).clamp(-1, 1);
    for (int w : {3, 7}) {
        CHECK(ssim(a, b, w) == doctest::Approx(ssim_loops(a[0], b[0], w)).epsilon(1e-9));
    }
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, b) < 1.0);
}

TEST_CASE("SSIM window errors") {
    auto a = torch::zeros({3, 6, 6});
    CHECK_THROWS_AS(ssim(a, a, 4), DomainError);
    CHECK_THROWS_AS(ssim(a, a, 7), DomainError);
}

TEST_CASE("Frechet distance closed forms") {
    const int d = 8;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd shifted = mu;
    shifted[0] = 1.0;
    auto eye = Eigen::MatrixXd::Identity(d, d);
    CHECK(std::abs(frechet_distance(make_stats(mu, eye), make_stats(shifted, eye)) - 1.0) < 1e-6);
    CHECK(std::abs(frechet_distance(make_stats(mu, eye), make_stats(mu, eye))) < 1e-6);
    // diagonal covariances: sum (sqrt a - sqrt b)^2
    Eigen::VectorXd da(d), db(d);
    double expected = 0;
    for (int i = 0; i < d; ++i) {
        da[i] = 0.5 + i;
        db[i] = 2.0 / (1 + i);
        expected += std::pow(std::sqrt(da[i]) - std::sqrt(db[i]), 2);
    }
    CHECK(frechet_distance(make_stats(mu, da.asDiagonal()), make_stats(mu, db.asDiagonal())) ==
          doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("Frechet distance agrees with the eigenvalue oracle, is symmetric and nonnegative") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 2 + trial % 7;
        Eigen::VectorXd m1(d), m2(d);
        for (int i = 0; i < d; ++i) m1[i] = nd(rng), m2[i] = nd(rng);
        auto a = make_stats(m1, random_spd(d, rng));
        auto b = make_stats(m2, random_spd(d, rng));
        double ab = frechet_distance(a, b);
        CHECK(ab >= 0.0);
        CHECK(ab == doctest::Approx(frechet_distance(b, a)).epsilon(1e-7));
        CHECK(ab == doctest::Approx(fd_oracle(a, b)).epsilon(1e-6));
        CHECK(std::abs(frechet_distance(a, a)) < 1e-6);
    }
}

TEST_CASE("Frechet distance input errors") {
    auto eye2 = Eigen::MatrixXd::Identity(2, 2);
    auto eye3 = Eigen::MatrixXd::Identity(3, 3);
    CHECK_THROWS_AS(frechet_distance(make_stats(Eigen::VectorXd::Zero(2), eye2),
                                     make_stats(Eigen::VectorXd::Zero(3), eye3)),
                    ShapeError);
    Eigen::MatrixXd bad = eye2;
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(frechet_distance(make_stats(Eigen::VectorXd::Zero(2), bad),
                                     make_stats(Eigen::VectorXd::Zero(2), eye2)),
                    EvaluationError);
}

TEST_CASE("feature accumulator gives unbiased stats and merges in any order") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(7);
    auto x = torch::randn({50, 4}, gen, torch::kFloat64) * 2 + 1;
    FeatureAccumulator whole(4);
    whole.add(x);
    auto s = whole.stats();
    CHECK(s.n == 50);
    auto ref_cov = torch::cov(x.t());
    auto ref_mean = x.mean(0);
    for (int i = 0; i < 4; ++i) {
        CHECK(s.mean[i] == doctest::Approx(ref_mean[i].item<double>()).epsilon(1e-10));
        for (int j = 0; j < 4; ++j) CHECK(s.cov(i, j) == doctest::Approx(ref_cov[i][j].item<double>()).epsilon(1e-9));
    }
    FeatureAccumulator a(4), b(4);
    a.add(x.narrow(0, 0, 20));
    b.add(x.narrow(0, 20, 30));
    FeatureAccumulator ab(4), ba(4);
    ab.merge(a);
    ab.merge(b);
    ba.merge(b);
    ba.merge(a);
    CHECK((ab.stats().cov - s.cov).norm() < 1e-9);
    CHECK((ba.stats().cov - s.cov).norm() < 1e-9);
    FeatureAccumulator one(4);
    one.add(x.narrow(0, 0, 1));
    CHECK_THROWS_AS(one.stats(), EvaluationError);
}

TEST_CASE("evaluation subset is a seeded prefix without repeats") {
    auto a = eval_subset(100, 10, 1);
    CHECK(a == eval_subset(100, 10, 1));
    CHECK(a != eval_subset(100, 10, 2));
    std::sort(a.begin(), a.end());
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    CHECK_THROWS_AS(eval_subset(5, 10, 0), ConfigError);
}

TEST_CASE("rFID of a perfect reconstructor is zero") {
    auto net = make_fid_net();
    auto images = torch::rand({40, 3, 16, 16}) * 2 - 1;
    std::vector<int64_t> ids(40);
    std::iota(ids.begin(), ids.end(), 0);
    Reconstructor identity = [](const torch::Tensor& x, const std::vector<int64_t>&) { return x.clone(); };
    CHECK(std::abs(rfid(identity, images, ids, *net)) < 1e-6);
    Reconstructor blank = [](const torch::Tensor& x, const std::vector<int64_t>&) { return torch::zeros_like(x); };
    CHECK(rfid(blank, images, ids, *net) > 0.0);
}

TEST_CASE("metrics report has a fixed layout") {
    MetricsReport r;
    r.metric = "psnr";
    r.value = std::numeric_limits<double>::infinity();
    r.n = 4;
    r.seed = 2;
    r.model_id = "abc";
    r.solver_steps = 50;
    auto text = r.to_json();
    CHECK(text.find("\"value\": \"+inf\"") != std::string::npos);
    CHECK(text.find("\"metric\"") < text.find("\"value\""));
    CHECK(text.find("\"model_id\"") < text.find("\"solver_steps\""));
    CHECK(text.back() == '\n');
    CHECK(text == r.to_json());
}

TEST_CASE("more closed forms") {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd four = 4 * Eigen::MatrixXd::Identity(2, 2);
    CHECK(frechet_distance(make_stats(mu, four), make_stats(mu, Eigen::MatrixXd::Identity(2, 2))) ==
          doctest::Approx(2.0).epsilon(1e-9));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
    auto a = torch::randn({1, 16, 16}, gen, torch::kFloat64) * 0.3;
    a = a - a.mean();
    CHECK(ssim(a, -a) < 1.0);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
}

TEST_CASE("rFID is invariant to the order of the subset") {
    auto net = make_fid_net();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    auto images = torch::rand({48, 3, 16, 16}, gen) * 2 - 1;
    std::vector<int64_t> ids(48);
    std::iota(ids.begin(), ids.end(), 0);
    Reconstructor blur = [](const torch::Tensor& x, const std::vector<int64_t>&) {
        return torch::avg_pool2d(x, 3, 1, 1);
    };
    auto perm = torch::randperm(48, gen);
    std::vector<int64_t> shuffled_ids;
    for (int64_t i = 0; i < 48; ++i) shuffled_ids.push_back(perm[i].item<int64_t>());
    double a = rfid(blur, images, ids, *net);
    double b = rfid(blur, images.index_select(0, perm), shuffled_ids, *net);
    CHECK(std::abs(a - b) < 1e-6);
}

TEST_CASE("rFID ordering between two reconstructors is stable across subset sizes") {
    auto net = make_fid_net();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    auto images = torch::rand({2048, 3, 16, 16}, gen) * 2 - 1;
    auto make = [&](double amount) {
        return Reconstructor([amount](const torch::Tensor& x, const std::vector<int64_t>& ids) {
            auto g = at::make_generator<at::CPUGeneratorImpl>(static_cast<uint64_t>(ids.front()) + 1);
            return x + amount * torch::randn(x.sizes(), g);
        });
    };
    auto good = make(0.1), bad = make(0.4);
    for (int64_t n : {512, 2048}) {
        std::vector<int64_t> ids(static_cast<size_t>(n));
        std::iota(ids.begin(), ids.end(), 0);
        auto subset = images.narrow(0, 0, n);
        CHECK(rfid(good, subset, ids, *net) < rfid(bad, subset, ids, *net));
    }
}

TEST_CASE("gFID of a replaying generator is near zero and below a noise generator") {
    auto net = make_fid_net();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
    auto reference = torch::rand({128, 3, 16, 16}, gen) * 2 - 1;
    SampleSource replay = [&](int64_t n) { return reference.narrow(0, 0, n).clone(); };
    SampleSource noise = [](int64_t n) {
        auto g = at::make_generator<at::CPUGeneratorImpl>(5);
        return torch::randn({n, 3, 16, 16}, g).clamp(-1, 1);
    };
    double r = gfid(replay, reference, 128, *net);
    CHECK(std::abs(r) < 1e-6);
    CHECK(gfid(noise, reference, 128, *net) > r);
    CHECK(gfid(noise, reference, 128, *net) == gfid(noise, reference, 128, *net));
}
