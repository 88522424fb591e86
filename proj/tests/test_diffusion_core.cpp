#include "doctest_torch.hpp"

#include <cmath>
#include <numbers>

#include "dito/diffusion_core.hpp"
#include "dito/errors.hpp"

using namespace dito;

namespace {

torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::randn(shape, gen);
}

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

}  // namespace

TEST_CASE("flow matching schedule endpoints") {
    const auto s = NoiseSchedule::flow_matching(1e-5);
    auto [a0, s0] = alpha_sigma(s, 0.0);
    CHECK(a0 == 1.0);
    CHECK(s0 == doctest::Approx(1e-5).epsilon(1e-12));
    auto [a1, s1] = alpha_sigma(s, 1.0);
    CHECK(a1 == 0.0);
    CHECK(s1 == 1.0);
    auto [ah, sh] = alpha_sigma(s, 0.25);
    CHECK(ah == doctest::Approx(0.75));
    CHECK(sh == doctest::Approx(1e-5 + 0.25 * (1 - 1e-5)));
}

TEST_CASE("cosine schedule is exact at the ends and variance preserving inside") {
    const auto s = NoiseSchedule::cosine();
    CHECK(alpha_sigma(s, 0.0).alpha == 1.0);
    CHECK(alpha_sigma(s, 0.0).sigma == 0.0);
    CHECK(alpha_sigma(s, 1.0).alpha == 0.0);
    CHECK(alpha_sigma(s, 1.0).sigma == 1.0);
    for (double t : {0.1, 0.3, 0.5, 0.9}) {
        auto [a, sg] = alpha_sigma(s, t);
        CHECK(a * a + sg * sg == doctest::Approx(1.0));
        CHECK(a == doctest::Approx(std::cos(std::numbers::pi * t / 2)));
    }
}

TEST_CASE("times outside [0, 1] are rejected") {
    CHECK_THROWS_AS(alpha_sigma(NoiseSchedule::flow_matching(), -0.01), DomainError);
    CHECK_THROWS_AS(alpha_sigma(NoiseSchedule::cosine(), 1.5), DomainError);
    CHECK_THROWS_AS(log_snr(NoiseSchedule::cosine(), std::nan("")), DomainError);
}

TEST_CASE("log-SNR is strictly decreasing on the interior") {
    for (auto s : {NoiseSchedule::flow_matching(), NoiseSchedule::cosine()}) {
        double prev = log_snr(s, 1e-3);
        for (int i = 2; i < 1000; ++i) {
            double cur = log_snr(s, i * 1e-3);
            REQUIRE(cur < prev);
            prev = cur;
        }
    }
    // cosine: lambda = -2 log tan(pi t / 2)
    CHECK(log_snr(NoiseSchedule::cosine(), 0.5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(log_snr(NoiseSchedule::cosine(), 0.25) == doctest::Approx(-2 * std::log(std::tan(std::numbers::pi / 8))));
}

TEST_CASE("add_noise matches alpha x + sigma eps") {
    auto x = randn({2, 3, 4, 4}, 1);
    auto eps = randn({2, 3, 4, 4}, 2);
    for (auto s : {NoiseSchedule::flow_matching(), NoiseSchedule::cosine()}) {
        auto [a, sg] = alpha_sigma(s, 0.37);
        CHECK(max_abs(add_noise(x, eps, s, 0.37) - (a * x + sg * eps)) < 1e-6);
    }
}

TEST_CASE("per-sample add_noise agrees with the scalar form") {
    auto x = randn({3, 3, 4, 4}, 3);
    auto eps = randn({3, 3, 4, 4}, 4);
    auto t = torch::tensor({0.1, 0.5, 0.9}, torch::kFloat32);
    const auto s = NoiseSchedule::flow_matching();
    auto batched = add_noise(x, eps, s, t);
    for (int i = 0; i < 3; ++i) {
        auto single = add_noise(x[i], eps[i], s, t[i].item<double>());
        CHECK(max_abs(batched[i] - single) < 1e-6);
    }
    CHECK_THROWS_AS(add_noise(x, eps.narrow(0, 0, 2), s, t), ShapeError);
}

TEST_CASE("flow matching v target") {
    auto x = randn({2, 3, 4, 4}, 5);
    auto eps = randn({2, 3, 4, 4}, 6);
    const double sm = 1e-5;
    auto v = regression_target(PredictionType::v_prediction, x, eps, NoiseSchedule::flow_matching(sm), 0.4);
    CHECK(max_abs(v - ((1 - sm) * eps - x)) < 1e-6);
    auto e = regression_target(PredictionType::eps_prediction, x, eps, NoiseSchedule::cosine(), 0.4);
    CHECK(max_abs(e - eps) == 0.0);
}

TEST_CASE("exact prediction round-trips to the sample") {
    const double sm = 1e-5;
    auto x = randn({4, 3, 8, 8}, 7);
    auto eps = randn({4, 3, 8, 8}, 8);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
    for (int k = 0; k < 100; ++k) {
        double t = torch::rand({1}, gen).item<double>();
        auto s = NoiseSchedule::flow_matching(sm);
        auto xt = add_noise(x, eps, s, t);
        auto v = regression_target(PredictionType::v_prediction, x, eps, s, t);
        auto xbar = to_sample_prediction(v, xt, s, t, PredictionType::v_prediction);
        auto bound = sm * eps.abs() + 1e-5;
        REQUIRE(((xbar - x).abs() <= bound).all().item<bool>());
    }
    // cosine objectives are exact away from the singular end
    for (auto ptype : {PredictionType::v_prediction, PredictionType::eps_prediction}) {
        auto s = NoiseSchedule::cosine();
        auto xt = add_noise(x, eps, s, 0.6);
        auto pred = regression_target(ptype, x, eps, s, 0.6);
        CHECK(max_abs(to_sample_prediction(pred, xt, s, 0.6, ptype) - x) < 1e-5);
    }
}

TEST_CASE("flow matching inversion matrix is [[1, -t], [1, 1 - t]]") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
    for (int k = 0; k < 100; ++k) {
        double t = torch::rand({1}, gen).item<double>();
        auto inv = conversion_matrix(NoiseSchedule::flow_matching(), PredictionType::v_prediction, t).inverse();
        REQUIRE(inv.a11 == doctest::Approx(1.0).epsilon(1e-12));
        REQUIRE(inv.a12 == doctest::Approx(-t).epsilon(1e-12));
        REQUIRE(inv.a21 == doctest::Approx(1.0).epsilon(1e-12));
        REQUIRE(inv.a22 == doctest::Approx(1.0 - t).epsilon(1e-12));
    }
}

TEST_CASE("eps-prediction conversion is singular at t = 1") {
    auto m = conversion_matrix(NoiseSchedule::cosine(), PredictionType::eps_prediction, 1.0);
    CHECK_THROWS_AS(m.inverse(), SingularityError);
}

TEST_CASE("sample-and-noise rows reproduce both components") {
    auto x = randn({2, 3, 4, 4}, 12);
    auto eps = randn({2, 3, 4, 4}, 13);
    auto s = NoiseSchedule::cosine();
    auto xt = add_noise(x, eps, s, 0.3);
    auto v = regression_target(PredictionType::v_prediction, x, eps, s, 0.3);
    auto [xb, eb] = to_sample_and_noise(v, xt, s, 0.3, PredictionType::v_prediction);
    CHECK(max_abs(xb - x) < 1e-5);
    CHECK(max_abs(eb - eps) < 1e-5);
}

TEST_CASE("ELBO check classifies the known weightings") {
    const auto fm = NoiseSchedule::flow_matching();
    const auto cos = NoiseSchedule::cosine();
    WeightingFunction constant{[](double) { return 1.0; }, "constant"};
    CHECK(elbo_condition_check(constant, fm, 1000).is_elbo);
    CHECK(elbo_condition_check(effective_weighting(ObjectiveKind::flow_matching_v), fm, 1000).is_elbo);
    CHECK(elbo_condition_check(effective_weighting(ObjectiveKind::cosine_v), cos, 1000).is_elbo);
    auto eps = elbo_condition_check(effective_weighting(ObjectiveKind::cosine_eps), cos, 1000);
    CHECK_FALSE(eps.is_elbo);
    CHECK(!eps.violations.empty());
    // sech peaks at lambda = 0 (t = 0.5), so violations sit in the upper half
    for (double t : eps.violations) CHECK(t > 0.49);
    WeightingFunction sigmoid{[](double l) { return 1.0 / (1.0 + std::exp(l)); }, "sigmoid"};
    CHECK(elbo_condition_check(sigmoid, cos, 1000).is_elbo);
    CHECK_THROWS_AS(elbo_condition_check(constant, fm, 8), DomainError);
    WeightingFunction blowup{[](double l) { return std::exp(-l * 1e3); }, "blowup"};
    CHECK_THROWS_AS(elbo_condition_check(blowup, fm, 1000), EvaluationError);
}

TEST_CASE("cosine-eps weighting matches the lambda density of uniform t") {
    // t = (2/pi) atan(exp(-lambda/2)) so |dt/dlambda| = sech(lambda/2) / (2 pi)
    auto w = effective_weighting(ObjectiveKind::cosine_eps);
    for (double l : {-4.0, -1.0, 0.0, 2.0, 5.0}) {
        const double h = 1e-5;
        auto t_of = [](double lam) { return 2.0 / std::numbers::pi * std::atan(std::exp(-lam / 2)); };
        double dens = -(t_of(l + h) - t_of(l - h)) / (2 * h);
        CHECK(w.w(l) / (2 * std::numbers::pi) == doctest::Approx(dens).epsilon(1e-6));
    }
}

TEST_CASE("objective names round-trip") {
    for (auto k : {ObjectiveKind::flow_matching_v, ObjectiveKind::cosine_v, ObjectiveKind::cosine_eps}) {
        CHECK(parse_objective(to_string(k)) == k);
    }
    CHECK_THROWS_AS(parse_objective("edm"), ConfigError);
}

TEST_CASE("l2 loss rejects shape mismatch") {
    CHECK(l2_loss(torch::ones({2, 2}), torch::zeros({2, 2})).item<double>() == 1.0);
    CHECK_THROWS_AS(l2_loss(torch::ones({2, 2}), torch::zeros({2, 3})), ShapeError);
}

TEST_CASE("hand-evaluated schedule values") {
    const auto fm = NoiseSchedule::flow_matching(1e-5);
    CHECK(log_snr(fm, 0.5) == doctest::Approx(std::log(0.25 / (0.500005 * 0.500005))).epsilon(1e-12));
    CHECK(log_snr(fm, 0.99) < log_snr(fm, 0.5));
    CHECK(log_snr(fm, 0.5) < log_snr(fm, 0.01));
    auto [a, s] = alpha_sigma(NoiseSchedule::cosine(), 0.5);
    CHECK(a == doctest::Approx(0.70711).epsilon(1e-5));
    CHECK(s == doctest::Approx(0.70711).epsilon(1e-5));

    auto eps = randn({2, 3}, 20);
    auto zero = torch::zeros({2, 3});
    CHECK(max_abs(add_noise(zero, eps, fm, 0.3) - alpha_sigma(fm, 0.3).sigma * eps) < 1e-7);
    CHECK(max_abs(add_noise(randn({2, 3}, 21), eps, fm, 1.0) - eps) == 0.0);
    auto v0 = regression_target(PredictionType::v_prediction, zero, eps, fm, 0.7);
    CHECK(max_abs(v0 - (1 - 1e-5) * eps) < 1e-7);

    auto x = randn({2, 3}, 22);
    auto vc = regression_target(PredictionType::v_prediction, x, eps, NoiseSchedule::cosine(), 0.5);
    CHECK(max_abs(vc - (eps - x) / std::sqrt(2.0)) < 1e-6);
    auto xt = randn({2, 3}, 23);
    CHECK(max_abs(to_sample_prediction(randn({2, 3}, 24), xt, fm, 0.0, PredictionType::v_prediction) - xt) == 0.0);
}

TEST_CASE("l2 loss hand values") {
    auto t = torch::tensor({3.0f, 4.0f});
    CHECK(l2_loss(torch::zeros({2}), t).item<double>() == doctest::Approx(12.5));
    CHECK(l2_loss(t + 1, t).item<double>() == doctest::Approx(1.0));
    CHECK(l2_loss(t, t).item<double>() == 0.0);
}
