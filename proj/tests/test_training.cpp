#include "doctest_torch.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "dito/errors.hpp"
#include "dito/training.hpp"
#include "test_support.hpp"

using namespace dito;
using namespace dito::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig micro_train() {
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.total_steps = 6;
    cfg.learning_rate = 1e-3;
    return cfg;
}

at::Generator gen(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

Dataset tiny_shapes(int n = 16) { return synth_corpus(SynthKind::shapes, n, 16, 3); }

}  // namespace

TEST_CASE("synced times satisfy t >= tau and are uniform on [tau, 1]") {
    auto g = gen(1);
    std::vector<double> rel, all;
    while (rel.size() < 10000) {
        auto d = sample_training_times(1000, 0.1, TimeSampling::uniform, g);
        auto t = to_vector(d.t), tau = to_vector(d.tau);
        auto s = d.synced.contiguous();
        for (int64_t i = 0; i < 1000; ++i) {
            all.push_back(t[i]);
            if (!s[i].item<bool>()) continue;
            REQUIRE(t[i] >= tau[i]);
            rel.push_back((t[i] - tau[i]) / (1 - tau[i]));
        }
    }
    CHECK(ks_uniform(rel) < ks_critical_1pct(rel.size()));
    double frac = 10000.0 / all.size();
    CHECK(frac == doctest::Approx(0.1).epsilon(0.1));
}

TEST_CASE("unsynced stratified times are uniform with one draw per stratum") {
    auto g = gen(2);
    std::vector<double> all;
    for (int k = 0; k < 200; ++k) {
        auto d = sample_training_times(16, 0.0, TimeSampling::stratified, g);
        CHECK_FALSE(d.synced.any().item<bool>());
        auto t = to_vector(d.t);
        std::set<int> strata;
        for (double v : t) strata.insert(static_cast<int>(v * 16));
        REQUIRE(strata.size() == 16);
        all.insert(all.end(), t.begin(), t.end());
    }
    CHECK(ks_uniform(all) < ks_critical_1pct(all.size()));
}

TEST_CASE("the time RNG stream does not depend on the sync probability") {
    auto g0 = gen(3), g1 = gen(3);
    auto a = sample_training_times(32, 0.0, TimeSampling::uniform, g0);
    auto b = sample_training_times(32, 1.0, TimeSampling::uniform, g1);
    CHECK(torch::equal(a.tau, b.tau));
    CHECK(b.synced.all().item<bool>());
    CHECK(torch::equal(torch::rand({4}, g0), torch::rand({4}, g1)));
}

TEST_CASE("noise sync corrupts latents with the pixel schedule") {
    auto z = Latent{torch::randn({3, 4, 2, 2}), true};
    auto tau = torch::tensor({0.0f, 0.5f, 1.0f});
    auto eps = torch::randn({3, 4, 2, 2});
    auto out = noise_sync_augment(z, tau, eps, NoiseSchedule::flow_matching(0.0));
    CHECK(torch::allclose(out.values[0], z.values[0]));
    CHECK(torch::allclose(out.values[1], 0.5 * z.values[1] + 0.5 * eps[1]));
    CHECK(torch::allclose(out.values[2], eps[2]));
}

TEST_CASE("Monte Carlo variance of z_tau at tau = 0.5") {
    // For fixed z, Var(z_tau) = sigma_tau^2 elementwise.
    auto g = gen(4);
    const auto s = NoiseSchedule::flow_matching();
    const int n = 20000;
    auto z = Latent{torch::full({n, 1, 1, 1}, 0.7), true};
    auto eps = torch::randn({n, 1, 1, 1}, g);
    auto out = noise_sync_augment(z, torch::full({n}, 0.5), eps, s).values.flatten();
    const double sigma = alpha_sigma(s, 0.5).sigma;
    CHECK(out.var().item<double>() == doctest::Approx(sigma * sigma).epsilon(0.05));
    CHECK(out.mean().item<double>() == doctest::Approx(0.35).epsilon(0.05));
}

TEST_CASE("diffusion training reduces the loss on a fixed batch") {
    auto cfg = micro_train();
    cfg.noise_sync_prob = 0.0;
    cfg.time_sampling = TimeSampling::stratified;
    auto state = init_train_state(micro_config(), cfg);
    auto data = tiny_shapes();
    auto batch = stack_images(data, {0, 1, 2, 3});
    double first = 0, last = 0;
    for (int i = 0; i < 40; ++i) {
        auto r = dito_train_step(state, batch, cfg);
        CHECK(r.code_path == "diffusion");
        CHECK(r.loss_terms == std::vector<std::string>{"diffusion"});
        if (i < 5) first += r.components["diffusion"];
        if (i >= 35) last += r.components["diffusion"];
    }
    CHECK(last < first);
    CHECK(state.step == 40);
    CHECK(state.optimizer.step_count() == 40);
}

TEST_CASE("perceptual variant adds a second loss term") {
    auto cfg = micro_train();
    cfg.perceptual_weight = 0.5;
    auto state = init_train_state(micro_config(), cfg);
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    auto r = dito_lpips_train_step(state, batch, cfg);
    CHECK(r.code_path == "diffusion+perceptual");
    CHECK(r.loss_terms.size() == 2);
    CHECK(r.components.at("perceptual") > 0.0);
    auto plain = micro_train();
    plain.perceptual_weight = 0.0;
    CHECK_THROWS_AS(dito_lpips_train_step(state, batch, plain), ConfigError);
}

TEST_CASE("frozen encoder stays bit-identical") {
    auto cfg = micro_train();
    cfg.freeze_encoder = true;
    auto state = init_train_state(micro_config(), cfg);
    auto before = named_parameters(*state.model.encoder, "");
    for (auto& [n, p] : before) p = p.clone();
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    for (int i = 0; i < 3; ++i) dito_train_step(state, batch, cfg);
    CHECK(same_tensors(before, named_parameters(*state.model.encoder, "")));
}

TEST_CASE("non-finite input aborts with a diagnostic") {
    auto cfg = micro_train();
    auto state = init_train_state(micro_config(), cfg);
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    batch[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    try {
        dito_train_step(state, batch, cfg);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("t = ") != std::string::npos);
    }
}

TEST_CASE("adaptive weight is the ratio of gradient norms at the last layer") {
    auto w = torch::ones({2}, torch::requires_grad());
    auto a = torch::tensor({3.0f, 4.0f});
    auto b = torch::tensor({0.6f, 0.8f});
    bool clamped = true;
    double got = adaptive_gan_weight((a * w).sum(), (b * w).sum(), w, &clamped);
    CHECK(got == doctest::Approx(5.0 / (1.0 + 1e-4)));
    CHECK_FALSE(clamped);
    auto zero = torch::zeros({2});
    got = adaptive_gan_weight((a * w).sum(), (zero * w).sum(), w, &clamped);
    CHECK(got == 1e4);
    CHECK(clamped);
}

TEST_CASE("glpto step warms up before enabling the adversarial term") {
    auto mc = micro_config();
    mc.kind = TokenizerKind::glpto;
    auto cfg = micro_train();
    cfg.gan_warmup_steps = 2;
    auto state = init_train_state(mc, cfg);
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    auto r1 = train_step(state, batch, cfg);
    CHECK(r1.code_path == "glpto");
    CHECK_FALSE(r1.gan_active);
    train_step(state, batch, cfg);
    auto r3 = train_step(state, batch, cfg);
    CHECK(r3.gan_active);
    CHECK(r3.components.count("adaptive_weight") == 1);
    CHECK(r3.components.at("gan_d") > 0.0);
    TrainConfig dflt;
    dflt.total_steps = 300;
    CHECK(dflt.resolved_gan_warmup() == 50);
}

TEST_CASE("batch indices walk through seeded permutations") {
    std::multiset<int64_t> seen;
    for (int step = 0; step < 4; ++step) {
        for (auto i : batch_indices(12, 3, step, 7, false)) seen.insert(i);
    }
    CHECK(seen.size() == 12);
    CHECK(std::set<int64_t>(seen.begin(), seen.end()).size() == 12);
    CHECK_THROWS_AS(batch_indices(12, 3, 4, 7, false), ConfigError);
    CHECK(batch_indices(12, 3, 4, 7, true).size() == 3);
    CHECK(batch_indices(12, 5, 9, 7, true) == batch_indices(12, 5, 9, 7, true));
    CHECK(batch_indices(12, 5, 1, 7, true) != batch_indices(12, 5, 1, 8, true));
}

TEST_CASE("augmented batches are reproducible") {
    auto data = synth_corpus(SynthKind::shapes, 8, 16, 1);
    auto a = assemble_batch(data, 4, 3, 11, true, true);
    auto b = assemble_batch(data, 4, 3, 11, true, true);
    CHECK(torch::equal(a, b));
    CHECK(a.sizes() == torch::IntArrayRef({4, 3, 16, 16}));
}

TEST_CASE("restoring state arrays continues identically") {
    auto cfg = micro_train();
    auto data = tiny_shapes();
    auto a = init_train_state(micro_config(), cfg);
    fit(a, cfg, data, {});
    auto b = init_train_state(micro_config(), cfg);
    cfg.total_steps = 3;
    fit(b, cfg, data, {});
    auto saved = b.arrays();
    auto c = init_train_state(micro_config(), cfg);
    c.load_arrays(saved);
    CHECK(c.step == 3);
    cfg.total_steps = 6;
    fit(c, cfg, data, {});
    CHECK(same_tensors(a.arrays(), c.arrays()));
}

TEST_CASE("fit writes a log line per step and checkpoints on schedule") {
    auto dir = fs::temp_directory_path() / "dito_fit_test";
    fs::remove_all(dir);
    auto cfg = micro_train();
    cfg.total_steps = 5;
    auto state = init_train_state(micro_config(), cfg);
    FitOptions o;
    o.output_dir = dir;
    o.checkpoint_every = 10;
    cfg.total_steps = 25;
    fit(state, cfg, tiny_shapes(), o);
    std::ifstream log(dir / "train_log.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line);) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("step").get<int>() == ++lines);
        CHECK(j.at("loss").contains("diffusion"));
        CHECK(j.contains("wall_time"));
    }
    CHECK(lines == 25);
    for (int s : {10, 20, 25}) CHECK(fs::exists(checkpoint_path(dir, s)));
    CHECK_FALSE(fs::exists(checkpoint_path(dir, 24)));
    truncate_log(dir / "train_log.jsonl", 2);
    std::ifstream again(dir / "train_log.jsonl");
    lines = 0;
    for (std::string line; std::getline(again, line);) ++lines;
    CHECK(lines == 2);
    fs::remove_all(dir);
}

TEST_CASE("zero total steps still leaves one checkpoint") {
    auto dir = fs::temp_directory_path() / "dito_fit_zero";
    fs::remove_all(dir);
    auto cfg = micro_train();
    cfg.total_steps = 0;
    auto state = init_train_state(micro_config(), cfg);
    FitOptions o;
    o.output_dir = dir;
    fit(state, cfg, tiny_shapes(), o);
    CHECK(fs::exists(checkpoint_path(dir, 0)));
    fs::remove_all(dir);
}

TEST_CASE("training config validation") {
    TrainConfig cfg;
    cfg.noise_sync_prob = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    auto data = tiny_shapes(2);
    cfg = micro_train();
    cfg.repeat = false;
    auto state = init_train_state(micro_config(), cfg);
    CHECK_THROWS_AS(fit(state, cfg, data, {}), ConfigError);
}

TEST_CASE("smoke training on a constant-colour corpus") {
    auto data = constant_color_corpus(256, 16, 1);
    auto cfg = micro_train();
    cfg.batch_size = 8;
    cfg.total_steps = 200;
    auto state = init_train_state(micro_config(), cfg);
    std::vector<double> losses;
    FitOptions o;
    o.on_step = [&](const StepRecord& r) { losses.push_back(r.components.at("diffusion")); };
    fit(state, cfg, data, o);
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) head += losses[i], tail += losses[losses.size() - 1 - i];
    CHECK(tail < head);
}

TEST_CASE("glpto smoke training lowers L1 on a constant-colour corpus") {
    auto data = constant_color_corpus(256, 16, 2);
    auto mc = micro_config();
    mc.kind = TokenizerKind::glpto;
    auto cfg = micro_train();
    cfg.batch_size = 8;
    cfg.total_steps = 500;
    auto state = init_train_state(mc, cfg);
    std::vector<double> l1;
    FitOptions o;
    o.on_step = [&](const StepRecord& r) {
        l1.push_back(r.components.at("l1"));
        if (!r.gan_active) CHECK(std::find(r.loss_terms.begin(), r.loss_terms.end(), "gan_g") == r.loss_terms.end());
    };
    fit(state, cfg, data, o);
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) head += l1[i], tail += l1[l1.size() - 1 - i];
    CHECK(tail < head);
}

TEST_CASE("same seed gives a bit-identical loss record") {
    auto cfg = micro_train();
    auto data = tiny_shapes();
    auto run = [&] {
        auto state = init_train_state(micro_config(), cfg);
        std::vector<double> out;
        FitOptions o;
        o.on_step = [&](const StepRecord& r) { out.push_back(r.components.at("diffusion")); };
        fit(state, cfg, data, o);
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("a zero perceptual weight reproduces the plain step exactly") {
    auto plain = micro_train();
    auto a = init_train_state(micro_config(), plain);
    auto b = init_train_state(micro_config(), plain);
    b.perceptual = make_perceptual_net();
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    auto ra = dito_train_step(a, batch, plain);
    auto rb = dito_train_step(b, batch, plain);
    CHECK(ra.components.at("diffusion") == rb.components.at("diffusion"));
    CHECK(same_tensors(a.arrays(), b.arrays()));
}

TEST_CASE("perceptual distance at the clean end is near zero") {
    auto net = make_perceptual_net();
    auto x = stack_images(tiny_shapes(), {0, 1});
    CHECK(net->perceptual_distance(x, x).item<double>() == 0.0);
    auto eps = torch::randn(x.sizes());
    const auto s = NoiseSchedule::flow_matching();
    auto xt = add_noise(x, eps, s, 0.0);
    auto xbar = to_sample_prediction(regression_target(PredictionType::v_prediction, x, eps, s, 0.0), xt, s, 0.0,
                                     PredictionType::v_prediction);
    CHECK(net->perceptual_distance(xbar, x).item<double>() < 1e-6);
}

TEST_CASE("the diffusion loss reaches the encoder through z") {
    auto cfg = micro_train();
    auto state = init_train_state(micro_config(), cfg);
    auto batch = stack_images(tiny_shapes(), {0, 1, 2, 3});
    auto z = state.model.encode(batch);
    auto x_t = add_noise(batch, torch::randn(batch.sizes()), NoiseSchedule::flow_matching(), 0.5);
    auto loss = l2_loss(state.model.decoder->forward(x_t, 0.5, z), torch::zeros_like(batch));
    loss.backward();
    double norm = 0;
    for (auto& p : state.model.encoder->parameters()) {
        if (p.grad().defined()) norm += p.grad().pow(2).sum().item<double>();
    }
    CHECK(norm > 0.0);
}

TEST_CASE("disabled noise sync leaves times unconstrained") {
    auto g = gen(9);
    auto d = sample_training_times(4096, 0.0, TimeSampling::uniform, g);
    CHECK_FALSE(d.synced.any().item<bool>());
    CHECK(d.t.min().item<double>() < 0.01);
    CHECK(d.t.max().item<double>() > 0.99);
}
