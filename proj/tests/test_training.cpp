#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mft/errors.hpp"
#include "mft/model.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/scene.hpp"
#include "mft/train.hpp"

using mft::AdamState;
using mft::Mode;
using mft::ModelConfig;
using mft::PatchBatch;
using mft::Rng;
using mft::Tape;
using mft::Tensor;
using mft::TensorKind;
using mft::TrainConfig;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("mft_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.bands = 9;
    cfg.aux_channels = 1;
    cfg.patch = 3;
    cfg.tokens = 1;
    cfg.embed = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.classes = 2;
    cfg.dropout_rate = 0.1;
    return cfg;
}

PatchBatch toy_batch(const ModelConfig& cfg, int count, std::uint64_t seed) {
    Rng rng(seed);
    const int k = cfg.patch;
    std::vector<float> hsi(static_cast<std::size_t>(count) * k * k * cfg.bands);
    std::vector<float> aux(static_cast<std::size_t>(count) * k * k * cfg.aux_channels);
    PatchBatch pb;
    pb.labels.resize(static_cast<std::size_t>(count));
    for (int p = 0; p < count; ++p) {
        const int lab = p % cfg.classes;
        pb.labels[static_cast<std::size_t>(p)] = lab;
        // class-dependent offset so the batch is actually separable
        const double shift = 0.6 * lab;
        for (int e = 0; e < k * k * cfg.bands; ++e)
            hsi[static_cast<std::size_t>(p) * k * k * cfg.bands + e] =
                static_cast<float>(rng.uniform(0.0, 1.0) + shift);
        for (int e = 0; e < k * k * cfg.aux_channels; ++e)
            aux[static_cast<std::size_t>(p) * k * k * cfg.aux_channels + e] =
                static_cast<float>(rng.uniform(0.0, 1.0) + shift);
    }
    pb.hsi = Tensor::from_data({count, k, k, cfg.bands}, hsi);
    pb.aux = Tensor::from_data({count, k, k, cfg.aux_channels}, aux);
    return pb;
}

void zero_params(mft::MftParamsT<float>& params) {
    mft::for_each_tensor<float>(params, [](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        auto d = t.data();
        std::fill(d.begin(), d.end(), 0.0f);
    });
}

void set_all_grads(mft::MftParamsT<float>& params, float g) {
    mft::for_each_tensor<float>(params, [&](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        auto& gb = t.grad_buffer();
        std::fill(gb.begin(), gb.end(), g);
    });
}

std::map<std::string, std::vector<float>> snapshot(mft::MftParamsT<float>& params) {
    std::map<std::string, std::vector<float>> out;
    mft::for_each_tensor<float>(params, [&](const std::string& name, Tensor& t, TensorKind) {
        out[name].assign(t.data().begin(), t.data().end());
    });
    return out;
}

double frozen_batch_loss(mft::MftParamsT<float>& params, const PatchBatch& pb) {
    std::vector<int> order(pb.count());
    std::iota(order.begin(), order.end(), 0);
    auto mb = mft::gather_batch(pb, order, 0, pb.count());
    Tensor logits = mft::mft_forward(params, mb.x_h, mb.x_l, Mode::gradcheck(), nullptr);
    Tensor loss = mft::cross_entropy_mean(logits, mb.labels);
    return static_cast<double>(loss.item());
}

} // namespace

// ---------------------------------------------------------------------------
// cross-entropy

TEST_CASE("uniform logits cost the log of the class count") {
    Tensor logits = Tensor::from_data({2, 4}, std::vector<float>(8, 0.37f));
    Tensor loss = mft::cross_entropy_mean(logits, {1, 3});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("a confident correct prediction costs almost nothing") {
    std::vector<float> z(6, 0.0f);
    z[0 * 3 + 2] = 20.0f;
    z[1 * 3 + 0] = 20.0f;
    Tensor loss = mft::cross_entropy_mean(Tensor::from_data({2, 3}, z), {2, 0});
    CHECK(loss.item() < 1e-3);
    CHECK(loss.item() >= 0.0f);
}

TEST_CASE("cross-entropy matches a double-precision recomputation") {
    Rng rng(77);
    std::vector<float> z(15);
    for (float& v : z) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    const std::vector<int> labels = {0, 3, 4};
    Tensor loss = mft::cross_entropy_mean(Tensor::from_data({3, 5}, z), labels);

    double want = 0.0;
    for (int i = 0; i < 3; ++i) {
        double mx = z[static_cast<std::size_t>(i) * 5];
        for (int c = 1; c < 5; ++c) mx = std::max(mx, static_cast<double>(z[static_cast<std::size_t>(i) * 5 + c]));
        double denom = 0.0;
        for (int c = 0; c < 5; ++c) denom += std::exp(static_cast<double>(z[static_cast<std::size_t>(i) * 5 + c]) - mx);
        want += std::log(denom) - (static_cast<double>(z[static_cast<std::size_t>(i) * 5 + labels[static_cast<std::size_t>(i)]]) - mx);
    }
    want /= 3.0;
    CHECK(std::abs(static_cast<double>(loss.item()) - want) < 1e-6);
}

TEST_CASE("cross-entropy rejects malformed label sets") {
    Tensor logits = Tensor::from_data({2, 3}, std::vector<float>(6, 0.0f));
    CHECK_THROWS_AS(mft::cross_entropy_mean(logits, {0, 3}), mft::DataError);
    CHECK_THROWS_AS(mft::cross_entropy_mean(logits, {0, -1}), mft::DataError);
    CHECK_THROWS_AS(mft::cross_entropy_mean(logits, {0}), mft::ShapeError);
    Tensor cube = Tensor::from_data({1, 2, 3}, std::vector<float>(6, 0.0f));
    CHECK_THROWS_AS(mft::cross_entropy_mean(cube, {0}), mft::ShapeError);
}

// ---------------------------------------------------------------------------
// optimizer

TEST_CASE("the first update from a unit gradient moves by the learning rate") {
    auto params = mft::init_params<float>(toy_config(), 1);
    zero_params(params);
    AdamState state = mft::init_adam_state(params);
    CHECK(state.t == 0);
    for (const Tensor& m : state.m)
        for (float v : m.data()) CHECK(v == 0.0f);

    set_all_grads(params, 1.0f);
    TrainConfig tc;
    tc.weight_decay = 0.0;
    mft::adam_step(params, state, 5e-4, tc);
    CHECK(state.t == 1);

    mft::for_each_tensor<float>(params, [&](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        for (float v : t.data()) CHECK(std::abs(static_cast<double>(v) + 5e-4) < 1e-9);
    });
}

TEST_CASE("a zero gradient with zero weight decay is a fixed point") {
    auto params = mft::init_params<float>(toy_config(), 2);
    auto before = snapshot(params);
    AdamState state = mft::init_adam_state(params);
    set_all_grads(params, 0.0f);
    TrainConfig tc;
    tc.weight_decay = 0.0;
    mft::adam_step(params, state, 5e-4, tc);
    CHECK(snapshot(params) == before);
}

TEST_CASE("two constant-gradient steps follow the hand recurrence") {
    auto params = mft::init_params<float>(toy_config(), 3);
    zero_params(params);
    AdamState state = mft::init_adam_state(params);
    set_all_grads(params, 1.0f);
    TrainConfig tc;
    tc.weight_decay = 0.0;
    const double lr = 5e-4;
    mft::adam_step(params, state, lr, tc);
    mft::adam_step(params, state, lr, tc);

    // scalar replay with the same float-width moment storage
    float theta = 0.0f, md = 0.0f, vd = 0.0f;
    for (int t = 1; t <= 2; ++t) {
        md = static_cast<float>(0.9 * static_cast<double>(md) + 0.1);
        vd = static_cast<float>(0.999 * static_cast<double>(vd) + 0.001);
        const double c1 = 1.0 - std::pow(0.9, t);
        const double c2 = 1.0 - std::pow(0.999, t);
        theta = static_cast<float>(static_cast<double>(theta) -
                                   lr * (static_cast<double>(md) / c1) /
                                       (std::sqrt(static_cast<double>(vd) / c2) + 1e-8));
    }
    mft::for_each_tensor<float>(params, [&](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        for (float v : t.data()) CHECK(std::abs(static_cast<double>(v) - static_cast<double>(theta)) < 1e-9);
    });
}

TEST_CASE("weight decay pulls parameters toward zero even without a gradient") {
    auto params = mft::init_params<float>(toy_config(), 4);
    mft::for_each_tensor<float>(params, [](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        auto d = t.data();
        std::fill(d.begin(), d.end(), 1.0f);
    });
    AdamState state = mft::init_adam_state(params);
    set_all_grads(params, 0.0f);
    TrainConfig tc;
    tc.weight_decay = 1e-2;
    mft::adam_step(params, state, 1e-3, tc);
    mft::for_each_tensor<float>(params, [&](const std::string&, Tensor& t, TensorKind kind) {
        if (kind != TensorKind::Param) return;
        for (float v : t.data()) {
            CHECK(v < 1.0f);
            CHECK(v > 0.99f);
        }
    });
}

TEST_CASE("a non-finite gradient stops the run and names the tensor") {
    auto params = mft::init_params<float>(toy_config(), 5);
    AdamState state = mft::init_adam_state(params);
    set_all_grads(params, 1.0f);
    params.extractor.conv3d_weight.grad_buffer()[0] = std::numeric_limits<float>::infinity();
    TrainConfig tc;
    try {
        mft::adam_step(params, state, 5e-4, tc);
        FAIL("expected a divergence error");
    } catch (const mft::DivergenceError& e) {
        CHECK(std::string(e.what()).find("extractor.conv3d.weight") != std::string::npos);
        CHECK(e.exit_code() == 3);
    }
}

TEST_CASE("a foreign optimizer state is rejected") {
    auto params = mft::init_params<float>(toy_config(), 6);
    AdamState state = mft::init_adam_state(params);
    state.m.pop_back();
    set_all_grads(params, 1.0f);
    TrainConfig tc;
    CHECK_THROWS_AS(mft::adam_step(params, state, 5e-4, tc), mft::ConfigError);
}

// ---------------------------------------------------------------------------
// schedule and config

TEST_CASE("the learning rate decays in steps") {
    TrainConfig tc; // lr 5e-4, step 50, gamma 0.9
    CHECK(mft::lr_at(0, tc) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(mft::lr_at(49, tc) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(mft::lr_at(50, tc) == doctest::Approx(4.5e-4).epsilon(1e-12));
    CHECK(mft::lr_at(99, tc) == doctest::Approx(4.5e-4).epsilon(1e-12));
    CHECK(mft::lr_at(100, tc) == doctest::Approx(4.05e-4).epsilon(1e-12));
    for (int e = 0; e < 200; ++e)
        CHECK(mft::lr_at(e, tc) == mft::lr_at(e - e % 50, tc)); // constant within a step
    CHECK_THROWS_AS(mft::lr_at(-1, tc), mft::ConfigError);
}

TEST_CASE("train configuration validation catches each bad field") {
    auto broken = [](auto&& mutate) {
        TrainConfig tc;
        mutate(tc);
        return tc;
    };
    CHECK_NOTHROW(TrainConfig{}.validate());
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.lr = 0.0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.weight_decay = -1e-3; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.batch_train = 0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.batch_eval = 0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.epochs = -1; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.step_size = 0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.gamma = 0.0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.gamma = 1.1; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.beta1 = 1.0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.beta2 = -0.1; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.adam_eps = 0.0; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.save_every = -1; }).validate(), mft::ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& t) { t.eval_every = -2; }).validate(), mft::ConfigError);
}

TEST_CASE("configurations survive the json round trip") {
    TrainConfig tc;
    tc.lr = 1.25e-3;
    tc.weight_decay = 7e-3;
    tc.batch_train = 17;
    tc.batch_eval = 33;
    tc.epochs = 91;
    tc.step_size = 13;
    tc.gamma = 0.75;
    tc.seed = 987654321;
    tc.save_every = 5;
    tc.eval_every = 3;
    TrainConfig rt = mft::train_config_from_json(mft::train_config_to_json(tc));
    CHECK(rt.lr == tc.lr);
    CHECK(rt.weight_decay == tc.weight_decay);
    CHECK(rt.batch_train == tc.batch_train);
    CHECK(rt.batch_eval == tc.batch_eval);
    CHECK(rt.epochs == tc.epochs);
    CHECK(rt.step_size == tc.step_size);
    CHECK(rt.gamma == tc.gamma);
    CHECK(rt.seed == tc.seed);
    CHECK(rt.beta1 == tc.beta1);
    CHECK(rt.beta2 == tc.beta2);
    CHECK(rt.adam_eps == tc.adam_eps);
    CHECK(rt.save_every == tc.save_every);
    CHECK(rt.eval_every == tc.eval_every);

    ModelConfig mc = toy_config();
    mc.variant = mft::TokenizerVariant::Pixel;
    ModelConfig mrt = mft::model_config_from_json(mft::model_config_to_json(mc));
    CHECK(mrt.bands == mc.bands);
    CHECK(mrt.aux_channels == mc.aux_channels);
    CHECK(mrt.patch == mc.patch);
    CHECK(mrt.tokens == mc.tokens);
    CHECK(mrt.embed == mc.embed);
    CHECK(mrt.heads == mc.heads);
    CHECK(mrt.depth == mc.depth);
    CHECK(mrt.classes == mc.classes);
    CHECK(mrt.variant == mc.variant);
    CHECK(mrt.dropout_rate == mc.dropout_rate);
}

// ---------------------------------------------------------------------------
// learning behavior

TEST_CASE("one careful step on a frozen batch lowers its loss") {
    const ModelConfig cfg = toy_config();
    const PatchBatch pb = toy_batch(cfg, 8, 50);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto params = mft::init_params<float>(cfg, seed);
        mft::set_params_requires_grad(params, true);
        const double before = frozen_batch_loss(params, pb);

        std::vector<int> order(pb.count());
        std::iota(order.begin(), order.end(), 0);
        auto mb = mft::gather_batch(pb, order, 0, pb.count());
        {
            Tape tape;
            Tensor logits = mft::mft_forward(params, mb.x_h, mb.x_l, Mode::gradcheck(), nullptr);
            Tensor loss = mft::cross_entropy_mean(logits, mb.labels);
            tape.backward(loss);
        }
        AdamState state = mft::init_adam_state(params);
        TrainConfig tc;
        mft::adam_step(params, state, 1e-5, tc);

        const double after = frozen_batch_loss(params, pb);
        CHECK(after < before);
    }
}

TEST_CASE("short training runs drive the loss downward") {
    const ModelConfig cfg = toy_config();
    const PatchBatch pb = toy_batch(cfg, 32, 51);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        auto params = mft::init_params<float>(cfg, seed);
        AdamState state = mft::init_adam_state(params);
        TrainConfig tc;
        tc.epochs = 5;
        tc.batch_train = 16;
        tc.seed = seed;
        std::vector<double> losses;
        mft::train_loop(params, state, 0, tc, pb, nullptr,
                        [&](const mft::TrainProgress& p) { losses.push_back(p.train_loss); });
        REQUIRE(losses.size() == 5);
        // dropout noise allows small bumps; the net trend must still be a
        // clear drop
        CHECK(losses.back() < 0.9 * losses.front());
    }
}

TEST_CASE("zero requested epochs leave the initialization untouched") {
    auto params = mft::init_params<float>(toy_config(), 8);
    auto before = snapshot(params);
    AdamState state = mft::init_adam_state(params);
    TrainConfig tc;
    tc.epochs = 0;
    const PatchBatch pb = toy_batch(toy_config(), 4, 52);
    int epochs_seen = 0;
    mft::train_loop(params, state, 0, tc, pb, nullptr,
                    [&](const mft::TrainProgress&) { ++epochs_seen; });
    CHECK(epochs_seen == 0);
    CHECK(state.t == 0);
    CHECK(snapshot(params) == before);
}

TEST_CASE("periodic hooks fire on the configured cadence") {
    auto params = mft::init_params<float>(toy_config(), 9);
    AdamState state = mft::init_adam_state(params);
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_train = 8;
    tc.save_every = 2;
    tc.eval_every = 3;
    const PatchBatch pb = toy_batch(toy_config(), 8, 53);
    std::vector<int> checkpoints;
    std::vector<int> evals;
    mft::train_loop(params, state, 0, tc, pb, &pb,
                    [&](const mft::TrainProgress& p) {
                        if (p.has_eval) evals.push_back(p.epoch);
                    },
                    [&](int done) { checkpoints.push_back(done); });
    CHECK(checkpoints == std::vector<int>{2, 4}); // the final epoch is the caller's save
    CHECK(evals == std::vector<int>{2, 5});
}

TEST_CASE("training refuses an empty set and a bad start epoch") {
    auto params = mft::init_params<float>(toy_config(), 10);
    AdamState state = mft::init_adam_state(params);
    TrainConfig tc;
    tc.epochs = 2;
    PatchBatch empty;
    empty.hsi = Tensor::zeros({1, 3, 3, 9});
    empty.aux = Tensor::zeros({1, 3, 3, 1});
    CHECK_THROWS_AS(mft::train_loop(params, state, 0, tc, empty, nullptr, nullptr), mft::DataError);
    const PatchBatch pb = toy_batch(toy_config(), 4, 54);
    CHECK_THROWS_AS(mft::train_loop(params, state, 3, tc, pb, nullptr, nullptr), mft::ConfigError);
}

// ---------------------------------------------------------------------------
// evaluation

TEST_CASE("an all-zero model predicts the first class everywhere") {
    const ModelConfig cfg = toy_config();
    auto params = mft::init_params<float>(cfg, 11);
    zero_params(params);
    PatchBatch pb = toy_batch(cfg, 5, 55);
    pb.labels = {0, 0, 0, 1, 1};

    auto preds = mft::predict(params, pb, 500);
    CHECK(preds == std::vector<int>(5, 0));

    auto r = mft::evaluate(params, pb, 500);
    CHECK(r.oa == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(r.samples == 5);
    CHECK(r.per_class[0] == doctest::Approx(1.0));
    CHECK(r.per_class[1] == doctest::Approx(0.0));
    CHECK(r.kappa == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("evaluation does not depend on the batch size") {
    const ModelConfig cfg = toy_config();
    auto params = mft::init_params<float>(cfg, 12);
    const PatchBatch pb = toy_batch(cfg, 7, 56);
    auto big = mft::evaluate(params, pb, 500);
    auto tiny = mft::evaluate(params, pb, 2);
    CHECK(big.oa == tiny.oa);
    CHECK(big.aa == tiny.aa);
    CHECK(big.kappa == tiny.kappa);
    for (int t = 0; t < 2; ++t)
        for (int p = 0; p < 2; ++p) CHECK(big.confusion.at(t, p) == tiny.confusion.at(t, p));
}

TEST_CASE("evaluating the same parameters twice gives the same report") {
    const ModelConfig cfg = toy_config();
    auto params = mft::init_params<float>(cfg, 13);
    const PatchBatch pb = toy_batch(cfg, 9, 57);
    auto a = mft::evaluate(params, pb, 4);
    auto b = mft::evaluate(params, pb, 4);
    CHECK(a.oa == b.oa);
    CHECK(a.aa == b.aa);
    CHECK(a.kappa == b.kappa);

    PatchBatch none;
    none.hsi = Tensor::zeros({1, 3, 3, 9});
    none.aux = Tensor::zeros({1, 3, 3, 1});
    CHECK_THROWS_AS(mft::evaluate(params, none, 4), mft::DataError);
    CHECK_THROWS_AS(mft::evaluate(params, pb, 0), mft::ConfigError);
}

// ---------------------------------------------------------------------------
// checkpoints

TEST_CASE("a checkpoint restores every tensor bit for bit") {
    const ModelConfig cfg = toy_config();
    auto params = mft::init_params<float>(cfg, 14);
    AdamState state = mft::init_adam_state(params);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_train = 8;
    tc.seed = 3;
    const PatchBatch pb = toy_batch(cfg, 8, 58);
    mft::train_loop(params, state, 0, tc, pb, nullptr, nullptr);

    fs::path dir = fresh_dir("ckpt_roundtrip");
    nlohmann::json data_cfg = {{"scene", "unit-test"}, {"split", "none"}};
    mft::save_checkpoint(dir.string(), params, state, 2, tc, data_cfg);
    auto bundle = mft::load_checkpoint(dir.string());

    CHECK(bundle.epoch == 2);
    CHECK(bundle.train_config.seed == tc.seed);
    CHECK(bundle.train_config.lr == tc.lr);
    CHECK(bundle.data_config.at("scene").get<std::string>() == "unit-test");
    CHECK(bundle.params.config.bands == cfg.bands);
    CHECK(bundle.params.config.embed == cfg.embed);
    CHECK(snapshot(bundle.params) == snapshot(params));
    CHECK(bundle.state.t == state.t);
    REQUIRE(bundle.state.m.size() == state.m.size());
    for (std::size_t i = 0; i < state.m.size(); ++i) {
        const auto ma = bundle.state.m[i].data();
        const auto mb = state.m[i].data();
        CHECK(std::equal(ma.begin(), ma.end(), mb.begin(), mb.end()));
        const auto va = bundle.state.v[i].data();
        const auto vb = state.v[i].data();
        CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    }
    fs::remove_all(dir);
}

TEST_CASE("a damaged checkpoint payload is rejected with byte counts") {
    const ModelConfig cfg = toy_config();
    auto params = mft::init_params<float>(cfg, 15);
    AdamState state = mft::init_adam_state(params);
    fs::path dir = fresh_dir("ckpt_damaged");
    mft::save_checkpoint(dir.string(), params, state, 0, TrainConfig{}, nlohmann::json::object());
    fs::resize_file(dir / "weights.f32", 10);
    try {
        mft::load_checkpoint(dir.string());
        FAIL("expected a payload error");
    } catch (const mft::DataError& e) {
        CHECK(std::string(e.what()).find("10") != std::string::npos);
    }
    CHECK_THROWS_AS(mft::load_checkpoint((dir / "missing").string()), mft::DataError);
    fs::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run") {
    const ModelConfig cfg = toy_config();
    const PatchBatch pb = toy_batch(cfg, 24, 59);
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_train = 8;
    tc.seed = 17;

    auto straight = mft::init_params<float>(cfg, 16);
    AdamState straight_state = mft::init_adam_state(straight);
    mft::train_loop(straight, straight_state, 0, tc, pb, nullptr, nullptr);

    auto split = mft::init_params<float>(cfg, 16);
    AdamState split_state = mft::init_adam_state(split);
    TrainConfig half = tc;
    half.epochs = 3;
    mft::train_loop(split, split_state, 0, half, pb, nullptr, nullptr);

    fs::path dir = fresh_dir("ckpt_resume");
    mft::save_checkpoint(dir.string(), split, split_state, 3, tc, nlohmann::json::object());
    auto bundle = mft::load_checkpoint(dir.string());
    mft::train_loop(bundle.params, bundle.state, bundle.epoch, tc, pb, nullptr, nullptr);

    CHECK(snapshot(bundle.params) == snapshot(straight));
    CHECK(bundle.state.t == straight_state.t);
    for (std::size_t i = 0; i < straight_state.m.size(); ++i) {
        const auto ma = bundle.state.m[i].data();
        const auto mb = straight_state.m[i].data();
        CHECK(std::equal(ma.begin(), ma.end(), mb.begin(), mb.end()));
    }
    fs::remove_all(dir);
}
