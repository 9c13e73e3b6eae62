// Command line front end: synthesize scenes, train, evaluate, gradient-check,
// and replay recorded runs. Exit codes: 0 ok, 1 usage, 2 data or config,
// 3 divergence, 4 verification failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "mft/errors.hpp"
#include "mft/gradcheck.hpp"
#include "mft/metrics.hpp"
#include "mft/model.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/scene.hpp"
#include "mft/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::vector<std::string>& args);

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("MFT_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1)
            std::cerr << "warning: ignoring MFT_THREADS='" << env << "'\n";
        else
            omp_set_num_threads(static_cast<int>(v));
    }
#endif
}

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw mft::DataError("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::vector<std::string>& argv, const std::vector<std::string>& outputs) {
    json m;
    m["command"] = command;
    m["argv"] = argv;
    m["formats"] = {{"scene", "MFTSCN1"}, {"checkpoint", "MFTCKPT1"}};
    m["outputs"] = outputs;
    write_json_file(dir / "manifest.json", m);
}

std::pair<int, int> parse_size(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= s.size())
        throw mft::ConfigError("size must look like <rows>x<cols>, got '" + s + "'");
    try {
        const int rows = std::stoi(s.substr(0, x));
        const int cols = std::stoi(s.substr(x + 1));
        if (rows < 1 || cols < 1) throw mft::ConfigError("size extents must be positive, got '" + s + "'");
        return {rows, cols};
    } catch (const std::logic_error&) {
        throw mft::ConfigError("size must look like <rows>x<cols>, got '" + s + "'");
    }
}

struct SplitSpec {
    bool disjoint = false;
    double fraction = 0.0;
};

SplitSpec parse_split(const std::string& s) {
    if (s == "disjoint") return {true, 0.0};
    if (s.rfind("random:", 0) == 0) {
        double f = 0.0;
        try {
            f = std::stod(s.substr(7));
        } catch (const std::logic_error&) {
            throw mft::ConfigError("bad split fraction in '" + s + "'");
        }
        if (!(f > 0.0 && f < 1.0))
            throw mft::ConfigError("split fraction must be in (0,1), got '" + s + "'");
        return {false, f};
    }
    throw mft::ConfigError("unknown split '" + s + "' (expected disjoint or random:<frac>)");
}

std::pair<std::vector<mft::Coord>, std::vector<mft::Coord>>
make_splits(const mft::SceneBundle& scene, const SplitSpec& spec, std::uint64_t split_seed) {
    if (spec.disjoint) {
        if (!scene.has_masks)
            throw mft::DataError("scene carries no train/test masks; use --split random:<frac>");
        return mft::split_from_masks(scene);
    }
    const mft::Rng rng = mft::Rng(split_seed).fork(mft::streams::kSplit);
    return mft::split_random(scene, spec.fraction, rng);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    return {m, std::sqrt(s2 / static_cast<double>(v.size() - 1))};
}

// ---- synth ----

struct SynthOpts {
    int classes = 4;
    std::string size = "64x64";
    int bands = 16;
    int aux_channels = 1;
    std::uint64_t seed = 0;
    bool aux_noise = false;
    std::string modality = "lidar";
    std::string out;
};

void cmd_synth(const SynthOpts& o, const std::vector<std::string>& args) {
    const auto [rows, cols] = parse_size(o.size);
    const mft::SceneBundle scene =
        mft::synth_scene(o.classes, rows, cols, o.bands, o.aux_channels, o.seed, !o.aux_noise, o.modality);
    mft::save_scene(scene, o.out);

    std::vector<long long> px(static_cast<std::size_t>(o.classes) + 1, 0);
    std::vector<long long> tr(px.size(), 0), te(px.size(), 0);
    for (std::size_t i = 0; i < scene.labels.size(); ++i) {
        px[scene.labels[i]] += 1;
        if (scene.labels[i] != 0) {
            tr[scene.labels[i]] += scene.train_mask[i];
            te[scene.labels[i]] += scene.test_mask[i];
        }
    }
    std::cout << "scene " << rows << "x" << cols << ", " << o.bands << " bands, " << o.aux_channels
              << " aux channel(s), modality " << scene.modality << "\n";
    std::cout << "background: " << px[0] << " px\n";
    for (int c = 1; c <= o.classes; ++c)
        std::cout << "class " << c << ": " << px[static_cast<std::size_t>(c)] << " px (train "
                  << tr[static_cast<std::size_t>(c)] << ", test " << te[static_cast<std::size_t>(c)] << ")\n";

    write_manifest(o.out, "synth", args,
                   {"header.json", "hsi.f32", "aux.f32", "labels.u16", "train_mask.u8", "test_mask.u8"});
}

// ---- train ----

struct TrainOpts {
    std::string scene;
    std::string split = "random:0.05";
    std::string tokenizer = "channel";
    int tokens = 4, heads = 8, depth = 1, patch = 11;
    int epochs = 200;
    double lr = 5e-4, wd = 5e-3;
    std::uint64_t seed = 0;
    int repeats = 1;
    bool resplit = false;
    int save_every = 0, eval_every = 0;
    std::string resume;
    std::string out;
};

struct RepeatResult {
    bool has_eval = false;
    double oa = 0.0, aa = 0.0, kappa = 0.0;
};

RepeatResult run_single_training(const mft::SceneBundle& norm, const TrainOpts& o,
                                 const mft::ModelConfig& mc, std::uint64_t seed_r,
                                 std::uint64_t split_seed, const fs::path& outdir) {
    fs::create_directories(outdir);
    const SplitSpec spec = parse_split(o.split);
    auto [train_coords, test_coords] = make_splits(norm, spec, split_seed);
    if (train_coords.empty()) throw mft::DataError("training split is empty");

    mft::TrainConfig tc;
    tc.lr = o.lr;
    tc.weight_decay = o.wd;
    tc.epochs = o.epochs;
    tc.seed = seed_r;
    tc.save_every = o.save_every;
    tc.eval_every = o.eval_every;

    mft::MftParamsT<float> params;
    mft::AdamState state;
    int start_epoch = 0;
    int patch = o.patch;
    if (!o.resume.empty()) {
        mft::CheckpointBundle bundle = mft::load_checkpoint(o.resume);
        params = std::move(bundle.params);
        state = std::move(bundle.state);
        start_epoch = bundle.epoch;
        tc = bundle.train_config;
        tc.epochs = o.epochs;
        tc.save_every = o.save_every;
        tc.eval_every = o.eval_every;
        patch = params.config.patch;
        if (params.config.bands != norm.bands || params.config.aux_channels != norm.aux_channels ||
            params.config.classes != norm.classes)
            throw mft::ConfigError("checkpoint architecture does not match the scene (bands " +
                                   std::to_string(params.config.bands) + "/" + std::to_string(norm.bands) +
                                   ", aux " + std::to_string(params.config.aux_channels) + "/" +
                                   std::to_string(norm.aux_channels) + ", classes " +
                                   std::to_string(params.config.classes) + "/" +
                                   std::to_string(norm.classes) + ")");
    } else {
        params = mft::init_params<float>(mc, seed_r);
        state = mft::init_adam_state(params);
    }

    const mft::PatchBatch train_set = mft::extract_patches(norm, train_coords, patch);
    mft::PatchBatch test_set;
    if (!test_coords.empty()) test_set = mft::extract_patches(norm, test_coords, patch);

    const json data_cfg = {{"scene", o.scene}, {"split", o.split}, {"split_seed", split_seed}};

    std::ofstream log(outdir / "train_log.jsonl", o.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw mft::DataError("cannot write " + (outdir / "train_log.jsonl").string());

    const auto on_epoch = [&](const mft::TrainProgress& pr) {
        json line = {{"epoch", pr.epoch}, {"lr", pr.lr}, {"train_loss", pr.train_loss}};
        if (pr.has_eval) line["eval_oa"] = pr.eval_oa;
        log << line.dump() << "\n";
        log.flush();
        if ((pr.epoch + 1) % 25 == 0 || pr.epoch + 1 == tc.epochs) {
            std::cout << "epoch " << pr.epoch << "  lr " << pr.lr << "  loss " << pr.train_loss;
            if (pr.has_eval) std::cout << "  eval OA " << pr.eval_oa;
            std::cout << "\n";
        }
    };
    const auto on_ckpt = [&](int e) {
        mft::save_checkpoint((outdir / ("checkpoint_e" + std::to_string(e))).string(), params, state,
                             e, tc, data_cfg);
    };

    mft::train_loop(params, state, start_epoch, tc, train_set,
                    test_set.count() ? &test_set : nullptr, on_epoch, on_ckpt);
    mft::save_checkpoint((outdir / "checkpoint").string(), params, state, tc.epochs, tc, data_cfg);

    RepeatResult rr;
    if (test_set.count()) {
        const mft::EvalReport report = mft::evaluate(params, test_set, tc.batch_eval);
        write_json_file(outdir / "eval.json", mft::report_to_json(report));
        rr.has_eval = true;
        rr.oa = report.oa;
        rr.aa = report.aa;
        rr.kappa = report.kappa;
        std::cout << "test OA " << report.oa << "  AA " << report.aa << "  kappa " << report.kappa
                  << "  (" << report.samples << " samples)\n";
    } else {
        std::cerr << "warning: empty test split, final evaluation skipped\n";
    }
    return rr;
}

void cmd_train(const TrainOpts& o, const std::vector<std::string>& args) {
    if (!o.resume.empty() && o.repeats != 1)
        throw mft::ConfigError("--resume cannot be combined with --repeats");

    const mft::SceneBundle scene = mft::load_scene(o.scene);
    const mft::SceneBundle norm = mft::normalize_scene(scene);

    mft::ModelConfig mc;
    mc.bands = norm.bands;
    mc.aux_channels = norm.aux_channels;
    mc.classes = norm.classes;
    mc.patch = o.patch;
    mc.tokens = o.tokens;
    mc.heads = o.heads;
    mc.depth = o.depth;
    mc.variant = mft::tokenizer_variant_from_string(o.tokenizer);
    mc.validate();

    fs::create_directories(o.out);
    std::vector<std::string> outputs;
    std::vector<RepeatResult> results;
    for (int r = 0; r < o.repeats; ++r) {
        const bool single = o.repeats == 1;
        const fs::path sub = single ? fs::path(o.out) : fs::path(o.out) / ("repeat" + std::to_string(r));
        const std::uint64_t seed_r = o.seed + static_cast<std::uint64_t>(r);
        const std::uint64_t split_seed = o.resplit ? seed_r : o.seed;
        if (!single) std::cout << "== repeat " << r << " (seed " << seed_r << ") ==\n";
        results.push_back(run_single_training(norm, o, mc, seed_r, split_seed, sub));
        const std::string prefix = single ? "" : "repeat" + std::to_string(r) + "/";
        outputs.push_back(prefix + "checkpoint");
        outputs.push_back(prefix + "train_log.jsonl");
        if (results.back().has_eval) outputs.push_back(prefix + "eval.json");
    }

    if (o.repeats > 1) {
        std::vector<double> oa, aa, kp;
        for (const auto& rr : results)
            if (rr.has_eval) {
                oa.push_back(rr.oa);
                aa.push_back(rr.aa);
                kp.push_back(rr.kappa);
            }
        const auto [oam, oas] = mean_std(oa);
        const auto [aam, aas] = mean_std(aa);
        const auto [kpm, kps] = mean_std(kp);
        const json summary = {
            {"repeats", o.repeats},
            {"evaluated", oa.size()},
            {"oa", {{"mean", oam}, {"std", oas}, {"values", oa}}},
            {"aa", {{"mean", aam}, {"std", aas}, {"values", aa}}},
            {"kappa", {{"mean", kpm}, {"std", kps}, {"values", kp}}},
        };
        write_json_file(fs::path(o.out) / "summary.json", summary);
        outputs.push_back("summary.json");
        std::cout << "over " << oa.size() << " repeats: OA " << oam << " +/- " << oas << "  AA " << aam
                  << " +/- " << aas << "  kappa " << kpm << " +/- " << kps << "\n";
    }
    write_manifest(o.out, "train", args, outputs);
}

// ---- eval ----

struct EvalOpts {
    std::string checkpoint;
    std::string scene;
    std::string on = "test";
    std::string map;
    bool full = false;
    std::string out = "eval_out";
};

void cmd_eval(const EvalOpts& o, const std::vector<std::string>& args) {
    mft::CheckpointBundle bundle = mft::load_checkpoint(o.checkpoint);
    const mft::ModelConfig& mc = bundle.params.config;

    const mft::SceneBundle scene = mft::load_scene(o.scene);
    const mft::SceneBundle norm = mft::normalize_scene(scene);
    if (norm.bands != mc.bands || norm.aux_channels != mc.aux_channels || norm.classes != mc.classes)
        throw mft::ConfigError(
            "checkpoint architecture does not match the scene (bands " + std::to_string(mc.bands) + "/" +
            std::to_string(norm.bands) + ", aux " + std::to_string(mc.aux_channels) + "/" +
            std::to_string(norm.aux_channels) + ", classes " + std::to_string(mc.classes) + "/" +
            std::to_string(norm.classes) + ")");

    std::string split_spec = bundle.data_config.value("split", std::string());
    const std::uint64_t split_seed = bundle.data_config.value("split_seed", std::uint64_t{0});
    if (split_spec.empty()) {
        if (!norm.has_masks)
            throw mft::DataError("checkpoint records no split and the scene has no masks");
        split_spec = "disjoint";
    }
    auto [train_coords, test_coords] = make_splits(norm, parse_split(split_spec), split_seed);
    const std::vector<mft::Coord>& coords = (o.on == "train") ? train_coords : test_coords;
    if (coords.empty()) throw mft::DataError("selected '" + o.on + "' split is empty");

    fs::create_directories(o.out);
    std::vector<std::string> outputs{"report.json"};

    const mft::PatchBatch set = mft::extract_patches(norm, coords, mc.patch);
    const mft::EvalReport report = mft::evaluate(bundle.params, set, bundle.train_config.batch_eval);
    write_json_file(fs::path(o.out) / "report.json", mft::report_to_json(report));
    std::cout << "split " << o.on << ": OA " << report.oa << "  AA " << report.aa << "  kappa "
              << report.kappa << "  (" << report.samples << " samples)\n";

    if (!o.map.empty()) {
        std::vector<mft::Coord> map_coords;
        for (int i = 0; i < norm.rows; ++i)
            for (int j = 0; j < norm.cols; ++j)
                if (o.full || norm.labels[static_cast<std::size_t>(i) * norm.cols + j] != 0)
                    map_coords.push_back({i, j});
        const mft::PatchBatch map_set = mft::extract_patches(norm, map_coords, mc.patch, true);
        const std::vector<int> preds =
            mft::predict(bundle.params, map_set, bundle.train_config.batch_eval);
        const std::vector<std::uint8_t> bytes = mft::render_map(norm.rows, norm.cols, map_coords, preds);
        std::ofstream mf(o.map, std::ios::binary);
        if (!mf) throw mft::DataError("cannot write " + o.map);
        mf.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        outputs.push_back(o.map);
        std::cout << "map written to " << o.map << " (" << map_coords.size() << " px)\n";
    }
    write_manifest(o.out, "eval", args, outputs);
}

// ---- gradcheck ----

struct GradcheckOpts {
    std::string dims;
    std::string break_module;
    std::string out;
};

using DTensor = mft::TensorT<double>;
using DTape = mft::TapeT<double>;

// Problems expose the loss twice: as a taped tensor for the analytic pass and
// as a plain double for the finite-difference probes.
struct ModuleProblem : mft::FdProblem {
    virtual DTensor loss_tensor() = 0;
    double loss() override { return loss_tensor().item(); }
};

DTensor rand_uniform(std::vector<int> shape, mft::Rng rng, double lo, double hi) {
    return DTensor::uniform(std::move(shape), rng, lo, hi);
}

// Weighted output sum: a fixed random cotangent keeps sign errors from
// cancelling the way a plain sum would.
DTensor weighted_sum(const DTensor& y, const DTensor& cot) { return mft::sum(mft::mul(y, cot)); }

struct ExtractorProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    DTensor x, cot;
    explicit ExtractorProblem(const mft::ModelConfig& mc) : p(mft::init_params<double>(mc, 11)) {
        x = rand_uniform({3, mc.patch, mc.patch, mc.bands}, mft::Rng(101), 0.0, 1.0);
        cot = rand_uniform({3, mc.embed, mc.patch, mc.patch}, mft::Rng(102), -1.0, 1.0);
    }
    std::vector<DTensor> params() override {
        auto& e = p.extractor;
        return {e.conv3d_weight, e.conv3d_bias,     e.bn3d.gamma,      e.bn3d.beta,
                e.het_group_weight, e.het_group_bias, e.het_point_weight, e.het_point_bias,
                e.bn2d.gamma,    e.bn2d.beta};
    }
    static std::vector<std::string> names() {
        return {"conv3d.weight", "conv3d.bias", "bn3d.gamma", "bn3d.beta", "het_group.weight",
                "het_group.bias", "het_point.weight", "het_point.bias", "bn2d.gamma", "bn2d.beta"};
    }
    DTensor loss_tensor() override {
        return weighted_sum(mft::extract_features(x, p.extractor, mft::Mode::gradcheck()), cot);
    }
};

struct HsiTokProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    DTensor feat, cot;
    explicit HsiTokProblem(const mft::ModelConfig& mc) : p(mft::init_params<double>(mc, 12)) {
        feat = rand_uniform({3, mc.embed, mc.patch, mc.patch}, mft::Rng(103), -1.0, 1.0);
        cot = rand_uniform({3, mc.tokens, mc.embed}, mft::Rng(104), -1.0, 1.0);
    }
    std::vector<DTensor> params() override { return {p.hsi_tok.w_a, p.hsi_tok.w_b}; }
    static std::vector<std::string> names() { return {"w_a", "w_b"}; }
    DTensor loss_tensor() override { return weighted_sum(mft::hsi_tokenize(feat, p.hsi_tok), cot); }
};

struct AuxTokProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    DTensor x, cot;
    explicit AuxTokProblem(mft::ModelConfig mc, mft::TokenizerVariant variant) {
        mc.variant = variant;
        p = mft::init_params<double>(mc, 13);
        x = rand_uniform({3, mc.aux_channels, mc.patch, mc.patch}, mft::Rng(105), 0.0, 1.0);
        cot = rand_uniform({3, 1, mc.embed}, mft::Rng(106), -1.0, 1.0);
    }
    std::vector<DTensor> params() override {
        auto& a = p.aux_tok;
        return {a.conv_weight, a.conv_bias, a.bn.gamma, a.bn.beta, a.w_a, a.w_b};
    }
    static std::vector<std::string> names() {
        return {"conv.weight", "conv.bias", "bn.gamma", "bn.beta", "w_a", "w_b"};
    }
    DTensor loss_tensor() override {
        return weighted_sum(mft::aux_tokenize(x, p.aux_tok, mft::Mode::gradcheck()), cot);
    }
};

struct EncoderProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    int heads;
    DTensor seq, cot;
    explicit EncoderProblem(const mft::ModelConfig& mc)
        : p(mft::init_params<double>(mc, 14)), heads(mc.heads) {
        seq = rand_uniform({3, mc.seq_len(), mc.embed}, mft::Rng(107), -1.0, 1.0);
        cot = rand_uniform({3, mc.seq_len(), mc.embed}, mft::Rng(108), -1.0, 1.0);
    }
    std::vector<DTensor> params() override {
        auto& b = p.blocks[0];
        return {b.ln1_gamma, b.ln1_beta, b.w_q, b.w_k, b.w_v, b.w_l,
                b.ln2_gamma, b.ln2_beta, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2};
    }
    static std::vector<std::string> names() {
        return {"ln1.gamma", "ln1.beta", "attention.w_q", "attention.w_k", "attention.w_v",
                "attention.w_l", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};
    }
    DTensor loss_tensor() override {
        return weighted_sum(
            mft::encoder_block(seq, p.blocks[0], heads, 0.0, mft::Mode::gradcheck(), nullptr), cot);
    }
};

struct ClassifierProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    DTensor seq, cot;
    explicit ClassifierProblem(const mft::ModelConfig& mc) : p(mft::init_params<double>(mc, 15)) {
        seq = rand_uniform({3, mc.seq_len(), mc.embed}, mft::Rng(109), -1.0, 1.0);
        cot = rand_uniform({3, mc.classes}, mft::Rng(110), -1.0, 1.0);
    }
    std::vector<DTensor> params() override {
        auto& c = p.classifier;
        return {c.ln_gamma, c.ln_beta, c.head_weight, c.head_bias};
    }
    static std::vector<std::string> names() {
        return {"ln.gamma", "ln.beta", "head.weight", "head.bias"};
    }
    DTensor loss_tensor() override { return weighted_sum(mft::classify(seq, p.classifier), cot); }
};

struct EndToEndProblem : ModuleProblem {
    mft::MftParamsT<double> p;
    DTensor x_h, x_l;
    std::vector<int> labels;
    explicit EndToEndProblem(const mft::ModelConfig& mc) : p(mft::init_params<double>(mc, 16)) {
        const int n = 3;
        x_h = rand_uniform({n, mc.patch, mc.patch, mc.bands}, mft::Rng(111), 0.0, 1.0);
        x_l = rand_uniform({n, mc.aux_channels, mc.patch, mc.patch}, mft::Rng(112), 0.0, 1.0);
        for (int i = 0; i < n; ++i) labels.push_back(i % mc.classes);
    }
    std::vector<DTensor> params() override {
        std::vector<DTensor> out;
        mft::for_each_tensor<double>(p, [&](const std::string&, DTensor& t, mft::TensorKind kind) {
            if (kind == mft::TensorKind::Param) out.push_back(t);
        });
        return out;
    }
    std::vector<std::string> param_names() {
        std::vector<std::string> out;
        mft::for_each_tensor<double>(p, [&](const std::string& n, DTensor&, mft::TensorKind kind) {
            if (kind == mft::TensorKind::Param) out.push_back(n);
        });
        return out;
    }
    DTensor loss_tensor() override {
        return mft::cross_entropy_mean(mft::mft_forward(p, x_h, x_l, mft::Mode::gradcheck()), labels);
    }
};

struct CheckRow {
    std::string module;
    mft::FdResult res;
    bool pass = false;
};

CheckRow check_module(const std::string& label, const mft::FdFactory& make,
                      const std::vector<std::string>& names, double tol,
                      const std::string& break_tensor) {
    auto inst = make();
    auto* mp = dynamic_cast<ModuleProblem*>(inst.get());
    if (!mp) throw mft::VerifyError("gradient check problem is not a ModuleProblem");
    std::vector<DTensor> ps = inst->params();
    for (auto& t : ps) t.set_requires_grad(true);
    {
        DTape tape;
        DTensor loss = mp->loss_tensor();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& t : ps) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.size(), 0.0);
    }
    if (!break_tensor.empty()) {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == break_tensor) analytic[i][0] += 1.0;
    }
    CheckRow row;
    row.module = label;
    row.res = mft::fd_check_parallel(make, names, analytic);
    row.pass = row.res.max_error <= tol;
    return row;
}

void cmd_gradcheck(const GradcheckOpts& o, const std::vector<std::string>& args) {
    // Toy dims; embed is kept small so the full-model sweep stays inside the
    // single-threaded runtime budget.
    mft::ModelConfig mc;
    mc.bands = 12;
    mc.aux_channels = 2;
    mc.patch = 5;
    mc.tokens = 2;
    mc.embed = 32;
    mc.heads = 8;
    mc.depth = 1;
    mc.classes = 3;
    mc.variant = mft::TokenizerVariant::Channel;

    if (!o.dims.empty()) {
        std::string rest = o.dims;
        while (!rest.empty()) {
            const auto comma = rest.find(',');
            const std::string tok = rest.substr(0, comma);
            rest = comma == std::string::npos ? std::string() : rest.substr(comma + 1);
            const auto eq = tok.find('=');
            if (eq == std::string::npos)
                throw mft::ConfigError("bad --dims entry '" + tok + "' (expected key=value)");
            const std::string key = tok.substr(0, eq);
            int value = 0;
            try {
                value = std::stoi(tok.substr(eq + 1));
            } catch (const std::logic_error&) {
                throw mft::ConfigError("bad --dims value in '" + tok + "'");
            }
            if (key == "B") mc.bands = value;
            else if (key == "C") mc.aux_channels = value;
            else if (key == "k") mc.patch = value;
            else if (key == "n") mc.tokens = value;
            else if (key == "E") mc.embed = value;
            else if (key == "heads") mc.heads = value;
            else if (key == "depth") mc.depth = value;
            else if (key == "classes") mc.classes = value;
            else throw mft::ConfigError("unknown --dims key '" + key + "'");
        }
    }
    mc.validate();

    if (!o.break_module.empty() && o.break_module != "attention")
        throw mft::ConfigError("unknown --break target '" + o.break_module + "' (supported: attention)");

    const double tol = 1e-4;
    std::cout << "gradient check  B=" << mc.bands << " C=" << mc.aux_channels << " k=" << mc.patch
              << " n=" << mc.tokens << " embed=" << mc.embed << " heads=" << mc.heads
              << " depth=" << mc.depth << " classes=" << mc.classes << "  tol " << tol << "\n";

    std::vector<CheckRow> rows;
    rows.push_back(check_module(
        "extractor", [&] { return std::make_unique<ExtractorProblem>(mc); }, ExtractorProblem::names(),
        tol, ""));
    rows.push_back(check_module(
        "hsi_tokenizer", [&] { return std::make_unique<HsiTokProblem>(mc); }, HsiTokProblem::names(),
        tol, ""));
    rows.push_back(check_module(
        "aux_tokenizer_pixel",
        [&] { return std::make_unique<AuxTokProblem>(mc, mft::TokenizerVariant::Pixel); },
        AuxTokProblem::names(), tol, ""));
    rows.push_back(check_module(
        "aux_tokenizer_channel",
        [&] { return std::make_unique<AuxTokProblem>(mc, mft::TokenizerVariant::Channel); },
        AuxTokProblem::names(), tol, ""));
    rows.push_back(check_module(
        "encoder_block", [&] { return std::make_unique<EncoderProblem>(mc); }, EncoderProblem::names(),
        tol, o.break_module == "attention" ? "attention.w_q" : ""));
    rows.push_back(check_module(
        "classifier", [&] { return std::make_unique<ClassifierProblem>(mc); },
        ClassifierProblem::names(), tol, ""));
    {
        EndToEndProblem probe(mc);
        rows.push_back(check_module(
            "end_to_end", [&] { return std::make_unique<EndToEndProblem>(mc); }, probe.param_names(),
            tol, ""));
    }

    std::string failures;
    for (const auto& row : rows) {
        std::printf("%-24s max err %10.3e  worst %-28s %s\n", row.module.c_str(), row.res.max_error,
                    row.res.worst_tensor.c_str(), row.pass ? "ok" : "FAIL");
        if (!row.pass) {
            if (!failures.empty()) failures += ", ";
            failures += row.module + " (" + row.res.worst_tensor + ")";
        }
    }
    std::fflush(stdout);

    if (!o.out.empty()) {
        fs::create_directories(o.out);
        json jrows = json::array();
        for (const auto& row : rows)
            jrows.push_back({{"module", row.module},
                             {"max_error", row.res.max_error},
                             {"worst_tensor", row.res.worst_tensor},
                             {"pass", row.pass}});
        const json report = {{"dims", model_config_to_json(mc)}, {"tolerance", tol}, {"rows", jrows}};
        write_json_file(fs::path(o.out) / "gradcheck.json", report);
        write_manifest(o.out, "gradcheck", args, {"gradcheck.json"});
    }

    if (!failures.empty()) throw mft::VerifyError("gradient check failed: " + failures);
}

// ---- replay ----

int cmd_replay(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw mft::DataError("cannot open manifest " + manifest_path);
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw mft::DataError("malformed manifest " + manifest_path + ": " + e.what());
    }
    std::vector<std::string> argv;
    try {
        argv = m.at("argv").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw mft::DataError("manifest lacks a usable argv list: " + std::string(e.what()));
    }
    if (argv.empty()) throw mft::DataError("manifest argv is empty");
    if (argv.front() == "replay") throw mft::ConfigError("refusing to replay a replay manifest");
    std::cout << "replaying:";
    for (const auto& a : argv) std::cout << " " << a;
    std::cout << "\n";
    return run(argv);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"Multimodal fusion transformer for hyperspectral classification"};
    app.require_subcommand(1);

    SynthOpts so;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic labeled scene");
    synth->add_option("--classes", so.classes, "Number of classes")->check(CLI::Range(2, 4096));
    synth->add_option("--size", so.size, "Raster extent as <rows>x<cols> (default 64x64)");
    synth->add_option("--bands", so.bands, "Spectral bands")->check(CLI::Range(9, 4096));
    synth->add_option("--aux-channels", so.aux_channels, "Auxiliary raster channels")
        ->check(CLI::Range(1, 4096));
    synth->add_option("--seed", so.seed, "Generator seed");
    synth->add_flag("--aux-noise", so.aux_noise, "Make the auxiliary raster pure noise");
    synth->add_option("--modality", so.modality, "Auxiliary modality tag stored in the header");
    synth->add_option("-o,--out", so.out, "Output scene directory")->required();

    TrainOpts to_;
    CLI::App* train = app.add_subcommand("train", "Train on a scene directory");
    train->add_option("--scene", to_.scene, "Scene directory")->required();
    train->add_option("--split", to_.split, "disjoint | random:<frac> (default random:0.05)");
    train->add_option("--tokenizer", to_.tokenizer, "CLS tokenizer variant")
        ->check(CLI::IsMember({"pixel", "channel"}));
    train->add_option("--tokens", to_.tokens, "HSI tokens")->check(CLI::Range(1, 1024));
    train->add_option("--heads", to_.heads, "Attention heads")->check(CLI::Range(1, 256));
    train->add_option("--depth", to_.depth, "Encoder blocks")->check(CLI::Range(1, 64));
    train->add_option("--patch", to_.patch, "Patch side (odd)")->check(CLI::Range(1, 255));
    train->add_option("--epochs", to_.epochs, "Training epochs")->check(CLI::Range(0, 1000000));
    train->add_option("--lr", to_.lr, "Base learning rate");
    train->add_option("--wd", to_.wd, "Weight decay");
    train->add_option("--seed", to_.seed, "Run seed");
    train->add_option("--repeats", to_.repeats, "Independent repetitions")->check(CLI::Range(1, 1000));
    train->add_flag("--resplit", to_.resplit, "Redraw the random split per repeat");
    train->add_option("--save-every", to_.save_every, "Checkpoint every N epochs (0 = final only)");
    train->add_option("--eval-every", to_.eval_every, "Eval on the test split every N epochs");
    train->add_option("--resume", to_.resume, "Checkpoint directory to continue from");
    train->add_option("-o,--out", to_.out, "Output run directory")->required();

    EvalOpts eo;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a scene");
    eval->add_option("--checkpoint", eo.checkpoint, "Checkpoint directory")->required();
    eval->add_option("--scene", eo.scene, "Scene directory")->required();
    eval->add_option("--on", eo.on, "Split to score (default test)")
        ->check(CLI::IsMember({"train", "test"}));
    eval->add_option("--map", eo.map, "Write a P6 classification map to this path");
    eval->add_flag("--full", eo.full, "Map every pixel, not just labeled ones");
    eval->add_option("-o,--out", eo.out, "Report directory (default eval_out)");

    GradcheckOpts go;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    gradcheck->add_option("--dims", go.dims, "Overrides, e.g. B=12,k=5,n=2 (keys B,C,k,n,E,heads,depth,classes)");
    gradcheck->add_option("--break", go.break_module, "Corrupt a module's analytic gradient (negative control)");
    gradcheck->add_option("-o,--out", go.out, "Optional report directory");

    std::string replay_path;
    CLI::App* replay = app.add_subcommand("replay", "Re-run a command from its manifest");
    replay->add_option("manifest", replay_path, "Path to manifest.json")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand(synth)) cmd_synth(so, args);
        else if (app.got_subcommand(train)) cmd_train(to_, args);
        else if (app.got_subcommand(eval)) cmd_eval(eo, args);
        else if (app.got_subcommand(gradcheck)) cmd_gradcheck(go, args);
        else if (app.got_subcommand(replay)) return cmd_replay(replay_path);
        return 0;
    } catch (const mft::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}
