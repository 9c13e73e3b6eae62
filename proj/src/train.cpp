#include "mft/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mft/errors.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"

namespace fs = std::filesystem;

namespace mft {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (batch_train < 1 || batch_eval < 1) throw ConfigError("batch sizes must be at least 1");
    if (epochs < 0) throw ConfigError("epoch count must be non-negative");
    if (step_size < 1) throw ConfigError("lr step size must be at least 1");
    if (gamma <= 0.0 || gamma > 1.0) throw ConfigError("lr decay factor must be in (0, 1]");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("adam betas must be in [0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("adam epsilon must be positive");
    if (save_every < 0 || eval_every < 0) throw ConfigError("periodic intervals must be non-negative");
}

nlohmann::json train_config_to_json(const TrainConfig& tc) {
    return {
        {"lr", tc.lr},
        {"weight_decay", tc.weight_decay},
        {"batch_train", tc.batch_train},
        {"batch_eval", tc.batch_eval},
        {"epochs", tc.epochs},
        {"step_size", tc.step_size},
        {"gamma", tc.gamma},
        {"seed", tc.seed},
        {"beta1", tc.beta1},
        {"beta2", tc.beta2},
        {"adam_eps", tc.adam_eps},
        {"save_every", tc.save_every},
        {"eval_every", tc.eval_every},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig tc;
    tc.lr = j.at("lr").get<double>();
    tc.weight_decay = j.at("weight_decay").get<double>();
    tc.batch_train = j.at("batch_train").get<int>();
    tc.batch_eval = j.at("batch_eval").get<int>();
    tc.epochs = j.at("epochs").get<int>();
    tc.step_size = j.at("step_size").get<int>();
    tc.gamma = j.at("gamma").get<double>();
    tc.seed = j.at("seed").get<std::uint64_t>();
    tc.beta1 = j.at("beta1").get<double>();
    tc.beta2 = j.at("beta2").get<double>();
    tc.adam_eps = j.at("adam_eps").get<double>();
    tc.save_every = j.value("save_every", 0);
    tc.eval_every = j.value("eval_every", 0);
    tc.validate();
    return tc;
}

nlohmann::json model_config_to_json(const ModelConfig& mc) {
    return {
        {"bands", mc.bands},
        {"aux_channels", mc.aux_channels},
        {"patch", mc.patch},
        {"tokens", mc.tokens},
        {"embed", mc.embed},
        {"heads", mc.heads},
        {"depth", mc.depth},
        {"classes", mc.classes},
        {"tokenizer", to_string(mc.variant)},
        {"dropout", mc.dropout_rate},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig mc;
    mc.bands = j.at("bands").get<int>();
    mc.aux_channels = j.at("aux_channels").get<int>();
    mc.patch = j.at("patch").get<int>();
    mc.tokens = j.at("tokens").get<int>();
    mc.embed = j.at("embed").get<int>();
    mc.heads = j.at("heads").get<int>();
    mc.depth = j.at("depth").get<int>();
    mc.classes = j.at("classes").get<int>();
    mc.variant = tokenizer_variant_from_string(j.at("tokenizer").get<std::string>());
    mc.dropout_rate = j.at("dropout").get<double>();
    mc.validate();
    return mc;
}

namespace {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

std::vector<NamedTensor> collect_params(MftParamsT<float>& params) {
    std::vector<NamedTensor> out;
    for_each_tensor<float>(params, [&](const std::string& name, Tensor& t, TensorKind kind) {
        if (kind == TensorKind::Param) out.push_back({name, t});
    });
    return out;
}

std::vector<NamedTensor> collect_all(MftParamsT<float>& params) {
    std::vector<NamedTensor> out;
    for_each_tensor<float>(params, [&](const std::string& name, Tensor& t, TensorKind) {
        out.push_back({name, t});
    });
    return out;
}

} // namespace

AdamState init_adam_state(MftParamsT<float>& params) {
    AdamState state;
    for (auto& p : collect_params(params)) {
        std::vector<int> shape(p.tensor.shape().begin(), p.tensor.shape().end());
        state.m.push_back(Tensor::zeros(shape));
        state.v.push_back(Tensor::zeros(shape));
    }
    state.t = 0;
    return state;
}

void adam_step(MftParamsT<float>& params, AdamState& state, double lr, const TrainConfig& tc) {
    auto plist = collect_params(params);
    if (plist.size() != state.m.size() || plist.size() != state.v.size())
        throw ConfigError("optimizer state does not match the parameter set");

    state.t += 1;
    const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.t));

    for (std::size_t i = 0; i < plist.size(); ++i) {
        Tensor& w = plist[i].tensor;
        auto wd_ = w.data();
        auto md = state.m[i].data();
        auto vd = state.v[i].data();
        const bool has_g = w.has_grad();
        const std::span<const float> gd = has_g ? w.grad() : std::span<const float>{};

        for (std::size_t e = 0; e < wd_.size(); ++e) {
            const double raw = has_g ? static_cast<double>(gd[e]) : 0.0;
            if (!std::isfinite(raw))
                throw DivergenceError("non-finite gradient in tensor '" + plist[i].name + "'");
            const double g = raw + tc.weight_decay * static_cast<double>(wd_[e]);
            // Store moments as float and reread them, so that a checkpointed
            // state resumes on exactly the same trajectory.
            md[e] = static_cast<float>(tc.beta1 * static_cast<double>(md[e]) + (1.0 - tc.beta1) * g);
            vd[e] = static_cast<float>(tc.beta2 * static_cast<double>(vd[e]) + (1.0 - tc.beta2) * g * g);
            const double m_hat = static_cast<double>(md[e]) / c1;
            const double v_hat = static_cast<double>(vd[e]) / c2;
            wd_[e] = static_cast<float>(static_cast<double>(wd_[e]) -
                                        lr * m_hat / (std::sqrt(v_hat) + tc.adam_eps));
        }
    }
}

double lr_at(int epoch, const TrainConfig& tc) {
    if (epoch < 0) throw ConfigError("epoch index must be non-negative");
    return tc.lr * std::pow(tc.gamma, epoch / tc.step_size);
}

void train_loop(MftParamsT<float>& params, AdamState& state, int start_epoch, const TrainConfig& tc,
                const PatchBatch& train_set, const PatchBatch* eval_set,
                const std::function<void(const TrainProgress&)>& on_epoch,
                const std::function<void(int)>& on_checkpoint) {
    tc.validate();
    const int total = static_cast<int>(train_set.count());
    if (total == 0) throw DataError("training set is empty");
    if (start_epoch < 0 || start_epoch > tc.epochs)
        throw ConfigError("start epoch out of range");

    set_params_requires_grad(params, true);

    std::vector<int> order(total);
    for (int e = start_epoch; e < tc.epochs; ++e) {
        const double lr = lr_at(e, tc);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = Rng(tc.seed).fork(streams::kShuffle, static_cast<std::uint64_t>(e));
        fisher_yates(order, shuffle_rng);

        double loss_sum = 0.0;
        int batch_index = 0;
        for (int lo = 0; lo < total; lo += tc.batch_train, ++batch_index) {
            const int hi = std::min(total, lo + tc.batch_train);
            ModelBatch mb = gather_batch(train_set, order, lo, hi);
            Rng drop_rng = Rng(tc.seed).fork(streams::kDropout, static_cast<std::uint64_t>(e),
                                             static_cast<std::uint64_t>(batch_index));
            {
                Tape tape;
                Tensor logits = mft_forward(params, mb.x_h, mb.x_l, Mode::train(), &drop_rng);
                Tensor loss = cross_entropy_mean(logits, mb.labels);
                const double lv = static_cast<double>(loss.item());
                if (!std::isfinite(lv))
                    throw DivergenceError("non-finite training loss at epoch " + std::to_string(e) +
                                          ", batch " + std::to_string(batch_index));
                loss_sum += lv * (hi - lo);
                tape.backward(loss);
            }
            adam_step(params, state, lr, tc);
            for (auto& p : collect_params(params)) p.tensor.zero_grad();
        }

        TrainProgress pr;
        pr.epoch = e;
        pr.lr = lr;
        pr.train_loss = loss_sum / total;
        if (eval_set != nullptr && tc.eval_every > 0 && (e + 1) % tc.eval_every == 0) {
            pr.has_eval = true;
            pr.eval_oa = evaluate(params, *eval_set, tc.batch_eval).oa;
        }
        if (on_epoch) on_epoch(pr);
        if (on_checkpoint && tc.save_every > 0 && (e + 1) % tc.save_every == 0 && e + 1 < tc.epochs)
            on_checkpoint(e + 1);
    }
}

std::vector<int> predict(MftParamsT<float>& params, const PatchBatch& set, int batch_eval) {
    if (batch_eval < 1) throw ConfigError("eval batch size must be at least 1");
    const int total = static_cast<int>(set.count());
    std::vector<int> idx(total);
    std::iota(idx.begin(), idx.end(), 0);

    std::vector<int> preds;
    preds.reserve(total);
    const int classes = params.config.classes;
    for (int lo = 0; lo < total; lo += batch_eval) {
        const int hi = std::min(total, lo + batch_eval);
        ModelBatch mb = gather_batch(set, idx, lo, hi);
        Tensor logits = mft_forward(params, mb.x_h, mb.x_l, Mode::eval());
        auto ld = logits.data();
        for (int r = 0; r < hi - lo; ++r) {
            int best = 0;
            float best_v = ld[static_cast<std::size_t>(r) * classes];
            for (int c = 1; c < classes; ++c) {
                const float v = ld[static_cast<std::size_t>(r) * classes + c];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            preds.push_back(best);
        }
    }
    return preds;
}

EvalReport evaluate(MftParamsT<float>& params, const PatchBatch& set, int batch_eval) {
    if (set.count() == 0) throw DataError("evaluation set is empty");
    std::vector<int> preds = predict(params, set, batch_eval);
    ConfusionMatrix cm(params.config.classes);
    for (std::size_t i = 0; i < preds.size(); ++i) cm.accumulate(set.labels[i], preds[i]);
    return compute_metrics(cm);
}

// ---- checkpointing ----

namespace {

constexpr const char* kCkptMagic = "MFTCKPT1";

struct TableEntry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0; // bytes into weights.f32
};

// Params and buffers in canonical order, then the Adam moments named after
// the parameter they track.
std::vector<NamedTensor> checkpoint_tensors(MftParamsT<float>& params, const AdamState& state) {
    std::vector<NamedTensor> out = collect_all(params);
    auto plist = collect_params(params);
    if (plist.size() != state.m.size())
        throw ConfigError("optimizer state does not match the parameter set");
    for (std::size_t i = 0; i < plist.size(); ++i)
        out.push_back({"adam.m." + plist[i].name, state.m[i]});
    for (std::size_t i = 0; i < plist.size(); ++i)
        out.push_back({"adam.v." + plist[i].name, state.v[i]});
    return out;
}

} // namespace

void save_checkpoint(const std::string& dir, MftParamsT<float>& params, const AdamState& state,
                     int epoch, const TrainConfig& tc, const nlohmann::json& data_config) {
    fs::create_directories(dir);
    auto tensors = checkpoint_tensors(params, state);

    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    for (auto& nt : tensors) {
        nlohmann::json row;
        row["name"] = nt.name;
        row["shape"] = std::vector<int>(nt.tensor.shape().begin(), nt.tensor.shape().end());
        row["offset"] = offset;
        table.push_back(row);
        offset += nt.tensor.size() * sizeof(float);
    }

    nlohmann::json manifest;
    manifest["format"] = kCkptMagic;
    manifest["model"] = model_config_to_json(params.config);
    manifest["train"] = train_config_to_json(tc);
    manifest["epoch"] = epoch;
    manifest["adam_t"] = state.t;
    manifest["data"] = data_config;
    manifest["tensors"] = table;

    {
        std::ofstream js(fs::path(dir) / "model.json");
        if (!js) throw DataError("cannot write " + (fs::path(dir) / "model.json").string());
        js << manifest.dump(2) << "\n";
    }
    {
        std::ofstream ws(fs::path(dir) / "weights.f32", std::ios::binary);
        if (!ws) throw DataError("cannot write " + (fs::path(dir) / "weights.f32").string());
        for (auto& nt : tensors) {
            auto d = nt.tensor.data();
            ws.write(reinterpret_cast<const char*>(d.data()),
                     static_cast<std::streamsize>(d.size() * sizeof(float)));
        }
        if (!ws) throw DataError("short write to weights.f32 in " + dir);
    }
}

CheckpointBundle load_checkpoint(const std::string& dir) {
    const fs::path jpath = fs::path(dir) / "model.json";
    std::ifstream js(jpath);
    if (!js) throw DataError("cannot open checkpoint manifest " + jpath.string());

    nlohmann::json manifest;
    CheckpointBundle bundle;
    try {
        js >> manifest;
        if (manifest.at("format").get<std::string>() != kCkptMagic)
            throw DataError("not a checkpoint manifest: bad format tag in " + jpath.string());
        ModelConfig mc = model_config_from_json(manifest.at("model"));
        bundle.train_config = train_config_from_json(manifest.at("train"));
        bundle.epoch = manifest.at("epoch").get<int>();
        bundle.state.t = manifest.at("adam_t").get<long long>();
        bundle.data_config = manifest.value("data", nlohmann::json::object());
        bundle.params = init_params<float>(mc, 0);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint manifest " + jpath.string() + ": " + e.what());
    }
    AdamState fresh = init_adam_state(bundle.params);
    bundle.state.m = std::move(fresh.m);
    bundle.state.v = std::move(fresh.v);

    // Expected tensors by name, to be filled from the file's table.
    auto tensors = checkpoint_tensors(bundle.params, bundle.state);
    std::vector<TableEntry> file_table;
    try {
        for (const auto& row : manifest.at("tensors")) {
            TableEntry te;
            te.name = row.at("name").get<std::string>();
            te.shape = row.at("shape").get<std::vector<int>>();
            te.offset = row.at("offset").get<std::size_t>();
            file_table.push_back(std::move(te));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed tensor table in " + jpath.string() + ": " + e.what());
    }
    if (file_table.size() != tensors.size())
        throw DataError("checkpoint tensor table has " + std::to_string(file_table.size()) +
                        " entries, expected " + std::to_string(tensors.size()));

    const fs::path wpath = fs::path(dir) / "weights.f32";
    std::ifstream ws(wpath, std::ios::binary);
    if (!ws) throw DataError("cannot open " + wpath.string());
    std::vector<char> payload((std::istreambuf_iterator<char>(ws)), std::istreambuf_iterator<char>());

    std::size_t expected_bytes = 0;
    for (auto& nt : tensors) expected_bytes += nt.tensor.size() * sizeof(float);
    if (payload.size() != expected_bytes)
        throw DataError("weights payload is " + std::to_string(payload.size()) + " bytes, expected " +
                        std::to_string(expected_bytes));

    std::vector<bool> seen(tensors.size(), false);
    for (const auto& te : file_table) {
        NamedTensor* target = nullptr;
        std::size_t target_i = 0;
        for (std::size_t i = 0; i < tensors.size(); ++i)
            if (tensors[i].name == te.name) {
                target = &tensors[i];
                target_i = i;
                break;
            }
        if (!target) throw DataError("checkpoint holds unknown tensor '" + te.name + "'");
        if (seen[target_i]) throw DataError("checkpoint names tensor '" + te.name + "' twice");
        const std::vector<int> want(target->tensor.shape().begin(), target->tensor.shape().end());
        if (te.shape != want)
            throw DataError("tensor '" + te.name + "' has shape " + shape_str(te.shape) +
                            " in the checkpoint, model expects " + shape_str(want));
        const std::size_t bytes = target->tensor.size() * sizeof(float);
        if (te.offset + bytes > payload.size())
            throw DataError("tensor '" + te.name + "' overruns the weights payload");
        std::memcpy(target->tensor.data().data(), payload.data() + te.offset, bytes);
        seen[target_i] = true;
    }
    return bundle;
}

} // namespace mft
