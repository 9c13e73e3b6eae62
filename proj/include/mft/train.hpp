#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mft/metrics.hpp"
#include "mft/model.hpp"
#include "mft/scene.hpp"

namespace mft {

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 5e-3;
    int batch_train = 64;
    int batch_eval = 500;
    int epochs = 200; // 500 reproduces the reference setup; 200 is the desk default
    int step_size = 50;
    double gamma = 0.9;
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    int save_every = 0; // periodic checkpoints, 0 = final only
    int eval_every = 0; // periodic eval during training, 0 = never

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& mc);
ModelConfig model_config_from_json(const nlohmann::json& j);

// First and second moments parallel to the Param tensors in canonical order.
struct AdamState {
    std::vector<Tensor> m, v;
    long long t = 0;
};

AdamState init_adam_state(MftParamsT<float>& params);

// One L2-coupled update: g <- grad + wd*theta, then standard bias-corrected
// Adam. Math runs in 64-bit per element; storage stays 32-bit so a reloaded
// state continues bit-identically. Throws DivergenceError on a non-finite
// gradient, naming the tensor.
void adam_step(MftParamsT<float>& params, AdamState& state, double lr, const TrainConfig& tc);

double lr_at(int epoch, const TrainConfig& tc);

struct TrainProgress {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    bool has_eval = false;
    double eval_oa = 0.0;
};

// Runs epochs [start_epoch, tc.epochs). on_epoch fires after every epoch;
// on_checkpoint fires after epochs where save_every divides the completed
// count (the final checkpoint is the caller's job). eval_set may be null.
void train_loop(MftParamsT<float>& params, AdamState& state, int start_epoch, const TrainConfig& tc,
                const PatchBatch& train_set, const PatchBatch* eval_set,
                const std::function<void(const TrainProgress&)>& on_epoch,
                const std::function<void(int)>& on_checkpoint = nullptr);

// Eval-mode forward over batches of tc.batch_eval; argmax predictions.
EvalReport evaluate(MftParamsT<float>& params, const PatchBatch& set, int batch_eval);

// Argmax predictions only (for map rendering).
std::vector<int> predict(MftParamsT<float>& params, const PatchBatch& set, int batch_eval);

// Checkpoint directory: model.json (config + ordered tensor table with byte
// offsets + training state) and weights.f32 (little-endian payload holding
// params, buffers, and Adam moments in table order).
struct CheckpointBundle {
    MftParamsT<float> params;
    AdamState state;
    int epoch = 0;
    TrainConfig train_config;
    nlohmann::json data_config; // opaque run context (scene path, split spec)
};

void save_checkpoint(const std::string& dir, MftParamsT<float>& params, const AdamState& state,
                     int epoch, const TrainConfig& tc, const nlohmann::json& data_config);

CheckpointBundle load_checkpoint(const std::string& dir);

} // namespace mft
