#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/tensor.hpp"

namespace mft {

// Architecture constants fixed by the network design.
inline constexpr int kConv3dOut = 8;      // channels out of the 3-D stage
inline constexpr int kSpatialKernel = 3;  // 3x3 spatial taps everywhere
inline constexpr int kSpectralKernel = 9; // spectral taps of the 3-D stage
inline constexpr int kHetGroups = 4;      // groups of the grouped 2-D branch
inline constexpr int kMlpRatio = 4;       // MLP hidden width multiplier
inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kLnEps = 1e-5;

enum class TokenizerVariant { Pixel, Channel };

std::string to_string(TokenizerVariant v);
TokenizerVariant tokenizer_variant_from_string(const std::string& s);

struct ModelConfig {
    int bands = 144;        // B, spectral depth of the HSI cube
    int aux_channels = 1;   // C of the auxiliary raster
    int patch = 11;         // k, square patch side
    int tokens = 4;         // n, HSI tokens
    int embed = 64;         // token width
    int heads = 8;
    int depth = 1;          // encoder blocks
    int classes = 15;
    TokenizerVariant variant = TokenizerVariant::Channel;
    double dropout_rate = 0.1;

    int spectral_out() const { return bands - (kSpectralKernel - 1); } // B-8
    int het_in() const { return kConv3dOut * spectral_out(); }
    int seq_len() const { return tokens + 1; }
    int head_dim() const { return embed / heads; }
    int mlp_hidden() const { return embed * kMlpRatio; }
    int aux_conv_out() const { return variant == TokenizerVariant::Pixel ? 1 : embed; }

    void validate() const; // throws ConfigError on a bad combination
};

// Forward-pass behavior switches. Gradient checking wants batch statistics
// (they differentiate) but no state mutation and no stochastic masks.
struct Mode {
    bool batch_stats = false;
    bool update_running = false;
    bool dropout_active = false;
    static Mode train() { return {true, true, true}; }
    static Mode eval() { return {false, false, false}; }
    static Mode gradcheck() { return {true, false, false}; }
};

enum class TensorKind { Param, Buffer };

template <typename T>
struct BatchNormParamsT {
    TensorT<T> gamma, beta;              // learnable
    TensorT<T> running_mean, running_var; // buffers
};

template <typename T>
struct ExtractorParamsT {
    TensorT<T> conv3d_weight, conv3d_bias;
    BatchNormParamsT<T> bn3d;
    TensorT<T> het_group_weight, het_group_bias;
    TensorT<T> het_point_weight, het_point_bias;
    BatchNormParamsT<T> bn2d;
};

template <typename T>
struct HsiTokenizerParamsT {
    TensorT<T> w_a; // [embed x n]
    TensorT<T> w_b; // [embed x embed]
};

template <typename T>
struct AuxTokenizerParamsT {
    TensorT<T> conv_weight, conv_bias;
    BatchNormParamsT<T> bn;
    TensorT<T> w_a; // [Cout x 1]
    TensorT<T> w_b; // [Cout x embed]
};

template <typename T>
struct EncoderBlockParamsT {
    TensorT<T> ln1_gamma, ln1_beta;
    TensorT<T> w_q, w_k, w_v, w_l; // [embed x embed], no biases
    TensorT<T> ln2_gamma, ln2_beta;
    TensorT<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct ClassifierParamsT {
    TensorT<T> ln_gamma, ln_beta;
    TensorT<T> head_weight, head_bias;
};

template <typename T>
struct MftParamsT {
    ModelConfig config;
    ExtractorParamsT<T> extractor;
    HsiTokenizerParamsT<T> hsi_tok;
    AuxTokenizerParamsT<T> aux_tok;
    TensorT<T> pos_embed; // [(n+1) x embed]
    std::vector<EncoderBlockParamsT<T>> blocks;
    ClassifierParamsT<T> classifier;
};

// Builds and initializes all tensors: weights U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
// biases zero, BN gamma 1 / beta 0 / running (0,1), pos_embed N(0, 0.02).
// The draw order is the canonical tensor order below, so a seed pins every value.
template <typename T>
MftParamsT<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Canonical enumeration used by init, checkpointing, the optimizer, and the
// parameter-count audit. Visits tensors in a fixed order with stable names.
template <typename T>
void for_each_tensor(MftParamsT<T>& p,
                     const std::function<void(const std::string&, TensorT<T>&, TensorKind)>& fn);

template <typename T>
void set_params_requires_grad(MftParamsT<T>& p, bool on);

template <typename T>
MftParamsT<T> clone_params(const MftParamsT<T>& p);

// Learnable scalar count from the config alone; tests audit it against
// enumeration over an initialized parameter set.
long long param_count_formula(const ModelConfig& config);

template <typename T>
long long param_count(MftParamsT<T>& p);

// Captures per-block attention probabilities ([N x heads x 1 x seq_len],
// post-softmax, pre-dropout) when passed to a forward.
template <typename T>
struct ForwardProbeT {
    std::vector<TensorT<T>> attn_probs;
};

// ---- forward stages ----

// x_h: [N x k x k x B] -> [N x 8 x k x k x (B-8)]
template <typename T>
TensorT<T> conv3d_block(const TensorT<T>& x_h, const ExtractorParamsT<T>& p, const Mode& mode);

// Pre-normalization branch sum of the heterogeneous 2-D stage; exposed so the
// weight-linearity property can be tested ahead of batch norm.
// x: [N x 8 x k x k x (B-8)] -> [N x embed x k x k]
template <typename T>
TensorT<T> hetconv_presum(const TensorT<T>& x, const ExtractorParamsT<T>& p);

template <typename T>
TensorT<T> hetconv2d_block(const TensorT<T>& x, const ExtractorParamsT<T>& p, const Mode& mode);

template <typename T>
TensorT<T> extract_features(const TensorT<T>& x_h, const ExtractorParamsT<T>& p, const Mode& mode);

// feat: [N x embed x k x k] -> [N x n x embed]
template <typename T>
TensorT<T> hsi_tokenize(const TensorT<T>& feat, const HsiTokenizerParamsT<T>& p);

// x_l: [N x C x k x k] -> [N x 1 x embed]
template <typename T>
TensorT<T> aux_tokenize(const TensorT<T>& x_l, const AuxTokenizerParamsT<T>& p, const Mode& mode);

// cls: [N x 1 x embed], patches: [N x n x embed] -> [N x (n+1) x embed]
template <typename T>
TensorT<T> assemble_sequence(const TensorT<T>& cls, const TensorT<T>& patches,
                             const TensorT<T>& pos_embed, double dropout_rate,
                             const Mode& mode, Rng* rng);

// seq: [N x L x embed] (row 0 = CLS) -> [N x 1 x embed]; attention weights are
// written to *probe when given.
template <typename T>
TensorT<T> mcrosspa(const TensorT<T>& seq, const EncoderBlockParamsT<T>& p, int heads,
                    double dropout_rate, const Mode& mode, Rng* rng,
                    ForwardProbeT<T>* probe = nullptr);

template <typename T>
TensorT<T> encoder_block(const TensorT<T>& seq_in, const EncoderBlockParamsT<T>& p, int heads,
                         double dropout_rate, const Mode& mode, Rng* rng,
                         ForwardProbeT<T>* probe = nullptr);

// seq_out: [N x L x embed] -> logits [N x classes]
template <typename T>
TensorT<T> classify(const TensorT<T>& seq_out, const ClassifierParamsT<T>& p);

// x_h: [N x k x k x B], x_l: [N x C x k x k] -> logits [N x classes]
template <typename T>
TensorT<T> mft_forward(MftParamsT<T>& params, const TensorT<T>& x_h, const TensorT<T>& x_l,
                       const Mode& mode, Rng* rng = nullptr, ForwardProbeT<T>* probe = nullptr);

} // namespace mft
