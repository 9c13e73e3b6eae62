#include "mft/model.hpp"

#include <cmath>

#include "mft/errors.hpp"

namespace mft {

std::string to_string(TokenizerVariant v) {
    return v == TokenizerVariant::Pixel ? "pixel" : "channel";
}

TokenizerVariant tokenizer_variant_from_string(const std::string& s) {
    if (s == "pixel") return TokenizerVariant::Pixel;
    if (s == "channel") return TokenizerVariant::Channel;
    throw ConfigError("unknown tokenizer variant '" + s + "' (expected pixel or channel)");
}

void ModelConfig::validate() const {
    if (bands < kSpectralKernel)
        throw ConfigError("bands=" + std::to_string(bands) + " too small: the spectral axis needs at least " +
                          std::to_string(kSpectralKernel) + " bands to survive the 9-tap kernel");
    if (patch < 3) throw ConfigError("patch=" + std::to_string(patch) + " must be at least 3");
    if (tokens < 1) throw ConfigError("tokens must be at least 1");
    if (heads < 1) throw ConfigError("heads must be at least 1");
    if (embed < heads || embed % heads != 0)
        throw ConfigError("embed=" + std::to_string(embed) + " must be a positive multiple of heads=" + std::to_string(heads));
    if (embed % kHetGroups != 0)
        throw ConfigError("embed=" + std::to_string(embed) + " must be divisible by " + std::to_string(kHetGroups));
    if (depth < 1) throw ConfigError("depth must be at least 1");
    if (classes < 2) throw ConfigError("classes must be at least 2");
    if (aux_channels < 1) throw ConfigError("aux_channels must be at least 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("dropout_rate must be in [0,1)");
}

namespace {

// Running statistics are the only state a forward pass mutates. Tensors are
// handles over shared storage, so copying them keeps the aliasing while
// letting batch_norm take mutable references.
template <typename T>
TensorT<T> apply_bn(const TensorT<T>& x, const BatchNormParamsT<T>& bn, const Mode& mode) {
    TensorT<T> rm = bn.running_mean;
    TensorT<T> rv = bn.running_var;
    return batch_norm(x, bn.gamma, bn.beta, rm, rv, static_cast<T>(kBnMomentum),
                      static_cast<T>(kBnEps), mode.batch_stats, mode.update_running);
}

template <typename T>
TensorT<T> uniform_fan_in(std::vector<int> shape, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return TensorT<T>::uniform(std::move(shape), rng, -bound, bound);
}

template <typename T>
BatchNormParamsT<T> init_bn(int channels) {
    BatchNormParamsT<T> bn;
    bn.gamma = TensorT<T>::full({channels}, T(1));
    bn.beta = TensorT<T>::zeros({channels});
    bn.running_mean = TensorT<T>::zeros({channels});
    bn.running_var = TensorT<T>::full({channels}, T(1));
    return bn;
}

template <typename T>
void visit_bn(const std::string& prefix, BatchNormParamsT<T>& bn,
              const std::function<void(const std::string&, TensorT<T>&, TensorKind)>& fn) {
    fn(prefix + ".gamma", bn.gamma, TensorKind::Param);
    fn(prefix + ".beta", bn.beta, TensorKind::Param);
    fn(prefix + ".running_mean", bn.running_mean, TensorKind::Buffer);
    fn(prefix + ".running_var", bn.running_var, TensorKind::Buffer);
}

} // namespace

template <typename T>
MftParamsT<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = Rng(seed).fork(streams::kInit);

    MftParamsT<T> p;
    p.config = config;
    const int E = config.embed;
    const int U = config.het_in();
    const int k3 = kSpatialKernel;

    p.extractor.conv3d_weight = uniform_fan_in<T>({kConv3dOut, 1, k3, k3, kSpectralKernel},
                                                  k3 * k3 * kSpectralKernel, rng);
    p.extractor.conv3d_bias = TensorT<T>::zeros({kConv3dOut});
    p.extractor.bn3d = init_bn<T>(kConv3dOut);
    p.extractor.het_group_weight = uniform_fan_in<T>({E, U / kHetGroups, k3, k3}, (U / kHetGroups) * k3 * k3, rng);
    p.extractor.het_group_bias = TensorT<T>::zeros({E});
    p.extractor.het_point_weight = uniform_fan_in<T>({E, U, 1, 1}, U, rng);
    p.extractor.het_point_bias = TensorT<T>::zeros({E});
    p.extractor.bn2d = init_bn<T>(E);

    p.hsi_tok.w_a = uniform_fan_in<T>({E, config.tokens}, E, rng);
    p.hsi_tok.w_b = uniform_fan_in<T>({E, E}, E, rng);

    const int Ca = config.aux_conv_out();
    p.aux_tok.conv_weight = uniform_fan_in<T>({Ca, config.aux_channels, k3, k3},
                                              config.aux_channels * k3 * k3, rng);
    p.aux_tok.conv_bias = TensorT<T>::zeros({Ca});
    p.aux_tok.bn = init_bn<T>(Ca);
    p.aux_tok.w_a = uniform_fan_in<T>({Ca, 1}, Ca, rng);
    p.aux_tok.w_b = uniform_fan_in<T>({Ca, E}, Ca, rng);

    p.pos_embed = TensorT<T>::normal({config.seq_len(), E}, rng, 0.0, 0.02);

    p.blocks.resize(static_cast<std::size_t>(config.depth));
    for (auto& b : p.blocks) {
        b.ln1_gamma = TensorT<T>::full({E}, T(1));
        b.ln1_beta = TensorT<T>::zeros({E});
        b.w_q = uniform_fan_in<T>({E, E}, E, rng);
        b.w_k = uniform_fan_in<T>({E, E}, E, rng);
        b.w_v = uniform_fan_in<T>({E, E}, E, rng);
        b.w_l = uniform_fan_in<T>({E, E}, E, rng);
        b.ln2_gamma = TensorT<T>::full({E}, T(1));
        b.ln2_beta = TensorT<T>::zeros({E});
        b.mlp_w1 = uniform_fan_in<T>({E, config.mlp_hidden()}, E, rng);
        b.mlp_b1 = TensorT<T>::zeros({config.mlp_hidden()});
        b.mlp_w2 = uniform_fan_in<T>({config.mlp_hidden(), E}, config.mlp_hidden(), rng);
        b.mlp_b2 = TensorT<T>::zeros({E});
    }

    p.classifier.ln_gamma = TensorT<T>::full({E}, T(1));
    p.classifier.ln_beta = TensorT<T>::zeros({E});
    p.classifier.head_weight = uniform_fan_in<T>({E, config.classes}, E, rng);
    p.classifier.head_bias = TensorT<T>::zeros({config.classes});

    set_params_requires_grad(p, true);
    return p;
}

template <typename T>
void for_each_tensor(MftParamsT<T>& p,
                     const std::function<void(const std::string&, TensorT<T>&, TensorKind)>& fn) {
    fn("extractor.conv3d.weight", p.extractor.conv3d_weight, TensorKind::Param);
    fn("extractor.conv3d.bias", p.extractor.conv3d_bias, TensorKind::Param);
    visit_bn("extractor.bn3d", p.extractor.bn3d, fn);
    fn("extractor.het_group.weight", p.extractor.het_group_weight, TensorKind::Param);
    fn("extractor.het_group.bias", p.extractor.het_group_bias, TensorKind::Param);
    fn("extractor.het_point.weight", p.extractor.het_point_weight, TensorKind::Param);
    fn("extractor.het_point.bias", p.extractor.het_point_bias, TensorKind::Param);
    visit_bn("extractor.bn2d", p.extractor.bn2d, fn);
    fn("hsi_tok.w_a", p.hsi_tok.w_a, TensorKind::Param);
    fn("hsi_tok.w_b", p.hsi_tok.w_b, TensorKind::Param);
    fn("aux_tok.conv.weight", p.aux_tok.conv_weight, TensorKind::Param);
    fn("aux_tok.conv.bias", p.aux_tok.conv_bias, TensorKind::Param);
    visit_bn("aux_tok.bn", p.aux_tok.bn, fn);
    fn("aux_tok.w_a", p.aux_tok.w_a, TensorKind::Param);
    fn("aux_tok.w_b", p.aux_tok.w_b, TensorKind::Param);
    fn("seq.pos_embed", p.pos_embed, TensorKind::Param);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string pre = "block" + std::to_string(i) + ".";
        auto& b = p.blocks[i];
        fn(pre + "ln1.gamma", b.ln1_gamma, TensorKind::Param);
        fn(pre + "ln1.beta", b.ln1_beta, TensorKind::Param);
        fn(pre + "w_q", b.w_q, TensorKind::Param);
        fn(pre + "w_k", b.w_k, TensorKind::Param);
        fn(pre + "w_v", b.w_v, TensorKind::Param);
        fn(pre + "w_l", b.w_l, TensorKind::Param);
        fn(pre + "ln2.gamma", b.ln2_gamma, TensorKind::Param);
        fn(pre + "ln2.beta", b.ln2_beta, TensorKind::Param);
        fn(pre + "mlp.w1", b.mlp_w1, TensorKind::Param);
        fn(pre + "mlp.b1", b.mlp_b1, TensorKind::Param);
        fn(pre + "mlp.w2", b.mlp_w2, TensorKind::Param);
        fn(pre + "mlp.b2", b.mlp_b2, TensorKind::Param);
    }
    fn("classifier.ln.gamma", p.classifier.ln_gamma, TensorKind::Param);
    fn("classifier.ln.beta", p.classifier.ln_beta, TensorKind::Param);
    fn("classifier.head.weight", p.classifier.head_weight, TensorKind::Param);
    fn("classifier.head.bias", p.classifier.head_bias, TensorKind::Param);
}

template <typename T>
void set_params_requires_grad(MftParamsT<T>& p, bool on) {
    for_each_tensor<T>(p, [on](const std::string&, TensorT<T>& t, TensorKind kind) {
        t.set_requires_grad(kind == TensorKind::Param && on);
    });
}

template <typename T>
MftParamsT<T> clone_params(const MftParamsT<T>& p) {
    MftParamsT<T> out = p; // shares storage; replace every tensor below
    for_each_tensor<T>(out, [](const std::string&, TensorT<T>& t, TensorKind) { t = t.clone(); });
    return out;
}

long long param_count_formula(const ModelConfig& config) {
    const long long E = config.embed;
    const long long U = config.het_in();
    const long long k2 = static_cast<long long>(kSpatialKernel) * kSpatialKernel;
    const long long conv3d = kConv3dOut * k2 * kSpectralKernel + kConv3dOut;
    const long long bn3d = 2 * kConv3dOut;
    const long long het = E * (U / kHetGroups) * k2 + E + E * U + E;
    const long long bn2d = 2 * E;
    const long long hsi_tok = E * config.tokens + E * E;
    const long long Ca = config.aux_conv_out();
    const long long aux_tok = Ca * config.aux_channels * k2 + Ca + 2 * Ca + Ca * 1 + Ca * E;
    const long long pos = static_cast<long long>(config.seq_len()) * E;
    const long long H = config.mlp_hidden();
    const long long block = 2 * E + 4 * E * E + 2 * E + E * H + H + H * E + E;
    const long long head = 2 * E + E * config.classes + config.classes;
    return conv3d + bn3d + het + bn2d + hsi_tok + aux_tok + pos + config.depth * block + head;
}

template <typename T>
long long param_count(MftParamsT<T>& p) {
    long long n = 0;
    for_each_tensor<T>(p, [&n](const std::string&, TensorT<T>& t, TensorKind kind) {
        if (kind == TensorKind::Param) n += static_cast<long long>(t.size());
    });
    return n;
}

// ---------------------------------------------------------------------------
// forward stages

template <typename T>
TensorT<T> conv3d_block(const TensorT<T>& x_h, const ExtractorParamsT<T>& p, const Mode& mode) {
    if (x_h.rank() != 4)
        throw ShapeError("conv3d_block: expected [N,k,k,B], got " + shape_str(x_h.shape()));
    const int N = x_h.dim(0), kh = x_h.dim(1), kw = x_h.dim(2), B = x_h.dim(3);
    if (B < kSpectralKernel)
        throw ConfigError("conv3d_block: " + std::to_string(B) + " bands cannot feed a " +
                          std::to_string(kSpectralKernel) + "-tap spectral kernel");
    TensorT<T> x = reshape(x_h, {N, 1, kh, kw, B});
    TensorT<T> y = conv3d(x, p.conv3d_weight, p.conv3d_bias, 1, 1, 0);
    return relu(apply_bn(y, p.bn3d, mode));
}

template <typename T>
TensorT<T> hetconv_presum(const TensorT<T>& x, const ExtractorParamsT<T>& p) {
    if (x.rank() != 5)
        throw ShapeError("hetconv_presum: expected [N,8,k,k,D], got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), kh = x.dim(2), kw = x.dim(3), D = x.dim(4);
    // channel c, spectral slot d fold to flat channel c*D + d
    TensorT<T> merged = reshape(permute(x, {0, 1, 4, 2, 3}), {N, C * D, kh, kw});
    TensorT<T> grouped = conv2d(merged, p.het_group_weight, p.het_group_bias, kHetGroups, 1);
    TensorT<T> pointwise = conv2d(merged, p.het_point_weight, p.het_point_bias, 1, 0);
    return add(grouped, pointwise);
}

template <typename T>
TensorT<T> hetconv2d_block(const TensorT<T>& x, const ExtractorParamsT<T>& p, const Mode& mode) {
    TensorT<T> y = hetconv_presum(x, p);
    return relu(apply_bn(y, p.bn2d, mode));
}

template <typename T>
TensorT<T> extract_features(const TensorT<T>& x_h, const ExtractorParamsT<T>& p, const Mode& mode) {
    return hetconv2d_block(conv3d_block(x_h, p, mode), p, mode);
}

template <typename T>
TensorT<T> hsi_tokenize(const TensorT<T>& feat, const HsiTokenizerParamsT<T>& p) {
    if (feat.rank() != 4)
        throw ShapeError("hsi_tokenize: expected [N,E,k,k], got " + shape_str(feat.shape()));
    const int N = feat.dim(0), E = feat.dim(1), S = feat.dim(2) * feat.dim(3);
    TensorT<T> x_flat = permute(reshape(feat, {N, E, S}), {0, 2, 1}); // [N,S,E]
    TensorT<T> logits = matmul(x_flat, p.w_a);                        // [N,S,n]
    TensorT<T> attn = permute(softmax(logits, 1), {0, 2, 1});         // [N,n,S], rows convex
    TensorT<T> projected = matmul(x_flat, p.w_b);                     // [N,S,E]
    return matmul(attn, projected);                                   // [N,n,E]
}

template <typename T>
TensorT<T> aux_tokenize(const TensorT<T>& x_l, const AuxTokenizerParamsT<T>& p, const Mode& mode) {
    if (x_l.rank() != 4)
        throw ShapeError("aux_tokenize: expected [N,C,k,k], got " + shape_str(x_l.shape()));
    if (p.conv_weight.dim(1) != x_l.dim(1))
        throw ConfigError("aux_tokenize: params built for " + std::to_string(p.conv_weight.dim(1)) +
                          " channels, input has " + std::to_string(x_l.dim(1)));
    TensorT<T> y = conv2d(x_l, p.conv_weight, p.conv_bias, 1, 1); // [N,Ca,k,k]
    y = gelu(apply_bn(y, p.bn, mode));
    const int N = y.dim(0), Ca = y.dim(1), S = y.dim(2) * y.dim(3);
    TensorT<T> x_conv = permute(reshape(y, {N, Ca, S}), {0, 2, 1});  // [N,S,Ca]
    TensorT<T> logits = matmul(x_conv, p.w_a);                       // [N,S,1]
    TensorT<T> attn = permute(softmax(logits, 1), {0, 2, 1});        // [N,1,S]
    TensorT<T> projected = matmul(x_conv, p.w_b);                    // [N,S,E]
    return matmul(attn, projected);                                  // [N,1,E]
}

template <typename T>
TensorT<T> assemble_sequence(const TensorT<T>& cls, const TensorT<T>& patches,
                             const TensorT<T>& pos_embed, double dropout_rate,
                             const Mode& mode, Rng* rng) {
    if (cls.rank() != 3 || patches.rank() != 3 || cls.dim(0) != patches.dim(0) ||
        cls.dim(2) != patches.dim(2) || cls.dim(1) != 1)
        throw ShapeError("assemble_sequence: incompatible cls " + shape_str(cls.shape()) +
                         " and patches " + shape_str(patches.shape()));
    const int N = cls.dim(0), L = 1 + patches.dim(1), E = cls.dim(2);
    if (pos_embed.dim(0) != L || pos_embed.dim(1) != E)
        throw ShapeError("assemble_sequence: pos_embed " + shape_str(pos_embed.shape()) +
                         " does not cover a " + std::to_string(L) + "-token sequence");
    TensorT<T> seq = concat<T>({cls, patches}, 1);
    TensorT<T> pe = broadcast_to(reshape(pos_embed, {1, L, E}), {N, L, E});
    seq = add(seq, pe);
    if (mode.dropout_active) {
        if (!rng) throw ConfigError("assemble_sequence: dropout active but no rng supplied");
        seq = dropout(seq, static_cast<T>(dropout_rate), true, *rng);
    }
    return seq;
}

template <typename T>
TensorT<T> mcrosspa(const TensorT<T>& seq, const EncoderBlockParamsT<T>& p, int heads,
                    double dropout_rate, const Mode& mode, Rng* rng, ForwardProbeT<T>* probe) {
    const int N = seq.dim(0), L = seq.dim(1), E = seq.dim(2);
    if (E % heads != 0)
        throw ConfigError("mcrosspa: width " + std::to_string(E) + " not divisible by " + std::to_string(heads) + " heads");
    const int hd = E / heads;

    TensorT<T> cls = slice(seq, 1, 0, 1);    // [N,1,E]
    TensorT<T> q = matmul(cls, p.w_q);       // [N,1,E]
    TensorT<T> k = matmul(seq, p.w_k);       // [N,L,E]
    TensorT<T> v = matmul(seq, p.w_v);       // [N,L,E]

    TensorT<T> qh = permute(reshape(q, {N, 1, heads, hd}), {0, 2, 1, 3}); // [N,H,1,hd]
    TensorT<T> kt = permute(reshape(k, {N, L, heads, hd}), {0, 2, 3, 1}); // [N,H,hd,L]
    TensorT<T> vh = permute(reshape(v, {N, L, heads, hd}), {0, 2, 1, 3}); // [N,H,L,hd]

    TensorT<T> scores = scale(matmul(qh, kt), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    TensorT<T> probs = softmax(scores, 3); // [N,H,1,L]
    if (probe) probe->attn_probs.push_back(probs);

    TensorT<T> ctx = matmul(probs, vh);                                   // [N,H,1,hd]
    TensorT<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {N, 1, E});   // [N,1,E]
    TensorT<T> out = matmul(merged, p.w_l);
    if (mode.dropout_active) {
        if (!rng) throw ConfigError("mcrosspa: dropout active but no rng supplied");
        out = dropout(out, static_cast<T>(dropout_rate), true, *rng);
    }
    return out;
}

template <typename T>
TensorT<T> encoder_block(const TensorT<T>& seq_in, const EncoderBlockParamsT<T>& p, int heads,
                         double dropout_rate, const Mode& mode, Rng* rng, ForwardProbeT<T>* probe) {
    const int N = seq_in.dim(0), L = seq_in.dim(1), E = seq_in.dim(2);
    TensorT<T> normed = layer_norm(seq_in, p.ln1_gamma, p.ln1_beta, static_cast<T>(kLnEps));
    TensorT<T> y_cls = mcrosspa(normed, p, heads, dropout_rate, mode, rng, probe); // [N,1,E]
    TensorT<T> y_k = add(broadcast_to(y_cls, {N, L, E}), seq_in);

    TensorT<T> m = layer_norm(y_k, p.ln2_gamma, p.ln2_beta, static_cast<T>(kLnEps));
    m = gelu(linear(m, p.mlp_w1, p.mlp_b1));
    if (mode.dropout_active) {
        if (!rng) throw ConfigError("encoder_block: dropout active but no rng supplied");
        m = dropout(m, static_cast<T>(dropout_rate), true, *rng);
    }
    m = linear(m, p.mlp_w2, p.mlp_b2);
    if (mode.dropout_active) m = dropout(m, static_cast<T>(dropout_rate), true, *rng);
    return add(y_k, m);
}

template <typename T>
TensorT<T> classify(const TensorT<T>& seq_out, const ClassifierParamsT<T>& p) {
    const int N = seq_out.dim(0), E = seq_out.dim(2);
    TensorT<T> cls = reshape(slice(seq_out, 1, 0, 1), {N, E});
    TensorT<T> normed = layer_norm(cls, p.ln_gamma, p.ln_beta, static_cast<T>(kLnEps));
    return linear(normed, p.head_weight, p.head_bias);
}

template <typename T>
TensorT<T> mft_forward(MftParamsT<T>& params, const TensorT<T>& x_h, const TensorT<T>& x_l,
                       const Mode& mode, Rng* rng, ForwardProbeT<T>* probe) {
    const ModelConfig& c = params.config;
    if (x_h.rank() != 4 || x_h.dim(1) != c.patch || x_h.dim(2) != c.patch || x_h.dim(3) != c.bands)
        throw ShapeError("mft_forward: HSI batch " + shape_str(x_h.shape()) + " does not match patch=" +
                         std::to_string(c.patch) + " bands=" + std::to_string(c.bands));
    if (x_l.rank() != 4 || x_l.dim(0) != x_h.dim(0) || x_l.dim(1) != c.aux_channels ||
        x_l.dim(2) != c.patch || x_l.dim(3) != c.patch)
        throw ShapeError("mft_forward: aux batch " + shape_str(x_l.shape()) + " does not match HSI batch " +
                         shape_str(x_h.shape()) + " with aux_channels=" + std::to_string(c.aux_channels));

    TensorT<T> feat = extract_features(x_h, params.extractor, mode);
    TensorT<T> patches = hsi_tokenize(feat, params.hsi_tok);
    TensorT<T> cls = aux_tokenize(x_l, params.aux_tok, mode);
    TensorT<T> seq = assemble_sequence(cls, patches, params.pos_embed, c.dropout_rate, mode, rng);
    for (auto& b : params.blocks)
        seq = encoder_block(seq, b, c.heads, c.dropout_rate, mode, rng, probe);
    return classify(seq, params.classifier);
}

// ---------------------------------------------------------------------------

#define MFT_INSTANTIATE_MODEL(T)                                                                          \
    template MftParamsT<T> init_params<T>(const ModelConfig&, std::uint64_t);                             \
    template void for_each_tensor<T>(MftParamsT<T>&,                                                      \
                                     const std::function<void(const std::string&, TensorT<T>&, TensorKind)>&); \
    template void set_params_requires_grad<T>(MftParamsT<T>&, bool);                                      \
    template MftParamsT<T> clone_params<T>(const MftParamsT<T>&);                                         \
    template long long param_count<T>(MftParamsT<T>&);                                                    \
    template TensorT<T> conv3d_block<T>(const TensorT<T>&, const ExtractorParamsT<T>&, const Mode&);      \
    template TensorT<T> hetconv_presum<T>(const TensorT<T>&, const ExtractorParamsT<T>&);                 \
    template TensorT<T> hetconv2d_block<T>(const TensorT<T>&, const ExtractorParamsT<T>&, const Mode&);   \
    template TensorT<T> extract_features<T>(const TensorT<T>&, const ExtractorParamsT<T>&, const Mode&);  \
    template TensorT<T> hsi_tokenize<T>(const TensorT<T>&, const HsiTokenizerParamsT<T>&);                \
    template TensorT<T> aux_tokenize<T>(const TensorT<T>&, const AuxTokenizerParamsT<T>&, const Mode&);   \
    template TensorT<T> assemble_sequence<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,     \
                                             double, const Mode&, Rng*);                                  \
    template TensorT<T> mcrosspa<T>(const TensorT<T>&, const EncoderBlockParamsT<T>&, int, double,        \
                                    const Mode&, Rng*, ForwardProbeT<T>*);                                \
    template TensorT<T> encoder_block<T>(const TensorT<T>&, const EncoderBlockParamsT<T>&, int, double,   \
                                         const Mode&, Rng*, ForwardProbeT<T>*);                           \
    template TensorT<T> classify<T>(const TensorT<T>&, const ClassifierParamsT<T>&);                      \
    template TensorT<T> mft_forward<T>(MftParamsT<T>&, const TensorT<T>&, const TensorT<T>&, const Mode&, \
                                       Rng*, ForwardProbeT<T>*);

MFT_INSTANTIATE_MODEL(float)
MFT_INSTANTIATE_MODEL(double)

#undef MFT_INSTANTIATE_MODEL

} // namespace mft
