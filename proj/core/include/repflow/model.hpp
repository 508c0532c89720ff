#pragma once

#include "repflow/common.hpp"
#include "repflow/corpus.hpp"
#include "repflow/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace repflow {

struct ModelConfig {
    Task task = Task::LM;
    std::size_t n_layers = 3;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t src_vocab = 0;
    /// Decoder vocabulary; MT only.
    std::size_t tgt_vocab = 0;
    double dropout = 0.1;
    double word_dropout = 0.0;
    std::size_t max_position = 256;
    std::uint64_t seed = 1;
    bool tie_output = false;

    /// Throws InvalidArgument describing the first violated constraint.
    void validate() const;
    std::size_t output_vocab() const noexcept { return task == Task::MT ? tgt_vocab : src_vocab; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// y = x * w + b with w stored as (in x out).
template <typename T>
struct Linear {
    Mat<T> w;
    RowVec<T> b;
};

template <typename T>
struct AttentionParams {
    Linear<T> q, k, v, o;
};

template <typename T>
struct NormParams {
    RowVec<T> gamma, beta;
};

template <typename T>
struct EncoderLayerParams {
    AttentionParams<T> self_attn;
    NormParams<T> norm1;
    Linear<T> ff1, ff2;
    NormParams<T> norm2;
};

template <typename T>
struct DecoderLayerParams {
    AttentionParams<T> self_attn;
    NormParams<T> norm1;
    AttentionParams<T> cross_attn;
    NormParams<T> norm2;
    Linear<T> ff1, ff2;
    NormParams<T> norm3;
};

/// Every trainable tensor of the model. Gradients and optimizer moments reuse this layout.
template <typename T>
struct Params {
    Mat<T> src_embed;  ///< src_vocab x d
    Mat<T> tgt_embed;  ///< tgt_vocab x d (MT only)
    std::vector<EncoderLayerParams<T>> encoder;
    std::vector<DecoderLayerParams<T>> decoder;
    /// Output projection; `w` is empty when tied to the output-side embedding.
    Linear<T> out;

    /// Calls f(name, tensor) for every tensor in a fixed order.
    template <class F>
    void for_each(F&& f);
    template <class F>
    void for_each(F&& f) const;

    /// Same shapes, all zeros.
    Params zeros_like() const;
    std::size_t num_parameters() const;
};

/// Flat view of one parameter tensor (contiguous storage).
template <typename T>
struct TensorRef {
    std::string name;
    T* data = nullptr;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t size() const noexcept { return static_cast<std::size_t>(rows * cols); }
};

template <typename T>
std::vector<TensorRef<T>> tensors(Params<T>& p) {
    std::vector<TensorRef<T>> out;
    p.for_each([&](const std::string& name, auto& m) { out.push_back({name, m.data(), m.rows(), m.cols()}); });
    return out;
}

template <typename U, typename T>
Params<U> cast_params(const Params<T>& p) {
    Params<U> out;
    out.src_embed = p.src_embed.template cast<U>();
    out.tgt_embed = p.tgt_embed.template cast<U>();
    auto lin = [](const Linear<T>& l) { return Linear<U>{l.w.template cast<U>(), l.b.template cast<U>()}; };
    auto attn = [&](const AttentionParams<T>& a) { return AttentionParams<U>{lin(a.q), lin(a.k), lin(a.v), lin(a.o)}; };
    auto norm = [](const NormParams<T>& n) { return NormParams<U>{n.gamma.template cast<U>(), n.beta.template cast<U>()}; };
    for (const auto& L : p.encoder)
        out.encoder.push_back({attn(L.self_attn), norm(L.norm1), lin(L.ff1), lin(L.ff2), norm(L.norm2)});
    for (const auto& L : p.decoder)
        out.decoder.push_back({attn(L.self_attn), norm(L.norm1), attn(L.cross_attn), norm(L.norm2), lin(L.ff1),
                               lin(L.ff2), norm(L.norm3)});
    out.out = lin(p.out);
    return out;
}

/// Mask the attention of every other query to `position` at encoder layer `layer` (1-based).
struct AblationSpec {
    std::size_t layer = 1;
    std::size_t position = 0;
};

struct ForwardOptions {
    bool train_mode = false;
    /// Required when train_mode and dropout > 0.
    Rng* dropout_rng = nullptr;
    std::optional<AblationSpec> ablation;
    bool capture_attention = false;
    /// Stop after the encoder (activation extraction only); no logits, no decoder.
    bool skip_logits = false;
};

/// Start offset and length of each batch row inside the packed token matrix.
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

template <typename T>
struct ForwardResult {
    /// One row per predicted position in row-major batch order (n_predicted x V).
    Mat<T> logits;
    /// Encoder hidden states, layer 0 (embedding + position) through n_layers; packed (tokens x d).
    std::vector<Mat<T>> encoder_layers;
    std::vector<Segment> segments;
    /// attention[layer-1][segment * n_heads + head] = (len x len) probabilities (encoder self-attention).
    std::vector<std::vector<Mat<T>>> attention;
};

template <typename T>
struct LossAndGrad {
    double loss = 0.0;
    std::size_t n_predicted = 0;
    Params<T> grads;
};

template <typename T>
class Transformer {
public:
    /// Deterministic initialization from config.seed: scaled uniform weights, zero biases, unit norm gains.
    explicit Transformer(const ModelConfig& config);
    Transformer(const ModelConfig& config, Params<T> params);

    const ModelConfig& config() const noexcept { return config_; }
    Params<T>& params() noexcept { return params_; }
    const Params<T>& params() const noexcept { return params_; }

    ForwardResult<T> forward(const TaskBatch& batch, const ForwardOptions& options = {}) const;

    /// Mean cross-entropy over predict-mask positions and its gradient.
    LossAndGrad<T> loss_and_grad(const TaskBatch& batch, const ForwardOptions& options = {}) const;

    /// Loss only (no gradient bookkeeping).
    double loss(const TaskBatch& batch, const ForwardOptions& options = {}) const;

    /// Layer-0 representation of `token` at `position`: scaled embedding plus sinusoidal signal.
    RowVec<T> embed(TokenId token, std::size_t position) const;

    /// Sinusoidal positional signal (max_position x d).
    const Mat<T>& positional() const noexcept { return positional_; }

    /// Converts parameters to another scalar type (e.g. float -> double for gradient checks).
    template <typename U>
    Transformer<U> cast() const;

private:
    struct Tape;
    double run(const TaskBatch& batch, const ForwardOptions& options, ForwardResult<T>* result, Tape* tape) const;
    void backward(const TaskBatch& batch, Tape& tape, Params<T>& grads) const;

    ModelConfig config_;
    Params<T> params_;
    Mat<T> positional_;
};

using Model = Transformer<float>;
using ModelD = Transformer<double>;

Model init_model(const ModelConfig& config);

/// Sinusoidal positional encodings as in the original Transformer.
template <typename T>
Mat<T> sinusoidal_positions(std::size_t max_position, std::size_t d_model);

// ---------------------------------------------------------------------------

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
    return Transformer<U>(config_, cast_params<U>(params_));
}

template <typename T>
template <class F>
void Params<T>::for_each(F&& f) {
    auto linear = [&](const std::string& n, Linear<T>& l) {
        f(n + ".w", l.w);
        f(n + ".b", l.b);
    };
    auto attn = [&](const std::string& n, AttentionParams<T>& a) {
        linear(n + ".q", a.q);
        linear(n + ".k", a.k);
        linear(n + ".v", a.v);
        linear(n + ".o", a.o);
    };
    auto norm = [&](const std::string& n, NormParams<T>& p) {
        f(n + ".gamma", p.gamma);
        f(n + ".beta", p.beta);
    };
    f(std::string("src_embed"), src_embed);
    if (tgt_embed.size() > 0) f(std::string("tgt_embed"), tgt_embed);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        const auto p = "encoder." + std::to_string(i);
        auto& L = encoder[i];
        attn(p + ".self_attn", L.self_attn);
        norm(p + ".norm1", L.norm1);
        linear(p + ".ff1", L.ff1);
        linear(p + ".ff2", L.ff2);
        norm(p + ".norm2", L.norm2);
    }
    for (std::size_t i = 0; i < decoder.size(); ++i) {
        const auto p = "decoder." + std::to_string(i);
        auto& L = decoder[i];
        attn(p + ".self_attn", L.self_attn);
        norm(p + ".norm1", L.norm1);
        attn(p + ".cross_attn", L.cross_attn);
        norm(p + ".norm2", L.norm2);
        linear(p + ".ff1", L.ff1);
        linear(p + ".ff2", L.ff2);
        norm(p + ".norm3", L.norm3);
    }
    if (out.w.size() > 0) f(std::string("out.w"), out.w);
    f(std::string("out.b"), out.b);
}

template <typename T>
template <class F>
void Params<T>::for_each(F&& f) const {
    const_cast<Params<T>*>(this)->for_each([&](const std::string& n, auto& m) { f(n, std::as_const(m)); });
}

}  // namespace repflow
