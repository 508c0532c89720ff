#include "repflow/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>

namespace repflow {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("model config: " + m); };
    if (n_layers == 0) fail("n_layers must be positive");
    if (d_model == 0 || n_heads == 0 || d_ff == 0) fail("d_model, n_heads and d_ff must be positive");
    if (d_model % n_heads != 0)
        fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    if (src_vocab <= static_cast<std::size_t>(Vocab::kNumReserved)) fail("src_vocab must exceed the reserved ids");
    if (task == Task::MT && tgt_vocab <= static_cast<std::size_t>(Vocab::kNumReserved))
        fail("tgt_vocab must exceed the reserved ids for MT");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0,1)");
    if (!(word_dropout >= 0.0 && word_dropout < 1.0)) fail("word_dropout must lie in [0,1)");
    if (max_position == 0) fail("max_position must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"task", std::string(to_string(task))},
            {"n_layers", n_layers},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"src_vocab", src_vocab},
            {"tgt_vocab", tgt_vocab},
            {"dropout", dropout},
            {"word_dropout", word_dropout},
            {"max_position", max_position},
            {"seed", seed},
            {"tie_output", tie_output}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.task = task_from_string(j.at("task").get<std::string>());
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.src_vocab = j.at("src_vocab").get<std::size_t>();
    c.tgt_vocab = j.value("tgt_vocab", std::size_t{0});
    c.dropout = j.value("dropout", 0.1);
    c.word_dropout = j.value("word_dropout", 0.0);
    c.max_position = j.value("max_position", std::size_t{256});
    c.seed = j.value("seed", std::uint64_t{1});
    c.tie_output = j.value("tie_output", false);
    return c;
}

// ---------------------------------------------------------------------------
// Params

template <typename T>
Params<T> Params<T>::zeros_like() const {
    Params<T> z = *this;
    z.for_each([](const std::string&, auto& m) { m.setZero(); });
    return z;
}

template <typename T>
std::size_t Params<T>::num_parameters() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
Mat<T> sinusoidal_positions(std::size_t max_position, std::size_t d_model) {
    Mat<T> pe(static_cast<Eigen::Index>(max_position), static_cast<Eigen::Index>(d_model));
    for (std::size_t pos = 0; pos < max_position; ++pos)
        for (std::size_t i = 0; i < d_model; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
            const double angle = static_cast<double>(pos) * rate;
            pe(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(i)) =
                static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

namespace {

using Index = Eigen::Index;

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out) {
    return Linear<T>{Mat<T>::Zero(static_cast<Index>(in), static_cast<Index>(out)), RowVec<T>::Zero(static_cast<Index>(out))};
}

template <typename T>
AttentionParams<T> make_attention(std::size_t d) {
    return {make_linear<T>(d, d), make_linear<T>(d, d), make_linear<T>(d, d), make_linear<T>(d, d)};
}

template <typename T>
NormParams<T> make_norm(std::size_t d) {
    return {RowVec<T>::Ones(static_cast<Index>(d)), RowVec<T>::Zero(static_cast<Index>(d))};
}

template <typename T>
Params<T> allocate(const ModelConfig& c) {
    Params<T> p;
    const auto d = c.d_model;
    p.src_embed = Mat<T>::Zero(static_cast<Index>(c.src_vocab), static_cast<Index>(d));
    if (c.task == Task::MT) p.tgt_embed = Mat<T>::Zero(static_cast<Index>(c.tgt_vocab), static_cast<Index>(d));
    for (std::size_t i = 0; i < c.n_layers; ++i)
        p.encoder.push_back({make_attention<T>(d), make_norm<T>(d), make_linear<T>(d, c.d_ff), make_linear<T>(c.d_ff, d),
                             make_norm<T>(d)});
    if (c.task == Task::MT)
        for (std::size_t i = 0; i < c.n_layers; ++i)
            p.decoder.push_back({make_attention<T>(d), make_norm<T>(d), make_attention<T>(d), make_norm<T>(d),
                                 make_linear<T>(d, c.d_ff), make_linear<T>(c.d_ff, d), make_norm<T>(d)});
    p.out = make_linear<T>(d, c.output_vocab());
    if (c.tie_output) p.out.w.resize(0, 0);
    return p;
}

bool ends_with(const std::string& s, const char* suffix) {
    const std::string suf(suffix);
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// --- building blocks -------------------------------------------------------

template <typename T>
Mat<T> linear_fwd(const Mat<T>& x, const Linear<T>& l) {
    Mat<T> y = x * l.w;
    y.rowwise() += l.b;
    return y;
}

template <typename T>
Mat<T> linear_bwd(const Mat<T>& x, const Mat<T>& dy, const Linear<T>& l, Linear<T>& dl) {
    dl.w.noalias() += x.transpose() * dy;
    dl.b += dy.colwise().sum();
    return dy * l.w.transpose();
}

template <typename T>
struct NormCache {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

constexpr double kNormEps = 1e-6;

template <typename T>
Mat<T> layernorm_fwd(const Mat<T>& x, const NormParams<T>& p, NormCache<T>* cache) {
    const auto n = x.rows();
    const auto d = x.cols();
    Mat<T> xhat(n, d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
    for (Index i = 0; i < n; ++i) {
        const T mu = x.row(i).mean();
        const T var = (x.row(i).array() - mu).square().mean();
        rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        xhat.row(i) = (x.row(i).array() - mu) * rstd(i);
    }
    Mat<T> y = xhat.array().rowwise() * p.gamma.array();
    y.rowwise() += p.beta;
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename T>
Mat<T> layernorm_bwd(const Mat<T>& dy, const NormParams<T>& p, const NormCache<T>& c, NormParams<T>& dp) {
    dp.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    dp.beta += dy.colwise().sum();
    const Mat<T> dxhat = dy.array().rowwise() * p.gamma.array();
    Mat<T> dx(dy.rows(), dy.cols());
    const T inv_d = T(1) / static_cast<T>(dy.cols());
    for (Index i = 0; i < dy.rows(); ++i) {
        const T m1 = dxhat.row(i).sum() * inv_d;
        const T m2 = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
        dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
}

/// Inverted dropout; the mask (0 or 1/(1-p)) is kept for the backward pass.
template <typename T>
void dropout_fwd(Mat<T>& x, double p, Rng* rng, Mat<T>* mask) {
    if (p <= 0.0) return;
    if (!rng) throw InvalidArgument("forward: train_mode with dropout requires a dropout Rng");
    Mat<T> m(x.rows(), x.cols());
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (Index j = 0; j < m.cols(); ++j)
        for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng->uniform() < p ? T(0) : keep;
    x.array() *= m.array();
    if (mask) *mask = std::move(m);
}

template <typename T>
struct AttnCache {
    Mat<T> xq, xkv, q, k, v, o;
    std::vector<Mat<T>> probs;  // [segment * heads + head]
};

struct AttnLayout {
    const std::vector<Segment>* qsegs;
    const std::vector<Segment>* kvsegs;
    std::size_t heads;
    bool causal;
    /// Key position hidden from every other query, or -1.
    std::ptrdiff_t ablate;
};

template <typename T>
Mat<T> attention_fwd(const AttentionParams<T>& P, const Mat<T>& xq, const Mat<T>& xkv, const AttnLayout& lay,
                     AttnCache<T>* cache, std::vector<Mat<T>>* capture) {
    const Mat<T> q = linear_fwd(xq, P.q);
    const Mat<T> k = linear_fwd(xkv, P.k);
    const Mat<T> v = linear_fwd(xkv, P.v);
    const auto d = q.cols();
    const auto dk = d / static_cast<Index>(lay.heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    Mat<T> o = Mat<T>::Zero(q.rows(), d);
    const auto& qs = *lay.qsegs;
    const auto& ks = *lay.kvsegs;
    if (cache) cache->probs.resize(qs.size() * lay.heads);
    if (capture) capture->resize(qs.size() * lay.heads);
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t s = 0; s < qs.size(); ++s) {
        const auto qo = static_cast<Index>(qs[s].offset), ql = static_cast<Index>(qs[s].length);
        const auto ko = static_cast<Index>(ks[s].offset), kl = static_cast<Index>(ks[s].length);
        for (std::size_t h = 0; h < lay.heads; ++h) {
            const auto c0 = static_cast<Index>(h) * dk;
            Mat<T> scores = (q.block(qo, c0, ql, dk) * k.block(ko, c0, kl, dk).transpose()) * scale;
            if (lay.causal)
                for (Index i = 0; i < ql; ++i)
                    for (Index j = i + 1; j < kl; ++j) scores(i, j) = neg_inf;
            if (lay.ablate >= 0 && lay.ablate < kl)
                for (Index i = 0; i < ql; ++i)
                    if (i != lay.ablate) scores(i, lay.ablate) = neg_inf;
            for (Index i = 0; i < ql; ++i) {
                const T mx = scores.row(i).maxCoeff();
                T sum = 0;
                for (Index j = 0; j < kl; ++j) {
                    const T e = scores(i, j) == neg_inf ? T(0) : std::exp(scores(i, j) - mx);
                    scores(i, j) = e;
                    sum += e;
                }
                scores.row(i) /= sum;
            }
            o.block(qo, c0, ql, dk).noalias() = scores * v.block(ko, c0, kl, dk);
            const auto slot = s * lay.heads + h;
            if (capture) (*capture)[slot] = scores;
            if (cache) cache->probs[slot] = std::move(scores);
        }
    }
    Mat<T> out = linear_fwd(o, P.o);
    if (cache) {
        cache->xq = xq;
        cache->xkv = xkv;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->o = std::move(o);
    }
    return out;
}

/// Accumulates parameter gradients into dP; returns (dxq, dxkv).
template <typename T>
std::pair<Mat<T>, Mat<T>> attention_bwd(const AttentionParams<T>& P, const AttnCache<T>& c, const Mat<T>& dout,
                                         const AttnLayout& lay, AttentionParams<T>& dP) {
    const Mat<T> dO = linear_bwd(c.o, dout, P.o, dP.o);
    const auto d = c.q.cols();
    const auto dk = d / static_cast<Index>(lay.heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    Mat<T> dq = Mat<T>::Zero(c.q.rows(), d);
    Mat<T> dk_ = Mat<T>::Zero(c.k.rows(), d);
    Mat<T> dv = Mat<T>::Zero(c.v.rows(), d);
    const auto& qs = *lay.qsegs;
    const auto& ks = *lay.kvsegs;
    for (std::size_t s = 0; s < qs.size(); ++s) {
        const auto qo = static_cast<Index>(qs[s].offset), ql = static_cast<Index>(qs[s].length);
        const auto ko = static_cast<Index>(ks[s].offset), kl = static_cast<Index>(ks[s].length);
        for (std::size_t h = 0; h < lay.heads; ++h) {
            const auto c0 = static_cast<Index>(h) * dk;
            const Mat<T>& p = c.probs[s * lay.heads + h];
            const auto dOb = dO.block(qo, c0, ql, dk);
            const Mat<T> dp = dOb * c.v.block(ko, c0, kl, dk).transpose();
            dv.block(ko, c0, kl, dk).noalias() += p.transpose() * dOb;
            Mat<T> ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
            ds *= scale;
            dq.block(qo, c0, ql, dk).noalias() += ds * c.k.block(ko, c0, kl, dk);
            dk_.block(ko, c0, kl, dk).noalias() += ds.transpose() * c.q.block(qo, c0, ql, dk);
        }
    }
    Mat<T> dxq = linear_bwd(c.xq, dq, P.q, dP.q);
    Mat<T> dxkv = linear_bwd(c.xkv, dk_, P.k, dP.k);
    dxkv += linear_bwd(c.xkv, dv, P.v, dP.v);
    return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
struct FfnCache {
    Mat<T> x, pre, h;
};

template <typename T>
Mat<T> ffn_fwd(const Linear<T>& l1, const Linear<T>& l2, const Mat<T>& x, FfnCache<T>* cache) {
    Mat<T> pre = linear_fwd(x, l1);
    Mat<T> h = pre.cwiseMax(T(0));
    Mat<T> y = linear_fwd(h, l2);
    if (cache) {
        cache->x = x;
        cache->pre = std::move(pre);
        cache->h = std::move(h);
    }
    return y;
}

template <typename T>
Mat<T> ffn_bwd(const Linear<T>& l1, const Linear<T>& l2, const FfnCache<T>& c, const Mat<T>& dy, Linear<T>& dl1,
               Linear<T>& dl2) {
    Mat<T> dh = linear_bwd(c.h, dy, l2, dl2);
    dh.array() *= (c.pre.array() > T(0)).template cast<T>();
    return linear_bwd(c.x, dh, l1, dl1);
}

template <typename T>
struct EncCache {
    AttnCache<T> attn;
    Mat<T> drop1;
    NormCache<T> n1;
    FfnCache<T> ff;
    Mat<T> drop2;
    NormCache<T> n2;
};

template <typename T>
struct DecCache {
    AttnCache<T> self;
    Mat<T> drop1;
    NormCache<T> n1;
    AttnCache<T> cross;
    Mat<T> drop2;
    NormCache<T> n2;
    FfnCache<T> ff;
    Mat<T> drop3;
    NormCache<T> n3;
};

template <typename T>
void apply_mask(Mat<T>& g, const Mat<T>& mask) {
    if (mask.size() > 0) g.array() *= mask.array();
}

std::vector<Segment> segments_for(const TaskBatch& b, bool decoder) {
    std::vector<Segment> segs;
    std::size_t off = 0;
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto len = decoder ? b.decoder_row_length(r) : b.row_length(r);
        if (len == 0) throw InvalidArgument("forward: empty batch row " + std::to_string(r));
        segs.push_back({off, len});
        off += len;
    }
    return segs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Transformer

template <typename T>
struct Transformer<T>::Tape {
    std::vector<Segment> enc_segs, dec_segs;
    std::vector<TokenId> enc_tokens, dec_tokens;
    std::vector<std::size_t> enc_positions, dec_positions;
    Mat<T> enc_drop0, dec_drop0;
    std::vector<EncCache<T>> enc;
    std::vector<DecCache<T>> dec;
    std::vector<Index> pred_rows;
    Mat<T> hsel;
    Mat<T> dlogits;
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config) {
    config_.validate();
    params_ = allocate<T>(config_);
    positional_ = sinusoidal_positions<T>(config_.max_position, config_.d_model);
    const Rng root = Rng(config_.seed).substream("init");
    params_.for_each([&](const std::string& name, auto& m) {
        if (ends_with(name, ".b") || ends_with(name, ".beta") || ends_with(name, ".gamma")) return;
        Rng r = root.substream(name);
        double a;
        if (name == "src_embed" || name == "tgt_embed")
            a = std::sqrt(3.0 / static_cast<double>(config_.d_model));
        else
            a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(r.uniform(-a, a));
    });
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, Params<T> params) : config_(config), params_(std::move(params)) {
    config_.validate();
    positional_ = sinusoidal_positions<T>(config_.max_position, config_.d_model);
    const Params<T> expected = allocate<T>(config_);
    std::vector<std::pair<std::string, std::pair<Index, Index>>> want, have;
    expected.for_each([&](const std::string& n, const auto& m) { want.push_back({n, {m.rows(), m.cols()}}); });
    params_.for_each([&](const std::string& n, const auto& m) { have.push_back({n, {m.rows(), m.cols()}}); });
    if (want != have) throw InvalidArgument("model parameters do not match the configuration shapes");
}

template <typename T>
RowVec<T> Transformer<T>::embed(TokenId token, std::size_t position) const {
    const T scale = std::sqrt(static_cast<T>(config_.d_model));
    return params_.src_embed.row(token) * scale + positional_.row(static_cast<Index>(position));
}

template <typename T>
double Transformer<T>::run(const TaskBatch& batch, const ForwardOptions& opt, ForwardResult<T>* result,
                           Tape* tape) const {
    const auto& c = config_;
    const bool is_mt = c.task == Task::MT;
    if (batch.task != c.task)
        throw InvalidArgument("forward: batch task " + std::string(to_string(batch.task)) + " does not match model task " +
                              std::string(to_string(c.task)));
    const double drop = opt.train_mode ? c.dropout : 0.0;
    const auto d = static_cast<Index>(c.d_model);
    const T emb_scale = std::sqrt(static_cast<T>(c.d_model));

    auto enc_segs = segments_for(batch, false);
    const std::size_t n_enc = enc_segs.empty() ? 0 : enc_segs.back().offset + enc_segs.back().length;
    for (const auto& s : enc_segs)
        if (s.length > c.max_position)
            throw InvalidArgument("forward: sequence length " + std::to_string(s.length) + " exceeds max_position " +
                                  std::to_string(c.max_position));

    if (opt.ablation) {
        const auto& a = *opt.ablation;
        if (a.layer < 1 || a.layer > c.n_layers)
            throw InvalidArgument("ablation layer must lie in [1, " + std::to_string(c.n_layers) + "]");
        for (const auto& s : enc_segs) {
            if (s.length < 2) throw InvalidArgument("ablation needs at least two tokens (no other tokens to mask from)");
            if (a.position >= s.length) throw InvalidArgument("ablation position beyond sentence length");
        }
    }

    // Encoder embeddings.
    Mat<T> x(static_cast<Index>(n_enc), d);
    std::vector<TokenId> enc_tokens(n_enc);
    std::vector<std::size_t> enc_pos(n_enc);
    for (std::size_t r = 0; r < batch.rows; ++r)
        for (std::size_t t = 0; t < enc_segs[r].length; ++t) {
            const auto row = enc_segs[r].offset + t;
            const TokenId tok = batch.input_at(r, t);
            if (tok < 0 || static_cast<std::size_t>(tok) >= c.src_vocab)
                throw InvalidArgument("forward: token id " + std::to_string(tok) + " outside the source vocabulary");
            enc_tokens[row] = tok;
            enc_pos[row] = t;
            x.row(static_cast<Index>(row)) =
                params_.src_embed.row(tok) * emb_scale + positional_.row(static_cast<Index>(t));
        }
    if (result) {
        result->encoder_layers.clear();
        result->encoder_layers.push_back(x);
        result->segments = enc_segs;
        result->attention.clear();
    }
    if (tape) {
        tape->enc_segs = enc_segs;
        tape->enc_tokens = enc_tokens;
        tape->enc_positions = enc_pos;
        tape->enc.resize(c.n_layers);
    }
    dropout_fwd(x, drop, opt.dropout_rng, tape ? &tape->enc_drop0 : nullptr);

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = params_.encoder[l];
        EncCache<T>* cache = tape ? &tape->enc[l] : nullptr;
        std::ptrdiff_t ablate = -1;
        if (opt.ablation && opt.ablation->layer == l + 1) ablate = static_cast<std::ptrdiff_t>(opt.ablation->position);
        const AttnLayout lay{&enc_segs, &enc_segs, c.n_heads, c.task == Task::LM, ablate};
        std::vector<Mat<T>>* capture = nullptr;
        if (result && opt.capture_attention) {
            result->attention.emplace_back();
            capture = &result->attention.back();
        }
        Mat<T> a = attention_fwd(L.self_attn, x, x, lay, cache ? &cache->attn : nullptr, capture);
        dropout_fwd(a, drop, opt.dropout_rng, cache ? &cache->drop1 : nullptr);
        Mat<T> h1 = layernorm_fwd<T>(x + a, L.norm1, cache ? &cache->n1 : nullptr);
        Mat<T> f = ffn_fwd(L.ff1, L.ff2, h1, cache ? &cache->ff : nullptr);
        dropout_fwd(f, drop, opt.dropout_rng, cache ? &cache->drop2 : nullptr);
        x = layernorm_fwd<T>(h1 + f, L.norm2, cache ? &cache->n2 : nullptr);
        if (result) result->encoder_layers.push_back(x);
    }

    if (opt.skip_logits && !tape) return 0.0;

    const Mat<T>* top = &x;
    Mat<T> y;
    std::vector<Segment> dec_segs;
    if (is_mt) {
        dec_segs = segments_for(batch, true);
        const std::size_t n_dec = dec_segs.back().offset + dec_segs.back().length;
        for (const auto& s : dec_segs)
            if (s.length > c.max_position)
                throw InvalidArgument("forward: target length exceeds max_position");
        y.resize(static_cast<Index>(n_dec), d);
        std::vector<TokenId> dec_tokens(n_dec);
        std::vector<std::size_t> dec_pos(n_dec);
        for (std::size_t r = 0; r < batch.rows; ++r)
            for (std::size_t t = 0; t < dec_segs[r].length; ++t) {
                const auto row = dec_segs[r].offset + t;
                const TokenId tok = batch.decoder_input[r * batch.dec_cols + t];
                if (tok < 0 || static_cast<std::size_t>(tok) >= c.tgt_vocab)
                    throw InvalidArgument("forward: token id outside the target vocabulary");
                dec_tokens[row] = tok;
                dec_pos[row] = t;
                y.row(static_cast<Index>(row)) =
                    params_.tgt_embed.row(tok) * emb_scale + positional_.row(static_cast<Index>(t));
            }
        if (tape) {
            tape->dec_segs = dec_segs;
            tape->dec_tokens = dec_tokens;
            tape->dec_positions = dec_pos;
            tape->dec.resize(c.n_layers);
        }
        dropout_fwd(y, drop, opt.dropout_rng, tape ? &tape->dec_drop0 : nullptr);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const auto& L = params_.decoder[l];
            DecCache<T>* cache = tape ? &tape->dec[l] : nullptr;
            const AttnLayout self_lay{&dec_segs, &dec_segs, c.n_heads, true, -1};
            const AttnLayout cross_lay{&dec_segs, &enc_segs, c.n_heads, false, -1};
            Mat<T> a = attention_fwd(L.self_attn, y, y, self_lay, cache ? &cache->self : nullptr, static_cast<std::vector<Mat<T>>*>(nullptr));
            dropout_fwd(a, drop, opt.dropout_rng, cache ? &cache->drop1 : nullptr);
            Mat<T> h1 = layernorm_fwd<T>(y + a, L.norm1, cache ? &cache->n1 : nullptr);
            Mat<T> ca = attention_fwd(L.cross_attn, h1, x, cross_lay, cache ? &cache->cross : nullptr, static_cast<std::vector<Mat<T>>*>(nullptr));
            dropout_fwd(ca, drop, opt.dropout_rng, cache ? &cache->drop2 : nullptr);
            Mat<T> h2 = layernorm_fwd<T>(h1 + ca, L.norm2, cache ? &cache->n2 : nullptr);
            Mat<T> f = ffn_fwd(L.ff1, L.ff2, h2, cache ? &cache->ff : nullptr);
            dropout_fwd(f, drop, opt.dropout_rng, cache ? &cache->drop3 : nullptr);
            y = layernorm_fwd<T>(h2 + f, L.norm3, cache ? &cache->n3 : nullptr);
        }
        top = &y;
    }

    // Gather predicted positions.
    const auto& segs = is_mt ? dec_segs : enc_segs;
    std::vector<Index> pred_rows;
    std::vector<TokenId> pred_labels;
    for (std::size_t r = 0; r < batch.rows; ++r)
        for (std::size_t t = 0; t < segs[r].length; ++t)
            if (batch.predicted(r, t)) {
                pred_rows.push_back(static_cast<Index>(segs[r].offset + t));
                pred_labels.push_back(batch.label_at(r, t));
            }
    Mat<T> hsel(static_cast<Index>(pred_rows.size()), d);
    for (std::size_t i = 0; i < pred_rows.size(); ++i) hsel.row(static_cast<Index>(i)) = top->row(pred_rows[i]);
    const Mat<T>& out_emb = is_mt ? params_.tgt_embed : params_.src_embed;
    Mat<T> logits = c.tie_output ? Mat<T>(hsel * out_emb.transpose()) : Mat<T>(hsel * params_.out.w);
    logits.rowwise() += params_.out.b;

    double loss = 0.0;
    const auto V = logits.cols();
    Mat<T> dlogits;
    if (tape) dlogits.resize(logits.rows(), V);
    for (Index i = 0; i < logits.rows(); ++i) {
        const TokenId lab = pred_labels[static_cast<std::size_t>(i)];
        if (lab < 0 || lab >= V) throw InvalidArgument("forward: label outside the output vocabulary");
        const T mx = logits.row(i).maxCoeff();
        double z = 0.0;
        for (Index j = 0; j < V; ++j) z += std::exp(static_cast<double>(logits(i, j) - mx));
        const double logz = std::log(z) + static_cast<double>(mx);
        loss += logz - static_cast<double>(logits(i, lab));
        if (tape) {
            for (Index j = 0; j < V; ++j) dlogits(i, j) = static_cast<T>(std::exp(static_cast<double>(logits(i, j)) - logz));
            dlogits(i, lab) -= T(1);
        }
    }
    const auto n_pred = static_cast<double>(pred_rows.size());
    if (n_pred > 0) loss /= n_pred;
    if (tape) {
        if (n_pred > 0) dlogits /= static_cast<T>(n_pred);
        tape->pred_rows = std::move(pred_rows);
        tape->hsel = std::move(hsel);
        tape->dlogits = std::move(dlogits);
    }
    if (result) result->logits = std::move(logits);
    return loss;
}

template <typename T>
void Transformer<T>::backward(const TaskBatch& batch, Tape& tape, Params<T>& g) const {
    (void)batch;
    const auto& c = config_;
    const bool is_mt = c.task == Task::MT;
    const auto d = static_cast<Index>(c.d_model);
    const T emb_scale = std::sqrt(static_cast<T>(c.d_model));
    Mat<T>& out_emb_grad = is_mt ? g.tgt_embed : g.src_embed;
    const Mat<T>& out_emb = is_mt ? params_.tgt_embed : params_.src_embed;

    // Output projection.
    Mat<T> dhsel;
    if (c.tie_output) {
        out_emb_grad.noalias() += tape.dlogits.transpose() * tape.hsel;
        dhsel = tape.dlogits * out_emb;
    } else {
        g.out.w.noalias() += tape.hsel.transpose() * tape.dlogits;
        dhsel = tape.dlogits * params_.out.w.transpose();
    }
    g.out.b += tape.dlogits.colwise().sum();

    const auto& top_segs = is_mt ? tape.dec_segs : tape.enc_segs;
    const std::size_t n_top = top_segs.back().offset + top_segs.back().length;
    Mat<T> dtop = Mat<T>::Zero(static_cast<Index>(n_top), d);
    for (std::size_t i = 0; i < tape.pred_rows.size(); ++i) dtop.row(tape.pred_rows[i]) += dhsel.row(static_cast<Index>(i));

    const std::size_t n_enc = tape.enc_segs.back().offset + tape.enc_segs.back().length;
    Mat<T> denc = Mat<T>::Zero(static_cast<Index>(n_enc), d);

    if (is_mt) {
        Mat<T> dy = std::move(dtop);
        for (std::size_t li = c.n_layers; li-- > 0;) {
            const auto& L = params_.decoder[li];
            auto& G = g.decoder[li];
            auto& cache = tape.dec[li];
            const AttnLayout self_lay{&tape.dec_segs, &tape.dec_segs, c.n_heads, true, -1};
            const AttnLayout cross_lay{&tape.dec_segs, &tape.enc_segs, c.n_heads, false, -1};
            Mat<T> ds = layernorm_bwd(dy, L.norm3, cache.n3, G.norm3);  // d(h2 + f)
            Mat<T> df = ds;
            apply_mask(df, cache.drop3);
            Mat<T> dh2 = ds + ffn_bwd(L.ff1, L.ff2, cache.ff, df, G.ff1, G.ff2);
            Mat<T> ds2 = layernorm_bwd(dh2, L.norm2, cache.n2, G.norm2);  // d(h1 + ca)
            Mat<T> dca = ds2;
            apply_mask(dca, cache.drop2);
            auto [dh1_from_cross, dmem] = attention_bwd(L.cross_attn, cache.cross, dca, cross_lay, G.cross_attn);
            denc += dmem;
            Mat<T> dh1 = ds2 + dh1_from_cross;
            Mat<T> ds1 = layernorm_bwd(dh1, L.norm1, cache.n1, G.norm1);  // d(y + a)
            Mat<T> da = ds1;
            apply_mask(da, cache.drop1);
            auto [dq, dkv] = attention_bwd(L.self_attn, cache.self, da, self_lay, G.self_attn);
            dy = ds1 + dq + dkv;
        }
        apply_mask(dy, tape.dec_drop0);
        for (std::size_t i = 0; i < tape.dec_tokens.size(); ++i)
            g.tgt_embed.row(tape.dec_tokens[i]) += dy.row(static_cast<Index>(i)) * emb_scale;
    } else {
        denc = std::move(dtop);
    }

    Mat<T> dx = std::move(denc);
    for (std::size_t li = c.n_layers; li-- > 0;) {
        const auto& L = params_.encoder[li];
        auto& G = g.encoder[li];
        auto& cache = tape.enc[li];
        const AttnLayout lay{&tape.enc_segs, &tape.enc_segs, c.n_heads, c.task == Task::LM, -1};
        Mat<T> ds = layernorm_bwd(dx, L.norm2, cache.n2, G.norm2);  // d(h1 + f)
        Mat<T> df = ds;
        apply_mask(df, cache.drop2);
        Mat<T> dh1 = ds + ffn_bwd(L.ff1, L.ff2, cache.ff, df, G.ff1, G.ff2);
        Mat<T> ds1 = layernorm_bwd(dh1, L.norm1, cache.n1, G.norm1);  // d(x + a)
        Mat<T> da = ds1;
        apply_mask(da, cache.drop1);
        auto [dq, dkv] = attention_bwd(L.self_attn, cache.attn, da, lay, G.self_attn);
        dx = ds1 + dq + dkv;
    }
    apply_mask(dx, tape.enc_drop0);
    for (std::size_t i = 0; i < tape.enc_tokens.size(); ++i)
        g.src_embed.row(tape.enc_tokens[i]) += dx.row(static_cast<Index>(i)) * emb_scale;
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(const TaskBatch& batch, const ForwardOptions& options) const {
    ForwardResult<T> result;
    run(batch, options, &result, nullptr);
    return result;
}

template <typename T>
LossAndGrad<T> Transformer<T>::loss_and_grad(const TaskBatch& batch, const ForwardOptions& options) const {
    if (batch.num_predicted() == 0) throw InvalidArgument("loss_and_grad: batch has no predict-mask positions");
    if (options.ablation) throw InvalidArgument("loss_and_grad: ablation is an analysis-only option");
    Tape tape;
    ForwardOptions opt = options;
    opt.capture_attention = false;
    opt.skip_logits = false;
    LossAndGrad<T> out;
    out.loss = run(batch, opt, nullptr, &tape);
    out.n_predicted = tape.pred_rows.size();
    out.grads = params_.zeros_like();
    backward(batch, tape, out.grads);
    return out;
}

template <typename T>
double Transformer<T>::loss(const TaskBatch& batch, const ForwardOptions& options) const {
    if (batch.num_predicted() == 0) throw InvalidArgument("loss: batch has no predict-mask positions");
    ForwardOptions opt = options;
    opt.skip_logits = false;
    return run(batch, opt, nullptr, nullptr);
}

Model init_model(const ModelConfig& config) { return Model(config); }

template struct Params<float>;
template struct Params<double>;
template class Transformer<float>;
template class Transformer<double>;
template Mat<float> sinusoidal_positions<float>(std::size_t, std::size_t);
template Mat<double> sinusoidal_positions<double>(std::size_t, std::size_t);

}  // namespace repflow
