#pragma once

#include "repflow/corpus.hpp"
#include "repflow/model.hpp"
#include "repflow/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace fixtures {

using namespace repflow;

inline ModelConfig tiny_config(Task task, std::size_t vocab = 13) {
    ModelConfig c;
    c.task = task;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 4;
    c.d_ff = 24;
    c.src_vocab = vocab;
    c.tgt_vocab = task == Task::MT ? vocab + 2 : 0;
    c.dropout = 0.0;
    c.max_position = 32;
    c.seed = 5;
    return c;
}

inline std::vector<Encoded> random_sentences(std::size_t n, std::size_t min_len, std::size_t max_len,
                                             std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Encoded> out(n);
    for (auto& s : out) {
        const auto len = min_len + rng.uniform_int(max_len - min_len + 1);
        for (std::size_t i = 0; i < len; ++i)
            s.push_back(static_cast<TokenId>(Vocab::kNumReserved + rng.uniform_int(vocab - Vocab::kNumReserved)));
    }
    return out;
}

/// A small batch of the requested task with varied row lengths.
inline TaskBatch tiny_batch(Task task, std::size_t vocab, std::uint64_t seed) {
    auto src = random_sentences(3, 2, 6, vocab, seed);
    if (task == Task::LM) return make_lm_batch(src, 0);
    if (task == Task::MLM) {
        Rng rng(seed + 1);
        MlmRates rates;
        rates.select_rate = 0.5;
        auto b = make_mlm_batch(src, rng, vocab, rates, 0);
        if (b.num_predicted() == 0) b.predict_mask[1] = 1, b.labels[1] = src[0][0];
        return b;
    }
    auto tgt = random_sentences(3, 1, 5, vocab + 2, seed + 7);
    std::vector<EncodedPair> pairs;
    for (std::size_t i = 0; i < src.size(); ++i) pairs.push_back({src[i], tgt[i]});
    return make_mt_batch(pairs, 0);
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t checked = 0;
};

/// Central differences on every parameter entry. The dropout stream is re-seeded
/// identically for each evaluation so stochastic masks are shared.
inline GradCheckResult gradient_check(ModelD& model, const TaskBatch& batch, double step = 1e-5,
                                      std::uint64_t dropout_seed = 0) {
    auto opts = [&](Rng& r) {
        ForwardOptions o;
        o.train_mode = model.config().dropout > 0;
        o.dropout_rng = &r;
        return o;
    };
    Rng r0(dropout_seed);
    const auto analytic = model.loss_and_grad(batch, opts(r0));
    auto grads = analytic.grads;
    auto gt = tensors(grads);
    auto pt = tensors(model.params());
    GradCheckResult res;
    for (std::size_t t = 0; t < pt.size(); ++t) {
        for (std::size_t i = 0; i < pt[t].size(); ++i) {
            double& w = pt[t].data[i];
            const double saved = w;
            w = saved + step;
            Rng r1(dropout_seed);
            const double lp = model.loss(batch, opts(r1));
            w = saved - step;
            Rng r2(dropout_seed);
            const double lm = model.loss(batch, opts(r2));
            w = saved;
            const double num = (lp - lm) / (2 * step);
            const double ana = gt[t].data[i];
            const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
            const double rel = std::abs(num - ana) / denom;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst = pt[t].name + "[" + std::to_string(i) + "]";
            }
            ++res.checked;
        }
    }
    return res;
}

}  // namespace fixtures
