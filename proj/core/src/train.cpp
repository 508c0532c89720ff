#include "repflow/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace repflow {

double noam_rate(std::size_t step, std::size_t d_model, const AdamOptions& o) {
    if (step == 0) throw InvalidArgument("noam_rate: steps are 1-based");
    if (o.warmup == 0) throw InvalidArgument("noam_rate: warmup must be positive");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(o.warmup);
    return o.lr_scale * std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

template <typename T>
void adam_step(AdamState<T>& state, Transformer<T>& model, const Params<T>& grads, const AdamOptions& o) {
    grads.for_each([](const std::string& name, const auto& g) {
        if (!g.allFinite()) throw Error("adam_step: non-finite gradient in " + name);
    });
    auto p = tensors(model.params());
    auto m = tensors(state.m);
    auto v = tensors(state.v);
    auto g = tensors(const_cast<Params<T>&>(grads));
    if (p.size() != g.size() || p.size() != m.size()) throw InvalidArgument("adam_step: state shape mismatch");
    for (std::size_t t = 0; t < p.size(); ++t)
        if (p[t].size() != g[t].size() || p[t].size() != m[t].size())
            throw InvalidArgument("adam_step: shape mismatch in " + p[t].name);

    ++state.step;
    const double lr = noam_rate(state.step, model.config().d_model, o);
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(o.eps);
    for (std::size_t t = 0; t < p.size(); ++t) {
        T* w = p[t].data;
        T* mm = m[t].data;
        T* vv = v[t].data;
        const T* gg = g[t].data;
        for (std::size_t i = 0; i < p[t].size(); ++i) {
            mm[i] = b1 * mm[i] + (T(1) - b1) * gg[i];
            vv[i] = b2 * vv[i] + (T(1) - b2) * gg[i] * gg[i];
            w[i] -= step_size * mm[i] / (std::sqrt(vv[i] * inv_c2) + eps);
        }
    }
}

template void adam_step<float>(AdamState<float>&, Transformer<float>&, const Params<float>&, const AdamOptions&);
template void adam_step<double>(AdamState<double>&, Transformer<double>&, const Params<double>&, const AdamOptions&);

TrainingSet make_training_set(Task task, const Corpus& corpus, const Vocab& vocab, const Vocab* target_vocab) {
    TrainingSet set;
    set.task = task;
    if (task == Task::MT) {
        if (!corpus.is_parallel()) throw InvalidArgument("MT training needs a parallel corpus");
        if (!target_vocab) throw InvalidArgument("MT training needs a target vocabulary");
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        set.source.push_back(vocab.encode(corpus.sentences[i]));
        if (task == Task::MT) set.target.push_back(target_vocab->encode(corpus.targets[i]));
    }
    if (set.source.empty()) throw InvalidArgument("training corpus is empty");
    return set;
}

namespace {

std::size_t example_tokens(const TrainingSet& d, std::size_t i, std::size_t max_len) {
    auto cap = [&](std::size_t n) { return max_len ? std::min(n, max_len) : n; };
    std::size_t n = cap(d.source[i].size()) + 2;
    if (d.task == Task::MT) n += cap(d.target[i].size()) + 1;
    return n;
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(const TrainingSet& data, std::size_t batch_tokens,
                                                    std::size_t max_len, Rng rng) {
    std::vector<std::size_t> order(data.source.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> cur;
    std::size_t tokens = 0;
    for (auto i : order) {
        cur.push_back(i);
        tokens += example_tokens(data, i, max_len);
        if (tokens >= batch_tokens) {
            batches.push_back(std::move(cur));
            cur.clear();
            tokens = 0;
        }
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    return batches;
}

TaskBatch build_batch(const TrainingSet& data, std::span<const std::size_t> indices, std::size_t max_len,
                      std::size_t vocab_size, const MlmRates& rates, Rng& mask_rng) {
    if (data.task == Task::MT) {
        std::vector<EncodedPair> pairs;
        pairs.reserve(indices.size());
        for (auto i : indices) pairs.push_back({data.source[i], data.target[i]});
        return make_mt_batch(pairs, max_len);
    }
    std::vector<Encoded> rows;
    rows.reserve(indices.size());
    for (auto i : indices) rows.push_back(data.source[i]);
    if (data.task == Task::LM) return make_lm_batch(rows, max_len);
    return make_mlm_batch(rows, mask_rng, vocab_size, rates, max_len);
}

TrainSummary train(Model& model, const TrainingSet& data, const TrainOptions& o, const Rng& stream,
                   const TrainHooks& hooks) {
    const auto& cfg = model.config();
    if (data.task != cfg.task) throw InvalidArgument("train: corpus task does not match model task");
    if (data.source.empty()) throw InvalidArgument("train: empty training set");
    const Rng order_root = stream.substream("order");
    const Rng mask_root = stream.substream("mask");
    const Rng dropout_root = stream.substream("dropout");
    const Rng word_root = stream.substream("word_dropout");

    AdamState<float> adam(model.params());
    TrainSummary summary;
    std::vector<std::vector<std::size_t>> batches;
    std::size_t cursor = 0;
    double window = 0.0;
    std::size_t window_n = 0;
    for (std::size_t step = 1; step <= o.steps; ++step) {
        if (cursor == batches.size()) {
            batches = epoch_batches(data, o.batch_tokens, o.max_len, order_root.substream(summary.epochs_started));
            ++summary.epochs_started;
            cursor = 0;
        }
        Rng mask_rng = mask_root.substream(step);
        TaskBatch batch = build_batch(data, batches[cursor++], o.max_len, cfg.src_vocab, o.mlm, mask_rng);
        if (batch.num_predicted() == 0) continue;
        if (cfg.word_dropout > 0) {
            Rng wr = word_root.substream(step);
            summary.word_dropout_positions += count_content_positions(batch);
            summary.word_dropout_replaced += apply_word_dropout(batch, cfg.word_dropout, cfg.src_vocab, wr);
        }
        Rng drop_rng = dropout_root.substream(step);
        ForwardOptions fo;
        fo.train_mode = true;
        fo.dropout_rng = &drop_rng;
        auto lg = model.loss_and_grad(batch, fo);
        if (!std::isfinite(lg.loss))
            throw Error("training diverged at step " + std::to_string(step) + ": loss is " + std::to_string(lg.loss) +
                        "; lower adam.lr_scale or increase warmup");
        adam_step(adam, model, lg.grads, o.adam);
        window += lg.loss;
        ++window_n;
        const bool last = step == o.steps;
        if ((o.log_every && step % o.log_every == 0) || step == 1 || last) {
            const double mean = window / static_cast<double>(window_n);
            summary.losses.push_back({step, mean, noam_rate(step, cfg.d_model, o.adam)});
            spdlog::info("{} step {}/{} loss {:.4f}", to_string(cfg.task), step, o.steps, mean);
            window = 0.0;
            window_n = 0;
        }
        if (hooks.eval && o.eval_every && step % o.eval_every == 0) hooks.eval(step, model);
        if (hooks.checkpoint && ((o.checkpoint_every && step % o.checkpoint_every == 0) || last))
            hooks.checkpoint(step, model);
    }
    return summary;
}

}  // namespace repflow
