#pragma once

#include "repflow/corpus.hpp"
#include "repflow/model.hpp"

#include <filesystem>
#include <functional>
#include <vector>

namespace repflow {

struct AdamOptions {
    double lr_scale = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::size_t warmup = 400;
};

/// lr_scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double noam_rate(std::size_t step, std::size_t d_model, const AdamOptions& options);

template <typename T>
struct AdamState {
    explicit AdamState(const Params<T>& like) : m(like.zeros_like()), v(like.zeros_like()) {}
    Params<T> m, v;
    std::size_t step = 0;
};

/// One bias-corrected Adam update using the inverse-sqrt warmup schedule.
/// Throws Error on a non-finite gradient before touching any parameter.
template <typename T>
void adam_step(AdamState<T>& state, Transformer<T>& model, const Params<T>& grads, const AdamOptions& options);

/// Encoded training material for one task.
struct TrainingSet {
    Task task = Task::LM;
    std::vector<Encoded> source;
    /// MT only; aligned with `source`.
    std::vector<Encoded> target;
};

TrainingSet make_training_set(Task task, const Corpus& corpus, const Vocab& vocab, const Vocab* target_vocab);

struct TrainOptions {
    std::size_t steps = 1000;
    /// Sentences are added to a batch until source+target tokens reach this budget.
    std::size_t batch_tokens = 2048;
    std::size_t max_len = 64;
    AdamOptions adam;
    MlmRates mlm;
    std::size_t log_every = 100;
    std::size_t checkpoint_every = 0;
    std::size_t eval_every = 0;
};

struct LossPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainSummary {
    std::vector<LossPoint> losses;
    std::size_t word_dropout_replaced = 0;
    std::size_t word_dropout_positions = 0;
    std::size_t epochs_started = 0;
};

struct TrainHooks {
    /// Called after every `eval_every` steps.
    std::function<void(std::size_t step, const Model&)> eval;
    /// Called after every `checkpoint_every` steps and after the final step.
    std::function<void(std::size_t step, const Model&)> checkpoint;
};

/// Trains in place. Randomness comes from `stream` via the named substreams
/// "order" (per-epoch shuffles), "mask" (MLM corruption), "dropout" and
/// "word_dropout", each further indexed by epoch or step. Aborts with Error
/// when the loss becomes non-finite.
TrainSummary train(Model& model, const TrainingSet& data, const TrainOptions& options, const Rng& stream,
                   const TrainHooks& hooks = {});

/// Batches of sentence indices for one epoch, in shuffled order.
std::vector<std::vector<std::size_t>> epoch_batches(const TrainingSet& data, std::size_t batch_tokens,
                                                    std::size_t max_len, Rng rng);

TaskBatch build_batch(const TrainingSet& data, std::span<const std::size_t> indices, std::size_t max_len,
                      std::size_t vocab_size, const MlmRates& rates, Rng& mask_rng);

}  // namespace repflow
