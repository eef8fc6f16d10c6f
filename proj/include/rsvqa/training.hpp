#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsvqa/corpus.hpp"
#include "rsvqa/model.hpp"

namespace rsvqa {

enum class TrainStage { Pretrain, Finetune, Joint };
enum class OptimizerKind { Sgd, Adam };

/// How the per-sample likelihood enters the batch objective. PerToken
/// divides each sample's NLL by its supervised token count, which decouples
/// the loss scale from answer length; PerSequence keeps the raw sum.
enum class LossNorm { PerToken, PerSequence };

const char* train_stage_name(TrainStage s);
TrainStage train_stage_from_name(const std::string& s);

struct TrainConfig {
  TrainStage stage = TrainStage::Pretrain;
  double lr = 3e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int steps = 500;
  double lambda1 = 1.0;  // joint stage only
  double lambda2 = 1.0;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;  // global L2; 0 disables
  LossNorm loss_norm = LossNorm::PerToken;

  void validate() const;
};

/// One training record with the image preloaded and the answer tokenized.
struct TrainSample {
  ImageTensor image;
  std::string question;
  std::vector<int> answer_ids;
};

std::vector<TrainSample> prepare_train_data(const Dataset& dataset, const Vocabulary& vocab);

using Batch = std::vector<const TrainSample*>;
Batch as_batch(const std::vector<TrainSample>& data);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean over the batch of the per-sample answer NLL under `mode` prompts.
template <class T>
TensorT<T> stage_loss(const VlmModelT<T>& m, const Vocabulary& vocab, const Batch& batch,
                      PromptMode mode, LossNorm norm = LossNorm::PerToken,
                      TapeT<T>* tape = nullptr) {
  if (batch.empty()) throw EmptyBatch("loss over an empty batch");
  const BoundModel<T> bm{&m, tape};
  TensorT<T> acc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainSample& s = *batch[i];
    const std::vector<int> prompt = build_prompt(vocab, s.question, mode);
    NllResult<T> nll = sample_nll(bm, s.image, prompt, s.answer_ids);
    TensorT<T> loss_i = norm == LossNorm::PerToken ? scale(nll.sum, 1.0 / nll.count) : nll.sum;
    acc = i == 0 ? loss_i : add(acc, loss_i);
  }
  return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

template <class T>
TensorT<T> pretrain_loss(const VlmModelT<T>& m, const Vocabulary& vocab, const Batch& batch,
                         LossNorm norm = LossNorm::PerToken, TapeT<T>* tape = nullptr) {
  return stage_loss(m, vocab, batch, PromptMode::Pretrain, norm, tape);
}

template <class T>
TensorT<T> finetune_loss(const VlmModelT<T>& m, const Vocabulary& vocab, const Batch& batch,
                         LossNorm norm = LossNorm::PerToken, TapeT<T>* tape = nullptr) {
  return stage_loss(m, vocab, batch, PromptMode::Finetune, norm, tape);
}

/// lambda1 * pretrain + lambda2 * finetune, combined in double precision so
/// the weighted sum is linear to well under 1e-7 relative.
template <class T>
TensorT<T> total_loss(const VlmModelT<T>& m, const Vocabulary& vocab, const Batch& pre_batch,
                      const Batch& fin_batch, double lambda1, double lambda2,
                      LossNorm norm = LossNorm::PerToken, TapeT<T>* tape = nullptr) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw BadConfig("loss weights must be non-negative");
  if (lambda1 == 0.0 && lambda2 == 0.0) throw BothZero("lambda1 and lambda2 are both zero");
  const TensorT<T> pre = pretrain_loss(m, vocab, pre_batch, norm, tape);
  const TensorT<T> fin = finetune_loss(m, vocab, fin_batch, norm, tape);
  return affine_combine(pre, lambda1, fin, lambda2);
}

// ---------------------------------------------------------------------------
// optimization
// ---------------------------------------------------------------------------

struct StepLog {
  int step = 0;
  std::string stage;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<StepLog> log;
  double final_loss = 0.0;  // loss at the last executed step (0 steps: NaN-free 0)
  std::array<std::uint64_t, 4> rng_state{};
};

/// Runs `config.steps` optimizer updates over seeded-shuffled batches,
/// mutating `model` in place. Per-sample gradients may be computed on worker
/// threads but are accumulated in sample-index order, so the result is
/// bit-identical for any worker count. Raises NumericalError naming the step
/// if a loss or update goes non-finite.
TrainResult train(VlmModel& model, const std::vector<TrainSample>& data, const Vocabulary& vocab,
                  const TrainConfig& config);

/// `step,stage,loss` CSV for a training log.
std::string loss_log_csv(const std::vector<StepLog>& log);

}  // namespace rsvqa
