#include "rsvqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "rsvqa/parallel.hpp"

namespace rsvqa {

const char* train_stage_name(TrainStage s) {
  switch (s) {
    case TrainStage::Pretrain: return "pretrain";
    case TrainStage::Finetune: return "finetune";
    case TrainStage::Joint: return "joint";
  }
  throw Error("unreachable train stage");
}

TrainStage train_stage_from_name(const std::string& s) {
  if (s == "pretrain") return TrainStage::Pretrain;
  if (s == "finetune") return TrainStage::Finetune;
  if (s == "joint") return TrainStage::Joint;
  throw BadConfig("unknown training stage '" + s + "'");
}

void TrainConfig::validate() const {
  if (lr < 0.0 || !std::isfinite(lr)) throw BadConfig("lr must be finite and >= 0");
  if (batch_size < 1) throw BadConfig("batch_size must be >= 1");
  if (steps < 0) throw BadConfig("steps must be >= 0");
  if (grad_clip_norm < 0.0) throw BadConfig("grad_clip_norm must be >= 0");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw BadConfig("lambda weights must be >= 0");
  if (stage == TrainStage::Joint && lambda1 == 0.0 && lambda2 == 0.0)
    throw BothZero("joint stage with lambda1 = lambda2 = 0");
}

std::vector<TrainSample> prepare_train_data(const Dataset& dataset, const Vocabulary& vocab) {
  std::vector<TrainSample> out;
  out.reserve(dataset.samples.size());
  std::vector<std::pair<std::string, ImageTensor>> cache;
  for (const auto& s : dataset.samples) {
    const auto hit = std::find_if(cache.begin(), cache.end(),
                                  [&](const auto& e) { return e.first == s.image_path; });
    if (hit == cache.end()) {
      cache.emplace_back(s.image_path, dataset.load_image(s));
      out.push_back(TrainSample{cache.back().second, s.question, vocab.encode(s.answer)});
    } else {
      out.push_back(TrainSample{hit->second, s.question, vocab.encode(s.answer)});
    }
  }
  return out;
}

Batch as_batch(const std::vector<TrainSample>& data) {
  Batch b;
  b.reserve(data.size());
  for (const auto& s : data) b.push_back(&s);
  return b;
}

namespace {

/// Endless stream of sample indices: a fresh seeded permutation per epoch.
class IndexStream {
 public:
  IndexStream(std::size_t n, Rng rng) : rng_(rng), perm_(n) {
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;
    reshuffle();
  }
  std::size_t next() {
    if (pos_ == perm_.size()) reshuffle();
    return perm_[pos_++];
  }
  const Rng& rng() const { return rng_; }

 private:
  void reshuffle() {
    rng_.shuffle(perm_);
    pos_ = 0;
  }
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
};

struct SampleTask {
  const TrainSample* sample;
  PromptMode mode;
  double weight;  // contribution of this sample's gradient to the batch gradient
};

struct SampleOutcome {
  double loss = 0.0;
  std::vector<std::vector<float>> grads;  // per parameter, in canonical order
};

SampleOutcome sample_backward(const VlmModel& model, const Vocabulary& vocab,
                              const SampleTask& task, LossNorm norm) {
  Tape tape;
  const BoundModel<float> bm{&model, &tape};
  const std::vector<int> prompt = build_prompt(vocab, task.sample->question, task.mode);
  NllResult<float> nll = sample_nll(bm, task.sample->image, prompt, task.sample->answer_ids);
  Tensor loss =
      norm == LossNorm::PerToken ? scale(nll.sum, 1.0 / nll.count) : nll.sum;
  tape.backward(loss);

  SampleOutcome out;
  out.loss = static_cast<double>(loss.item());
  out.grads.reserve(model.params.size());
  for (const auto& [name, p] : model.params) {
    (void)name;
    const int node = tape.leaf_node(p);
    if (node >= 0) {
      out.grads.push_back(tape.grad_view(node));
    } else {
      out.grads.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
    }
  }
  return out;
}

}  // namespace

TrainResult train(VlmModel& model, const std::vector<TrainSample>& data, const Vocabulary& vocab,
                  const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw EmptyBatch("training set is empty");

  const Rng master(config.seed);
  IndexStream stream(data.size(), master.stream("shuffle"));
  IndexStream stream_fin(data.size(), master.stream("shuffle-finetune"));  // joint only

  const std::size_t n_params = model.params.size();
  std::vector<std::vector<float>> acc(n_params);
  std::vector<std::vector<float>> adam_m, adam_v;
  if (config.optimizer == OptimizerKind::Adam) {
    adam_m.resize(n_params);
    adam_v.resize(n_params);
    for (std::size_t k = 0; k < n_params; ++k) {
      adam_m[k].assign(static_cast<std::size_t>(model.params[k].second.size()), 0.0f);
      adam_v[k].assign(static_cast<std::size_t>(model.params[k].second.size()), 0.0f);
    }
  }

  TrainResult result;
  result.log.reserve(static_cast<std::size_t>(config.steps));
  const char* stage = train_stage_name(config.stage);

  for (int step = 1; step <= config.steps; ++step) {
    // Assemble this step's task list in a fixed order.
    std::vector<SampleTask> tasks;
    const int b = config.batch_size;
    if (config.stage == TrainStage::Joint) {
      tasks.reserve(static_cast<std::size_t>(2 * b));
      for (int i = 0; i < b; ++i)
        tasks.push_back({&data[stream.next()], PromptMode::Pretrain, config.lambda1 / b});
      for (int i = 0; i < b; ++i)
        tasks.push_back({&data[stream_fin.next()], PromptMode::Finetune, config.lambda2 / b});
    } else {
      const PromptMode mode =
          config.stage == TrainStage::Pretrain ? PromptMode::Pretrain : PromptMode::Finetune;
      tasks.reserve(static_cast<std::size_t>(b));
      for (int i = 0; i < b; ++i) tasks.push_back({&data[stream.next()], mode, 1.0 / b});
    }

    std::vector<SampleOutcome> outcomes(tasks.size());
    try {
      parallel_for(static_cast<int>(tasks.size()), [&](int i) {
        outcomes[static_cast<std::size_t>(i)] =
            sample_backward(model, vocab, tasks[static_cast<std::size_t>(i)], config.loss_norm);
      });
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(step) + ": " + e.what());
    }

    // Fixed-order reduction keeps training bit-reproducible.
    double loss = 0.0;
    for (std::size_t k = 0; k < n_params; ++k)
      acc[k].assign(static_cast<std::size_t>(model.params[k].second.size()), 0.0f);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      loss += tasks[i].weight * outcomes[i].loss;
      const float w = static_cast<float>(tasks[i].weight);
      for (std::size_t k = 0; k < n_params; ++k) {
        const auto& g = outcomes[i].grads[k];
        auto& a = acc[k];
        for (std::size_t j = 0; j < a.size(); ++j) a[j] += w * g[j];
      }
    }
    if (!std::isfinite(loss))
      throw NumericalError("step " + std::to_string(step) + ": non-finite loss");

    if (config.grad_clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& a : acc)
        for (const float g : a) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip_norm) {
        const float s = static_cast<float>(config.grad_clip_norm / norm);
        for (auto& a : acc)
          for (auto& g : a) g *= s;
      }
    }

    if (config.optimizer == OptimizerKind::Adam) {
      const double bc1 = 1.0 - std::pow(config.adam_beta1, step);
      const double bc2 = 1.0 - std::pow(config.adam_beta2, step);
      for (std::size_t k = 0; k < n_params; ++k) {
        auto& p = model.params[k].second.data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          const float g = acc[k][j];
          adam_m[k][j] = static_cast<float>(config.adam_beta1 * adam_m[k][j] +
                                            (1.0 - config.adam_beta1) * g);
          adam_v[k][j] = static_cast<float>(config.adam_beta2 * adam_v[k][j] +
                                            (1.0 - config.adam_beta2) * g * g);
          const double mhat = adam_m[k][j] / bc1;
          const double vhat = adam_v[k][j] / bc2;
          p[j] -= static_cast<float>(config.lr * mhat / (std::sqrt(vhat) + config.adam_eps));
        }
      }
    } else {
      for (std::size_t k = 0; k < n_params; ++k) {
        auto& p = model.params[k].second.data();
        for (std::size_t j = 0; j < p.size(); ++j)
          p[j] -= static_cast<float>(config.lr * acc[k][j]);
      }
    }

    for (const auto& [name, p] : model.params) {
      (void)name;
      for (const float v : p.data())
        if (!std::isfinite(v))
          throw NumericalError("step " + std::to_string(step) + ": non-finite parameter");
    }

    result.log.push_back(StepLog{step, stage, loss});
    result.final_loss = loss;
  }

  result.rng_state = stream.rng().state();
  return result;
}

std::string loss_log_csv(const std::vector<StepLog>& log) {
  std::string out = "step,stage,loss\n";
  char line[96];
  for (const auto& e : log) {
    std::snprintf(line, sizeof line, "%d,%s,%.9g\n", e.step, e.stage.c_str(), e.loss);
    out += line;
  }
  return out;
}

}  // namespace rsvqa
