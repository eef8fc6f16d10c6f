#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rsvqa/corpus.hpp"
#include "rsvqa/decoding.hpp"
#include "rsvqa/training.hpp"

namespace rsvqa {

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Exact match after text normalization; predictions outside {yes, no}
/// count as wrong.
double yesno_accuracy(const std::vector<std::string>& pred, const std::vector<std::string>& gold);

/// Exact index match rate.
double mc_accuracy(const std::vector<int>& pred_idx, const std::vector<int>& gold_idx);

/// Token-multiset F1 for one pair: precision over predicted tokens, recall
/// over gold tokens, 0 when only one side is empty, 1 when both are.
double token_f1(const std::string& pred, const std::string& gold);

/// Macro average of token_f1 over the sample list.
double open_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold);

// ---------------------------------------------------------------------------
// dataset evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
  int beam_k = 3;
  int max_answer_len = 8;
  LengthNorm beam_norm = LengthNorm::None;       // raw-sum objective for generation
  LengthNorm mc_norm = LengthNorm::ByLength;     // choices differ in length
  PromptMode prompt_mode = PromptMode::Finetune;
  std::uint64_t seed = 0;  // recorded in the report; evaluation itself is deterministic
};

/// Per-question-type scores plus run metadata. Metrics are fractions in
/// [0, 1]; a type absent from the dataset reports no metric and count 0.
struct MetricsReport {
  std::optional<double> yesno_acc;
  std::optional<double> mc_acc;
  std::optional<double> open_f1;
  int yesno_count = 0;
  int mc_count = 0;
  int open_count = 0;

  std::string checkpoint_id;
  std::string dataset_id;
  std::string prompt_mode;
  std::string f1_definition = "token-multiset F1, macro-averaged";
  int beam_k = 0;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  /// Aligned-column table with the three metric columns, percentages to one
  /// decimal, '-' for absent metrics.
  std::string to_table() const;
};

/// Decodes every sample (beam search for yes/no and open questions, choice
/// scoring for multiple choice) and reduces to a MetricsReport. Pure
/// function of (model, dataset, config); per-sample work may run on worker
/// threads but reduction order is fixed.
MetricsReport evaluate(const VlmModel& model, const Vocabulary& vocab, const Dataset& dataset,
                       const EvalConfig& config);

/// Train-split vocabulary: manifest questions and answers plus the prompt
/// template and the closed answer words (yes/no, class names, count words),
/// so every legal answer stays in-vocabulary.
Vocabulary build_dataset_vocab(const Dataset& dataset);

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

struct AblationConfig {
  ModelConfig model;
  TrainConfig base;                          // optimizer settings shared by all variants
  EvalConfig eval;
  int budget_steps = 500;                    // per stage
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

/// Three rows: the full two-stage pipeline, finetuning only ("w/o DAP") and
/// pretraining only ("w/o PBF", evaluated with pretrain-mode prompts). Each
/// metric is the median over the configured seeds.
struct AblationReport {
  std::vector<std::string> row_names;
  std::vector<MetricsReport> rows;

  std::string to_json() const;
  std::string to_table() const;
};

AblationReport run_ablation(const Dataset& train_split, const Dataset& heldout_split,
                            const AblationConfig& config);

// ---------------------------------------------------------------------------
// human evaluation aggregation
// ---------------------------------------------------------------------------

struct HumanEvalRecord {
  std::string method;
  std::string criterion;  // correctness | relevance | language_quality
  int score = 0;          // 1..5
  std::string annotator;
  std::string question_id;
};

/// CSV with header `method,criterion,score,annotator,question_id`.
std::vector<HumanEvalRecord> parse_human_eval_csv(const std::string& text);

/// Mean score per (method, criterion) rounded to one decimal; methods keep
/// their first-appearance order.
struct HumanEvalReport {
  std::vector<std::string> methods;
  // per method: [correctness, relevance, language_quality]; absent pairs are negative
  std::vector<std::array<double, 3>> means;

  std::string to_json() const;
  std::string to_table() const;
};

HumanEvalReport aggregate_human_eval(const std::vector<HumanEvalRecord>& records);

}  // namespace rsvqa
