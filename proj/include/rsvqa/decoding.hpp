#pragma once

#include <string>
#include <vector>

#include "rsvqa/model.hpp"

namespace rsvqa {

/// Partial answer under construction: tokens after BOS, accumulated log
/// probability, and whether EOS has been emitted. Finished hypotheses keep
/// the EOS as their last token; tokens never exceed max_answer_len.
struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

enum class LengthNorm { None, ByLength };

struct DecodeResult {
  std::vector<int> tokens;  // answer tokens, terminal EOS stripped
  double score = 0.0;       // raw sum of token log probs, EOS included
};

struct ChoiceScores {
  int chosen = 0;
  std::vector<double> scores;  // per-choice normalized log probs
};

/// Argmax decoding until EOS or the length cap (ties to the lowest token
/// id). When only one slot is left EOS is forced, so every decode is a
/// well-formed EOS-terminated sequence.
std::vector<int> greedy_decode(const VlmModel& model, const Vocabulary& vocab,
                               const ImageTensor& image, const std::string& question,
                               PromptMode mode, int max_answer_len = 8);

/// Beam search over the answer objective: expand each live hypothesis over
/// the full vocabulary, keep the top k by accumulated log prob, move
/// EOS-terminated hypotheses to a completed pool, and return the best
/// completed sequence (by raw sum, or sum/length under ByLength). The
/// reported score is always the raw sum, which equals re-scoring the
/// returned tokens with sequence_log_prob.
DecodeResult beam_search(const VlmModel& model, const Vocabulary& vocab, const ImageTensor& image,
                         const std::string& question, PromptMode mode, int k,
                         int max_answer_len = 8, LengthNorm length_norm = LengthNorm::None);

/// Literal argmax over every EOS-terminated sequence up to the cap
/// (verification oracle; refuses search spaces past 10^6 sequences). Ties
/// break to the lexicographically smallest token sequence.
DecodeResult exhaustive_argmax(const VlmModel& model, const Vocabulary& vocab,
                               const ImageTensor& image, const std::string& question,
                               PromptMode mode, int max_answer_len);

/// Scores each choice with sequence_log_prob, normalized per scored token
/// (answer tokens plus EOS) under ByLength. Ties go to the lowest index.
ChoiceScores score_choices(const VlmModel& model, const Vocabulary& vocab,
                           const ImageTensor& image, const std::string& question, PromptMode mode,
                           const std::vector<std::string>& choices,
                           LengthNorm length_norm = LengthNorm::ByLength);

}  // namespace rsvqa
