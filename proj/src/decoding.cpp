#include "rsvqa/decoding.hpp"

#include <algorithm>
#include <cmath>

namespace rsvqa {

namespace {

std::vector<double> log_softmax_row(const Tensor& logits) {
  const auto& x = logits.data();
  double mx = static_cast<double>(x[0]);
  for (const float v : x) mx = std::max(mx, static_cast<double>(v));
  double denom = 0.0;
  for (const float v : x) denom += std::exp(static_cast<double>(v) - mx);
  const double log_denom = std::log(denom);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (static_cast<double>(x[i]) - mx) - log_denom;
  return out;
}

std::vector<int> with_prefix(const std::vector<int>& prompt, const std::vector<int>& answer) {
  std::vector<int> ids = prompt;
  ids.push_back(kBosId);
  ids.insert(ids.end(), answer.begin(), answer.end());
  return ids;
}

/// Selection order: higher score first, then lexicographically smaller
/// token sequence. Exact float ties are resolved identically everywhere so
/// beam search and the exhaustive oracle agree.
bool better(double score_a, const std::vector<int>& tokens_a, double score_b,
            const std::vector<int>& tokens_b) {
  if (score_a != score_b) return score_a > score_b;
  return tokens_a < tokens_b;
}

std::vector<int> strip_eos(std::vector<int> tokens) {
  if (!tokens.empty() && tokens.back() == kEosId) tokens.pop_back();
  return tokens;
}

}  // namespace

std::vector<int> greedy_decode(const VlmModel& model, const Vocabulary& vocab,
                               const ImageTensor& image, const std::string& question,
                               PromptMode mode, int max_answer_len) {
  const std::vector<int> prompt = build_prompt(vocab, question, mode);
  const VisualFeatures features = encode_image(model, image);

  std::vector<int> answer;
  while (true) {
    if (static_cast<int>(answer.size()) == max_answer_len - 1) break;  // forced EOS
    const Tensor logits = decode_step(model, features, with_prefix(prompt, answer));
    int best = 0;
    const auto& row = logits.data();
    for (int v = 1; v < static_cast<int>(row.size()); ++v)
      if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
    if (best == kEosId) break;
    answer.push_back(best);
  }
  return answer;
}

DecodeResult beam_search(const VlmModel& model, const Vocabulary& vocab, const ImageTensor& image,
                         const std::string& question, PromptMode mode, int k, int max_answer_len,
                         LengthNorm length_norm) {
  if (k < 1) throw BadBeamWidth("beam width " + std::to_string(k));
  if (max_answer_len < 1) throw BadConfig("max_answer_len must be >= 1");
  const std::vector<int> prompt = build_prompt(vocab, question, mode);
  const VisualFeatures features = encode_image(model, image);
  const int vocab_size = model.config.vocab_size;

  std::vector<Hypothesis> live = {Hypothesis{}};
  std::vector<Hypothesis> completed;

  while (!live.empty()) {
    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * static_cast<std::size_t>(vocab_size));
    for (const Hypothesis& h : live) {
      const Tensor logits = decode_step(model, features, with_prefix(prompt, h.tokens));
      const std::vector<double> logp = log_softmax_row(logits);
      const bool last_slot = static_cast<int>(h.tokens.size()) == max_answer_len - 1;
      for (int v = 0; v < vocab_size; ++v) {
        if (last_slot && v != kEosId) continue;  // only EOS fits in the final slot
        Hypothesis next = h;
        next.tokens.push_back(v);
        next.log_prob += logp[static_cast<std::size_t>(v)];
        next.finished = v == kEosId;
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Hypothesis& a, const Hypothesis& b) {
      return better(a.log_prob, a.tokens, b.log_prob, b.tokens);
    });
    if (static_cast<int>(candidates.size()) > k) candidates.resize(static_cast<std::size_t>(k));

    live.clear();
    for (Hypothesis& c : candidates) {
      if (c.finished) {
        completed.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }

  // Forced EOS in the last slot guarantees at least one completion.
  const auto selection_score = [&](const Hypothesis& h) {
    return length_norm == LengthNorm::ByLength
               ? h.log_prob / static_cast<double>(h.tokens.size())
               : h.log_prob;
  };
  const Hypothesis* best = nullptr;
  for (const Hypothesis& h : completed) {
    if (!best || better(selection_score(h), h.tokens, selection_score(*best), best->tokens))
      best = &h;
  }
  return DecodeResult{strip_eos(best->tokens), best->log_prob};
}

DecodeResult exhaustive_argmax(const VlmModel& model, const Vocabulary& vocab,
                               const ImageTensor& image, const std::string& question,
                               PromptMode mode, int max_answer_len) {
  if (max_answer_len < 1) throw BadConfig("max_answer_len must be >= 1");
  const int vocab_size = model.config.vocab_size;
  const double space = std::pow(static_cast<double>(vocab_size), max_answer_len);
  if (space > 1e6)
    throw SearchSpaceTooLarge(std::to_string(vocab_size) + "^" + std::to_string(max_answer_len) +
                              " sequences");

  const std::vector<int> prompt = build_prompt(vocab, question, mode);
  const VisualFeatures features = encode_image(model, image);

  bool have_best = false;
  DecodeResult best;
  std::vector<int> content;

  const std::function<void(double)> visit = [&](double log_prob) {
    const Tensor logits = decode_step(model, features, with_prefix(prompt, content));
    const std::vector<double> logp = log_softmax_row(logits);
    for (int v = 0; v < vocab_size; ++v) {
      if (v == kEosId) {
        const double total = log_prob + logp[static_cast<std::size_t>(v)];
        if (!have_best || better(total, content, best.score, best.tokens)) {
          best = DecodeResult{content, total};
          have_best = true;
        }
      } else if (static_cast<int>(content.size()) < max_answer_len - 1) {
        content.push_back(v);
        visit(log_prob + logp[static_cast<std::size_t>(v)]);
        content.pop_back();
      }
    }
  };
  visit(0.0);
  return best;
}

ChoiceScores score_choices(const VlmModel& model, const Vocabulary& vocab,
                           const ImageTensor& image, const std::string& question, PromptMode mode,
                           const std::vector<std::string>& choices, LengthNorm length_norm) {
  if (choices.empty()) throw EmptyChoices("no choices to score");
  ChoiceScores out;
  out.scores.reserve(choices.size());
  for (const auto& choice : choices) {
    const std::vector<int> ids = vocab.encode(choice);
    const double lp = sequence_log_prob(model, vocab, image, question, ids, mode);
    const int scored_tokens = static_cast<int>(ids.size()) + 1;  // answer plus EOS
    out.scores.push_back(length_norm == LengthNorm::ByLength ? lp / scored_tokens : lp);
  }
  out.chosen = 0;
  for (int i = 1; i < static_cast<int>(out.scores.size()); ++i) {
    if (out.scores[static_cast<std::size_t>(i)] > out.scores[static_cast<std::size_t>(out.chosen)])
      out.chosen = i;
  }
  return out;
}

}  // namespace rsvqa
