#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "rsvqa/model.hpp"
#include "rsvqa/tokenizer.hpp"

namespace rsvqa {

inline constexpr int kCheckpointFormatVersion = 1;

/// Model parameters plus everything needed to use them: the vocabulary, the
/// stage that produced them, the step count, and the training RNG state.
struct Checkpoint {
  VlmModel model;
  Vocabulary vocab = Vocabulary::build({"placeholder"});
  std::string stage = "init";
  long long step = 0;
  std::array<std::uint64_t, 4> rng_state{};

  /// Prompt mode implied by the stage: pretrain-only checkpoints answer with
  /// pretrain prompts, everything else with the template.
  PromptMode prompt_mode() const {
    return stage == "pretrain" ? PromptMode::Pretrain : PromptMode::Finetune;
  }
};

/// Directory layout: manifest.json (format version, config, stage, step, rng
/// state, vocab hash, per-tensor table with offsets and SHA-256 digests),
/// weights.bin (concatenated little-endian f32 in canonical parameter
/// order), vocab.txt. Serialization is canonical: load followed by save
/// reproduces the files byte for byte.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Stable identifier of the weights (SHA-256 of weights.bin).
std::string checkpoint_id(const std::filesystem::path& dir);

}  // namespace rsvqa
