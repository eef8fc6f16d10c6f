#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace rsvqa {

// Reserved token ids. These are fixed for every vocabulary; real words start
// at id 5.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kImgId = 4;  // placeholder the model swaps for projected visual features
inline constexpr int kNumReserved = 5;

/// Lowercase, strip ASCII punctuation, collapse whitespace.
std::string normalize_text(const std::string& text);

/// Word-level vocabulary. Immutable once built; ids >= 5 are assigned by
/// descending corpus frequency, ties broken lexicographically.
class Vocabulary {
 public:
  static Vocabulary build(const std::vector<std::string>& texts, int min_count = 1);

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }
  int id(const std::string& token) const;  // UNK for unknown words
  const std::string& token(int id) const;  // OutOfVocab for bad ids

  /// Line-oriented file: 5 reserved lines, then one token per line
  /// (line number - 5 == id - 5). Round-trips bit-exactly.
  std::string serialize() const;
  static Vocabulary deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  Vocabulary() = default;
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace rsvqa
