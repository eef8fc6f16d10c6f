#include "rsvqa/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include "rsvqa/errors.hpp"
#include "rsvqa/io.hpp"

namespace rsvqa {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>", "<img>"};
  return kReserved;
}

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> words;
  std::istringstream in(normalized);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace

std::string normalize_text(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (std::ispunct(c)) continue;
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int min_count) {
  if (texts.empty()) throw EmptyCorpus("no texts given");
  std::map<std::string, long long> counts;
  for (const auto& t : texts)
    for (const auto& w : split_words(normalize_text(t))) ++counts[w];

  std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.id_to_token_ = reserved_tokens();
  for (const auto& [word, count] : ranked) {
    if (count < min_count) continue;
    v.token_to_id_.emplace(word, static_cast<int>(v.id_to_token_.size()));
    v.id_to_token_.push_back(word);
  }
  if (v.size() == kNumReserved) throw EmptyCorpus("no word met min_count");
  return v;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(normalize_text(text))) {
    const auto it = token_to_id_.find(w);
    ids.push_back(it == token_to_id_.end() ? kUnkId : it->second);
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (const int id : ids) {
    if (id < 0 || id >= size()) throw OutOfVocab("id " + std::to_string(id));
    if (id == kPadId || id == kBosId || id == kEosId || id == kImgId) continue;
    if (!out.empty()) out.push_back(' ');
    out += id_to_token_[static_cast<std::size_t>(id)];
  }
  return out;
}

int Vocabulary::id(const std::string& token) const {
  const auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw OutOfVocab("id " + std::to_string(id));
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : id_to_token_) {
    out += t;
    out.push_back('\n');
  }
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& bytes) {
  std::vector<std::string> lines;
  std::string cur;
  for (const char c : bytes) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  if (lines.size() < kNumReserved) throw FormatError("vocabulary file shorter than reserved header");
  for (int i = 0; i < kNumReserved; ++i) {
    if (lines[static_cast<std::size_t>(i)] != reserved_tokens()[static_cast<std::size_t>(i)])
      throw FormatError("vocabulary reserved header mismatch on line " + std::to_string(i));
  }
  Vocabulary v;
  v.id_to_token_ = lines;
  for (std::size_t i = kNumReserved; i < lines.size(); ++i) {
    if (lines[i].empty()) throw FormatError("empty token at line " + std::to_string(i));
    if (!v.token_to_id_.emplace(lines[i], static_cast<int>(i)).second)
      throw FormatError("duplicate token '" + lines[i] + "'");
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

}  // namespace rsvqa
