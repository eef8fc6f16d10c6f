#include "rsvqa/checkpoint.hpp"

#include <cstring>

#include "json.hpp"
#include "rsvqa/errors.hpp"
#include "rsvqa/io.hpp"
#include "rsvqa/sha256.hpp"

namespace rsvqa {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_enc_layers"] = c.n_enc_layers;
  j["n_dec_layers"] = c.n_dec_layers;
  j["d_ff"] = c.d_ff;
  j["patch_size"] = c.patch_size;
  j["max_seq_len"] = c.max_seq_len;
  j["vocab_size"] = c.vocab_size;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["image_c"] = c.image_c;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.image_c = j.at("image_c").get<int>();
  } catch (const json::exception& e) {
    throw CorruptManifest(std::string("bad model config: ") + e.what());
  }
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());

  std::string weights;
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.model.params) {
    const std::size_t offset = weights.size();
    const std::size_t length = t.data().size() * 4;
    weights.append(reinterpret_cast<const char*>(t.data().data()), length);
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["length"] = length;
    entry["sha256"] = sha256_hex(weights.data() + offset, length);
    tensors.push_back(entry);
  }

  const std::string vocab_bytes = ckpt.vocab.serialize();

  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["model_config"] = config_to_json(ckpt.model.config);
  manifest["stage"] = ckpt.stage;
  manifest["step"] = ckpt.step;
  manifest["rng_state"] = ckpt.rng_state;
  manifest["vocab_sha256"] = sha256_hex(vocab_bytes);
  manifest["tensors"] = tensors;

  write_file_atomic(dir / "weights.bin", weights);
  write_file_atomic(dir / "vocab.txt", vocab_bytes);
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CorruptManifest(std::string("manifest.json: ") + e.what());
  }

  if (!manifest.contains("format_version") || !manifest["format_version"].is_number_integer())
    throw CorruptManifest("missing format_version");
  const int version = manifest["format_version"].get<int>();
  if (version != kCheckpointFormatVersion)
    throw VersionMismatch("checkpoint format " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointFormatVersion));

  Checkpoint ckpt;
  try {
    ckpt.model.config = config_from_json(manifest.at("model_config"));
    ckpt.stage = manifest.at("stage").get<std::string>();
    ckpt.step = manifest.at("step").get<long long>();
    const auto rng = manifest.at("rng_state").get<std::vector<std::uint64_t>>();
    if (rng.size() != 4) throw CorruptManifest("rng_state must hold 4 words");
    std::copy(rng.begin(), rng.end(), ckpt.rng_state.begin());
  } catch (const json::exception& e) {
    throw CorruptManifest(std::string("manifest fields: ") + e.what());
  }
  try {
    ckpt.model.config.validate();
  } catch (const BadConfig& e) {
    throw CorruptManifest(std::string("invalid model config: ") + e.what());
  }

  const std::string vocab_bytes = read_file(dir / "vocab.txt");
  if (!manifest.contains("vocab_sha256") || manifest["vocab_sha256"] != sha256_hex(vocab_bytes))
    throw CorruptManifest("vocab.txt does not match its recorded hash");
  ckpt.vocab = Vocabulary::deserialize(vocab_bytes);

  const std::string weights = read_file(dir / "weights.bin");
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw CorruptManifest("missing tensor table");
  for (const auto& entry : manifest["tensors"]) {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0, length = 0;
    std::string sha;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<std::vector<int>>();
      offset = entry.at("offset").get<std::size_t>();
      length = entry.at("length").get<std::size_t>();
      sha = entry.at("sha256").get<std::string>();
    } catch (const json::exception& e) {
      throw CorruptManifest(std::string("tensor table: ") + e.what());
    }
    if (offset + length > weights.size())
      throw CorruptManifest("weights.bin truncated at tensor " + name);
    if (sha256_hex(weights.data() + offset, length) != sha)
      throw CorruptManifest("hash mismatch on tensor " + name);
    std::vector<float> values(length / 4);
    std::memcpy(values.data(), weights.data() + offset, length);
    long long expect = 1;
    for (const int d : shape) expect *= d;
    if (expect * 4 != static_cast<long long>(length))
      throw CorruptManifest("shape does not match payload on tensor " + name);
    ckpt.model.add(name, Tensor(shape, std::move(values)));
  }
  return ckpt;
}

std::string checkpoint_id(const std::filesystem::path& dir) {
  return sha256_file(dir / "weights.bin");
}

}  // namespace rsvqa
