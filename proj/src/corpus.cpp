#include "rsvqa/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rsvqa/errors.hpp"
#include "rsvqa/io.hpp"
#include "rsvqa/tokenizer.hpp"

namespace rsvqa {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian and written with memcpy");

using nlohmann::json;

const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> kNames = {"water", "forest", "urban",
                                                              "agriculture", "bare"};
  return kNames;
}

std::array<int, kNumClasses> Scene::histogram() const {
  std::array<int, kNumClasses> h{};
  for (const int c : cells) ++h[static_cast<std::size_t>(c)];
  return h;
}

int Scene::dominant_class() const {
  const auto h = histogram();
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c)
    if (h[static_cast<std::size_t>(c)] > h[static_cast<std::size_t>(best)]) best = c;
  return best;
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.grid_size <= 0) throw BadConfig("grid_size must be positive");
  double total = 0.0;
  for (const double w : config.class_weights) {
    if (w < 0.0 || !std::isfinite(w)) throw BadConfig("class weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0.0) throw BadConfig("class weights sum to zero");

  const int g = config.grid_size;
  Scene scene;
  scene.grid_size = g;
  scene.seed = seed;
  scene.cells.resize(static_cast<std::size_t>(g) * g);

  Rng rng(seed);
  const std::vector<double> weights(config.class_weights.begin(), config.class_weights.end());
  for (auto& cell : scene.cells) cell = static_cast<int>(rng.weighted(weights));

  // One region-growing pass: row-major, each cell copies a random in-bounds
  // 4-neighbour of the partially updated grid with probability 0.5.
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      if (rng.uniform() >= 0.5) continue;
      int nbr_r[4], nbr_c[4];
      int n = 0;
      if (r > 0) { nbr_r[n] = r - 1; nbr_c[n] = c; ++n; }
      if (r + 1 < g) { nbr_r[n] = r + 1; nbr_c[n] = c; ++n; }
      if (c > 0) { nbr_r[n] = r; nbr_c[n] = c - 1; ++n; }
      if (c + 1 < g) { nbr_r[n] = r; nbr_c[n] = c + 1; ++n; }
      const int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      scene.cells[static_cast<std::size_t>(r) * g + c] = scene.at(nbr_r[pick], nbr_c[pick]);
    }
  }
  return scene;
}

const std::array<std::array<float, 4>, kNumClasses>& class_signatures() {
  // (R, G, B, NIR). Water absorbs NIR; vegetation reflects it strongly.
  static const std::array<std::array<float, 4>, kNumClasses> kSignatures = {{
      {0.06f, 0.10f, 0.25f, 0.04f},  // water
      {0.08f, 0.30f, 0.08f, 0.55f},  // forest
      {0.55f, 0.55f, 0.52f, 0.38f},  // urban
      {0.20f, 0.42f, 0.12f, 0.70f},  // agriculture
      {0.45f, 0.36f, 0.26f, 0.30f},  // bare
  }};
  return kSignatures;
}

ImageTensor render_image(const Scene& scene, const RenderConfig& config, std::uint64_t seed) {
  const int g = scene.grid_size;
  if (config.image_h % g != 0 || config.image_w % g != 0)
    throw BadConfig("image dimensions must be divisible by the grid size");
  ImageTensor img;
  img.h = config.image_h;
  img.w = config.image_w;
  img.c = 4;
  img.data.resize(static_cast<std::size_t>(img.h) * img.w * img.c);

  const int block_h = img.h / g;
  const int block_w = img.w / g;
  Rng rng(seed);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const auto& sig = class_signatures()[static_cast<std::size_t>(scene.at(y / block_h, x / block_w))];
      for (int ch = 0; ch < 4; ++ch) {
        double v = sig[static_cast<std::size_t>(ch)];
        if (config.noise_sigma > 0.0) v += config.noise_sigma * rng.gauss();
        img.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

std::string question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::YesNo: return "yesno";
    case QuestionType::MultipleChoice: return "mc";
    case QuestionType::Open: return "open";
  }
  throw Error("unreachable question type");
}

QuestionType question_type_from_name(const std::string& name) {
  if (name == "yesno") return QuestionType::YesNo;
  if (name == "mc") return QuestionType::MultipleChoice;
  if (name == "open") return QuestionType::Open;
  throw SchemaError("unknown question_type '" + name + "'");
}

std::vector<Sample> generate_qa(const Scene& scene, Rng& rng) {
  const auto hist = scene.histogram();
  const int dominant = scene.dominant_class();
  std::vector<Sample> out;

  // Presence. Absent classes are proposed half the time so yes/no answers
  // stay roughly balanced.
  {
    std::vector<int> present, absent;
    for (int c = 0; c < kNumClasses; ++c)
      (hist[static_cast<std::size_t>(c)] > 0 ? present : absent).push_back(c);
    int cls;
    if (!absent.empty() && rng.uniform() < 0.5) {
      cls = absent[static_cast<std::size_t>(rng.below(absent.size()))];
    } else {
      cls = present[static_cast<std::size_t>(rng.below(present.size()))];
    }
    Sample s;
    s.id = "presence";
    s.question = "is there " + class_names()[static_cast<std::size_t>(cls)] + "?";
    s.question_type = QuestionType::YesNo;
    s.answer = hist[static_cast<std::size_t>(cls)] > 0 ? "yes" : "no";
    out.push_back(std::move(s));
  }

  // Dominant class, multiple choice with three distractors.
  {
    std::vector<int> others;
    for (int c = 0; c < kNumClasses; ++c)
      if (c != dominant) others.push_back(c);
    rng.shuffle(others);
    std::vector<int> picks = {dominant, others[0], others[1], others[2]};
    rng.shuffle(picks);
    Sample s;
    s.id = "dominant";
    s.question = "what is the dominant land cover?";
    s.question_type = QuestionType::MultipleChoice;
    for (const int c : picks) s.choices.push_back(class_names()[static_cast<std::size_t>(c)]);
    s.answer = class_names()[static_cast<std::size_t>(dominant)];
    out.push_back(std::move(s));
  }

  // Cell count, capped and verbalized as a digit string.
  {
    const int cls = static_cast<int>(rng.below(kNumClasses));
    Sample s;
    s.id = "count";
    s.question = "how many " + class_names()[static_cast<std::size_t>(cls)] + " cells are there?";
    s.question_type = QuestionType::Open;
    s.answer = std::to_string(std::min(hist[static_cast<std::size_t>(cls)], kCountCap));
    out.push_back(std::move(s));
  }

  // Coverage, open-ended phrasing of the dominant class.
  {
    Sample s;
    s.id = "coverage";
    s.question = "which class covers most of the image?";
    s.question_type = QuestionType::Open;
    s.answer = class_names()[static_cast<std::size_t>(dominant)];
    out.push_back(std::move(s));
  }
  return out;
}

std::string expected_answer(const Scene& scene, const Sample& sample) {
  const auto hist = scene.histogram();
  const std::string q = normalize_text(sample.question);
  std::istringstream in(q);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);

  const auto class_id = [](const std::string& name) {
    for (int c = 0; c < kNumClasses; ++c)
      if (class_names()[static_cast<std::size_t>(c)] == name) return c;
    throw SchemaError("unknown class '" + name + "' in question");
  };

  if (words.size() >= 3 && words[0] == "is" && words[1] == "there") {
    const int c = class_id(words[2]);
    return hist[static_cast<std::size_t>(c)] > 0 ? "yes" : "no";
  }
  if (words.size() >= 3 && words[0] == "how" && words[1] == "many") {
    const int c = class_id(words[2]);
    return std::to_string(std::min(hist[static_cast<std::size_t>(c)], kCountCap));
  }
  if (q == "what is the dominant land cover" || q == "which class covers most of the image") {
    return class_names()[static_cast<std::size_t>(scene.dominant_class())];
  }
  throw SchemaError("unrecognized question '" + sample.question + "'");
}

// ---------------------------------------------------------------------------
// tensor files
// ---------------------------------------------------------------------------

void write_image_file(const std::filesystem::path& path, const ImageTensor& img) {
  std::string bytes;
  bytes.reserve(13 + img.data.size() * 4);
  bytes += "RSVT";
  const std::uint16_t version = 1;
  const std::uint8_t ndim = 3;
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.h), static_cast<std::uint32_t>(img.w),
                                 static_cast<std::uint32_t>(img.c)};
  bytes.append(reinterpret_cast<const char*>(&version), 2);
  bytes.append(reinterpret_cast<const char*>(&ndim), 1);
  bytes.append(reinterpret_cast<const char*>(dims), 12);
  bytes.append(reinterpret_cast<const char*>(img.data.data()), img.data.size() * 4);
  write_file_atomic(path, bytes);
}

ImageTensor read_image_file(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 19) throw FormatError("tensor file too short: " + path.string());
  if (bytes.compare(0, 4, "RSVT") != 0) throw FormatError("bad magic in " + path.string());
  std::uint16_t version;
  std::uint8_t ndim;
  std::uint32_t dims[3];
  std::memcpy(&version, bytes.data() + 4, 2);
  std::memcpy(&ndim, bytes.data() + 6, 1);
  std::memcpy(dims, bytes.data() + 7, 12);
  if (version != 1) throw FormatError("unsupported tensor file version " + std::to_string(version));
  if (ndim != 3) throw FormatError("expected 3 dimensions, got " + std::to_string(ndim));

  ImageTensor img;
  img.h = static_cast<int>(dims[0]);
  img.w = static_cast<int>(dims[1]);
  img.c = static_cast<int>(dims[2]);
  if (img.h <= 0 || img.w <= 0 || img.c < 3) throw FormatError("bad dimensions in " + path.string());
  const std::size_t count = static_cast<std::size_t>(img.h) * img.w * img.c;
  if (bytes.size() != 19 + count * 4)
    throw FormatError("truncated tensor payload in " + path.string());
  img.data.resize(count);
  std::memcpy(img.data.data(), bytes.data() + 19, count * 4);
  for (const float v : img.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("pixel outside [0,1] in " + path.string());
  }
  return img;
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

namespace {

void validate_sample(const Sample& s) {
  if (s.question_type == QuestionType::MultipleChoice) {
    if (s.choices.empty()) throw SchemaError("sample " + s.id + ": mc sample without choices");
    if (std::find(s.choices.begin(), s.choices.end(), s.answer) == s.choices.end())
      throw SchemaError("sample " + s.id + ": answer not among choices");
  } else if (!s.choices.empty()) {
    throw SchemaError("sample " + s.id + ": choices on a non-mc sample");
  }
}

json sample_to_json(const Sample& s) {
  json j;
  j["id"] = s.id;
  j["image_path"] = s.image_path;
  j["question"] = s.question;
  j["question_type"] = question_type_name(s.question_type);
  j["answer"] = s.answer;
  if (s.question_type == QuestionType::MultipleChoice) j["choices"] = s.choices;
  return j;
}

std::string require_string(const json& j, const char* field, std::size_t line) {
  if (!j.contains(field))
    throw SchemaError("manifest line " + std::to_string(line) + ": missing field '" + field + "'");
  if (!j[field].is_string())
    throw SchemaError("manifest line " + std::to_string(line) + ": field '" + field +
                      "' must be a string");
  return j[field].get<std::string>();
}

Sample sample_from_json(const json& j, std::size_t line) {
  Sample s;
  s.id = require_string(j, "id", line);
  s.image_path = require_string(j, "image_path", line);
  s.question = require_string(j, "question", line);
  s.question_type = question_type_from_name(require_string(j, "question_type", line));
  s.answer = require_string(j, "answer", line);
  if (j.contains("choices")) {
    if (!j["choices"].is_array())
      throw SchemaError("manifest line " + std::to_string(line) + ": 'choices' must be an array");
    for (const auto& c : j["choices"]) {
      if (!c.is_string())
        throw SchemaError("manifest line " + std::to_string(line) + ": choices must be strings");
      s.choices.push_back(c.get<std::string>());
    }
  }
  validate_sample(s);
  return s;
}

}  // namespace

std::filesystem::path write_dataset(const std::vector<Sample>& samples,
                                    const std::vector<std::pair<std::string, ImageTensor>>& images,
                                    const std::filesystem::path& dir) {
  for (const auto& s : samples) {
    validate_sample(s);
    const bool known = std::any_of(images.begin(), images.end(),
                                   [&](const auto& im) { return im.first == s.image_path; });
    if (!known) throw SchemaError("sample " + s.id + ": image_path '" + s.image_path +
                                  "' not among the provided images");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  for (const auto& [rel, img] : images) write_image_file(dir / rel, img);

  std::string manifest;
  for (const auto& s : samples) {
    manifest += sample_to_json(s).dump();
    manifest.push_back('\n');
  }
  const std::filesystem::path manifest_path = dir / "manifest.jsonl";
  write_file_atomic(manifest_path, manifest);
  return manifest_path;
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.dir = dir;
  const std::string manifest = read_file(dir / "manifest.jsonl");
  std::istringstream in(manifest);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    ds.samples.push_back(sample_from_json(j, line_no));
  }
  return ds;
}

ImageTensor Dataset::load_image(const Sample& sample) const {
  return read_image_file(dir / sample.image_path);
}

void generate_splits(const std::filesystem::path& out_dir, const std::vector<SplitSpec>& splits,
                     std::uint64_t seed, const SceneConfig& scene_config,
                     const RenderConfig& render_config) {
  constexpr int kQuestionsPerScene = 4;
  const Rng master(seed);
  for (const auto& split : splits) {
    if (split.sample_count <= 0) throw BadConfig("split '" + split.name + "' needs a positive count");
    const int scenes = (split.sample_count + kQuestionsPerScene - 1) / kQuestionsPerScene;

    std::vector<Sample> samples;
    std::vector<std::pair<std::string, ImageTensor>> images;
    for (int i = 0; i < scenes; ++i) {
      const std::uint64_t scene_seed =
          master.stream("data-" + split.name, static_cast<std::uint64_t>(i)).next_u64();
      const std::uint64_t render_seed =
          master.stream("render-" + split.name, static_cast<std::uint64_t>(i)).next_u64();
      Rng qa_rng = master.stream("qa-" + split.name, static_cast<std::uint64_t>(i));

      const Scene scene = generate_scene(scene_seed, scene_config);
      char image_name[32];
      std::snprintf(image_name, sizeof image_name, "images/%05d.rsvt", i);
      images.emplace_back(image_name, render_image(scene, render_config, render_seed));

      for (auto& s : generate_qa(scene, qa_rng)) {
        char sid[64];
        std::snprintf(sid, sizeof sid, "%s-%05d-%s", split.name.c_str(), i, s.id.c_str());
        s.id = sid;
        s.image_path = image_name;
        samples.push_back(std::move(s));
        if (static_cast<int>(samples.size()) == split.sample_count) break;
      }
      if (static_cast<int>(samples.size()) == split.sample_count) break;
    }
    write_dataset(samples, images, out_dir / split.name);
  }
}

}  // namespace rsvqa
