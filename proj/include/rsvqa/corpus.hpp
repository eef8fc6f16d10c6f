#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rsvqa/image.hpp"
#include "rsvqa/rng.hpp"

namespace rsvqa {

// Land-cover classes, in id order.
inline constexpr int kNumClasses = 5;
const std::array<std::string, kNumClasses>& class_names();

/// G x G grid of land-cover class ids, fully determined by (seed, config).
struct Scene {
  int grid_size = 0;
  std::vector<int> cells;  // grid_size * grid_size class ids
  std::uint64_t seed = 0;

  int at(int r, int c) const { return cells[static_cast<std::size_t>(r) * grid_size + c]; }
  std::array<int, kNumClasses> histogram() const;
  int dominant_class() const;  // ties broken by lowest class id
};

struct SceneConfig {
  int grid_size = 8;
  std::array<double, kNumClasses> class_weights = {1.0, 1.0, 1.0, 1.0, 1.0};
};

struct RenderConfig {
  int image_h = 32;
  int image_w = 32;
  double noise_sigma = 0.02;
};

/// Cells drawn from the weighted class distribution, then one smoothing pass
/// where each cell copies a random earlier-updated neighbour with
/// probability 0.5 (grows contiguous regions).
Scene generate_scene(std::uint64_t seed, const SceneConfig& config = {});

/// Per-class 4-band mean signatures (R, G, B, NIR) used by the renderer.
const std::array<std::array<float, 4>, kNumClasses>& class_signatures();

/// Expands each grid cell to a pixel block of its class signature plus
/// seeded Gaussian noise, clamped to [0, 1].
ImageTensor render_image(const Scene& scene, const RenderConfig& config, std::uint64_t seed);

enum class QuestionType { YesNo, MultipleChoice, Open };
std::string question_type_name(QuestionType t);
QuestionType question_type_from_name(const std::string& name);

/// One (image, question, answer) record in the dataset schema.
struct Sample {
  std::string id;
  std::string image_path;  // relative to the dataset directory
  std::string question;
  QuestionType question_type = QuestionType::YesNo;
  std::vector<std::string> choices;  // multiple-choice only
  std::string answer;
};

// Count answers are capped so the answer vocabulary stays closed.
inline constexpr int kCountCap = 20;

/// Four grounded questions per scene: class presence (yes/no), dominant
/// class (multiple choice), class-cell count (open), and dominant coverage
/// (open). Every answer is recomputed from the grid, never sampled.
std::vector<Sample> generate_qa(const Scene& scene, Rng& rng);

/// Recomputes the answer a sample should carry given its scene. Used by the
/// generator-soundness checks.
std::string expected_answer(const Scene& scene, const Sample& sample);

struct Dataset {
  std::filesystem::path dir;
  std::vector<Sample> samples;

  ImageTensor load_image(const Sample& sample) const;
  ImageTensor load_image(std::size_t index) const { return load_image(samples.at(index)); }
};

/// Writes manifest.jsonl plus one tensor file per distinct image path.
/// `images` maps relative image paths to pixels. Returns the manifest path.
std::filesystem::path write_dataset(const std::vector<Sample>& samples,
                                    const std::vector<std::pair<std::string, ImageTensor>>& images,
                                    const std::filesystem::path& dir);

/// Loads and schema-checks a dataset directory.
Dataset read_dataset(const std::filesystem::path& dir);

struct SplitSpec {
  std::string name;
  int sample_count = 0;
};

/// Generates `sample_count` samples (ceil(n/4) scenes, 4 questions each,
/// truncated to n) into dir/<name> for each split. All randomness flows from
/// `seed` through per-split, per-scene sub-streams.
void generate_splits(const std::filesystem::path& out_dir, const std::vector<SplitSpec>& splits,
                     std::uint64_t seed, const SceneConfig& scene_config = {},
                     const RenderConfig& render_config = {});

}  // namespace rsvqa
