#include "rsvqa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "rsvqa/io.hpp"
#include "rsvqa/parallel.hpp"

namespace rsvqa {

using nlohmann::json;

namespace {

std::vector<std::string> tokens_of(const std::string& text) {
  std::istringstream in(normalize_text(text));
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

void check_pairs(std::size_t pred, std::size_t gold) {
  if (pred != gold)
    throw LengthMismatch(std::to_string(pred) + " predictions vs " + std::to_string(gold) +
                         " references");
  if (pred == 0) throw EmptySet("metric over an empty sample list");
}

double percent_or_nan(const std::optional<double>& v) {
  return v ? *v * 100.0 : std::nan("");
}

std::string cell(double percent) {
  if (std::isnan(percent)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", percent);
  return buf;
}

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

const std::array<std::string, 3> kMetricColumns = {"Yes/No ACC (%)", "Multiple-Choice ACC (%)",
                                                   "Open-Ended F1 (%)"};

std::string metric_table(const std::vector<std::string>& row_labels,
                         const std::vector<std::array<double, 3>>& row_percents,
                         const std::string& label_header) {
  std::size_t label_w = label_header.size();
  for (const auto& l : row_labels) label_w = std::max(label_w, l.size());

  std::string out = pad_right(label_header, label_w);
  for (const auto& c : kMetricColumns) out += "  " + c;
  out += "\n";
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    out += pad_right(row_labels[r], label_w);
    for (std::size_t c = 0; c < 3; ++c)
      out += "  " + pad_left(cell(row_percents[r][c]), kMetricColumns[c].size());
    out += "\n";
  }
  return out;
}

json metrics_json(const MetricsReport& r) {
  json j;
  j["metrics"]["yesno_acc"] = r.yesno_acc ? json(*r.yesno_acc) : json(nullptr);
  j["metrics"]["mc_acc"] = r.mc_acc ? json(*r.mc_acc) : json(nullptr);
  j["metrics"]["open_f1"] = r.open_f1 ? json(*r.open_f1) : json(nullptr);
  j["counts"]["yesno"] = r.yesno_count;
  j["counts"]["mc"] = r.mc_count;
  j["counts"]["open"] = r.open_count;
  j["metadata"]["checkpoint_id"] = r.checkpoint_id;
  j["metadata"]["dataset_id"] = r.dataset_id;
  j["metadata"]["prompt_mode"] = r.prompt_mode;
  j["metadata"]["f1_definition"] = r.f1_definition;
  j["metadata"]["beam_k"] = r.beam_k;
  j["metadata"]["seed"] = r.seed;
  return j;
}

MetricsReport metrics_from_json(const json& j) {
  MetricsReport r;
  try {
    const auto opt = [&](const char* key) -> std::optional<double> {
      const auto& v = j.at("metrics").at(key);
      if (v.is_null()) return std::nullopt;
      return v.get<double>();
    };
    r.yesno_acc = opt("yesno_acc");
    r.mc_acc = opt("mc_acc");
    r.open_f1 = opt("open_f1");
    r.yesno_count = j.at("counts").at("yesno").get<int>();
    r.mc_count = j.at("counts").at("mc").get<int>();
    r.open_count = j.at("counts").at("open").get<int>();
    r.checkpoint_id = j.at("metadata").at("checkpoint_id").get<std::string>();
    r.dataset_id = j.at("metadata").at("dataset_id").get<std::string>();
    r.prompt_mode = j.at("metadata").at("prompt_mode").get<std::string>();
    r.f1_definition = j.at("metadata").at("f1_definition").get<std::string>();
    r.beam_k = j.at("metadata").at("beam_k").get<int>();
    r.seed = j.at("metadata").at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("metrics report: ") + e.what());
  }
  return r;
}

}  // namespace

double yesno_accuracy(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  check_pairs(pred.size(), gold.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::string p = normalize_text(pred[i]);
    if (p != "yes" && p != "no") continue;
    if (p == normalize_text(gold[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double mc_accuracy(const std::vector<int>& pred_idx, const std::vector<int>& gold_idx) {
  check_pairs(pred_idx.size(), gold_idx.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred_idx.size(); ++i)
    if (pred_idx[i] == gold_idx[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred_idx.size());
}

double token_f1(const std::string& pred, const std::string& gold) {
  const auto p = tokens_of(pred);
  const auto g = tokens_of(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, int> gold_counts;
  for (const auto& t : g) ++gold_counts[t];
  int overlap = 0;
  for (const auto& t : p) {
    const auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

double open_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  check_pairs(pred.size(), gold.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += token_f1(pred[i], gold[i]);
  return total / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------

std::string MetricsReport::to_json() const { return metrics_json(*this).dump(2) + "\n"; }

MetricsReport MetricsReport::from_json(const std::string& text) {
  try {
    return metrics_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("metrics report: ") + e.what());
  }
}

std::string MetricsReport::to_table() const {
  return metric_table({"model"},
                      {{percent_or_nan(yesno_acc), percent_or_nan(mc_acc), percent_or_nan(open_f1)}},
                      "Run");
}

MetricsReport evaluate(const VlmModel& model, const Vocabulary& vocab, const Dataset& dataset,
                       const EvalConfig& config) {
  // Load each distinct image once.
  std::map<std::string, ImageTensor> images;
  for (const auto& s : dataset.samples)
    if (!images.count(s.image_path)) images.emplace(s.image_path, dataset.load_image(s));

  struct Prediction {
    std::string text;  // yes/no and open
    int choice = -1;   // multiple choice
  };
  std::vector<Prediction> preds(dataset.samples.size());
  parallel_for(static_cast<int>(dataset.samples.size()), [&](int i) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
    const ImageTensor& img = images.at(s.image_path);
    if (s.question_type == QuestionType::MultipleChoice) {
      preds[static_cast<std::size_t>(i)].choice =
          score_choices(model, vocab, img, s.question, config.prompt_mode, s.choices,
                        config.mc_norm)
              .chosen;
    } else {
      const DecodeResult r = beam_search(model, vocab, img, s.question, config.prompt_mode,
                                         config.beam_k, config.max_answer_len, config.beam_norm);
      preds[static_cast<std::size_t>(i)].text = vocab.decode(r.tokens);
    }
  });

  std::vector<std::string> yn_pred, yn_gold, open_pred, open_gold;
  std::vector<int> mc_pred, mc_gold;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    switch (s.question_type) {
      case QuestionType::YesNo:
        yn_pred.push_back(preds[i].text);
        yn_gold.push_back(s.answer);
        break;
      case QuestionType::Open:
        open_pred.push_back(preds[i].text);
        open_gold.push_back(s.answer);
        break;
      case QuestionType::MultipleChoice: {
        const auto it = std::find(s.choices.begin(), s.choices.end(), s.answer);
        mc_gold.push_back(static_cast<int>(it - s.choices.begin()));
        mc_pred.push_back(preds[i].choice);
        break;
      }
    }
  }

  MetricsReport report;
  report.yesno_count = static_cast<int>(yn_pred.size());
  report.mc_count = static_cast<int>(mc_pred.size());
  report.open_count = static_cast<int>(open_pred.size());
  if (!yn_pred.empty()) report.yesno_acc = yesno_accuracy(yn_pred, yn_gold);
  if (!mc_pred.empty()) report.mc_acc = mc_accuracy(mc_pred, mc_gold);
  if (!open_pred.empty()) report.open_f1 = open_f1(open_pred, open_gold);
  report.prompt_mode = prompt_mode_name(config.prompt_mode);
  report.beam_k = config.beam_k;
  report.seed = config.seed;
  std::error_code ec;
  if (std::filesystem::exists(dataset.dir / "manifest.jsonl", ec))
    report.dataset_id = sha256_file(dataset.dir / "manifest.jsonl");
  return report;
}

Vocabulary build_dataset_vocab(const Dataset& dataset) {
  std::vector<std::string> texts;
  texts.reserve(dataset.samples.size() * 2 + 8);
  for (const auto& s : dataset.samples) {
    texts.push_back(s.question);
    texts.push_back(s.answer);
    for (const auto& c : s.choices) texts.push_back(c);
  }
  texts.push_back(prompt_template_text());
  texts.push_back("yes no");
  for (const auto& name : class_names()) texts.push_back(name);
  for (int i = 0; i <= kCountCap; ++i) texts.push_back(std::to_string(i));
  return Vocabulary::build(texts);
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

namespace {

std::optional<double> median_metric(std::vector<std::optional<double>> values) {
  std::vector<double> present;
  for (const auto& v : values)
    if (v) present.push_back(*v);
  if (present.empty()) return std::nullopt;
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  return n % 2 == 1 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
}

}  // namespace

AblationReport run_ablation(const Dataset& train_split, const Dataset& heldout_split,
                            const AblationConfig& config) {
  const Vocabulary vocab = build_dataset_vocab(train_split);
  ModelConfig model_cfg = config.model;
  model_cfg.vocab_size = vocab.size();

  const std::vector<TrainSample> data = prepare_train_data(train_split, vocab);

  const auto stage_cfg = [&](TrainStage stage, std::uint64_t seed) {
    TrainConfig c = config.base;
    c.stage = stage;
    c.steps = config.budget_steps;
    c.seed = Rng(seed).stream(train_stage_name(stage)).next_u64();
    return c;
  };

  enum Variant { kNoDap = 0, kNoPbf = 1, kFull = 2 };
  const std::array<std::string, 3> names = {"w/o DAP", "w/o PBF", "full"};
  std::array<std::vector<MetricsReport>, 3> per_seed;

  for (const std::uint64_t seed : config.seeds) {
    for (int variant = 0; variant < 3; ++variant) {
      VlmModel model = init_params(model_cfg, seed);
      if (variant == kNoDap) {
        train(model, data, vocab, stage_cfg(TrainStage::Finetune, seed));
      } else if (variant == kNoPbf) {
        train(model, data, vocab, stage_cfg(TrainStage::Pretrain, seed));
      } else {
        train(model, data, vocab, stage_cfg(TrainStage::Pretrain, seed));
        train(model, data, vocab, stage_cfg(TrainStage::Finetune, seed));
      }
      EvalConfig eval_cfg = config.eval;
      eval_cfg.prompt_mode = variant == kNoPbf ? PromptMode::Pretrain : PromptMode::Finetune;
      eval_cfg.seed = seed;
      per_seed[static_cast<std::size_t>(variant)].push_back(
          evaluate(model, vocab, heldout_split, eval_cfg));
    }
  }

  AblationReport report;
  for (int variant = 0; variant < 3; ++variant) {
    const auto& runs = per_seed[static_cast<std::size_t>(variant)];
    MetricsReport median = runs.front();
    std::vector<std::optional<double>> yn, mc, open;
    for (const auto& r : runs) {
      yn.push_back(r.yesno_acc);
      mc.push_back(r.mc_acc);
      open.push_back(r.open_f1);
    }
    median.yesno_acc = median_metric(yn);
    median.mc_acc = median_metric(mc);
    median.open_f1 = median_metric(open);
    median.checkpoint_id = "";
    median.seed = 0;
    report.row_names.push_back(names[static_cast<std::size_t>(variant)]);
    report.rows.push_back(std::move(median));
  }
  return report;
}

std::string AblationReport::to_json() const {
  json j;
  j["rows"] = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json row = metrics_json(rows[i]);
    row["configuration"] = row_names[i];
    j["rows"].push_back(row);
  }
  return j.dump(2) + "\n";
}

std::string AblationReport::to_table() const {
  std::vector<std::array<double, 3>> percents;
  for (const auto& r : rows)
    percents.push_back(
        {percent_or_nan(r.yesno_acc), percent_or_nan(r.mc_acc), percent_or_nan(r.open_f1)});
  return metric_table(row_names, percents, "Configuration");
}

// ---------------------------------------------------------------------------
// human evaluation
// ---------------------------------------------------------------------------

namespace {

const std::array<std::string, 3> kCriteria = {"correctness", "relevance", "language_quality"};
const std::array<std::string, 3> kCriterionColumns = {"Correctness", "Relevance",
                                                      "Language Quality"};

int criterion_index(const std::string& name) {
  for (int i = 0; i < 3; ++i)
    if (kCriteria[static_cast<std::size_t>(i)] == name) return i;
  throw SchemaError("unknown criterion '" + name + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (const char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

std::vector<HumanEvalRecord> parse_human_eval_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty human-eval csv");
  {
    const auto header = split_csv_line(line);
    const std::vector<std::string> expected = {"method", "criterion", "score", "annotator",
                                               "question_id"};
    if (std::vector<std::string>(header.begin(), header.end()) != expected)
      throw SchemaError("human-eval csv header must be method,criterion,score,annotator,question_id");
  }
  std::vector<HumanEvalRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5)
      throw SchemaError("human-eval csv line " + std::to_string(line_no) + ": expected 5 fields");
    HumanEvalRecord r;
    r.method = f[0];
    criterion_index(f[1]);
    r.criterion = f[1];
    try {
      std::size_t pos = 0;
      r.score = std::stoi(f[2], &pos);
      if (pos != f[2].size()) throw std::invalid_argument(f[2]);
    } catch (const std::exception&) {
      throw SchemaError("human-eval csv line " + std::to_string(line_no) + ": bad score '" + f[2] +
                        "'");
    }
    if (r.score < 1 || r.score > 5)
      throw SchemaError("human-eval csv line " + std::to_string(line_no) + ": score " +
                        std::to_string(r.score) + " outside 1..5");
    r.annotator = f[3];
    r.question_id = f[4];
    records.push_back(std::move(r));
  }
  return records;
}

HumanEvalReport aggregate_human_eval(const std::vector<HumanEvalRecord>& records) {
  HumanEvalReport report;
  std::vector<std::array<double, 3>> sums;
  std::vector<std::array<int, 3>> counts;
  for (const auto& r : records) {
    if (r.score < 1 || r.score > 5)
      throw SchemaError("score " + std::to_string(r.score) + " outside 1..5");
    const int c = criterion_index(r.criterion);
    const auto it = std::find(report.methods.begin(), report.methods.end(), r.method);
    std::size_t m;
    if (it == report.methods.end()) {
      m = report.methods.size();
      report.methods.push_back(r.method);
      sums.push_back({0.0, 0.0, 0.0});
      counts.push_back({0, 0, 0});
    } else {
      m = static_cast<std::size_t>(it - report.methods.begin());
    }
    sums[m][static_cast<std::size_t>(c)] += r.score;
    counts[m][static_cast<std::size_t>(c)] += 1;
  }
  for (std::size_t m = 0; m < report.methods.size(); ++m) {
    std::array<double, 3> row{};
    for (std::size_t c = 0; c < 3; ++c) {
      row[c] = counts[m][c] == 0 ? -1.0 : std::round(sums[m][c] / counts[m][c] * 10.0) / 10.0;
    }
    report.means.push_back(row);
  }
  return report;
}

std::string HumanEvalReport::to_json() const {
  json j;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    json row;
    for (std::size_t c = 0; c < 3; ++c)
      row[kCriteria[c]] = means[m][c] < 0.0 ? json(nullptr) : json(means[m][c]);
    j["methods"].push_back({{"method", methods[m]}, {"scores", row}});
  }
  return j.dump(2) + "\n";
}

std::string HumanEvalReport::to_table() const {
  std::size_t label_w = std::string("Method").size();
  for (const auto& m : methods) label_w = std::max(label_w, m.size());
  std::string out = pad_right("Method", label_w);
  for (const auto& c : kCriterionColumns) out += "  " + c;
  out += "\n";
  char buf[32];
  for (std::size_t m = 0; m < methods.size(); ++m) {
    out += pad_right(methods[m], label_w);
    for (std::size_t c = 0; c < 3; ++c) {
      std::string v = "-";
      if (means[m][c] >= 0.0) {
        std::snprintf(buf, sizeof buf, "%.1f", means[m][c]);
        v = buf;
      }
      out += "  " + pad_left(v, kCriterionColumns[c].size());
    }
    out += "\n";
  }
  return out;
}

}  // namespace rsvqa
