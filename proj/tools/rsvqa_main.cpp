// rsvqa: one executable for the whole pipeline -- synthetic data generation,
// two-stage training, evaluation, ablations, single-question answering,
// gradient checking, and human-eval aggregation.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "rsvqa/checkpoint.hpp"
#include "rsvqa/corpus.hpp"
#include "rsvqa/decoding.hpp"
#include "rsvqa/errors.hpp"
#include "rsvqa/eval.hpp"
#include "rsvqa/gradcheck.hpp"
#include "rsvqa/io.hpp"
#include "rsvqa/model.hpp"
#include "rsvqa/run_manifest.hpp"
#include "rsvqa/tokenizer.hpp"
#include "rsvqa/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rsvqa;

namespace {

constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 2 usage, 3 I/O (including unreadable input tensors),
// 4 numerical failure, 5 format/version/schema violations.
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;
constexpr int kExitFormat = 5;

/// Config files may be key=value lines or a single JSON object; flags given
/// on the command line always win.
class JsonOrIniConfig : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::string content((std::istreambuf_iterator<char>(input)), std::istreambuf_iterator<char>());
    const std::size_t first = content.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && content[first] == '{') {
      json j;
      try {
        j = json::parse(content);
      } catch (const json::exception& e) {
        throw BadConfig(std::string("config file is not valid JSON: ") + e.what());
      }
      std::vector<CLI::ConfigItem> items;
      for (const auto& [key, value] : j.items()) {
        CLI::ConfigItem item;
        item.name = key;
        item.inputs = {value.is_string() ? value.get<std::string>() : value.dump()};
        items.push_back(std::move(item));
      }
      return items;
    }
    std::istringstream stream(content);
    return CLI::ConfigINI::from_config(stream);
  }
};

struct ModelFlags {
  ModelConfig config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d-model", config.d_model, "embedding width")->capture_default_str();
    cmd->add_option("--n-heads", config.n_heads, "attention heads")->capture_default_str();
    cmd->add_option("--enc-layers", config.n_enc_layers, "encoder blocks")->capture_default_str();
    cmd->add_option("--dec-layers", config.n_dec_layers, "decoder blocks")->capture_default_str();
    cmd->add_option("--d-ff", config.d_ff, "feed-forward width")->capture_default_str();
    cmd->add_option("--patch", config.patch_size, "patch size")->capture_default_str();
    cmd->add_option("--max-seq-len", config.max_seq_len, "decoder position budget")
        ->capture_default_str();
  }
};

struct TrainFlags {
  TrainConfig config;
  std::string optimizer = "adam";
  std::string loss_norm = "token";

  void attach(CLI::App* cmd) {
    cmd->add_option("--steps", config.steps, "optimizer updates")->capture_default_str();
    cmd->add_option("--lr", config.lr, "learning rate")->capture_default_str();
    cmd->add_option("--batch", config.batch_size, "batch size")->capture_default_str();
    cmd->add_option("--optimizer", optimizer, "adam or sgd")->capture_default_str();
    cmd->add_option("--grad-clip", config.grad_clip_norm, "global L2 gradient clip (0 disables)")
        ->capture_default_str();
    cmd->add_option("--loss-norm", loss_norm, "token (per-token mean) or sequence")
        ->capture_default_str();
  }

  TrainConfig resolve(TrainStage stage, std::uint64_t seed) const {
    TrainConfig c = config;
    c.stage = stage;
    c.seed = seed;
    if (optimizer == "adam") {
      c.optimizer = OptimizerKind::Adam;
    } else if (optimizer == "sgd") {
      c.optimizer = OptimizerKind::Sgd;
    } else {
      throw BadConfig("optimizer must be adam or sgd");
    }
    if (loss_norm == "token") {
      c.loss_norm = LossNorm::PerToken;
    } else if (loss_norm == "sequence") {
      c.loss_norm = LossNorm::PerSequence;
    } else {
      throw BadConfig("loss-norm must be token or sequence");
    }
    return c;
  }
};

void add_config_file(CLI::App* cmd) {
  cmd->set_config("--config", "", "config file (key=value lines or a JSON object); flags win");
  cmd->config_formatter(std::make_shared<JsonOrIniConfig>());
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() != "run_manifest.json")
      out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

PromptMode resolve_prompt_mode(const std::string& flag, const Checkpoint& ckpt) {
  if (flag == "auto") return ckpt.prompt_mode();
  return prompt_mode_from_name(flag);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  int train = 512, val = 64, test = 64;
  std::uint64_t seed = 0;
  int grid = 8;
  double noise_sigma = 0.02;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.train <= 0 || a.val <= 0 || a.test <= 0) throw BadConfig("split counts must be positive");
  if (a.grid <= 0) throw BadConfig("grid must be positive");
  RunManifest rm;
  rm.command = "gen-data";
  rm.started_at = utc_timestamp_now();
  rm.seed = a.seed;

  SceneConfig scene;
  scene.grid_size = a.grid;
  RenderConfig render;
  render.noise_sigma = a.noise_sigma;
  generate_splits(a.out, {{"train", a.train}, {"val", a.val}, {"test", a.test}}, a.seed, scene,
                  render);

  json cfg{{"out", a.out},   {"train", a.train}, {"val", a.val},
           {"test", a.test}, {"grid", a.grid},   {"noise_sigma", a.noise_sigma}};
  rm.config_json = cfg.dump();
  rm.outputs = files_under(a.out);
  write_run_manifest(fs::path(a.out) / "run_manifest.json", rm);
  std::cout << "wrote " << a.train << "/" << a.val << "/" << a.test << " samples under " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain / finetune / train-joint
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string init;
  bool from_scratch = false;
  std::uint64_t seed = 0;
  double lambda1 = 1.0, lambda2 = 1.0;
  ModelFlags model;
  TrainFlags train;
};

int cmd_train_stage(const TrainArgs& a, TrainStage stage) {
  if (stage == TrainStage::Finetune && a.init.empty() && !a.from_scratch)
    throw BadConfig(
        "finetune is the second stage of a two-stage pipeline: pass --init with a pretraining "
        "checkpoint, or --from-scratch to train it without domain-adaptive pretraining");

  RunManifest rm;
  rm.command = train_stage_name(stage);
  rm.started_at = utc_timestamp_now();
  rm.seed = a.seed;

  const Dataset dataset = read_dataset(a.data);

  Checkpoint ckpt;
  long long prior_steps = 0;
  if (!a.init.empty()) {
    ckpt = load_checkpoint(a.init);
    prior_steps = ckpt.step;
  } else {
    ckpt.vocab = build_dataset_vocab(dataset);
    ModelConfig cfg = a.model.config;
    cfg.vocab_size = ckpt.vocab.size();
    ckpt.model = init_params(cfg, a.seed);
  }

  const std::vector<TrainSample> data = prepare_train_data(dataset, ckpt.vocab);
  TrainConfig tc = a.train.resolve(stage, a.seed);
  tc.lambda1 = a.lambda1;
  tc.lambda2 = a.lambda2;
  const TrainResult result = train(ckpt.model, data, ckpt.vocab, tc);

  ckpt.stage = train_stage_name(stage);
  ckpt.step = prior_steps + tc.steps;
  ckpt.rng_state = result.rng_state;
  save_checkpoint(ckpt, a.out);
  write_file_atomic(fs::path(a.out) / "loss.csv", loss_log_csv(result.log));

  json cfg{{"data", a.data},           {"out", a.out},
           {"init", a.init},           {"steps", tc.steps},
           {"lr", tc.lr},              {"batch", tc.batch_size},
           {"optimizer", a.train.optimizer}, {"loss_norm", a.train.loss_norm},
           {"grad_clip", tc.grad_clip_norm}, {"lambda1", tc.lambda1},
           {"lambda2", tc.lambda2}};
  rm.config_json = cfg.dump();
  rm.inputs = {a.data};
  if (!a.init.empty()) rm.inputs.push_back(a.init);
  for (const char* name : {"manifest.json", "weights.bin", "vocab.txt", "loss.csv"})
    rm.outputs.push_back(fs::path(a.out) / name);
  write_run_manifest(fs::path(a.out) / "run_manifest.json", rm);

  if (!result.log.empty())
    std::cout << "final loss " << result.final_loss << " after " << tc.steps << " steps\n";
  else
    std::cout << "no steps executed; checkpoint written unchanged\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  int beam = 3;
  int max_answer_len = 8;
  std::string report;
  std::string prompt_mode = "auto";
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  if (a.beam < 1) throw BadConfig("--beam must be >= 1");
  RunManifest rm;
  rm.command = "eval";
  rm.started_at = utc_timestamp_now();
  rm.seed = a.seed;

  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Dataset dataset = read_dataset(a.data);

  EvalConfig cfg;
  cfg.beam_k = a.beam;
  cfg.max_answer_len = a.max_answer_len;
  cfg.prompt_mode = resolve_prompt_mode(a.prompt_mode, ckpt);
  cfg.seed = a.seed;
  MetricsReport report = evaluate(ckpt.model, ckpt.vocab, dataset, cfg);
  report.checkpoint_id = checkpoint_id(a.ckpt);

  std::cout << report.to_table();
  if (!a.report.empty()) {
    write_file_atomic(a.report, report.to_json());
    json cfg_json{{"ckpt", a.ckpt}, {"data", a.data},     {"beam", a.beam},
                  {"report", a.report}, {"prompt_mode", a.prompt_mode}};
    rm.config_json = cfg_json.dump();
    rm.inputs = {a.ckpt, a.data};
    rm.outputs = {a.report};
    write_run_manifest(a.report + ".run.json", rm);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

struct AblationArgs {
  std::string data;
  int budget = 500;
  std::string seeds = "1,2,3";
  std::string report;
  int beam = 3;
  ModelFlags model;
  TrainFlags train;
};

int cmd_ablation(const AblationArgs& a) {
  if (a.budget < 0) throw BadConfig("--budget must be >= 0");
  RunManifest rm;
  rm.command = "ablation";
  rm.started_at = utc_timestamp_now();

  AblationConfig cfg;
  cfg.model = a.model.config;
  cfg.base = a.train.resolve(TrainStage::Pretrain, 0);
  cfg.eval.beam_k = a.beam;
  cfg.budget_steps = a.budget;
  cfg.seeds.clear();
  std::istringstream seeds(a.seeds);
  std::string tok;
  while (std::getline(seeds, tok, ',')) {
    if (tok.empty()) continue;
    cfg.seeds.push_back(std::stoull(tok));
  }
  if (cfg.seeds.empty()) throw BadConfig("--seeds must name at least one seed");

  const Dataset train_split = read_dataset(fs::path(a.data) / "train");
  const Dataset heldout = read_dataset(fs::path(a.data) / "val");
  const AblationReport report = run_ablation(train_split, heldout, cfg);

  std::cout << report.to_table();
  if (!a.report.empty()) {
    write_file_atomic(a.report, report.to_json());
    json cfg_json{{"data", a.data}, {"budget", a.budget}, {"seeds", a.seeds}, {"beam", a.beam}};
    rm.config_json = cfg_json.dump();
    rm.inputs = {a.data};
    rm.outputs = {a.report};
    write_run_manifest(a.report + ".run.json", rm);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// answer
// ---------------------------------------------------------------------------

struct AnswerArgs {
  std::string ckpt;
  std::string image;
  std::string question;
  int beam = 3;
  int max_answer_len = 8;
  std::string prompt_mode = "auto";
};

int cmd_answer(const AnswerArgs& a) {
  if (a.beam < 1) throw BadConfig("--beam must be >= 1");
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const ImageTensor image = read_image_file(a.image);
  const PromptMode mode = resolve_prompt_mode(a.prompt_mode, ckpt);
  const DecodeResult result = beam_search(ckpt.model, ckpt.vocab, image, a.question, mode, a.beam,
                                          a.max_answer_len, LengthNorm::None);
  char score[32];
  std::snprintf(score, sizeof score, "%.6f", result.score);
  std::cout << "answer: " << ckpt.vocab.decode(result.tokens) << "\n";
  std::cout << "score: " << score << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::uint64_t seed = 0;
  int samples = 256;  // coordinates to probe
  int batch = 4;      // synthetic samples in the objective
  double eps = 1e-4;
  double threshold = -1.0;  // default depends on precision
  bool f64 = false;
  ModelFlags model;
};

int cmd_gradcheck(const GradCheckArgs& a) {
  if (a.samples < 1) throw BadConfig("--samples must be >= 1");
  if (a.batch < 1) throw BadConfig("--batch must be >= 1");
  const double threshold = a.threshold > 0.0 ? a.threshold : (a.f64 ? 1e-5 : 1e-3);
  const GradCheckReport report =
      a.f64 ? run_model_gradcheck<double>(a.model.config, a.seed, a.samples, a.batch, a.eps)
            : run_model_gradcheck<float>(a.model.config, a.seed, a.samples, a.batch, a.eps);
  std::printf("precision: %s\ncoords: %d\nmax_rel_err: %.3e\nthreshold: %.3e\n%s\n",
              a.f64 ? "f64" : "f32", report.coords_checked, report.max_rel_err, threshold,
              report.max_rel_err < threshold ? "PASS" : "FAIL");
  return report.max_rel_err < threshold ? 0 : kExitNumerical;
}

// ---------------------------------------------------------------------------
// human-eval
// ---------------------------------------------------------------------------

struct HumanEvalArgs {
  std::string csv;
  std::string report;
};

int cmd_human_eval(const HumanEvalArgs& a) {
  const HumanEvalReport report = aggregate_human_eval(parse_human_eval_csv(read_file(a.csv)));
  std::cout << report.to_table();
  if (!a.report.empty()) write_file_atomic(a.report, report.to_json());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative remote-sensing VQA pipeline"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate synthetic dataset splits");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--train", gen.train, "train sample count")->capture_default_str();
  gen_cmd->add_option("--val", gen.val, "val sample count")->capture_default_str();
  gen_cmd->add_option("--test", gen.test, "test sample count")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "master seed")->capture_default_str();
  gen_cmd->add_option("--grid", gen.grid, "scene grid size")->capture_default_str();
  gen_cmd->add_option("--noise-sigma", gen.noise_sigma, "render noise sigma")->capture_default_str();

  TrainArgs pre, fin, joint;
  CLI::App* pre_cmd = app.add_subcommand("pretrain", "domain-adaptive pretraining stage");
  CLI::App* fin_cmd = app.add_subcommand("finetune", "prompt-based finetuning stage");
  CLI::App* joint_cmd = app.add_subcommand("train-joint", "joint weighted objective");
  const auto attach_train = [](CLI::App* cmd, TrainArgs& a, bool joint_flags) {
    cmd->add_option("--data", a.data, "training split directory")->required();
    cmd->add_option("--out", a.out, "checkpoint output directory")->required();
    cmd->add_option("--init", a.init, "checkpoint to continue from");
    cmd->add_option("--seed", a.seed, "master seed")->capture_default_str();
    if (joint_flags) {
      cmd->add_option("--lambda1", a.lambda1, "pretraining loss weight")->capture_default_str();
      cmd->add_option("--lambda2", a.lambda2, "finetuning loss weight")->capture_default_str();
    }
    a.model.attach(cmd);
    a.train.attach(cmd);
    add_config_file(cmd);
  };
  attach_train(pre_cmd, pre, false);
  attach_train(fin_cmd, fin, false);
  fin_cmd->add_flag("--from-scratch", fin.from_scratch,
                    "finetune from random init (skip the pretraining stage)");
  attach_train(joint_cmd, joint, true);

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--data", ev.data, "dataset split directory")->required();
  eval_cmd->add_option("--beam", ev.beam, "beam width")->capture_default_str();
  eval_cmd->add_option("--max-answer-len", ev.max_answer_len, "decode length cap")
      ->capture_default_str();
  eval_cmd->add_option("--report", ev.report, "write the JSON report here");
  eval_cmd->add_option("--prompt-mode", ev.prompt_mode, "auto, pretrain or finetune")
      ->capture_default_str();
  eval_cmd->add_option("--seed", ev.seed, "seed recorded in the report")->capture_default_str();

  AblationArgs ab;
  CLI::App* ab_cmd = app.add_subcommand("ablation", "train and score full / w-o DAP / w-o PBF");
  ab_cmd->add_option("--data", ab.data, "dataset root with train/ and val/")->required();
  ab_cmd->add_option("--budget", ab.budget, "steps per training stage")->capture_default_str();
  ab_cmd->add_option("--seeds", ab.seeds, "comma-separated seeds")->capture_default_str();
  ab_cmd->add_option("--report", ab.report, "write the JSON report here");
  ab_cmd->add_option("--beam", ab.beam, "beam width for evaluation")->capture_default_str();
  ab.model.attach(ab_cmd);
  ab.train.attach(ab_cmd);
  add_config_file(ab_cmd);

  AnswerArgs an;
  CLI::App* an_cmd = app.add_subcommand("answer", "answer one question about one image");
  an_cmd->add_option("--ckpt", an.ckpt, "checkpoint directory")->required();
  an_cmd->add_option("--image", an.image, "image tensor file (.rsvt)")->required();
  an_cmd->add_option("--question", an.question, "question text")->required();
  an_cmd->add_option("--beam", an.beam, "beam width")->capture_default_str();
  an_cmd->add_option("--max-answer-len", an.max_answer_len, "decode length cap")
      ->capture_default_str();
  an_cmd->add_option("--prompt-mode", an.prompt_mode, "auto, pretrain or finetune")
      ->capture_default_str();

  GradCheckArgs gc;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "compare tape gradients to finite differences");
  gc_cmd->add_option("--seed", gc.seed, "master seed")->capture_default_str();
  gc_cmd->add_option("--samples", gc.samples, "coordinates to probe")->capture_default_str();
  gc_cmd->add_option("--batch", gc.batch, "synthetic samples in the objective")
      ->capture_default_str();
  gc_cmd->add_option("--eps", gc.eps, "finite-difference step")->capture_default_str();
  gc_cmd->add_option("--threshold", gc.threshold, "max relative error (default 1e-3, 1e-5 for --f64)");
  gc_cmd->add_flag("--f64", gc.f64, "check the double-precision instantiation");
  gc.model.attach(gc_cmd);
  add_config_file(gc_cmd);

  HumanEvalArgs he;
  CLI::App* he_cmd = app.add_subcommand("human-eval", "aggregate human evaluation scores");
  he_cmd->add_option("--csv", he.csv, "method,criterion,score,annotator,question_id")->required();
  he_cmd->add_option("--report", he.report, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const BadConfig& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (pre_cmd->parsed()) return cmd_train_stage(pre, TrainStage::Pretrain);
    if (fin_cmd->parsed()) return cmd_train_stage(fin, TrainStage::Finetune);
    if (joint_cmd->parsed()) return cmd_train_stage(joint, TrainStage::Joint);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (ab_cmd->parsed()) return cmd_ablation(ab);
    if (an_cmd->parsed()) return cmd_answer(an);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc);
    if (he_cmd->parsed()) return cmd_human_eval(he);
  } catch (const BadConfig& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const BothZero& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    std::cerr << e.what() << "\n";
    return kExitNumerical;
  } catch (const VersionMismatch& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const CorruptManifest& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const SchemaError& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const EmptyCorpus& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const EmptyBatch& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
