// pybind11 bindings exposing the pipeline operations: dataset generation,
// vocabulary handling, two-stage training, answering, evaluation, metrics,
// and the gradient checker.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rsvqa/checkpoint.hpp"
#include "rsvqa/corpus.hpp"
#include "rsvqa/decoding.hpp"
#include "rsvqa/errors.hpp"
#include "rsvqa/eval.hpp"
#include "rsvqa/gradcheck.hpp"
#include "rsvqa/io.hpp"
#include "rsvqa/model.hpp"
#include "rsvqa/tokenizer.hpp"
#include "rsvqa/training.hpp"

namespace py = pybind11;
using namespace rsvqa;

namespace {

ImageTensor image_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw ShapeMismatch("image array must be H x W x C");
  ImageTensor img;
  img.h = static_cast<int>(a.shape(0));
  img.w = static_cast<int>(a.shape(1));
  img.c = static_cast<int>(a.shape(2));
  img.data.assign(a.data(), a.data() + a.size());
  return img;
}

py::array_t<float> image_to_numpy(const ImageTensor& img) {
  py::array_t<float> out({img.h, img.w, img.c});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  d["yesno_acc"] = r.yesno_acc ? py::object(py::float_(*r.yesno_acc)) : py::none();
  d["mc_acc"] = r.mc_acc ? py::object(py::float_(*r.mc_acc)) : py::none();
  d["open_f1"] = r.open_f1 ? py::object(py::float_(*r.open_f1)) : py::none();
  d["yesno_count"] = r.yesno_count;
  d["mc_count"] = r.mc_count;
  d["open_count"] = r.open_count;
  d["checkpoint_id"] = r.checkpoint_id;
  d["dataset_id"] = r.dataset_id;
  d["prompt_mode"] = r.prompt_mode;
  d["beam_k"] = r.beam_k;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "generative remote-sensing VQA pipeline";
  m.attr("__version__") = "0.1.0";

  py::register_exception<Error>(m, "RsvqaError");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_enc_layers", &ModelConfig::n_enc_layers)
      .def_readwrite("n_dec_layers", &ModelConfig::n_dec_layers)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("image_h", &ModelConfig::image_h)
      .def_readwrite("image_w", &ModelConfig::image_w)
      .def_readwrite("image_c", &ModelConfig::image_c);

  py::class_<Sample>(m, "Sample")
      .def_readonly("id", &Sample::id)
      .def_readonly("image_path", &Sample::image_path)
      .def_readonly("question", &Sample::question)
      .def_property_readonly("question_type",
                             [](const Sample& s) { return question_type_name(s.question_type); })
      .def_readonly("choices", &Sample::choices)
      .def_readonly("answer", &Sample::answer);

  py::class_<Vocabulary>(m, "Vocabulary")
      .def("encode", &Vocabulary::encode)
      .def("decode", &Vocabulary::decode)
      .def("__len__", &Vocabulary::size)
      .def("__contains__", &Vocabulary::contains)
      .def("save", &Vocabulary::save)
      .def_static("load", &Vocabulary::load);

  m.def("normalize_text", &normalize_text);
  m.def("build_vocab", &Vocabulary::build, py::arg("texts"), py::arg("min_count") = 1);

  m.def(
      "generate_split",
      [](const std::filesystem::path& dir, int count, std::uint64_t seed, int grid,
         double noise_sigma) {
        SceneConfig scene;
        scene.grid_size = grid;
        RenderConfig render;
        render.noise_sigma = noise_sigma;
        generate_splits(dir.parent_path(), {{dir.filename().string(), count}}, seed, scene, render);
      },
      py::arg("dir"), py::arg("count"), py::arg("seed") = 0, py::arg("grid") = 8,
      py::arg("noise_sigma") = 0.02,
      "Generate one dataset split directory (manifest.jsonl + images/).");

  m.def(
      "read_manifest",
      [](const std::filesystem::path& dir) { return read_dataset(dir).samples; },
      py::arg("dir"));

  m.def(
      "load_image",
      [](const std::filesystem::path& dir, const Sample& s) {
        return image_to_numpy(read_image_file(dir / s.image_path));
      },
      py::arg("dir"), py::arg("sample"));

  m.def(
      "train_stage",
      [](const std::string& stage, const std::filesystem::path& data,
         const std::filesystem::path& out, const std::optional<std::filesystem::path>& init,
         int steps, std::uint64_t seed, double lr, int batch, const std::string& optimizer,
         double lambda1, double lambda2, const std::optional<ModelConfig>& model_config) {
        py::gil_scoped_release release;
        const Dataset dataset = read_dataset(data);
        Checkpoint ckpt;
        long long prior = 0;
        if (init) {
          ckpt = load_checkpoint(*init);
          prior = ckpt.step;
        } else {
          ckpt.vocab = build_dataset_vocab(dataset);
          ModelConfig cfg = model_config ? *model_config : ModelConfig{};
          cfg.vocab_size = ckpt.vocab.size();
          ckpt.model = init_params(cfg, seed);
        }
        TrainConfig tc;
        tc.stage = train_stage_from_name(stage);
        tc.steps = steps;
        tc.seed = seed;
        tc.lr = lr;
        tc.batch_size = batch;
        tc.optimizer = optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
        tc.lambda1 = lambda1;
        tc.lambda2 = lambda2;
        const std::vector<TrainSample> samples = prepare_train_data(dataset, ckpt.vocab);
        const TrainResult result = train(ckpt.model, samples, ckpt.vocab, tc);
        ckpt.stage = stage;
        ckpt.step = prior + steps;
        ckpt.rng_state = result.rng_state;
        save_checkpoint(ckpt, out);
        write_file_atomic(out / "loss.csv", loss_log_csv(result.log));
        return result.final_loss;
      },
      py::arg("stage"), py::arg("data"), py::arg("out"), py::arg("init") = std::nullopt,
      py::arg("steps") = 100, py::arg("seed") = 0, py::arg("lr") = 3e-3, py::arg("batch") = 16,
      py::arg("optimizer") = "adam", py::arg("lambda1") = 1.0, py::arg("lambda2") = 1.0,
      py::arg("model_config") = std::nullopt,
      "Run one training stage and write a checkpoint; returns the final loss.");

  m.def(
      "answer",
      [](const std::filesystem::path& ckpt_dir,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& image,
         const std::string& question, int beam, int max_answer_len, const std::string& prompt_mode) {
        const Checkpoint ckpt = load_checkpoint(ckpt_dir);
        const ImageTensor img = image_from_numpy(image);
        const PromptMode mode =
            prompt_mode == "auto" ? ckpt.prompt_mode() : prompt_mode_from_name(prompt_mode);
        DecodeResult result;
        {
          py::gil_scoped_release release;
          result = beam_search(ckpt.model, ckpt.vocab, img, question, mode, beam, max_answer_len,
                               LengthNorm::None);
        }
        return py::make_tuple(ckpt.vocab.decode(result.tokens), result.score);
      },
      py::arg("ckpt"), py::arg("image"), py::arg("question"), py::arg("beam") = 3,
      py::arg("max_answer_len") = 8, py::arg("prompt_mode") = "auto",
      "Beam-search an answer for one image/question; returns (text, log_prob).");

  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& ckpt_dir, const std::filesystem::path& data, int beam,
         const std::string& prompt_mode) {
        const Checkpoint ckpt = load_checkpoint(ckpt_dir);
        const Dataset dataset = read_dataset(data);
        EvalConfig cfg;
        cfg.beam_k = beam;
        cfg.prompt_mode =
            prompt_mode == "auto" ? ckpt.prompt_mode() : prompt_mode_from_name(prompt_mode);
        MetricsReport report;
        {
          py::gil_scoped_release release;
          report = evaluate(ckpt.model, ckpt.vocab, dataset, cfg);
        }
        report.checkpoint_id = checkpoint_id(ckpt_dir);
        return report_to_dict(report);
      },
      py::arg("ckpt"), py::arg("data"), py::arg("beam") = 3, py::arg("prompt_mode") = "auto");

  m.def("yesno_accuracy", &yesno_accuracy);
  m.def("mc_accuracy", &mc_accuracy);
  m.def("token_f1", &token_f1);
  m.def("open_f1", &open_f1);

  m.def(
      "aggregate_human_eval",
      [](const std::string& csv_text) {
        const HumanEvalReport report = aggregate_human_eval(parse_human_eval_csv(csv_text));
        py::dict out;
        for (std::size_t i = 0; i < report.methods.size(); ++i) {
          py::dict scores;
          const char* names[3] = {"correctness", "relevance", "language_quality"};
          for (std::size_t c = 0; c < 3; ++c)
            scores[names[c]] = report.means[i][c] < 0
                                   ? py::object(py::none())
                                   : py::object(py::float_(report.means[i][c]));
          out[py::str(report.methods[i])] = scores;
        }
        return out;
      },
      py::arg("csv_text"), "Mean 1-5 scores per method and criterion from CSV text.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed, int coords, bool f64) {
        py::gil_scoped_release release;
        // Reduced model so smoke tests stay fast.
        ModelConfig cfg;
        cfg.d_model = 32;
        cfg.d_ff = 64;
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        return f64 ? run_model_gradcheck<double>(cfg, seed, coords, 2, 1e-4).max_rel_err
                   : run_model_gradcheck<float>(cfg, seed, coords, 2, 1e-4).max_rel_err;
      },
      py::arg("seed") = 0, py::arg("coords") = 64, py::arg("f64") = false);
}
