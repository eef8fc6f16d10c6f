#pragma once

// End-to-end gradient checking of the full model loss. The analytic side
// runs in the requested precision; the finite-difference oracle always runs
// on a double-precision mirror so its own noise stays far below the
// tolerances being asserted.

#include <utility>
#include <vector>

#include "rsvqa/corpus.hpp"
#include "rsvqa/model.hpp"
#include "rsvqa/tensor.hpp"
#include "rsvqa/training.hpp"

namespace rsvqa {

/// Deterministic in-memory batch (scenes, rendered images, grounded Q/A)
/// plus a vocabulary covering it and the prompt template.
inline std::pair<Vocabulary, std::vector<TrainSample>> gradcheck_fixture(const ModelConfig& cfg,
                                                                         std::uint64_t seed,
                                                                         int batch) {
  const Rng master(seed);
  std::vector<std::string> texts = {prompt_template_text(), "yes no"};
  std::vector<Scene> scenes;
  std::vector<Sample> qa;
  for (int i = 0; i < batch; ++i) {
    const Scene scene =
        generate_scene(master.stream("gradcheck-scene", static_cast<std::uint64_t>(i)).next_u64());
    Rng qa_rng = master.stream("gradcheck-qa", static_cast<std::uint64_t>(i));
    const std::vector<Sample> samples = generate_qa(scene, qa_rng);
    const Sample& pick = samples[static_cast<std::size_t>(i) % samples.size()];
    texts.push_back(pick.question);
    texts.push_back(pick.answer);
    scenes.push_back(scene);
    qa.push_back(pick);
  }
  Vocabulary vocab = Vocabulary::build(texts);

  RenderConfig render;
  render.image_h = cfg.image_h;
  render.image_w = cfg.image_w;
  std::vector<TrainSample> data;
  for (int i = 0; i < batch; ++i) {
    TrainSample s;
    s.image =
        render_image(scenes[static_cast<std::size_t>(i)], render,
                     master.stream("gradcheck-render", static_cast<std::uint64_t>(i)).next_u64());
    s.question = qa[static_cast<std::size_t>(i)].question;
    s.answer_ids = vocab.encode(qa[static_cast<std::size_t>(i)].answer);
    data.push_back(std::move(s));
  }
  return {std::move(vocab), std::move(data)};
}

/// Checks the finetune-mode batch loss (it reaches every parameter tensor,
/// visual-slot projection and cross-attention included) at >= `coords`
/// coordinates spread over all parameter tensors.
template <class T>
GradCheckReport run_model_gradcheck(ModelConfig cfg, std::uint64_t seed, int coords, int batch,
                                    double eps) {
  auto [vocab, data] = gradcheck_fixture(cfg, seed, batch);
  cfg.vocab_size = vocab.size();
  const Batch batch_view = as_batch(data);

  VlmModelT<T> model = init_params<T>(cfg, seed);
  VlmModelT<double> ref = convert_model<double>(model);

  std::vector<TensorT<T>*> params;
  std::vector<TensorT<double>*> params_ref;
  for (std::size_t k = 0; k < model.params.size(); ++k) {
    params.push_back(&model.params[k].second);
    params_ref.push_back(&ref.params[k].second);
  }

  const Vocabulary& vocab_ref = vocab;
  const auto loss = [&model, &vocab_ref, &batch_view](TapeT<T>& tape) {
    return finetune_loss(model, vocab_ref, batch_view, LossNorm::PerToken, &tape);
  };
  const auto loss_ref = [&ref, &vocab_ref, &batch_view]() {
    return finetune_loss(ref, vocab_ref, batch_view, LossNorm::PerToken).item();
  };
  Rng rng = Rng(seed).stream("gradcheck-coords");
  return grad_check<T>(loss, params, loss_ref, params_ref, eps, coords, rng);
}

}  // namespace rsvqa
