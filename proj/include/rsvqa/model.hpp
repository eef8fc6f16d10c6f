#pragma once

// Visual encoder + autoregressive language decoder. The encoder turns the
// image into a patch-feature sequence whose mean fills the reserved <img>
// slot of the prompt; the decoder runs causal self-attention over the token
// prefix and cross-attention over the patch sequence. Everything is built
// from the tape ops so one backward pass differentiates the whole model.

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rsvqa/errors.hpp"
#include "rsvqa/image.hpp"
#include "rsvqa/rng.hpp"
#include "rsvqa/tensor.hpp"
#include "rsvqa/tokenizer.hpp"

namespace rsvqa {

enum class PromptMode { Pretrain, Finetune };

inline const char* prompt_mode_name(PromptMode m) {
  return m == PromptMode::Pretrain ? "pretrain" : "finetune";
}

inline PromptMode prompt_mode_from_name(const std::string& s) {
  if (s == "pretrain") return PromptMode::Pretrain;
  if (s == "finetune") return PromptMode::Finetune;
  throw BadConfig("unknown prompt mode '" + s + "'");
}

// Fixed prompt template pieces (finetune mode wraps the question in them).
inline constexpr const char* kTemplatePrefix = "given the image features";
inline constexpr const char* kTemplateInfix = "answer the question:";

/// All template words, for vocabulary construction.
inline std::string prompt_template_text() {
  return std::string(kTemplatePrefix) + " " + kTemplateInfix;
}

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 128;
  int patch_size = 4;
  int max_seq_len = 48;
  int vocab_size = 64;
  int image_h = 32;
  int image_w = 32;
  int image_c = 4;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 || d_ff <= 0 ||
        patch_size <= 0 || max_seq_len < 2 || image_h <= 0 || image_w <= 0)
      throw BadConfig("model dimensions must be positive");
    if (d_model % n_heads != 0) throw BadConfig("d_model must be divisible by n_heads");
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
      throw BadConfig("image height and width must be divisible by patch_size");
    if (image_c < 3) throw BadConfig("images need at least 3 spectral bands");
    if (vocab_size <= kEosId) throw BadConfig("vocab_size must cover the EOS token");
  }

  int patches() const { return (image_h / patch_size) * (image_w / patch_size); }
  int patch_dim() const { return patch_size * patch_size * image_c; }
  int head_dim() const { return d_model / n_heads; }
};

/// Named parameter tensors in a fixed canonical order (the checkpoint and
/// the optimizer both rely on it).
template <class T>
struct VlmModelT {
  ModelConfig config;
  std::vector<std::pair<std::string, TensorT<T>>> params;
  std::unordered_map<std::string, std::size_t> index;

  void add(std::string name, TensorT<T> t) {
    if (!index.emplace(name, params.size()).second) throw Error("duplicate parameter " + name);
    params.emplace_back(std::move(name), std::move(t));
  }
  const TensorT<T>& param(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return params[it->second].second;
  }
  TensorT<T>& param(const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return params[it->second].second;
  }
};

using VlmModel = VlmModelT<float>;

template <class T>
struct VisualFeaturesT {
  TensorT<T> sequence;  // [P, d]
  TensorT<T> pooled;    // [d], mean over patches
};

using VisualFeatures = VisualFeaturesT<float>;

namespace detail {

template <class T>
TensorT<T> glorot(Rng& rng, int rows, int cols) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  std::vector<T> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
  return TensorT<T>({rows, cols}, std::move(v));
}

template <class T>
void add_linear(VlmModelT<T>& m, Rng& rng, const std::string& name, int in, int out) {
  m.add(name + ".w", glorot<T>(rng, in, out));
  m.add(name + ".b", TensorT<T>({out}));
}

template <class T>
void add_layer_norm(VlmModelT<T>& m, const std::string& name, int d) {
  m.add(name + ".g", TensorT<T>::full({d}, T{1}));
  m.add(name + ".b", TensorT<T>({d}));
}

template <class T>
void add_attention(VlmModelT<T>& m, Rng& rng, const std::string& name, int d) {
  add_linear(m, rng, name + ".q", d, d);
  // No key bias: softmax rows are invariant to a constant key offset, so the
  // parameter would be unidentifiable and its gradient identically zero.
  m.add(name + ".k.w", glorot<T>(rng, d, d));
  add_linear(m, rng, name + ".v", d, d);
  add_linear(m, rng, name + ".o", d, d);
}

template <class T>
void add_ffn(VlmModelT<T>& m, Rng& rng, const std::string& name, int d, int d_ff) {
  add_linear(m, rng, name + ".1", d, d_ff);
  add_linear(m, rng, name + ".2", d_ff, d);
}

}  // namespace detail

/// Weights ~ U(+-sqrt(6/(fan_in+fan_out))), biases zero, layer-norm gains
/// one. Deterministic per seed: tensors are drawn in declaration order from
/// a single stream.
template <class T = float>
VlmModelT<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  VlmModelT<T> m;
  m.config = config;
  Rng rng = Rng(seed).stream("init");

  detail::add_linear(m, rng, "patch_proj", config.patch_dim(), config.d_model);
  m.add("enc.pos", detail::glorot<T>(rng, config.patches(), config.d_model));
  for (int i = 0; i < config.n_enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    detail::add_layer_norm(m, p + ".ln1", config.d_model);
    detail::add_attention(m, rng, p + ".attn", config.d_model);
    detail::add_layer_norm(m, p + ".ln2", config.d_model);
    detail::add_ffn(m, rng, p + ".ffn", config.d_model, config.d_ff);
  }
  detail::add_layer_norm(m, "enc.ln_f", config.d_model);

  m.add("dec.tok_emb", detail::glorot<T>(rng, config.vocab_size, config.d_model));
  m.add("dec.pos", detail::glorot<T>(rng, config.max_seq_len, config.d_model));
  detail::add_linear(m, rng, "img_proj", config.d_model, config.d_model);
  for (int i = 0; i < config.n_dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    detail::add_layer_norm(m, p + ".ln1", config.d_model);
    detail::add_attention(m, rng, p + ".self", config.d_model);
    detail::add_layer_norm(m, p + ".ln2", config.d_model);
    detail::add_attention(m, rng, p + ".cross", config.d_model);
    detail::add_layer_norm(m, p + ".ln3", config.d_model);
    detail::add_ffn(m, rng, p + ".ffn", config.d_model, config.d_ff);
  }
  detail::add_layer_norm(m, "dec.ln_f", config.d_model);
  detail::add_linear(m, rng, "out", config.d_model, config.vocab_size);
  return m;
}

template <class To, class From>
VlmModelT<To> convert_model(const VlmModelT<From>& src) {
  VlmModelT<To> dst;
  dst.config = src.config;
  for (const auto& [name, t] : src.params) {
    std::vector<To> v(t.data().begin(), t.data().end());
    dst.add(name, TensorT<To>(t.shape(), std::move(v)));
  }
  return dst;
}

/// Model bound to an optional tape: p() hands back watched parameters when
/// recording, raw ones during inference.
template <class T>
struct BoundModel {
  const VlmModelT<T>* model;
  TapeT<T>* tape = nullptr;

  TensorT<T> p(const std::string& name) const {
    const TensorT<T>& raw = model->param(name);
    return tape ? tape->watch(raw) : raw;
  }
  const ModelConfig& config() const { return model->config; }
};

namespace detail {

/// Non-overlapping patch flattening: [H, W, C] -> [P, patch*patch*C].
template <class T>
TensorT<T> patchify(const ImageTensor& img, const ModelConfig& cfg) {
  if (img.h != cfg.image_h || img.w != cfg.image_w || img.c != cfg.image_c)
    throw ShapeMismatch("image dims do not match the model config");
  const int p = cfg.patch_size;
  const int rows = cfg.patches(), cols = cfg.patch_dim();
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  const int pw = cfg.image_w / p;
  for (int r = 0; r < rows; ++r) {
    const int py = (r / pw) * p, px = (r % pw) * p;
    std::size_t k = static_cast<std::size_t>(r) * cols;
    for (int dy = 0; dy < p; ++dy)
      for (int dx = 0; dx < p; ++dx)
        for (int ch = 0; ch < img.c; ++ch) out[k++] = static_cast<T>(img.at(py + dy, px + dx, ch));
  }
  return TensorT<T>({rows, cols}, std::move(out));
}

template <class T>
TensorT<T> causal_mask(int n) {
  std::vector<T> m(static_cast<std::size_t>(n) * n, T{0});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m[static_cast<std::size_t>(i) * n + j] = T{-1e9};
  return TensorT<T>({n, n}, std::move(m));
}

template <class T>
TensorT<T> multi_head_attention(const BoundModel<T>& bm, const std::string& prefix,
                                const TensorT<T>& q_in, const TensorT<T>& kv_in, bool causal) {
  const ModelConfig& cfg = bm.config();
  const TensorT<T> q = add_bias(matmul(q_in, bm.p(prefix + ".q.w")), bm.p(prefix + ".q.b"));
  const TensorT<T> k = matmul(kv_in, bm.p(prefix + ".k.w"));
  const TensorT<T> v = add_bias(matmul(kv_in, bm.p(prefix + ".v.w")), bm.p(prefix + ".v.b"));

  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<TensorT<T>> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const TensorT<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    const TensorT<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    const TensorT<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    TensorT<T> scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    if (causal) scores = add(scores, causal_mask<T>(scores.rows()));
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  return add_bias(matmul(concat_cols(heads), bm.p(prefix + ".o.w")), bm.p(prefix + ".o.b"));
}

template <class T>
TensorT<T> feed_forward(const BoundModel<T>& bm, const std::string& prefix, const TensorT<T>& x) {
  const TensorT<T> h = gelu(add_bias(matmul(x, bm.p(prefix + ".1.w")), bm.p(prefix + ".1.b")));
  return add_bias(matmul(h, bm.p(prefix + ".2.w")), bm.p(prefix + ".2.b"));
}

template <class T>
TensorT<T> ln(const BoundModel<T>& bm, const std::string& prefix, const TensorT<T>& x) {
  return layer_norm(x, bm.p(prefix + ".g"), bm.p(prefix + ".b"));
}

}  // namespace detail

/// Patch projection -> learned positions -> pre-LN encoder blocks. The
/// pooled vector is the column mean of the final sequence.
template <class T>
VisualFeaturesT<T> encode_image(const BoundModel<T>& bm, const ImageTensor& img) {
  const ModelConfig& cfg = bm.config();
  TensorT<T> h = add_bias(matmul(detail::patchify<T>(img, cfg), bm.p("patch_proj.w")),
                          bm.p("patch_proj.b"));
  h = add(h, bm.p("enc.pos"));
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    const TensorT<T> n1 = detail::ln(bm, p + ".ln1", h);
    h = add(h, detail::multi_head_attention(bm, p + ".attn", n1, n1, /*causal=*/false));
    h = add(h, detail::feed_forward(bm, p + ".ffn", detail::ln(bm, p + ".ln2", h)));
  }
  h = detail::ln(bm, "enc.ln_f", h);
  return VisualFeaturesT<T>{h, mean_rows(h)};
}

template <class T>
VisualFeaturesT<T> encode_image(const VlmModelT<T>& m, const ImageTensor& img,
                                TapeT<T>* tape = nullptr) {
  return encode_image(BoundModel<T>{&m, tape}, img);
}

/// Conditioning prefix for a question. Finetune mode wraps the question in
/// the fixed template; pretrain mode is just the visual slot plus question.
/// The answer segment follows after BOS and is not part of the prompt.
inline std::vector<int> build_prompt(const Vocabulary& vocab, const std::string& question,
                                     PromptMode mode) {
  std::vector<int> ids;
  if (mode == PromptMode::Finetune) {
    for (int t : vocab.encode(kTemplatePrefix)) ids.push_back(t);
    ids.push_back(kImgId);
    for (int t : vocab.encode(kTemplateInfix)) ids.push_back(t);
  } else {
    ids.push_back(kImgId);
  }
  for (int t : vocab.encode(question)) ids.push_back(t);
  return ids;
}

/// Hidden states for a token prefix: causal self-attention with the <img>
/// embedding replaced by a learned projection of the pooled visual vector,
/// cross-attention over the patch sequence, final layer norm.
template <class T>
TensorT<T> decoder_hidden(const BoundModel<T>& bm, const VisualFeaturesT<T>& features,
                          const std::vector<int>& tokens) {
  const ModelConfig& cfg = bm.config();
  const int len = static_cast<int>(tokens.size());
  if (len == 0) throw ShapeMismatch("empty decoder input");
  if (len > cfg.max_seq_len)
    throw SequenceTooLong(std::to_string(len) + " tokens vs max_seq_len " +
                          std::to_string(cfg.max_seq_len));

  TensorT<T> h = embedding(bm.p("dec.tok_emb"), tokens);
  const TensorT<T> img_row = add_bias(
      matmul(reshape(features.pooled, {1, cfg.d_model}), bm.p("img_proj.w")), bm.p("img_proj.b"));
  for (int i = 0; i < len; ++i) {
    if (tokens[static_cast<std::size_t>(i)] == kImgId) h = replace_row(h, i, img_row);
  }
  h = add(h, slice_rows(bm.p("dec.pos"), 0, len));

  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    const TensorT<T> n1 = detail::ln(bm, p + ".ln1", h);
    h = add(h, detail::multi_head_attention(bm, p + ".self", n1, n1, /*causal=*/true));
    h = add(h, detail::multi_head_attention(bm, p + ".cross", detail::ln(bm, p + ".ln2", h),
                                            features.sequence, /*causal=*/false));
    h = add(h, detail::feed_forward(bm, p + ".ffn", detail::ln(bm, p + ".ln3", h)));
  }
  return detail::ln(bm, "dec.ln_f", h);
}

/// Next-token logits for every position: [len, vocab].
template <class T>
TensorT<T> decoder_logits(const BoundModel<T>& bm, const VisualFeaturesT<T>& features,
                          const std::vector<int>& tokens) {
  const TensorT<T> h = decoder_hidden(bm, features, tokens);
  return add_bias(matmul(h, bm.p("out.w")), bm.p("out.b"));
}

/// Logits for the token following `prefix` (prompt ++ BOS ++ generated so
/// far). The prefix must leave room for at least one more position.
template <class T>
TensorT<T> decode_step(const VlmModelT<T>& m, const VisualFeaturesT<T>& features,
                       const std::vector<int>& prefix, TapeT<T>* tape = nullptr) {
  if (static_cast<int>(prefix.size()) >= m.config.max_seq_len)
    throw SequenceTooLong("prefix of " + std::to_string(prefix.size()) + " tokens leaves no room");
  const BoundModel<T> bm{&m, tape};
  const TensorT<T> h = decoder_hidden(bm, features, prefix);
  const TensorT<T> last = slice_rows(h, h.rows() - 1, h.rows());
  return reshape(add_bias(matmul(last, bm.p("out.w")), bm.p("out.b")), {m.config.vocab_size});
}

/// Teacher-forced input/target alignment. Input is prompt ++ BOS ++ answer;
/// targets supervise the answer tokens and the closing EOS, with prompt
/// positions ignored (PAD doubles as the ignore id; it never occurs as a
/// real target).
struct TeacherForced {
  std::vector<int> input;
  std::vector<int> targets;
  int supervised = 0;
};

inline TeacherForced teacher_forced(const std::vector<int>& prompt,
                                    const std::vector<int>& answer_ids) {
  TeacherForced tf;
  tf.input = prompt;
  tf.input.push_back(kBosId);
  tf.input.insert(tf.input.end(), answer_ids.begin(), answer_ids.end());
  tf.targets.assign(tf.input.size(), kPadId);
  const std::size_t bos_pos = prompt.size();
  for (std::size_t i = 0; i < answer_ids.size(); ++i) tf.targets[bos_pos + i] = answer_ids[i];
  tf.targets[tf.input.size() - 1] = kEosId;
  tf.supervised = static_cast<int>(answer_ids.size()) + 1;
  return tf;
}

/// Tape-recorded token NLL for one sample; count is answer length + 1 (EOS).
template <class T>
NllResult<T> sample_nll(const BoundModel<T>& bm, const ImageTensor& image,
                        const std::vector<int>& prompt, const std::vector<int>& answer_ids) {
  const TeacherForced tf = teacher_forced(prompt, answer_ids);
  const VisualFeaturesT<T> features = encode_image(bm, image);
  const TensorT<T> logits = decoder_logits(bm, features, tf.input);
  return nll_sum(logits, tf.targets, kPadId);
}

/// Teacher-forced log p(answer ++ EOS | image, question) as a double sum of
/// per-token log-softmax values, matching what the decoders accumulate.
template <class T>
double sequence_log_prob(const VlmModelT<T>& m, const Vocabulary& vocab, const ImageTensor& image,
                         const std::string& question, const std::vector<int>& answer_ids,
                         PromptMode mode) {
  const std::vector<int> prompt = build_prompt(vocab, question, mode);
  const TeacherForced tf = teacher_forced(prompt, answer_ids);
  const BoundModel<T> bm{&m, nullptr};
  const VisualFeaturesT<T> features = encode_image(bm, image);
  const TensorT<T> logits = decoder_logits(bm, features, tf.input);

  const int v = m.config.vocab_size;
  double total = 0.0;
  for (std::size_t t = 0; t < tf.targets.size(); ++t) {
    const int tgt = tf.targets[t];
    if (tgt == kPadId) continue;
    const T* row = logits.data().data() + t * static_cast<std::size_t>(v);
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    total += (static_cast<double>(row[tgt]) - mx) - std::log(denom);
  }
  return total;
}

}  // namespace rsvqa
