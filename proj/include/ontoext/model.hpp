#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ontoext/bpe.hpp"
#include "ontoext/error.hpp"
#include "ontoext/kernels.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

enum class Activation : std::uint32_t { kGelu = 0, kGeluTanh = 1 };

// Masked-language-model loss. kSoftmaxCrossEntropy is the default; kBinary
// treats each vocabulary entry at a masked position as an independent
// sigmoid output against a one-hot target.
enum class MlmLoss : std::uint32_t { kSoftmaxCrossEntropy = 0, kBinary = 1 };

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_heads = 12;
  std::size_t hidden_dim = 768;
  std::size_t ffn_dim = 3072;
  std::size_t vocab_size = 1395;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t n_labels = 500;
  double attention_dropout = 0.1;
  Activation activation = Activation::kGelu;
  MlmLoss mlm_loss = MlmLoss::kSoftmaxCrossEntropy;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return hidden_dim / n_heads; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw Error(ErrorKind::kInvalidArgument, std::string(name) + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(hidden_dim, "hidden_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(max_len, "max_len");
    positive(n_labels, "n_labels");
    if (hidden_dim % n_heads != 0) throw Error(ErrorKind::kInvalidArgument, "hidden_dim must be divisible by n_heads");
    if (vocab_size <= static_cast<std::size_t>(special::kMask))
      throw Error(ErrorKind::kInvalidArgument, "vocab_size must cover the reserved tokens");
    if (!(attention_dropout >= 0.0 && attention_dropout < 1.0))
      throw Error(ErrorKind::kInvalidArgument, "attention_dropout must be in [0, 1)");
    if (!(layer_norm_eps > 0.0)) throw Error(ErrorKind::kInvalidArgument, "layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename S>
struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<S> value;
  std::vector<S> grad;
  bool decay = true;  // subject to weight decay

  std::size_t size() const { return value.size(); }
  std::span<const S> v() const { return value; }
  std::span<S> v() { return value; }
  std::span<const S> g() const { return grad; }
  std::span<S> g() { return grad; }
};

// Positions of the named tensors inside a ParameterStore.
struct ParamLayout {
  static constexpr std::size_t kPerLayer = 16;
  enum Layer : std::size_t {
    kNorm1Scale, kNorm1Shift, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kNorm2Scale, kNorm2Shift, kW1, kB1, kW2, kB2
  };
  std::size_t n_layers = 0;

  static constexpr std::size_t token_embedding() { return 0; }
  static constexpr std::size_t position_embedding() { return 1; }
  std::size_t layer(std::size_t l, Layer which) const { return 2 + l * kPerLayer + which; }
  std::size_t final_norm_scale() const { return 2 + n_layers * kPerLayer; }
  std::size_t final_norm_shift() const { return final_norm_scale() + 1; }
  std::size_t mlm_bias() const { return final_norm_scale() + 2; }
  std::size_t classifier_weight() const { return final_norm_scale() + 3; }
  std::size_t classifier_bias() const { return final_norm_scale() + 4; }
  std::size_t count() const { return final_norm_scale() + 5; }
};

// All trainable arrays with parallel gradient slots, addressable by name.
template <typename S>
class ParameterStore {
 public:
  ParameterStore() = default;

  void add(std::string name, std::size_t rows, std::size_t cols, bool decay) {
    index_[name] = tensors_.size();
    tensors_.push_back(Tensor<S>{std::move(name), rows, cols, std::vector<S>(rows * cols, S(0)),
                                 std::vector<S>(rows * cols, S(0)), decay});
  }

  std::size_t size() const { return tensors_.size(); }
  Tensor<S>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<S>& operator[](std::size_t i) const { return tensors_[i]; }

  Tensor<S>& operator[](const std::string& name) { return tensors_.at(lookup(name)); }
  const Tensor<S>& operator[](const std::string& name) const { return tensors_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), S(0));
  }

  // Bitwise comparison of values (gradients ignored).
  bool same_values(const ParameterStore& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& a = tensors_[i];
      const auto& b = other.tensors_[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
      if (std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(S)) != 0) return false;
    }
    return true;
  }

  template <typename T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out;
    for (const auto& t : tensors_) {
      out.add(t.name, t.rows, t.cols, t.decay);
      auto& dst = out[out.size() - 1];
      for (std::size_t i = 0; i < t.size(); ++i) dst.value[i] = static_cast<T>(t.value[i]);
    }
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorKind::kUnknownId, "no parameter named " + name);
    return it->second;
  }

  std::vector<Tensor<S>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Declares every tensor in layout order with zeroed values.
template <typename S>
ParameterStore<S> declare_parameters(const ModelConfig& c) {
  ParameterStore<S> p;
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  p.add("embeddings.token", c.vocab_size, d, true);
  p.add("embeddings.position", c.max_len, d, true);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    p.add(pre + "attn_norm.scale", 1, d, false);
    p.add(pre + "attn_norm.shift", 1, d, false);
    p.add(pre + "attn.query.weight", d, d, true);
    p.add(pre + "attn.query.bias", 1, d, false);
    p.add(pre + "attn.key.weight", d, d, true);
    p.add(pre + "attn.key.bias", 1, d, false);
    p.add(pre + "attn.value.weight", d, d, true);
    p.add(pre + "attn.value.bias", 1, d, false);
    p.add(pre + "attn.output.weight", d, d, true);
    p.add(pre + "attn.output.bias", 1, d, false);
    p.add(pre + "ffn_norm.scale", 1, d, false);
    p.add(pre + "ffn_norm.shift", 1, d, false);
    p.add(pre + "ffn.in.weight", d, f, true);
    p.add(pre + "ffn.in.bias", 1, f, false);
    p.add(pre + "ffn.out.weight", f, d, true);
    p.add(pre + "ffn.out.bias", 1, d, false);
  }
  p.add("final_norm.scale", 1, d, false);
  p.add("final_norm.shift", 1, d, false);
  p.add("mlm.bias", 1, c.vocab_size, false);
  p.add("classifier.weight", d, c.n_labels, true);
  p.add("classifier.bias", 1, c.n_labels, false);
  return p;
}

// Weights ~ N(0, init_std^2); layer-norm scale 1, shift 0; biases 0; the PAD
// embedding row is zero.
template <typename S = double>
ParameterStore<S> init_model(const ModelConfig& config) {
  config.validate();
  auto p = declare_parameters<S>(config);
  Rng rng(derive_seed(config.seed, {0x1417}));
  for (auto& t : p) {
    const bool is_scale = t.name.ends_with(".scale");
    const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".shift");
    for (auto& v : t.value) {
      if (is_scale) {
        v = S(1);
      } else if (is_bias) {
        v = S(0);
      } else {
        v = static_cast<S>(config.init_std * rng.normal());
      }
    }
  }
  auto& tok = p[ParamLayout::token_embedding()];
  std::fill_n(tok.value.begin() + special::kPad * config.hidden_dim, config.hidden_dim, S(0));
  return p;
}

// Re-initializes the classification head for a different label count, keeping
// every encoder weight.
template <typename S>
void resize_label_head(ParameterStore<S>& params, ModelConfig& config, std::size_t n_labels, std::uint64_t seed) {
  ModelConfig next = config;
  next.n_labels = n_labels;
  next.validate();
  auto fresh = declare_parameters<S>(next);
  const ParamLayout layout{config.n_layers};
  for (std::size_t i = 0; i < layout.classifier_weight(); ++i) fresh[i].value = params[i].value;
  Rng rng(derive_seed(seed, {0xC1A55}));
  for (auto& v : fresh[layout.classifier_weight()].value) v = static_cast<S>(next.init_std * rng.normal());
  params = std::move(fresh);
  config = next;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// attention[layer][head] is a row-major [seq x seq] matrix of post-softmax
// probabilities (before dropout). Rows are query positions.
struct AttentionSummary {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<double> weights;  // [layer][head][query][key]

  double at(std::size_t layer, std::size_t head, std::size_t q, std::size_t k) const {
    return weights[((layer * n_heads + head) * seq_len + q) * seq_len + k];
  }
  double& at(std::size_t layer, std::size_t head, std::size_t q, std::size_t k) {
    return weights[((layer * n_heads + head) * seq_len + q) * seq_len + k];
  }
  bool is_pad(std::size_t pos) const { return ids[pos] == special::kPad; }
  bool is_content(std::size_t pos) const { return !is_special(ids[pos]); }
};

template <typename S>
struct ForwardOutput {
  std::size_t seq_len = 0;
  std::vector<S> hidden;  // [seq x hidden_dim], after the final layer norm
  std::optional<AttentionSummary> attention;
  std::vector<S> pooled;  // hidden state at the BOS position
  std::vector<S> logits;
  std::vector<S> probabilities;
};

template <typename S>
struct LayerCache {
  std::vector<S> x_in;        // residual stream entering the layer
  std::vector<S> norm1_hat;   // normalized (pre-affine) values
  std::vector<S> norm1_rstd;
  std::vector<S> norm1_out;
  std::vector<S> q, k, v;
  std::vector<S> probs;       // [head][q][k] before dropout
  std::vector<S> drop_scale;  // same shape; empty when dropout inactive
  std::vector<S> context;
  std::vector<S> x_mid;       // after the attention residual
  std::vector<S> norm2_hat;
  std::vector<S> norm2_rstd;
  std::vector<S> norm2_out;
  std::vector<S> ffn_pre;
  std::vector<S> ffn_act;
};

template <typename S>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::size_t seq_len = 0;
  std::vector<LayerCache<S>> layers;
  std::vector<S> x_final;
  std::vector<S> final_hat;
  std::vector<S> final_rstd;
  std::vector<S> hidden;
  std::vector<S> logits;
};

namespace detail {

template <typename S>
void layer_norm_forward(std::span<const S> x, std::span<const S> scale, std::span<const S> shift, std::size_t rows,
                        std::size_t cols, S eps, std::vector<S>& hat, std::vector<S>& rstd, std::vector<S>& out) {
  hat.resize(rows * cols);
  rstd.resize(rows);
  out.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * cols;
    S mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<S>(cols);
    S var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<S>(cols);
    const S rs = S(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < cols; ++j) {
      const S h = (xr[j] - mean) * rs;
      hat[r * cols + j] = h;
      out[r * cols + j] = h * scale[j] + shift[j];
    }
  }
}

// Accumulates parameter gradients and adds the input gradient into dx.
template <typename S>
void layer_norm_backward(std::span<const S> dy, std::span<const S> hat, std::span<const S> rstd,
                         std::span<const S> scale, std::span<S> dscale, std::span<S> dshift, std::span<S> dx,
                         std::size_t rows, std::size_t cols) {
  std::vector<S> dhat(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    S mean_d = 0, mean_dh = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const S g = dy[r * cols + j];
      dscale[j] += g * hat[r * cols + j];
      dshift[j] += g;
      dhat[j] = g * scale[j];
      mean_d += dhat[j];
      mean_dh += dhat[j] * hat[r * cols + j];
    }
    mean_d /= static_cast<S>(cols);
    mean_dh /= static_cast<S>(cols);
    for (std::size_t j = 0; j < cols; ++j)
      dx[r * cols + j] += rstd[r] * (dhat[j] - mean_d - hat[r * cols + j] * mean_dh);
  }
}

template <typename S>
S activate(Activation a, S x) {
  return a == Activation::kGelu ? kernels::gelu_exact(x) : kernels::gelu_tanh(x);
}

template <typename S>
S activate_grad(Activation a, S x) {
  return a == Activation::kGelu ? kernels::gelu_exact_grad(x) : kernels::gelu_tanh_grad(x);
}

}  // namespace detail

inline void check_sequence(const ModelConfig& config, const TokenSequence& seq) {
  if (seq.ids.empty()) throw Error(ErrorKind::kInvalidArgument, "empty token sequence");
  if (seq.ids.size() > config.max_len)
    throw Error(ErrorKind::kTooLong, "sequence length " + std::to_string(seq.ids.size()) + " exceeds max_len " +
                                         std::to_string(config.max_len));
  for (TokenId id : seq.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
      throw Error(ErrorKind::kInvalidToken, "token id " + std::to_string(id) + " outside vocabulary");
  if (seq.ids[0] == special::kPad) throw Error(ErrorKind::kInvalidArgument, "sequence starts with PAD");
}

// Runs the pre-norm encoder over one sequence and fills `cache`. PAD keys are
// excluded from every softmax. Dropout is applied when `dropout_rng` is set.
template <typename S>
void forward_cached(const ParameterStore<S>& params, const ModelConfig& config, const TokenSequence& seq,
                    ForwardCache<S>& cache, Rng* dropout_rng) {
  check_sequence(config, seq);
  const ParamLayout L{config.n_layers};
  const std::size_t T = seq.ids.size(), d = config.hidden_dim, F = config.ffn_dim;
  const std::size_t H = config.n_heads, dh = config.head_dim();
  const S eps = static_cast<S>(config.layer_norm_eps);
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const double p_drop = dropout_rng ? config.attention_dropout : 0.0;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p_drop));

  cache.ids = seq.ids;
  cache.seq_len = T;
  cache.layers.resize(config.n_layers);

  std::vector<S> x(T * d);
  {
    const auto& tok = params[ParamLayout::token_embedding()].value;
    const auto& pos = params[ParamLayout::position_embedding()].value;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j)
        x[t * d + j] = tok[static_cast<std::size_t>(seq.ids[t]) * d + j] + pos[t * d + j];
  }
  std::vector<bool> key_masked(T);
  for (std::size_t t = 0; t < T; ++t) key_masked[t] = seq.ids[t] == special::kPad;

  std::vector<S> attn_out(T * d), ffn_out(T * d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    auto& c = cache.layers[l];
    auto P = [&](ParamLayout::Layer w) -> std::span<const S> { return params[L.layer(l, w)].value; };
    c.x_in = x;

    detail::layer_norm_forward<S>(c.x_in, P(ParamLayout::kNorm1Scale), P(ParamLayout::kNorm1Shift), T, d, eps,
                                  c.norm1_hat, c.norm1_rstd, c.norm1_out);
    c.q.assign(T * d, 0);
    c.k.assign(T * d, 0);
    c.v.assign(T * d, 0);
    kernels::matmul<S>(c.norm1_out, P(ParamLayout::kWq), c.q, T, d, d);
    kernels::add_row_bias<S>(c.q, P(ParamLayout::kBq), T, d);
    kernels::matmul<S>(c.norm1_out, P(ParamLayout::kWk), c.k, T, d, d);
    kernels::add_row_bias<S>(c.k, P(ParamLayout::kBk), T, d);
    kernels::matmul<S>(c.norm1_out, P(ParamLayout::kWv), c.v, T, d, d);
    kernels::add_row_bias<S>(c.v, P(ParamLayout::kBv), T, d);

    c.probs.assign(H * T * T, 0);
    c.drop_scale.clear();
    if (p_drop > 0.0) c.drop_scale.assign(H * T * T, 0);
    c.context.assign(T * d, 0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t qi = 0; qi < T; ++qi) {
        S* prow = c.probs.data() + (h * T + qi) * T;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t ki = 0; ki < T; ++ki) {
          if (key_masked[ki]) continue;
          S acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += c.q[qi * d + h * dh + e] * c.k[ki * d + h * dh + e];
          prow[ki] = acc * scale;
          mx = std::max(mx, prow[ki]);
        }
        S sum = 0;
        for (std::size_t ki = 0; ki < T; ++ki) {
          if (key_masked[ki]) {
            prow[ki] = 0;
            continue;
          }
          prow[ki] = std::exp(prow[ki] - mx);
          sum += prow[ki];
        }
        for (std::size_t ki = 0; ki < T; ++ki) prow[ki] /= sum;

        S* ctx = c.context.data() + qi * d + h * dh;
        for (std::size_t ki = 0; ki < T; ++ki) {
          S w = prow[ki];
          if (p_drop > 0.0) {
            const S m = dropout_rng->uniform() >= p_drop ? keep_scale : S(0);
            c.drop_scale[(h * T + qi) * T + ki] = m;
            w *= m;
          }
          if (w == S(0)) continue;
          const S* vk = c.v.data() + ki * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) ctx[e] += w * vk[e];
        }
      }
    }
    kernels::matmul<S>(c.context, P(ParamLayout::kWo), attn_out, T, d, d);
    kernels::add_row_bias<S>(attn_out, P(ParamLayout::kBo), T, d);
    c.x_mid.resize(T * d);
    for (std::size_t i = 0; i < T * d; ++i) c.x_mid[i] = c.x_in[i] + attn_out[i];

    detail::layer_norm_forward<S>(c.x_mid, P(ParamLayout::kNorm2Scale), P(ParamLayout::kNorm2Shift), T, d, eps,
                                  c.norm2_hat, c.norm2_rstd, c.norm2_out);
    c.ffn_pre.assign(T * F, 0);
    kernels::matmul<S>(c.norm2_out, P(ParamLayout::kW1), c.ffn_pre, T, d, F);
    kernels::add_row_bias<S>(c.ffn_pre, P(ParamLayout::kB1), T, F);
    c.ffn_act.resize(T * F);
    for (std::size_t i = 0; i < T * F; ++i) c.ffn_act[i] = detail::activate(config.activation, c.ffn_pre[i]);
    kernels::matmul<S>(c.ffn_act, P(ParamLayout::kW2), ffn_out, T, F, d);
    kernels::add_row_bias<S>(ffn_out, P(ParamLayout::kB2), T, d);
    for (std::size_t i = 0; i < T * d; ++i) x[i] = c.x_mid[i] + ffn_out[i];
  }
  cache.x_final = x;
  detail::layer_norm_forward<S>(cache.x_final, params[L.final_norm_scale()].value, params[L.final_norm_shift()].value,
                                T, d, eps, cache.final_hat, cache.final_rstd, cache.hidden);

  const std::size_t K = config.n_labels;
  cache.logits.assign(K, 0);
  kernels::matmul<S>(std::span<const S>(cache.hidden.data(), d), params[L.classifier_weight()].value, cache.logits, 1,
                     d, K);
  kernels::add_row_bias<S>(cache.logits, params[L.classifier_bias()].value, 1, K);
}

template <typename S>
AttentionSummary summarize_attention(const ForwardCache<S>& cache, const ModelConfig& config) {
  AttentionSummary a;
  a.n_layers = config.n_layers;
  a.n_heads = config.n_heads;
  a.seq_len = cache.seq_len;
  a.ids = cache.ids;
  a.weights.reserve(a.n_layers * a.n_heads * a.seq_len * a.seq_len);
  for (const auto& layer : cache.layers)
    for (S p : layer.probs) a.weights.push_back(static_cast<double>(p));
  return a;
}

template <typename S>
ForwardOutput<S> make_output(const ForwardCache<S>& cache, const ModelConfig& config, bool capture_attention) {
  ForwardOutput<S> out;
  out.seq_len = cache.seq_len;
  out.hidden = cache.hidden;
  out.pooled.assign(cache.hidden.begin(), cache.hidden.begin() + static_cast<std::ptrdiff_t>(config.hidden_dim));
  out.logits = cache.logits;
  out.probabilities.resize(out.logits.size());
  for (std::size_t j = 0; j < out.logits.size(); ++j) out.probabilities[j] = kernels::sigmoid(out.logits[j]);
  if (capture_attention) out.attention = summarize_attention(cache, config);
  return out;
}

// Batched inference. Items are independent; `dropout_rng` enables attention
// dropout (training mode).
template <typename S>
std::vector<ForwardOutput<S>> forward(const ParameterStore<S>& params, const ModelConfig& config,
                                      const std::vector<TokenSequence>& batch, bool capture_attention = false,
                                      Rng* dropout_rng = nullptr) {
  std::vector<ForwardOutput<S>> outs;
  outs.reserve(batch.size());
  ForwardCache<S> cache;
  for (const auto& seq : batch) {
    forward_cached(params, config, seq, cache, dropout_rng);
    outs.push_back(make_output(cache, config, capture_attention));
  }
  return outs;
}

// Vocabulary logits at the given positions: hidden . token_embedding^T + bias.
// Returns a row-major [positions x vocab] matrix.
template <typename S>
std::vector<S> mlm_logits(const ParameterStore<S>& params, const ModelConfig& config, std::span<const S> hidden,
                          std::span<const std::size_t> positions) {
  const std::size_t d = config.hidden_dim, V = config.vocab_size;
  const std::size_t T = hidden.size() / d;
  const ParamLayout L{config.n_layers};
  const auto& emb = params[ParamLayout::token_embedding()].value;
  const auto& bias = params[L.mlm_bias()].value;
  std::vector<S> out(positions.size() * V);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= T) throw Error(ErrorKind::kInvalidArgument, "masked position out of range");
    kernels::matmul_nt<S>(hidden.subspan(positions[i] * d, d), emb, std::span<S>(out.data() + i * V, V), 1, d, V);
    for (std::size_t v = 0; v < V; ++v) out[i * V + v] += bias[v];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses and the analytic backward pass
// ---------------------------------------------------------------------------

enum class Objective { kMlm, kMultilabel };

struct MaskTarget {
  std::size_t position = 0;
  TokenId original = 0;
  friend bool operator==(const MaskTarget&, const MaskTarget&) = default;
};

struct TrainingExample {
  TokenSequence input;              // possibly masked
  std::vector<MaskTarget> targets;  // MLM objective
  std::vector<std::uint8_t> labels; // multilabel objective
};

namespace detail {

template <typename S>
void backward(const ParameterStore<S>& params, ParameterStore<S>& grads_into, const ModelConfig& config,
              const ForwardCache<S>& cache, std::vector<S>& dhidden) {
  const ParamLayout L{config.n_layers};
  const std::size_t T = cache.seq_len, d = config.hidden_dim, F = config.ffn_dim;
  const std::size_t H = config.n_heads, dh = config.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  auto G = [&](std::size_t i) -> std::span<S> { return grads_into[i].grad; };
  auto V = [&](std::size_t i) -> std::span<const S> { return params[i].value; };

  std::vector<S> dx(T * d, 0);
  layer_norm_backward<S>(dhidden, cache.final_hat, cache.final_rstd, V(L.final_norm_scale()), G(L.final_norm_scale()),
                         G(L.final_norm_shift()), dx, T, d);

  std::vector<S> dffn_act(T * F), dffn_pre(T * F), dnorm(T * d), dctx(T * d), dq(T * d), dk(T * d), dv(T * d);
  std::vector<S> dprob(T);
  for (std::size_t li = config.n_layers; li-- > 0;) {
    const auto& c = cache.layers[li];
    auto idx = [&](ParamLayout::Layer w) { return L.layer(li, w); };

    // Feed-forward block: x = x_mid + W2 act(W1 norm2(x_mid) + b1) + b2.
    kernels::accumulate_column_sums<S>(dx, G(idx(ParamLayout::kB2)), T, d);
    kernels::matmul_tn<S>(c.ffn_act, dx, G(idx(ParamLayout::kW2)), F, T, d);
    kernels::matmul_nt<S>(dx, V(idx(ParamLayout::kW2)), dffn_act, T, d, F);
    for (std::size_t i = 0; i < T * F; ++i)
      dffn_pre[i] = dffn_act[i] * activate_grad(config.activation, c.ffn_pre[i]);
    kernels::accumulate_column_sums<S>(dffn_pre, G(idx(ParamLayout::kB1)), T, F);
    kernels::matmul_tn<S>(c.norm2_out, dffn_pre, G(idx(ParamLayout::kW1)), d, T, F);
    kernels::matmul_nt<S>(dffn_pre, V(idx(ParamLayout::kW1)), dnorm, T, F, d);
    // dx currently holds d(loss)/d(x_out); the residual passes it to x_mid.
    layer_norm_backward<S>(dnorm, c.norm2_hat, c.norm2_rstd, V(idx(ParamLayout::kNorm2Scale)),
                           G(idx(ParamLayout::kNorm2Scale)), G(idx(ParamLayout::kNorm2Shift)), dx, T, d);

    // Attention block: x_mid = x_in + Wo concat_h(P_h V_h) + bo.
    kernels::accumulate_column_sums<S>(dx, G(idx(ParamLayout::kBo)), T, d);
    kernels::matmul_tn<S>(c.context, dx, G(idx(ParamLayout::kWo)), d, T, d);
    kernels::matmul_nt<S>(dx, V(idx(ParamLayout::kWo)), dctx, T, d, d);
    std::fill(dq.begin(), dq.end(), S(0));
    std::fill(dk.begin(), dk.end(), S(0));
    std::fill(dv.begin(), dv.end(), S(0));
    const bool dropped = !c.drop_scale.empty();
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t qi = 0; qi < T; ++qi) {
        const S* prow = c.probs.data() + (h * T + qi) * T;
        const S* drow = dropped ? c.drop_scale.data() + (h * T + qi) * T : nullptr;
        const S* gq = dctx.data() + qi * d + h * dh;
        S dot = 0;
        for (std::size_t ki = 0; ki < T; ++ki) {
          if (prow[ki] == S(0)) {
            dprob[ki] = 0;
            continue;
          }
          const S* vk = c.v.data() + ki * d + h * dh;
          S g = 0;
          for (std::size_t e = 0; e < dh; ++e) g += gq[e] * vk[e];
          const S m = drow ? drow[ki] : S(1);
          const S w = prow[ki] * m;
          if (w != S(0)) {
            S* dvk = dv.data() + ki * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) dvk[e] += w * gq[e];
          }
          dprob[ki] = g * m;
          dot += dprob[ki] * prow[ki];
        }
        for (std::size_t ki = 0; ki < T; ++ki) {
          if (prow[ki] == S(0)) continue;
          const S ds = prow[ki] * (dprob[ki] - dot) * scale;
          const S* kk = c.k.data() + ki * d + h * dh;
          const S* qq = c.q.data() + qi * d + h * dh;
          S* dqq = dq.data() + qi * d + h * dh;
          S* dkk = dk.data() + ki * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) {
            dqq[e] += ds * kk[e];
            dkk[e] += ds * qq[e];
          }
        }
      }
    }
    std::fill(dnorm.begin(), dnorm.end(), S(0));
    const std::pair<const std::vector<S>*, std::pair<ParamLayout::Layer, ParamLayout::Layer>> projections[] = {
        {&dq, {ParamLayout::kWq, ParamLayout::kBq}},
        {&dk, {ParamLayout::kWk, ParamLayout::kBk}},
        {&dv, {ParamLayout::kWv, ParamLayout::kBv}}};
    for (const auto& [dproj, wb] : projections) {
      kernels::accumulate_column_sums<S>(*dproj, G(idx(wb.second)), T, d);
      kernels::matmul_tn<S>(c.norm1_out, *dproj, G(idx(wb.first)), d, T, d);
      kernels::matmul_nt<S>(*dproj, V(idx(wb.first)), dnorm, T, d, d, true);
    }
    layer_norm_backward<S>(dnorm, c.norm1_hat, c.norm1_rstd, V(idx(ParamLayout::kNorm1Scale)),
                           G(idx(ParamLayout::kNorm1Scale)), G(idx(ParamLayout::kNorm1Shift)), dx, T, d);
  }

  auto& dtok = grads_into[ParamLayout::token_embedding()].grad;
  auto& dpos = grads_into[ParamLayout::position_embedding()].grad;
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t row = static_cast<std::size_t>(cache.ids[t]);
    for (std::size_t j = 0; j < d; ++j) {
      dtok[row * d + j] += dx[t * d + j];
      dpos[t * d + j] += dx[t * d + j];
    }
  }
}

// Loss contribution of one example (already divided by the batch
// normalizer) and, when `grads` is set, its gradient wrt the final hidden
// states plus head parameters.
template <typename S>
S head_loss(const ParameterStore<S>& params, ParameterStore<S>* grads, const ModelConfig& config,
            const ForwardCache<S>& cache, const TrainingExample& ex, Objective objective, S normalizer,
            std::vector<S>* dhidden) {
  const ParamLayout L{config.n_layers};
  const std::size_t d = config.hidden_dim;
  S loss = 0;
  if (objective == Objective::kMultilabel) {
    const std::size_t K = config.n_labels;
    if (ex.labels.size() != K)
      throw Error(ErrorKind::kLabelMismatch, "label vector has " + std::to_string(ex.labels.size()) +
                                                 " entries, model expects " + std::to_string(K));
    std::vector<S> dlogits(K);
    for (std::size_t j = 0; j < K; ++j) {
      const S z = cache.logits[j], y = static_cast<S>(ex.labels[j]);
      loss += kernels::bce_with_logit(z, y) / normalizer;
      dlogits[j] = (kernels::sigmoid(z) - y) / normalizer;
    }
    if (grads) {
      kernels::accumulate_column_sums<S>(dlogits, (*grads)[L.classifier_bias()].grad, 1, K);
      kernels::matmul_tn<S>(std::span<const S>(cache.hidden.data(), d), dlogits, (*grads)[L.classifier_weight()].grad,
                            d, 1, K);
      kernels::matmul_nt<S>(dlogits, params[L.classifier_weight()].value, std::span<S>(dhidden->data(), d), 1, K, d,
                            true);
    }
    return loss;
  }

  const std::size_t Vn = config.vocab_size;
  std::vector<std::size_t> positions;
  for (const auto& t : ex.targets) positions.push_back(t.position);
  auto logits = mlm_logits<S>(params, config, cache.hidden, positions);
  std::vector<S> dlogits(logits.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    S* row = logits.data() + i * Vn;
    S* drow = dlogits.data() + i * Vn;
    const auto target = static_cast<std::size_t>(ex.targets[i].original);
    if (config.mlm_loss == MlmLoss::kSoftmaxCrossEntropy) {
      const S mx = *std::max_element(row, row + Vn);
      S sum = 0;
      for (std::size_t v = 0; v < Vn; ++v) sum += std::exp(row[v] - mx);
      const S lse = mx + std::log(sum);
      loss += (lse - row[target]) / normalizer;
      for (std::size_t v = 0; v < Vn; ++v) drow[v] = std::exp(row[v] - lse) / normalizer;
      drow[target] -= S(1) / normalizer;
    } else {
      for (std::size_t v = 0; v < Vn; ++v) {
        const S y = v == target ? S(1) : S(0);
        loss += kernels::bce_with_logit(row[v], y) / normalizer;
        drow[v] = (kernels::sigmoid(row[v]) - y) / normalizer;
      }
    }
  }
  if (grads) {
    const auto& emb = params[ParamLayout::token_embedding()].value;
    auto& demb = (*grads)[ParamLayout::token_embedding()].grad;
    auto& dbias = (*grads)[L.mlm_bias()].grad;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const S* drow = dlogits.data() + i * Vn;
      const S* h = cache.hidden.data() + positions[i] * d;
      S* dh = dhidden->data() + positions[i] * d;
      for (std::size_t v = 0; v < Vn; ++v) {
        const S g = drow[v];
        dbias[v] += g;
        const S* ev = emb.data() + v * d;
        S* dev = demb.data() + v * d;
        for (std::size_t j = 0; j < d; ++j) {
          dev[j] += g * h[j];
          dh[j] += g * ev[j];
        }
      }
    }
  }
  return loss;
}

template <typename S>
S batch_normalizer(const ModelConfig& config, const std::vector<TrainingExample>& batch, Objective objective) {
  if (objective == Objective::kMultilabel) return static_cast<S>(batch.size() * config.n_labels);
  std::size_t masked = 0;
  for (const auto& ex : batch) masked += ex.targets.size();
  if (masked == 0) throw Error(ErrorKind::kInvalidArgument, "MLM batch has no masked positions");
  const std::size_t per = config.mlm_loss == MlmLoss::kBinary ? config.vocab_size : 1;
  return static_cast<S>(masked * per);
}

}  // namespace detail

// Mean loss over the batch without touching gradients.
template <typename S>
S compute_loss(const ParameterStore<S>& params, const ModelConfig& config, const std::vector<TrainingExample>& batch,
               Objective objective) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidArgument, "empty batch");
  const S norm = detail::batch_normalizer<S>(config, batch, objective);
  ForwardCache<S> cache;
  S loss = 0;
  for (const auto& ex : batch) {
    forward_cached(params, config, ex.input, cache, nullptr);
    loss += detail::head_loss<S>(params, nullptr, config, cache, ex, objective, norm, nullptr);
  }
  return loss;
}

// Mean loss over the batch; every gradient slot is overwritten. Throws
// kNumeric naming the first parameter with a non-finite gradient.
template <typename S>
S loss_and_grad(ParameterStore<S>& params, const ModelConfig& config, const std::vector<TrainingExample>& batch,
                Objective objective, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidArgument, "empty batch");
  params.zero_grad();
  const S norm = detail::batch_normalizer<S>(config, batch, objective);
  ForwardCache<S> cache;
  std::vector<S> dhidden;
  S loss = 0;
  for (const auto& ex : batch) {
    forward_cached(params, config, ex.input, cache, dropout_rng);
    dhidden.assign(cache.seq_len * config.hidden_dim, S(0));
    loss += detail::head_loss<S>(params, &params, config, cache, ex, objective, norm, &dhidden);
    detail::backward(params, params, config, cache, dhidden);
  }
  if (!std::isfinite(static_cast<double>(loss))) throw Error(ErrorKind::kNumeric, "non-finite loss");
  for (const auto& t : params)
    for (S g : t.grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw Error(ErrorKind::kNumeric, "non-finite gradient in " + t.name);
  return loss;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kModelMagic{"ONTOXMDL", 8};
inline constexpr std::string_view kOptimizerMagic{"ONTOXOPT", 8};
inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void write_config(BinaryWriter& w, const ModelConfig& c) {
  w.u64(c.n_layers);
  w.u64(c.n_heads);
  w.u64(c.hidden_dim);
  w.u64(c.ffn_dim);
  w.u64(c.vocab_size);
  w.u64(c.max_len);
  w.u64(c.n_labels);
  w.f64(c.attention_dropout);
  w.u32(static_cast<std::uint32_t>(c.activation));
  w.u32(static_cast<std::uint32_t>(c.mlm_loss));
  w.f64(c.layer_norm_eps);
  w.f64(c.init_std);
  w.u64(c.seed);
}

inline ModelConfig read_config(BinaryReader& r) {
  ModelConfig c;
  c.n_layers = r.u64();
  c.n_heads = r.u64();
  c.hidden_dim = r.u64();
  c.ffn_dim = r.u64();
  c.vocab_size = r.u64();
  c.max_len = r.u64();
  c.n_labels = r.u64();
  c.attention_dropout = r.f64();
  const auto act = r.u32();
  const auto mlm = r.u32();
  if (act > 1 || mlm > 1) throw Error(ErrorKind::kVersion, "unknown activation or MLM loss code");
  c.activation = static_cast<Activation>(act);
  c.mlm_loss = static_cast<MlmLoss>(mlm);
  c.layer_norm_eps = r.f64();
  c.init_std = r.f64();
  c.seed = r.u64();
  c.validate();
  return c;
}

template <typename S>
void write_parameters(BinaryWriter& w, const ModelConfig& config, const ParameterStore<S>& params) {
  w.bytes(kModelMagic);
  w.u32(kModelFormatVersion);
  write_config(w, config);
  w.u64(params.size());
  for (const auto& t : params) {
    w.str(t.name);
    w.u64(t.rows);
    w.u64(t.cols);
    for (S v : t.value) w.f64(static_cast<double>(v));
  }
}

template <typename S>
std::pair<ModelConfig, ParameterStore<S>> read_parameters(BinaryReader& r) {
  if (r.bytes(kModelMagic.size()) != kModelMagic) throw Error(ErrorKind::kVersion, "not a model file");
  const auto version = r.u32();
  if (version != kModelFormatVersion)
    throw Error(ErrorKind::kVersion, "unsupported model format version " + std::to_string(version));
  ModelConfig config = read_config(r);
  auto params = declare_parameters<S>(config);
  const auto count = r.u64();
  if (count != params.size()) throw Error(ErrorKind::kVersion, "parameter count does not match configuration");
  for (auto& t : params) {
    const auto name = r.str();
    const auto rows = r.u64(), cols = r.u64();
    if (name != t.name || rows != t.rows || cols != t.cols)
      throw Error(ErrorKind::kVersion, "unexpected array " + name + " (expected " + t.name + ")");
    for (auto& v : t.value) v = static_cast<S>(r.f64());
  }
  return {config, std::move(params)};
}

template <typename S>
std::string serialize_model(const ModelConfig& config, const ParameterStore<S>& params) {
  BinaryWriter w;
  write_parameters(w, config, params);
  return w.data();
}

template <typename S = double>
std::pair<ModelConfig, ParameterStore<S>> deserialize_model(std::string_view bytes) {
  BinaryReader r(bytes);
  return read_parameters<S>(r);
}

}  // namespace ontoext
