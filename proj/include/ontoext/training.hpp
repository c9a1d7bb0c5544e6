#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ontoext/bpe.hpp"
#include "ontoext/error.hpp"
#include "ontoext/metrics.hpp"
#include "ontoext/model.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

// ---------------------------------------------------------------------------
// Dynamic masking
// ---------------------------------------------------------------------------

struct MaskingPolicy {
  double mask_probability = 0.15;
  // What happens to a selected token: replaced by MASK, replaced by a random
  // content token, or left unchanged (but still predicted).
  double mask_fraction = 0.8;
  double random_fraction = 0.1;
  double keep_fraction = 0.1;
  std::uint64_t seed = 0;
  bool force_minimum = true;  // at least one masked token per sequence

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(mask_probability) || !prob(mask_fraction) || !prob(random_fraction) || !prob(keep_fraction))
      throw Error(ErrorKind::kInvalidArgument, "masking probabilities must lie in [0, 1]");
    if (std::abs(mask_fraction + random_fraction + keep_fraction - 1.0) > 1e-9)
      throw Error(ErrorKind::kInvalidArgument, "mask/random/keep fractions must sum to 1");
  }
};

// Masks one sequence. The pattern is a pure function of (policy.seed, epoch,
// sequence_key), so every epoch sees a fresh mask while reruns repeat it.
inline TrainingExample mask_sequence(const TokenSequence& seq, const MaskingPolicy& policy, std::uint64_t epoch,
                                     std::uint64_t sequence_key, std::size_t vocab_size) {
  Rng rng(derive_seed(policy.seed, {0x3a5c, epoch, sequence_key}));
  TrainingExample ex;
  ex.input = seq;
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    if (!is_special(seq.ids[i])) maskable.push_back(i);

  std::vector<std::size_t> chosen;
  for (auto pos : maskable)
    if (rng.uniform() < policy.mask_probability) chosen.push_back(pos);
  if (chosen.empty() && policy.force_minimum && !maskable.empty())
    chosen.push_back(maskable[rng.below(maskable.size())]);

  const std::size_t n_content = vocab_size > static_cast<std::size_t>(special::kCount)
                                    ? vocab_size - static_cast<std::size_t>(special::kCount)
                                    : 0;
  for (auto pos : chosen) {
    ex.targets.push_back({pos, seq.ids[pos]});
    const double u = rng.uniform();
    if (u < policy.mask_fraction) {
      ex.input.ids[pos] = special::kMask;
    } else if (u < policy.mask_fraction + policy.random_fraction && n_content > 0) {
      ex.input.ids[pos] = static_cast<TokenId>(special::kCount + static_cast<TokenId>(rng.below(n_content)));
    }
  }
  return ex;
}

// Masks a batch; item i uses sequence key first_key + i.
inline std::vector<TrainingExample> apply_dynamic_masking(const std::vector<TokenSequence>& batch,
                                                          const MaskingPolicy& policy, std::uint64_t epoch,
                                                          std::size_t vocab_size, std::uint64_t first_key = 0) {
  policy.validate();
  std::vector<TrainingExample> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    out.push_back(mask_sequence(batch[i], policy, epoch, first_key + i, vocab_size));
  return out;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename S>
struct OptimizerState {
  AdamConfig hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<S>> first_moment;
  std::vector<std::vector<S>> second_moment;

  OptimizerState() = default;
  OptimizerState(const ParameterStore<S>& params, AdamConfig h) : hyper(h) {
    for (const auto& t : params) {
      first_moment.emplace_back(t.size(), S(0));
      second_moment.emplace_back(t.size(), S(0));
    }
  }
};

// One AdamW update. Decay (p -= lr * wd * p) applies only to tensors flagged
// for it; layer-norm parameters and biases are exempt.
template <typename S>
void adam_step(ParameterStore<S>& params, OptimizerState<S>& state) {
  if (state.first_moment.size() != params.size())
    throw Error(ErrorKind::kInvalidArgument, "optimizer state does not match parameters");
  for (const auto& t : params)
    for (S g : t.grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw Error(ErrorKind::kNumeric, "non-finite gradient in " + t.name);

  const auto& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const S bc1 = static_cast<S>(1.0 - std::pow(h.beta1, t));
  const S bc2 = static_cast<S>(1.0 - std::pow(h.beta2, t));
  const S lr = static_cast<S>(h.learning_rate);
  const S b1 = static_cast<S>(h.beta1), b2 = static_cast<S>(h.beta2), eps = static_cast<S>(h.epsilon);
  const S decay = static_cast<S>(h.learning_rate * h.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      S w = p.value[j];
      if (p.decay && decay != S(0)) w -= decay * w;
      const S g = p.grad[j];
      m[j] = b1 * m[j] + (S(1) - b1) * g;
      v[j] = b2 * v[j] + (S(1) - b2) * g * g;
      const S m_hat = m[j] / bc1;
      const S v_hat = v[j] / bc2;
      p.value[j] = w - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: model format followed by optimizer state.
// ---------------------------------------------------------------------------

template <typename S>
std::string serialize_checkpoint(const ModelConfig& config, const ParameterStore<S>& params,
                                 const OptimizerState<S>* state) {
  BinaryWriter w;
  write_parameters(w, config, params);
  if (state) {
    w.bytes(kOptimizerMagic);
    w.u64(state->step);
    w.f64(state->hyper.learning_rate);
    w.f64(state->hyper.beta1);
    w.f64(state->hyper.beta2);
    w.f64(state->hyper.epsilon);
    w.f64(state->hyper.weight_decay);
    w.u64(state->first_moment.size());
    for (std::size_t i = 0; i < state->first_moment.size(); ++i) {
      for (S v : state->first_moment[i]) w.f64(static_cast<double>(v));
      for (S v : state->second_moment[i]) w.f64(static_cast<double>(v));
    }
  }
  return w.data();
}

template <typename S>
struct Checkpoint {
  ModelConfig config;
  ParameterStore<S> params;
  std::optional<OptimizerState<S>> optimizer;
};

template <typename S = double>
Checkpoint<S> deserialize_checkpoint(std::string_view bytes) {
  BinaryReader r(bytes);
  Checkpoint<S> ck;
  auto [config, params] = read_parameters<S>(r);
  ck.config = config;
  ck.params = std::move(params);
  if (!r.at_end()) {
    if (r.bytes(kOptimizerMagic.size()) != kOptimizerMagic) throw Error(ErrorKind::kVersion, "trailing data in model file");
    OptimizerState<S> st;
    st.step = r.u64();
    st.hyper.learning_rate = r.f64();
    st.hyper.beta1 = r.f64();
    st.hyper.beta2 = r.f64();
    st.hyper.epsilon = r.f64();
    st.hyper.weight_decay = r.f64();
    const auto n = r.u64();
    if (n != ck.params.size()) throw Error(ErrorKind::kVersion, "optimizer state does not match parameters");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = ck.params[i].size();
      std::vector<S> m(len), v(len);
      for (auto& x : m) x = static_cast<S>(r.f64());
      for (auto& x : v) x = static_cast<S>(r.f64());
      st.first_moment.push_back(std::move(m));
      st.second_moment.push_back(std::move(v));
    }
    if (!r.at_end()) throw Error(ErrorKind::kVersion, "trailing data after optimizer state");
    ck.optimizer = std::move(st);
  }
  return ck;
}

template <typename S = double>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<S>(read_file(path));
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParameterStore<S>& params,
                     const OptimizerState<S>* state = nullptr) {
  write_file_atomic(path, serialize_checkpoint(config, params, state));
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  std::filesystem::path checkpoint_path;
  std::filesystem::path best_path;
  // Recognized but unsupported knobs; any non-default value is rejected.
  std::string lr_schedule = "constant";
  bool early_stopping = false;
  double gradient_clip = 0.0;

  void validate() const {
    if (batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
    if (!(adam.learning_rate > 0.0)) throw Error(ErrorKind::kInvalidArgument, "learning rate must be positive");
    if (lr_schedule != "constant") throw Error(ErrorKind::kUnimplemented, "unimplemented: learning-rate schedule");
    if (early_stopping) throw Error(ErrorKind::kUnimplemented, "unimplemented: early stopping");
    if (gradient_clip != 0.0) throw Error(ErrorKind::kUnimplemented, "unimplemented: gradient clipping");
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::string phase;      // "pretrain" or "finetune"
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_f1_samples;
  double seconds = 0.0;
};

inline std::string epoch_log_csv_header() { return "epoch,phase,train_loss,val_loss,val_f1_samples,seconds\n"; }

inline std::string epoch_log_csv_row(const EpochLog& log) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return std::to_string(log.epoch) + "," + log.phase + "," + format_double(log.train_loss) + "," +
         opt(log.val_loss) + "," + opt(log.val_f1_samples) + "," + format_fixed(log.seconds, 3) + "\n";
}

// Appends rows, writing the header when the file is new.
inline void append_epoch_logs(const std::filesystem::path& path, const std::vector<EpochLog>& logs) {
  std::string content;
  if (std::filesystem::exists(path)) content = read_file(path);
  if (content.empty()) content = epoch_log_csv_header();
  for (const auto& l : logs) content += epoch_log_csv_row(l);
  write_file_atomic(path, content);
}

template <typename S>
struct TrainResult {
  std::vector<EpochLog> logs;
  ParameterStore<S> best;       // best validation epoch (or the final one without validation)
  std::size_t best_epoch = 0;   // 0 when no epoch ran
  OptimizerState<S> optimizer;
};

template <typename S>
using EpochHook = std::function<void(const EpochLog&, const ParameterStore<S>&)>;

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, const TrainConfig& cfg, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (cfg.shuffle) {
    Rng rng(derive_seed(cfg.seed, {0x5f1e, epoch}));
    rng.shuffle(order);
  }
  return order;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

// Probabilities for each sequence, row-major [n x n_labels].
template <typename S>
ScoreMatrix predict_scores(const ParameterStore<S>& params, const ModelConfig& config,
                           const std::vector<TokenSequence>& seqs) {
  ScoreMatrix out(seqs.size(), config.n_labels);
  ForwardCache<S> cache;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    forward_cached(params, config, seqs[i], cache, nullptr);
    for (std::size_t j = 0; j < config.n_labels; ++j)
      out(i, j) = static_cast<double>(kernels::sigmoid(cache.logits[j]));
  }
  return out;
}

// Masked-language-model pretraining. Validation uses a fixed mask (epoch 0 of
// a separate seed stream) and never touches the parameters.
template <typename S>
TrainResult<S> pretrain(ParameterStore<S>& params, const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                        const std::vector<TokenSequence>& validation, const TrainConfig& cfg,
                        const MaskingPolicy& masking, const EpochHook<S>& hook = {}) {
  cfg.validate();
  masking.validate();
  TrainResult<S> result;
  result.optimizer = OptimizerState<S>(params, cfg.adam);
  result.best = params;
  if (cfg.epochs == 0) return result;
  if (corpus.empty()) throw Error(ErrorKind::kInvalidArgument, "empty pretraining corpus");

  MaskingPolicy val_policy = masking;
  val_policy.seed = derive_seed(masking.seed, {0x7a11d});
  const auto val_examples = apply_dynamic_masking(validation, val_policy, 0, config.vocab_size);
  std::optional<double> best_val;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = detail::epoch_order(corpus.size(), cfg, epoch);
    Rng dropout(derive_seed(cfg.seed, {0xd80, epoch}));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::vector<TrainingExample> batch;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i)
        batch.push_back(mask_sequence(corpus[order[i]], masking, epoch, order[i], config.vocab_size));
      std::erase_if(batch, [](const TrainingExample& ex) { return ex.targets.empty(); });
      if (batch.empty()) continue;
      loss_sum += static_cast<double>(loss_and_grad(params, config, batch, Objective::kMlm, &dropout));
      adam_step(params, result.optimizer);
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.phase = "pretrain";
    log.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    bool has_val = false;
    for (const auto& ex : val_examples) has_val |= !ex.targets.empty();
    if (has_val) {
      std::vector<TrainingExample> usable;
      for (const auto& ex : val_examples)
        if (!ex.targets.empty()) usable.push_back(ex);
      log.val_loss = static_cast<double>(compute_loss(params, config, usable, Objective::kMlm));
    }
    log.seconds = detail::seconds_since(start);

    const bool improved = !log.val_loss || !best_val || *log.val_loss < *best_val;
    if (improved) {
      if (log.val_loss) best_val = log.val_loss;
      result.best = params;
      result.best_epoch = epoch;
      if (!cfg.best_path.empty()) save_checkpoint(cfg.best_path, config, params, &result.optimizer);
    }
    if (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0 && !cfg.checkpoint_path.empty())
      save_checkpoint(cfg.checkpoint_path, config, params, &result.optimizer);
    log_info("pretrain", "epoch " + std::to_string(epoch) + " train_loss " + format_fixed(log.train_loss, 5) +
                             (log.val_loss ? " val_loss " + format_fixed(*log.val_loss, 5) : std::string()));
    result.logs.push_back(log);
    if (hook) hook(log, params);
  }
  return result;
}

struct LabeledSequences {
  std::vector<TokenSequence> inputs;
  std::vector<std::vector<std::uint8_t>> labels;

  std::size_t size() const { return inputs.size(); }
};

inline double samples_f1(const ScoreMatrix& scores, const std::vector<std::vector<std::uint8_t>>& labels,
                         double threshold) {
  LabelMatrix truth(scores.rows, scores.cols, 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < scores.cols; ++j) truth(i, j) = labels[i][j];
  return prf(truth, binarize(scores, threshold), Averaging::kSamples).f1;
}

// Multi-label fine-tuning. The best epoch by validation samples-F1 is kept
// separately from the final parameters.
template <typename S>
TrainResult<S> finetune(ParameterStore<S>& params, const ModelConfig& config, const LabeledSequences& train,
                        const LabeledSequences& validation, const TrainConfig& cfg, double threshold = 0.5,
                        const EpochHook<S>& hook = {}) {
  cfg.validate();
  for (const auto* set : {&train, &validation})
    for (const auto& l : set->labels)
      if (l.size() != config.n_labels)
        throw Error(ErrorKind::kLabelMismatch, "label vector has " + std::to_string(l.size()) +
                                                   " entries, model expects " + std::to_string(config.n_labels));
  TrainResult<S> result;
  result.optimizer = OptimizerState<S>(params, cfg.adam);
  result.best = params;
  if (cfg.epochs == 0) return result;
  if (train.size() == 0) throw Error(ErrorKind::kInvalidArgument, "empty training split");

  std::vector<TrainingExample> val_examples;
  for (std::size_t i = 0; i < validation.size(); ++i)
    val_examples.push_back({validation.inputs[i], {}, validation.labels[i]});
  std::optional<double> best_f1;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = detail::epoch_order(train.size(), cfg, epoch);
    Rng dropout(derive_seed(cfg.seed, {0xd81, epoch}));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::vector<TrainingExample> batch;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i)
        batch.push_back({train.inputs[order[i]], {}, train.labels[order[i]]});
      loss_sum += static_cast<double>(loss_and_grad(params, config, batch, Objective::kMultilabel, &dropout));
      adam_step(params, result.optimizer);
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.phase = "finetune";
    log.train_loss = loss_sum / static_cast<double>(batches);
    if (!val_examples.empty()) {
      log.val_loss = static_cast<double>(compute_loss(params, config, val_examples, Objective::kMultilabel));
      log.val_f1_samples = samples_f1(predict_scores(params, config, validation.inputs), validation.labels, threshold);
    }
    log.seconds = detail::seconds_since(start);

    const bool improved = !log.val_f1_samples || !best_f1 || *log.val_f1_samples > *best_f1;
    if (improved) {
      if (log.val_f1_samples) best_f1 = log.val_f1_samples;
      result.best = params;
      result.best_epoch = epoch;
      if (!cfg.best_path.empty()) save_checkpoint(cfg.best_path, config, params, &result.optimizer);
    }
    if (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0 && !cfg.checkpoint_path.empty())
      save_checkpoint(cfg.checkpoint_path, config, params, &result.optimizer);
    log_info("finetune", "epoch " + std::to_string(epoch) + " train_loss " + format_fixed(log.train_loss, 5) +
                             (log.val_loss ? " val_loss " + format_fixed(*log.val_loss, 5) : std::string()) +
                             (log.val_f1_samples ? " val_f1 " + format_fixed(*log.val_f1_samples, 4) : std::string()));
    result.logs.push_back(log);
    if (hook) hook(log, params);
  }
  return result;
}

// Encodes labeled molecules, dropping (with a warning) any that exceed
// max_len: training on truncated structures would corrupt their labels.
template <typename Molecule>
LabeledSequences encode_labeled(const Tokenizer& tok, const std::vector<Molecule>& molecules, std::size_t max_len,
                                std::size_t* rejected = nullptr) {
  LabeledSequences out;
  std::size_t dropped = 0;
  for (const auto& m : molecules) {
    try {
      out.inputs.push_back(tok.encode(m.smiles, max_len));
      out.labels.push_back(m.labels);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kTooLong) throw;
      ++dropped;
    }
  }
  if (dropped) log_warn("dataset", "rejected " + std::to_string(dropped) + " over-long molecules");
  if (rejected) *rejected = dropped;
  return out;
}

inline std::vector<TokenSequence> encode_corpus(const Tokenizer& tok, const std::vector<std::string>& smiles,
                                                std::size_t max_len, std::size_t* rejected = nullptr) {
  std::vector<TokenSequence> out;
  std::size_t dropped = 0;
  for (const auto& s : smiles) {
    try {
      out.push_back(tok.encode(s, max_len));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kTooLong) throw;
      ++dropped;
    }
  }
  if (dropped) log_warn("dataset", "rejected " + std::to_string(dropped) + " over-long SMILES");
  if (rejected) *rejected = dropped;
  return out;
}

}  // namespace ontoext
