#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ontoext/dataset.hpp"
#include "ontoext/error.hpp"
#include "ontoext/extension.hpp"
#include "ontoext/model.hpp"
#include "ontoext/training.hpp"

namespace ontoext {

struct PhaseConfig {
  std::size_t epochs = 0;
  std::size_t batch_size = 4;
  AdamConfig adam;
  std::size_t checkpoint_every = 0;
};

// Everything a pipeline run needs. Defaults follow the reference
// hyperparameter table where it states a value.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  double threshold = 0.5;

  std::map<std::string, std::filesystem::path> paths;

  std::size_t n_labels = 500;
  std::size_t min_members = 20;
  std::array<double, 3> split_ratios = kReferenceSplitRatios;
  std::string smiles_key = OboOptions{}.smiles_key;

  std::size_t vocab_size = 1395;
  std::size_t min_frequency = 2;

  ModelConfig model;
  PhaseConfig pretrain{100, 4, {}, 0};
  PhaseConfig finetune{30, 4, {}, 0};
  MaskingPolicy masking;

  std::optional<std::size_t> explain_layer;
  bool explain_corpus = false;

  ExtensionConfig extension;
  std::size_t top_k = 3;

  std::uint64_t require_seed() const {
    if (!seed) throw Error(ErrorKind::kInvalidArgument, "a seed is required (--seed or [run] seed)");
    return *seed;
  }

  std::filesystem::path path(const std::string& key) const {
    auto it = paths.find(key);
    if (it == paths.end() || it->second.empty())
      throw Error(ErrorKind::kInvalidArgument, "missing path: " + key);
    return it->second;
  }
};

namespace detail {

template <typename T>
T parse_value(const std::string& section, const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof())
    throw Error(ErrorKind::kSyntax, "config [" + section + "] " + key + ": cannot parse '" + raw + "'");
  return v;
}

inline bool parse_bool(const std::string& section, const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1" || raw == "yes") return true;
  if (raw == "false" || raw == "0" || raw == "no") return false;
  throw Error(ErrorKind::kSyntax, "config [" + section + "] " + key + ": expected a boolean, got '" + raw + "'");
}

inline void apply_phase(PhaseConfig& p, const std::string& s, const std::string& k, const std::string& v) {
  if (k == "epochs") p.epochs = parse_value<std::size_t>(s, k, v);
  else if (k == "batch_size") p.batch_size = parse_value<std::size_t>(s, k, v);
  else if (k == "learning_rate") p.adam.learning_rate = parse_value<double>(s, k, v);
  else if (k == "weight_decay") p.adam.weight_decay = parse_value<double>(s, k, v);
  else if (k == "beta1") p.adam.beta1 = parse_value<double>(s, k, v);
  else if (k == "beta2") p.adam.beta2 = parse_value<double>(s, k, v);
  else if (k == "epsilon") p.adam.epsilon = parse_value<double>(s, k, v);
  else if (k == "checkpoint_every") p.checkpoint_every = parse_value<std::size_t>(s, k, v);
  else throw Error(ErrorKind::kSyntax, "config: unknown key [" + s + "] " + k);
}

}  // namespace detail

// Applies one "section.key = value" setting. Unknown keys are errors.
inline void apply_setting(RunConfig& c, const std::string& s, const std::string& k, const std::string& v) {
  using detail::parse_value;
  auto unknown = [&] { throw Error(ErrorKind::kSyntax, "config: unknown key [" + s + "] " + k); };
  if (s == "run") {
    if (k == "seed") c.seed = parse_value<std::uint64_t>(s, k, v);
    else if (k == "threshold") c.threshold = parse_value<double>(s, k, v);
    else unknown();
  } else if (s == "paths") {
    c.paths[k] = v;
  } else if (s == "dataset") {
    if (k == "labels") c.n_labels = parse_value<std::size_t>(s, k, v);
    else if (k == "min_members") c.min_members = parse_value<std::size_t>(s, k, v);
    else if (k == "train_ratio") c.split_ratios[0] = parse_value<double>(s, k, v);
    else if (k == "validation_ratio") c.split_ratios[1] = parse_value<double>(s, k, v);
    else if (k == "test_ratio") c.split_ratios[2] = parse_value<double>(s, k, v);
    else if (k == "smiles_key") c.smiles_key = v;
    else unknown();
  } else if (s == "tokenizer") {
    if (k == "vocab_size") c.vocab_size = parse_value<std::size_t>(s, k, v);
    else if (k == "min_frequency") c.min_frequency = parse_value<std::size_t>(s, k, v);
    else if (k == "max_len") c.model.max_len = parse_value<std::size_t>(s, k, v);
    else unknown();
  } else if (s == "model") {
    auto& m = c.model;
    if (k == "layers") m.n_layers = parse_value<std::size_t>(s, k, v);
    else if (k == "heads") m.n_heads = parse_value<std::size_t>(s, k, v);
    else if (k == "hidden") m.hidden_dim = parse_value<std::size_t>(s, k, v);
    else if (k == "ffn") m.ffn_dim = parse_value<std::size_t>(s, k, v);
    else if (k == "attention_dropout") m.attention_dropout = parse_value<double>(s, k, v);
    else if (k == "layer_norm_eps") m.layer_norm_eps = parse_value<double>(s, k, v);
    else if (k == "init_std") m.init_std = parse_value<double>(s, k, v);
    else if (k == "activation") {
      if (v == "gelu") m.activation = Activation::kGelu;
      else if (v == "gelu_tanh") m.activation = Activation::kGeluTanh;
      else throw Error(ErrorKind::kSyntax, "config [model] activation: expected gelu or gelu_tanh");
    } else if (k == "mlm_loss") {
      if (v == "softmax") m.mlm_loss = MlmLoss::kSoftmaxCrossEntropy;
      else if (v == "binary") m.mlm_loss = MlmLoss::kBinary;
      else throw Error(ErrorKind::kSyntax, "config [model] mlm_loss: expected softmax or binary");
    } else unknown();
  } else if (s == "pretrain") {
    if (k == "mask_probability") c.masking.mask_probability = parse_value<double>(s, k, v);
    else if (k == "mask_fraction") c.masking.mask_fraction = parse_value<double>(s, k, v);
    else if (k == "random_fraction") c.masking.random_fraction = parse_value<double>(s, k, v);
    else if (k == "keep_fraction") c.masking.keep_fraction = parse_value<double>(s, k, v);
    else if (k == "force_minimum") c.masking.force_minimum = detail::parse_bool(s, k, v);
    else detail::apply_phase(c.pretrain, s, k, v);
  } else if (s == "finetune") {
    detail::apply_phase(c.finetune, s, k, v);
  } else if (s == "explain") {
    if (k == "layer") {
      const auto l = parse_value<long long>(s, k, v);
      if (l < 0) c.explain_layer.reset();
      else c.explain_layer = static_cast<std::size_t>(l);
    } else if (k == "corpus") {
      c.explain_corpus = detail::parse_bool(s, k, v);
    } else unknown();
  } else if (s == "extension") {
    if (k == "id_prefix") c.extension.id_prefix = v;
    else if (k == "id_width") c.extension.id_width = parse_value<std::size_t>(s, k, v);
    else if (k == "top_k") c.top_k = parse_value<std::size_t>(s, k, v);
    else if (k == "curator_note") c.extension.curator_note = v;
    else unknown();
  } else {
    throw Error(ErrorKind::kSyntax, "config: unknown section [" + s + "]");
  }
}

inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(ErrorKind::kSyntax, e.line(), e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw Error(ErrorKind::kSyntax, "config: key '" + section + "' outside any section");
    for (const auto& [key, value] : body) apply_setting(base, section, key, value.data());
  }
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

// The defaults as a commented config file.
inline std::string default_config_text() {
  const RunConfig c;
  auto d = [](double v) { return format_double(v); };
  std::string t;
  t += "# seed is mandatory here or on the command line\n[run]\n# seed = 0\nthreshold = " + d(c.threshold) + "\n\n";
  t += "[paths]\n# ontology = chebi.obo\n# dataset = data\n# tokenizer = tokenizer.txt\n# model = model.bin\n\n";
  t += "[dataset]\nlabels = " + std::to_string(c.n_labels) + "\nmin_members = " + std::to_string(c.min_members) +
       "\ntrain_ratio = " + d(c.split_ratios[0]) + "\nvalidation_ratio = " + d(c.split_ratios[1]) +
       "\ntest_ratio = " + d(c.split_ratios[2]) + "\nsmiles_key = " + c.smiles_key + "\n\n";
  t += "[tokenizer]\nvocab_size = " + std::to_string(c.vocab_size) +
       "\nmin_frequency = " + std::to_string(c.min_frequency) + "\nmax_len = " + std::to_string(c.model.max_len) +
       "\n\n";
  t += "[model]\nlayers = " + std::to_string(c.model.n_layers) + "\nheads = " + std::to_string(c.model.n_heads) +
       "\nhidden = " + std::to_string(c.model.hidden_dim) + "\nffn = " + std::to_string(c.model.ffn_dim) +
       "\nattention_dropout = " + d(c.model.attention_dropout) + "\nactivation = gelu\nmlm_loss = softmax\n" +
       "layer_norm_eps = " + d(c.model.layer_norm_eps) + "\ninit_std = " + d(c.model.init_std) + "\n\n";
  auto phase = [&](const std::string& name, const PhaseConfig& p) {
    return "[" + name + "]\nepochs = " + std::to_string(p.epochs) + "\nbatch_size = " + std::to_string(p.batch_size) +
           "\nlearning_rate = " + d(p.adam.learning_rate) + "\nweight_decay = " + d(p.adam.weight_decay) +
           "\nbeta1 = " + d(p.adam.beta1) + "\nbeta2 = " + d(p.adam.beta2) + "\nepsilon = " + d(p.adam.epsilon) +
           "\ncheckpoint_every = " + std::to_string(p.checkpoint_every) + "\n";
  };
  t += phase("pretrain", c.pretrain);
  t += "mask_probability = " + d(c.masking.mask_probability) + "\nmask_fraction = " + d(c.masking.mask_fraction) +
       "\nrandom_fraction = " + d(c.masking.random_fraction) + "\nkeep_fraction = " + d(c.masking.keep_fraction) +
       "\nforce_minimum = true\n\n";
  t += phase("finetune", c.finetune) + "\n";
  t += "[explain]\n# negative means the last layer\nlayer = -1\ncorpus = false\n\n";
  t += "[extension]\nid_prefix = " + c.extension.id_prefix + "\nid_width = " + std::to_string(c.extension.id_width) +
       "\ntop_k = " + std::to_string(c.top_k) + "\ncurator_note = " + c.extension.curator_note + "\n";
  return t;
}

}  // namespace ontoext
