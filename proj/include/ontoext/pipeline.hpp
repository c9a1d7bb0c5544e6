#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ontoext/bpe.hpp"
#include "ontoext/config.hpp"
#include "ontoext/dataset.hpp"
#include "ontoext/evaluation.hpp"
#include "ontoext/explain.hpp"
#include "ontoext/extension.hpp"
#include "ontoext/model.hpp"
#include "ontoext/ontology.hpp"
#include "ontoext/synthetic.hpp"
#include "ontoext/training.hpp"
#include "ontoext/util.hpp"

// One function per subcommand. Each reads its inputs from RunConfig::paths and
// writes every artifact atomically.
namespace ontoext::pipeline {

namespace fs = std::filesystem;

inline fs::path input_path(const RunConfig& cfg, const std::string& key) {
  auto p = cfg.path(key);
  if (!fs::exists(p)) throw Error(ErrorKind::kIo, "missing input " + key + ": " + p.string());
  return p;
}

inline std::optional<fs::path> optional_input(const RunConfig& cfg, const std::string& key) {
  auto it = cfg.paths.find(key);
  if (it == cfg.paths.end() || it->second.empty()) return std::nullopt;
  if (!fs::exists(it->second)) throw Error(ErrorKind::kIo, "missing input " + key + ": " + it->second.string());
  return it->second;
}

inline fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

inline LabelIndex load_label_index(const RunConfig& cfg) {
  if (auto p = optional_input(cfg, "labels")) return load_labels(*p);
  return load_labels(input_path(cfg, "dataset") / "labels.txt");
}

inline std::vector<std::string> read_smiles_list(const fs::path& path) {
  std::vector<std::string> out;
  for (const auto& line : split_lines(read_file(path))) {
    auto t = trim(line);
    if (!t.empty() && t.front() != '#') out.emplace_back(t);
  }
  if (out.empty()) throw Error(ErrorKind::kEmptyResult, "no SMILES in " + path.string());
  return out;
}

inline TrainConfig train_config(const PhaseConfig& phase, std::uint64_t seed, const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = phase.epochs;
  t.batch_size = phase.batch_size;
  t.adam = phase.adam;
  t.seed = seed;
  t.checkpoint_every = phase.checkpoint_every;
  if (auto it = cfg.paths.find("checkpoint"); it != cfg.paths.end()) t.checkpoint_path = it->second;
  return t;
}

inline fs::path epoch_log_path(const RunConfig& cfg) {
  if (auto it = cfg.paths.find("log"); it != cfg.paths.end() && !it->second.empty()) return it->second;
  return sibling(cfg.path("output"), ".epochs.csv");
}

// ---------------------------------------------------------------------------

struct BuildSummary {
  std::size_t molecules = 0;
  std::size_t merged_duplicates = 0;
  std::array<std::size_t, 3> split_sizes{};
};

inline BuildSummary run_build_dataset(const RunConfig& cfg) {
  const auto seed = cfg.require_seed();
  const auto obo = input_path(cfg, "ontology");
  const auto out_dir = cfg.path("dataset");
  const auto graph = parse_obo(read_file(obo), OboOptions{cfg.smiles_key});
  const auto labels = select_label_classes(graph, cfg.n_labels, cfg.min_members, seed);
  const auto built = build_dataset(graph, labels);
  const auto splits = split_dataset(built.molecules, cfg.split_ratios, seed);
  save_tsv(splits, labels, out_dir);

  nlohmann::ordered_json stats;
  stats["molecules"] = built.molecules.size();
  stats["merged_duplicates"] = built.merged_duplicates;
  stats["splits"] = {{"train", splits.train.size()}, {"validation", splits.validation.size()},
                     {"test", splits.test.size()}};
  nlohmann::ordered_json members = nlohmann::ordered_json::object();
  for (std::size_t j = 0; j < labels.size(); ++j) members[labels.at(j).str()] = built.stats.class_members[j];
  stats["class_members"] = members;
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [k, n] : built.stats.labels_histogram) hist[std::to_string(k)] = n;
  stats["labels_per_molecule"] = hist;
  write_file_atomic(out_dir / "stats.json", stats.dump(2) + "\n");

  log_info("build-dataset", std::to_string(labels.size()) + " label classes, " +
                                std::to_string(built.molecules.size()) + " molecules");
  return {built.molecules.size(), built.merged_duplicates,
          {splits.train.size(), splits.validation.size(), splits.test.size()}};
}

// The tokenizer sees only training-split SMILES.
inline Tokenizer run_train_tokenizer(const RunConfig& cfg) {
  cfg.require_seed();
  const auto data = load_tsv(input_path(cfg, "dataset"));
  std::vector<std::string> corpus;
  for (const auto& m : data.splits.train) corpus.push_back(m.smiles);
  auto tok = train_bpe(corpus, cfg.vocab_size, cfg.min_frequency);
  write_file_atomic(cfg.path("tokenizer"), tok.serialize());
  log_info("train-tokenizer", "vocabulary " + std::to_string(tok.vocab_size()) + ", merges " +
                                  std::to_string(tok.merges().size()));
  return tok;
}

inline Checkpoint<double> fresh_model(const RunConfig& cfg, const Tokenizer& tok, std::size_t n_labels) {
  Checkpoint<double> ck;
  ck.config = cfg.model;
  ck.config.vocab_size = tok.vocab_size();
  ck.config.n_labels = n_labels;
  ck.config.seed = derive_seed(cfg.require_seed(), {0x1417});
  ck.params = init_model(ck.config);
  return ck;
}

inline void check_vocabulary(const ModelConfig& config, const Tokenizer& tok) {
  if (config.vocab_size != tok.vocab_size())
    throw Error(ErrorKind::kVersion, "model vocabulary " + std::to_string(config.vocab_size) +
                                         " does not match tokenizer vocabulary " + std::to_string(tok.vocab_size()));
}

inline std::vector<EpochLog> run_pretrain(const RunConfig& cfg) {
  const auto seed = cfg.require_seed();
  const auto data = load_tsv(input_path(cfg, "dataset"));
  const auto tok = load_tokenizer(input_path(cfg, "tokenizer"));
  const auto init = optional_input(cfg, "model");
  const auto output = cfg.path("output");
  if (cfg.pretrain.epochs == 0 && init) {
    write_file_atomic(output, read_file(*init));
    log_info("pretrain", "0 epochs; copied input model");
    return {};
  }
  auto ck = init ? load_checkpoint(*init) : fresh_model(cfg, tok, data.labels.size());
  check_vocabulary(ck.config, tok);

  std::vector<std::string> train_smiles, val_smiles;
  for (const auto& m : data.splits.train) train_smiles.push_back(m.smiles);
  for (const auto& m : data.splits.validation) val_smiles.push_back(m.smiles);
  const auto corpus = encode_corpus(tok, train_smiles, ck.config.max_len);
  const auto val = encode_corpus(tok, val_smiles, ck.config.max_len);

  auto tc = train_config(cfg.pretrain, derive_seed(seed, {0x9e7}), cfg);
  MaskingPolicy masking = cfg.masking;
  masking.seed = derive_seed(seed, {0x3a5});
  auto result = pretrain(ck.params, ck.config, corpus, val, tc, masking);
  write_file_atomic(output, serialize_model(ck.config, result.best));
  append_epoch_logs(epoch_log_path(cfg), result.logs);
  return result.logs;
}

inline std::vector<EpochLog> run_finetune(const RunConfig& cfg) {
  const auto seed = cfg.require_seed();
  const auto data = load_tsv(input_path(cfg, "dataset"));
  const auto tok = load_tokenizer(input_path(cfg, "tokenizer"));
  const auto init = optional_input(cfg, "model");
  const auto output = cfg.path("output");
  auto ck = init ? load_checkpoint(*init) : fresh_model(cfg, tok, data.labels.size());
  check_vocabulary(ck.config, tok);
  if (ck.config.n_labels != data.labels.size())
    resize_label_head(ck.params, ck.config, data.labels.size(), derive_seed(seed, {0x4ead}));

  const auto train = encode_labeled(tok, data.splits.train, ck.config.max_len);
  const auto val = encode_labeled(tok, data.splits.validation, ck.config.max_len);
  auto tc = train_config(cfg.finetune, derive_seed(seed, {0xf1e}), cfg);
  auto result = finetune(ck.params, ck.config, train, val, tc, cfg.threshold);
  write_file_atomic(output, serialize_model(ck.config, result.best));
  append_epoch_logs(epoch_log_path(cfg), result.logs);
  return result.logs;
}

inline const std::vector<LabeledMolecule>& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  if (name == "test") return s.test;
  throw Error(ErrorKind::kInvalidArgument, "unknown split '" + name + "' (train, validation or test)");
}

inline Evaluation run_evaluate(const RunConfig& cfg, const std::string& split = "test") {
  cfg.require_seed();
  const auto data = load_tsv(input_path(cfg, "dataset"));
  const auto tok = load_tokenizer(input_path(cfg, "tokenizer"));
  const auto ck = load_checkpoint(input_path(cfg, "model"));
  check_vocabulary(ck.config, tok);
  auto ev = evaluate(ck.params, ck.config, tok, pick_split(data.splits, split), data.labels, cfg.threshold);
  write_evaluation(ev, data.labels, cfg.path("output"));
  log_info("evaluate", split + " micro F1 " + format_fixed(ev.report[Averaging::kMicro].prf.f1, 4));
  return ev;
}

struct Classifier {
  Checkpoint<double> model;
  Tokenizer tok;
  LabelIndex labels;
};

inline Classifier load_classifier(const RunConfig& cfg) {
  Classifier c{load_checkpoint(input_path(cfg, "model")), load_tokenizer(input_path(cfg, "tokenizer")),
               load_label_index(cfg)};
  check_vocabulary(c.model.config, c.tok);
  return c;
}

inline nlohmann::ordered_json classification_json(const ClassificationResult& r, const OntologyGraph* graph) {
  auto scored = [&](const std::vector<ScoredClass>& v) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : v) {
      nlohmann::ordered_json e;
      e["class"] = s.id.str();
      if (graph && graph->contains(s.id)) e["name"] = graph->at(s.id).name;
      e["probability"] = s.probability;
      arr.push_back(e);
    }
    return arr;
  };
  nlohmann::ordered_json j;
  j["smiles"] = r.smiles;
  j["accepted"] = scored(r.accepted);
  j["below_threshold"] = r.below_threshold;
  if (r.below_threshold) j["suggestions"] = scored(r.suggestions);
  j["truncated"] = r.truncated;
  return j;
}

inline std::vector<ClassificationResult> classify_all(const Classifier& c, const std::vector<std::string>& smiles,
                                                      double threshold, std::size_t top_k) {
  std::vector<ClassificationResult> out;
  for (const auto& s : smiles) {
    out.push_back(classify(c.model.params, c.model.config, c.tok, c.labels, s, threshold, top_k));
    if (out.back().truncated) log_warn("classify", "truncated over-long SMILES " + s);
  }
  return out;
}

inline std::optional<OntologyGraph> optional_ontology(const RunConfig& cfg) {
  if (auto p = optional_input(cfg, "ontology")) return parse_obo(read_file(*p), OboOptions{cfg.smiles_key});
  return std::nullopt;
}

inline std::vector<ClassificationResult> run_classify(const RunConfig& cfg) {
  cfg.require_seed();
  const auto c = load_classifier(cfg);
  const auto graph = optional_ontology(cfg);
  const auto results = classify_all(c, read_smiles_list(input_path(cfg, "input")), cfg.threshold, cfg.top_k);
  auto j = nlohmann::ordered_json::array();
  for (const auto& r : results) j.push_back(classification_json(r, graph ? &*graph : nullptr));
  write_file_atomic(cfg.path("output"), j.dump(2) + "\n");
  return results;
}

inline std::string molecule_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "molecule_%04zu", i + 1);
  return buf;
}

inline std::size_t run_explain(const RunConfig& cfg) {
  cfg.require_seed();
  const auto c = load_classifier(cfg);
  const auto graph = optional_ontology(cfg);
  const auto smiles = read_smiles_list(input_path(cfg, "input"));
  const auto dir = cfg.path("output");
  fs::create_directories(dir);
  std::vector<HeadTokenShare> all_shares;
  for (std::size_t i = 0; i < smiles.size(); ++i) {
    const auto r = classify(c.model.params, c.model.config, c.tok, c.labels, smiles[i], cfg.threshold, cfg.top_k);
    const auto enc = c.tok.encode_truncating(smiles[i], c.model.config.max_len);
    const auto out = forward(c.model.params, c.model.config, {enc.seq}, true)[0];
    const auto attribution = token_importance(*out.attention, cfg.explain_layer, &c.tok);
    const auto shares = head_token_share(*out.attention, &c.tok);
    std::vector<Prediction> preds;
    for (const auto& a : r.accepted)
      preds.push_back({a.id.str(), graph && graph->contains(a.id) ? graph->at(a.id).name : std::string(),
                       a.probability});
    const auto stem = molecule_stem(i);
    write_file_atomic(dir / (stem + ".html"), render_report(smiles[i], attribution, shares, preds, cfg.threshold));
    write_file_atomic(dir / (stem + "_tokens.csv"), attribution_csv(attribution));
    write_file_atomic(dir / (stem + "_shares.csv"), shares_csv(shares));
    all_shares.push_back(shares);
  }
  if (cfg.explain_corpus) write_file_atomic(dir / "corpus_shares.csv", shares_csv(average_shares(all_shares)));
  return smiles.size();
}

inline ExtensionResult run_extend(const RunConfig& cfg) {
  cfg.require_seed();
  const auto graph = parse_obo(read_file(input_path(cfg, "ontology")), OboOptions{cfg.smiles_key});
  const auto c = load_classifier(cfg);
  const auto results = classify_all(c, read_smiles_list(input_path(cfg, "input")), cfg.threshold, cfg.top_k);
  auto res = extend(graph, propose_extension(graph, results, cfg.extension));
  const auto output = cfg.path("output");
  auto report = cfg.paths.count("report") ? cfg.path("report") : sibling(output, ".report.json");
  write_file_atomic(output, serialize_obo(res.graph, OboOptions{cfg.smiles_key}));
  write_file_atomic(report, res.report.dump(2) + "\n");
  log_info("extend", std::to_string(res.report["added"].size()) + " classes added");
  return res;
}

inline void run_generate_toy(const RunConfig& cfg, synthetic::ToyConfig toy) {
  toy.seed = cfg.require_seed();
  write_file_atomic(cfg.path("output"), synthetic::generate_toy_obo(toy));
}

}  // namespace ontoext::pipeline
