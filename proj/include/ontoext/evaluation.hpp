#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ontoext/bpe.hpp"
#include "ontoext/dataset.hpp"
#include "ontoext/metrics.hpp"
#include "ontoext/model.hpp"
#include "ontoext/training.hpp"

namespace ontoext {

struct Evaluation {
  MetricReport report;
  LabelMatrix y_true;
  ScoreMatrix y_score;
  LabelMatrix y_pred;
  std::vector<double> class_f1;
  std::vector<std::size_t> class_support;
  std::vector<double> molecule_f1;
  std::size_t truncated = 0;
};

// Scores every molecule of `split` (over-long inputs are truncated, as at
// inference) and computes the full report.
template <typename S>
Evaluation evaluate(const ParameterStore<S>& params, const ModelConfig& config, const Tokenizer& tok,
                    const std::vector<LabeledMolecule>& split, const LabelIndex& labels, double threshold = 0.5) {
  if (labels.size() != config.n_labels)
    throw Error(ErrorKind::kLabelMismatch, "dataset has " + std::to_string(labels.size()) +
                                               " labels, model expects " + std::to_string(config.n_labels));
  if (split.empty()) throw Error(ErrorKind::kInvalidArgument, "evaluation split is empty");
  Evaluation ev;
  std::vector<TokenSequence> seqs;
  for (const auto& m : split) {
    if (m.labels.size() != config.n_labels)
      throw Error(ErrorKind::kLabelMismatch, "molecule " + m.smiles + " has wrong label count");
    auto enc = tok.encode_truncating(m.smiles, config.max_len);
    ev.truncated += enc.truncated ? 1 : 0;
    seqs.push_back(std::move(enc.seq));
  }
  ev.y_score = predict_scores(params, config, seqs);
  ev.y_true = LabelMatrix(split.size(), config.n_labels, 0);
  for (std::size_t i = 0; i < split.size(); ++i)
    for (std::size_t j = 0; j < config.n_labels; ++j) ev.y_true(i, j) = split[i].labels[j];
  ev.y_pred = binarize(ev.y_score, threshold);
  ev.report = metric_report(ev.y_true, ev.y_score, threshold);
  for (auto a : kAllAveragings)
    if (ev.report[a].auc.excluded)
      log_warn("evaluation", std::string(to_string(a)) + " roc_auc excluded " +
                                 std::to_string(ev.report[a].auc.excluded) + " single-class groups");
  ev.class_f1 = per_class_f1(ev.y_true, ev.y_pred);
  for (const auto& c : column_counts(ev.y_true, ev.y_pred)) ev.class_support.push_back(c.tp + c.fn);
  ev.molecule_f1 = per_molecule_f1(ev.y_true, ev.y_pred);
  return ev;
}

inline nlohmann::ordered_json report_json(const MetricReport& rep) {
  nlohmann::ordered_json j;
  j["molecules"] = rep.molecules;
  j["labels"] = rep.labels;
  j["threshold"] = rep.threshold;
  for (auto a : kAllAveragings) {
    const auto& m = rep[a];
    nlohmann::ordered_json row;
    row["f1"] = m.prf.f1;
    row["precision"] = m.prf.precision;
    row["recall"] = m.prf.recall;
    if (m.auc.value) {
      row["roc_auc"] = *m.auc.value;
    } else {
      row["roc_auc"] = nullptr;
    }
    row["roc_auc_excluded"] = m.auc.excluded;
    j[std::string(to_string(a))] = row;
  }
  return j;
}

inline std::string per_class_csv(const Evaluation& ev, const LabelIndex& labels) {
  std::string out = "class_id,support,f1\n";
  for (std::size_t j = 0; j < ev.class_f1.size(); ++j)
    out += labels.at(j).str() + "," + std::to_string(ev.class_support[j]) + "," + format_double(ev.class_f1[j]) + "\n";
  return out;
}

inline std::string per_molecule_csv(const Evaluation& ev) {
  std::string out = "row_index,f1\n";
  for (std::size_t i = 0; i < ev.molecule_f1.size(); ++i)
    out += std::to_string(i) + "," + format_double(ev.molecule_f1[i]) + "\n";
  return out;
}

// Writes report.json, per_class_f1.csv and per_molecule_f1.csv into `dir`.
inline void write_evaluation(const Evaluation& ev, const LabelIndex& labels, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "report.json", report_json(ev.report).dump(2) + "\n");
  write_file_atomic(dir / "per_class_f1.csv", per_class_csv(ev, labels));
  write_file_atomic(dir / "per_molecule_f1.csv", per_molecule_csv(ev));
}

}  // namespace ontoext
