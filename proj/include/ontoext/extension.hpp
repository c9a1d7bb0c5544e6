#pragma once

#include <algorithm>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ontoext/bpe.hpp"
#include "ontoext/dataset.hpp"
#include "ontoext/error.hpp"
#include "ontoext/model.hpp"
#include "ontoext/ontology.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

struct ScoredClass {
  ClassId id;
  double probability = 0.0;

  friend bool operator==(const ScoredClass&, const ScoredClass&) = default;
};

struct ClassificationResult {
  std::string smiles;
  std::vector<double> probabilities;  // per label column
  std::vector<ScoredClass> accepted;  // column order
  bool below_threshold = false;
  std::vector<ScoredClass> suggestions;  // top-k when nothing was accepted
  bool truncated = false;
};

namespace detail {

inline std::vector<ScoredClass> top_k(const std::vector<double>& probs, const LabelIndex& labels, std::size_t k) {
  std::vector<std::size_t> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::vector<ScoredClass> out;
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) out.push_back({labels.at(order[i]), probs[order[i]]});
  return out;
}

}  // namespace detail

template <typename S>
ClassificationResult classify(const ParameterStore<S>& params, const ModelConfig& config, const Tokenizer& tok,
                              const LabelIndex& labels, const std::string& smiles, double threshold,
                              std::size_t top_k = 3) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error(ErrorKind::kInvalidArgument, "threshold must lie in (0, 1)");
  if (labels.size() != config.n_labels)
    throw Error(ErrorKind::kLabelMismatch, "label index has " + std::to_string(labels.size()) +
                                               " classes, model expects " + std::to_string(config.n_labels));
  ClassificationResult r;
  r.smiles = smiles;
  auto enc = tok.encode_truncating(smiles, config.max_len);
  r.truncated = enc.truncated;
  ForwardCache<S> cache;
  forward_cached(params, config, enc.seq, cache, nullptr);
  for (std::size_t j = 0; j < config.n_labels; ++j) {
    const double p = static_cast<double>(kernels::sigmoid(cache.logits[j]));
    r.probabilities.push_back(p);
    if (p >= threshold) r.accepted.push_back({labels.at(j), p});
  }
  if (r.accepted.empty()) {
    r.below_threshold = true;
    r.suggestions = detail::top_k(r.probabilities, labels, top_k);
  }
  return r;
}

struct ExtensionConfig {
  std::string id_prefix = "ONTOEXT:";
  std::size_t id_width = 7;
  std::string curator_note = "name is the SMILES string; rename during curation";
};

struct ExtensionProposal {
  OntologyClass cls;
  std::vector<ScoredClass> edges;
};

// Largest run of trailing digits over all ids in the graph.
inline unsigned long long max_numeric_suffix(const OntologyGraph& graph) {
  unsigned long long best = 0;
  for (const auto& [id, _] : graph.classes()) {
    const auto& s = id.str();
    std::size_t i = s.size();
    while (i > 0 && s[i - 1] >= '0' && s[i - 1] <= '9') --i;
    if (i == s.size() || s.size() - i > 18) continue;
    best = std::max(best, std::stoull(s.substr(i)));
  }
  return best;
}

inline std::string format_id(const std::string& prefix, unsigned long long n, std::size_t width) {
  std::string digits = std::to_string(n);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

// Drops every accepted class that is an ancestor of another accepted class.
inline std::vector<ScoredClass> most_specific(const OntologyGraph& graph, const std::vector<ScoredClass>& accepted) {
  std::set<ClassId> redundant;
  for (const auto& a : accepted)
    for (const auto& anc : ancestors(graph, a.id)) redundant.insert(anc);
  std::vector<ScoredClass> out;
  for (const auto& a : accepted)
    if (!redundant.count(a.id)) out.push_back(a);
  return out;
}

struct ProposalSet {
  std::vector<ExtensionProposal> proposals;
  std::vector<ClassificationResult> below_threshold;
};

inline ProposalSet propose_extension(const OntologyGraph& graph, const std::vector<ClassificationResult>& results,
                                     const ExtensionConfig& cfg = {}) {
  ProposalSet out;
  auto counter = max_numeric_suffix(graph);
  for (const auto& r : results) {
    for (const auto& a : r.accepted)
      if (!graph.contains(a.id)) throw Error(ErrorKind::kUnknownId, "label " + a.id.str() + " not in ontology");
    if (r.below_threshold || r.accepted.empty()) {
      out.below_threshold.push_back(r);
      continue;
    }
    ExtensionProposal p;
    p.cls.id = ClassId(format_id(cfg.id_prefix, ++counter, cfg.id_width));
    p.cls.name = r.smiles;
    p.cls.smiles = r.smiles;
    if (!cfg.curator_note.empty()) p.cls.extra_lines.push_back("comment: " + cfg.curator_note);
    p.edges = most_specific(graph, r.accepted);
    for (const auto& e : p.edges) {
      const auto& name = graph.at(e.id).name;
      p.cls.parent_comments[e.id] = (name.empty() ? std::string() : name + " ") + "(confidence " +
                                    format_fixed(e.probability, 4) + ")";
    }
    out.proposals.push_back(std::move(p));
  }
  if (!out.below_threshold.empty())
    log_info("extension", std::to_string(out.below_threshold.size()) + " molecules below threshold; no edges added");
  return out;
}

struct ExtensionResult {
  OntologyGraph graph;
  nlohmann::ordered_json report;
};

inline nlohmann::ordered_json change_report(const ProposalSet& set) {
  nlohmann::ordered_json j;
  j["added"] = nlohmann::ordered_json::array();
  for (const auto& p : set.proposals) {
    nlohmann::ordered_json a;
    a["new_id"] = p.cls.id.str();
    a["smiles"] = p.cls.smiles.value_or("");
    a["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : p.edges) a["edges"].push_back({{"superclass", e.id.str()}, {"confidence", e.probability}});
    j["added"].push_back(a);
  }
  j["below_threshold"] = nlohmann::ordered_json::array();
  for (const auto& r : set.below_threshold) {
    nlohmann::ordered_json b;
    b["smiles"] = r.smiles;
    b["suggestions"] = nlohmann::ordered_json::array();
    for (const auto& s : r.suggestions) b["suggestions"].push_back({{"class", s.id.str()}, {"probability", s.probability}});
    j["below_threshold"].push_back(b);
  }
  j["below_threshold_count"] = set.below_threshold.size();
  return j;
}

inline ExtensionResult extend(const OntologyGraph& graph, const ProposalSet& set) {
  std::vector<Addition> additions;
  for (const auto& p : set.proposals) {
    Addition a{p.cls, {}};
    for (const auto& e : p.edges) a.superclasses.push_back(e.id);
    additions.push_back(std::move(a));
  }
  return {insert_subsumptions(graph, additions), change_report(set)};
}

}  // namespace ontoext
