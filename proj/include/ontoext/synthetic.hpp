#pragma once

#include <array>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "ontoext/ontology.hpp"
#include "ontoext/util.hpp"

// Toy ontology generator: a small class tree whose leaves carry SMILES-like
// strings built from fixed motifs, so each motif class is recoverable from
// the string alone.
namespace ontoext::synthetic {

struct Motif {
  std::string_view name;
  std::string_view text;
};

inline constexpr std::array<std::string_view, 4> kGroups = {"halide", "inorganic", "nitrogen-sulfur", "carbon"};

// Three motifs per group, in group order.
inline constexpr std::array<Motif, 12> kMotifs = {{
    {"bromo", "Br"},
    {"chloro", "Cl"},
    {"iodo", "I"},
    {"iron", "[Fe]"},
    {"silicon", "[Si]"},
    {"phosphono", "P(=O)(O)O"},
    {"nitrile", "C#N"},
    {"nitro", "[N+](=O)[O-]"},
    {"sulfonyl", "S(=O)(=O)"},
    {"fluoro", "F"},
    {"phenyl", "c1ccccc1"},
    {"carboxy", "C(=O)O"},
}};

struct ToyConfig {
  std::size_t n_leaves = 400;
  std::size_t refinements = 3;        // subclasses per motif class
  double two_motif_fraction = 0.35;   // leaves carrying a second motif
  std::size_t min_filler = 1;
  std::size_t max_filler = 5;
  double carbon_weight = 0.85;  // probability of a plain "C" filler piece
  std::uint64_t seed = 0;
};

inline std::string filler(Rng& rng, std::size_t min_len, std::size_t max_len, double carbon_weight) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::string_view p = u < carbon_weight ? "C" : (u < (1.0 + carbon_weight) / 2 ? "O" : "(C)");
    if (p == "(C)" && (s.empty() || s.back() == ')')) p = "C";
    s += p;
  }
  return s;
}

inline std::string toy_id(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "TOY:%07zu", n);
  return buf;
}

// Returns the ontology as OBO text.
inline std::string generate_toy_obo(const ToyConfig& cfg) {
  if (cfg.refinements == 0 || cfg.n_leaves == 0 || cfg.min_filler > cfg.max_filler)
    throw Error(ErrorKind::kInvalidArgument, "invalid toy configuration");
  Rng rng(derive_seed(cfg.seed, {0x70e}));
  std::vector<OntologyClass> classes;
  std::size_t next = 1;
  auto add = [&](std::string name, std::set<ClassId> parents) {
    OntologyClass c;
    c.id = ClassId(toy_id(next++));
    c.name = std::move(name);
    c.parents = std::move(parents);
    classes.push_back(c);
    return classes.back().id;
  };

  const ClassId root = add("toy compound", {});
  std::vector<ClassId> groups;
  for (auto g : kGroups) groups.push_back(add(std::string(g) + " compound", {root}));
  std::vector<ClassId> motif_class;
  std::vector<std::vector<ClassId>> refinement;
  for (std::size_t m = 0; m < kMotifs.size(); ++m) {
    motif_class.push_back(add(std::string(kMotifs[m].name) + " compound", {groups[m / 3]}));
    refinement.emplace_back();
    for (std::size_t r = 0; r < cfg.refinements; ++r)
      refinement.back().push_back(
          add(std::string(kMotifs[m].name) + " compound type " + std::to_string(r + 1), {motif_class.back()}));
  }

  std::set<std::string> seen;
  for (std::size_t i = 0; i < cfg.n_leaves; ++i) {
    std::string smiles;
    std::set<ClassId> parents;
    for (int attempt = 0;; ++attempt) {
      const std::size_t m1 = i % kMotifs.size();
      std::vector<std::size_t> motifs{m1};
      if (rng.uniform() < cfg.two_motif_fraction) {
        std::size_t m2 = rng.below(kMotifs.size() - 1);
        if (m2 >= m1) ++m2;
        motifs.push_back(m2);
      }
      smiles = filler(rng, cfg.min_filler, cfg.max_filler, cfg.carbon_weight);
      parents.clear();
      for (auto m : motifs) {
        smiles += kMotifs[m].text;
        smiles += filler(rng, cfg.min_filler, cfg.max_filler, cfg.carbon_weight);
        parents.insert(refinement[m][rng.below(cfg.refinements)]);
      }
      if (seen.insert(smiles).second) break;
      if (attempt > 1000) throw Error(ErrorKind::kInvalidArgument, "cannot generate distinct toy SMILES");
    }
    add("toy molecule " + std::to_string(i + 1), parents);
    classes.back().smiles = smiles;
  }
  auto graph = OntologyGraph::build(std::move(classes), {"format-version: 1.2", "ontology: toy"});
  return serialize_obo(graph);
}

}  // namespace ontoext::synthetic
