#pragma once

// Random graph fixtures shared by the unit tests and the acceptance binary.

#include <cstdio>
#include <string>
#include <vector>

#include "ontoext/ontology.hpp"
#include "ontoext/util.hpp"

namespace ontoext::test {

inline std::size_t count_leaves(const OntologyGraph& g) {
  std::size_t n = 0;
  for (const auto& [id, _] : g.classes()) n += g.is_leaf(id);
  return n;
}

inline std::string dag_id(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "R:%05zu", i);
  return buf;
}

// Random DAG on n nodes. Node i may only point at nodes with a smaller index,
// so the result is acyclic by construction. About half the nodes carry SMILES.
inline OntologyGraph random_dag(std::uint64_t seed, std::size_t n, double edge_p = 0.25) {
  Rng rng(derive_seed(seed, {0xda9}));
  std::vector<OntologyClass> classes;
  for (std::size_t i = 0; i < n; ++i) {
    OntologyClass c;
    c.id = ClassId(dag_id(i));
    if (rng.uniform() < 0.8) c.name = "node " + std::to_string(i);
    for (std::size_t j = 0; j < i; ++j)
      if (rng.uniform() < edge_p) c.parents.insert(ClassId(dag_id(j)));
    if (i > 0 && c.parents.empty() && rng.uniform() < 0.7) c.parents.insert(ClassId(dag_id(rng.below(i))));
    if (rng.uniform() < 0.5) c.smiles = "C" + std::string(1 + rng.below(4), 'O') + std::to_string(i);
    if (rng.uniform() < 0.1) c.extra_lines.push_back("synonym: \"n" + std::to_string(i) + "\" EXACT []");
    classes.push_back(std::move(c));
  }
  return OntologyGraph::build(std::move(classes), {"format-version: 1.2"});
}

}  // namespace ontoext::test
