#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ontoext/error.hpp"
#include "ontoext/ontology.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

// Ordered label columns. Column meaning never changes once built.
class LabelIndex {
 public:
  LabelIndex() = default;
  explicit LabelIndex(std::vector<ClassId> ids) : ids_(std::move(ids)) {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i].empty()) throw Error(ErrorKind::kInvalidArgument, "empty label id");
      if (!index_.emplace(ids_[i], i).second)
        throw Error(ErrorKind::kDuplicateId, "duplicate label " + ids_[i].str());
    }
  }

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const ClassId& at(std::size_t column) const { return ids_.at(column); }
  const std::vector<ClassId>& ids() const { return ids_; }

  std::optional<std::size_t> column(const ClassId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const LabelIndex& a, const LabelIndex& b) { return a.ids_ == b.ids_; }

 private:
  std::vector<ClassId> ids_;
  std::map<ClassId, std::size_t> index_;
};

struct LabeledMolecule {
  std::string smiles;
  std::vector<std::uint8_t> labels;

  std::size_t label_count() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }

  friend bool operator==(const LabeledMolecule&, const LabeledMolecule&) = default;
};

struct DatasetSplits {
  std::vector<LabeledMolecule> train;
  std::vector<LabeledMolecule> validation;
  std::vector<LabeledMolecule> test;
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetSplits&, const DatasetSplits&) = default;
};

struct DatasetStats {
  std::vector<std::size_t> class_members;               // per label column
  std::map<std::size_t, std::size_t> labels_histogram;  // labels-per-molecule -> molecules

  std::size_t molecule_count() const {
    std::size_t n = 0;
    for (const auto& [_, count] : labels_histogram) n += count;
    return n;
  }
};

struct BuiltDataset {
  std::vector<LabeledMolecule> molecules;
  DatasetStats stats;
  std::size_t merged_duplicates = 0;
};

inline DatasetStats compute_stats(const std::vector<LabeledMolecule>& molecules, std::size_t n_labels) {
  DatasetStats stats;
  stats.class_members.assign(n_labels, 0);
  for (const auto& m : molecules) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < m.labels.size() && j < n_labels; ++j) {
      if (m.labels[j]) {
        ++stats.class_members[j];
        ++count;
      }
    }
    ++stats.labels_histogram[count];
  }
  return stats;
}

namespace detail {

// Structured-leaf descendants of every non-obsolete inner class, as sorted
// leaf indices. `leaves` is in ClassId order.
struct DescendantIndex {
  std::vector<ClassId> leaves;
  std::map<ClassId, std::vector<std::uint32_t>> members;
};

inline DescendantIndex index_descendants(const OntologyGraph& graph) {
  DescendantIndex idx;
  const auto leaves = structured_leaves(graph);
  idx.leaves.assign(leaves.begin(), leaves.end());
  for (std::uint32_t i = 0; i < idx.leaves.size(); ++i)
    for (const auto& a : ancestors(graph, idx.leaves[i]))
      if (!graph.at(a).obsolete) idx.members[a].push_back(i);
  return idx;
}

}  // namespace detail

// Greedy overlap-minimizing choice of k label classes.
//
// Candidates are non-leaf, non-obsolete classes with at least `min_members`
// structured leaf descendants. The first pick is the candidate whose summed
// Jaccard overlap with all other candidates is smallest (the seed chooses
// among exact ties). Each later pick minimizes Jaccard overlap with the union
// of the already-selected descendant sets; ties prefer the larger descendant
// count, then the smaller ClassId.
inline LabelIndex select_label_classes(const OntologyGraph& graph, std::size_t k, std::size_t min_members,
                                       std::uint64_t seed) {
  if (graph.empty()) throw Error(ErrorKind::kInvalidArgument, "empty ontology");
  if (k == 0) throw Error(ErrorKind::kInvalidArgument, "k must be >= 1");

  const auto idx = detail::index_descendants(graph);
  std::vector<ClassId> cands;
  std::vector<const std::vector<std::uint32_t>*> sets;
  for (const auto& [id, members] : idx.members) {
    if (graph.is_leaf(id) || members.size() < min_members) continue;
    cands.push_back(id);
    sets.push_back(&members);
  }
  if (cands.size() < k)
    throw Error(ErrorKind::kEmptyResult, "only " + std::to_string(cands.size()) + " classes have >= " +
                                             std::to_string(min_members) + " structured leaves; need " +
                                             std::to_string(k));

  const std::size_t n = cands.size();
  // Candidate indices reachable from each leaf.
  std::vector<std::vector<std::uint32_t>> leaf_cands(idx.leaves.size());
  for (std::uint32_t c = 0; c < n; ++c)
    for (auto leaf : *sets[c]) leaf_cands[leaf].push_back(c);

  auto size_of = [&](std::size_t c) { return static_cast<double>(sets[c]->size()); };

  // Summed pairwise Jaccard per candidate from sparse co-membership counts.
  std::vector<std::unordered_map<std::uint32_t, std::uint32_t>> co(n);
  for (const auto& lc : leaf_cands)
    for (std::size_t a = 0; a < lc.size(); ++a)
      for (std::size_t b = a + 1; b < lc.size(); ++b) {
        ++co[lc[a]][lc[b]];
        ++co[lc[b]][lc[a]];
      }
  std::vector<double> total(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    // Sum in partner-index order so the result is independent of hash layout.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> partners(co[c].begin(), co[c].end());
    std::sort(partners.begin(), partners.end());
    for (const auto& [d, inter] : partners)
      total[c] += inter / (size_of(c) + size_of(d) - inter);
  }
  const double best_total = *std::min_element(total.begin(), total.end());
  std::vector<std::size_t> tied;
  for (std::size_t c = 0; c < n; ++c)
    if (total[c] <= best_total + 1e-12) tied.push_back(c);
  Rng rng(derive_seed(seed, {0x5e1ec7}));
  const std::size_t first = tied[rng.below(tied.size())];

  std::vector<bool> chosen(n, false), in_union(idx.leaves.size(), false);
  std::vector<std::size_t> inter(n, 0);
  std::size_t union_size = 0;
  std::vector<ClassId> picked;
  auto take = [&](std::size_t c) {
    chosen[c] = true;
    picked.push_back(cands[c]);
    for (auto leaf : *sets[c]) {
      if (in_union[leaf]) continue;
      in_union[leaf] = true;
      ++union_size;
      for (auto other : leaf_cands[leaf]) ++inter[other];
    }
  };
  take(first);
  while (picked.size() < k) {
    std::size_t best = n;
    double best_j = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (chosen[c]) continue;
      const double i = static_cast<double>(inter[c]);
      const double j = i / (size_of(c) + static_cast<double>(union_size) - i);
      if (best == n || j < best_j - 1e-12 ||
          (std::abs(j - best_j) <= 1e-12 && sets[c]->size() > sets[best]->size())) {
        best = c;
        best_j = j;
      }
    }
    take(best);
  }
  return LabelIndex(std::move(picked));
}

// One molecule per structured leaf with at least one label-class ancestor.
// Leaves sharing a SMILES string are merged (labels OR-ed) so that splits stay
// disjoint on structure.
inline BuiltDataset build_dataset(const OntologyGraph& graph, const LabelIndex& labels) {
  for (const auto& id : labels.ids())
    if (!graph.contains(id)) throw Error(ErrorKind::kUnknownId, "label class not in ontology: " + id.str());

  BuiltDataset out;
  std::map<std::string, std::size_t> by_smiles;
  for (const auto& leaf : structured_leaves(graph)) {
    const auto anc = ancestors(graph, leaf);
    std::vector<std::uint8_t> row(labels.size(), 0);
    bool any = false;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (anc.count(labels.at(j))) {
        row[j] = 1;
        any = true;
      }
    }
    if (!any) continue;
    const std::string& smiles = *graph.at(leaf).smiles;
    auto [it, inserted] = by_smiles.emplace(smiles, out.molecules.size());
    if (inserted) {
      out.molecules.push_back({smiles, std::move(row)});
    } else {
      auto& existing = out.molecules[it->second].labels;
      for (std::size_t j = 0; j < row.size(); ++j) existing[j] |= row[j];
      ++out.merged_duplicates;
    }
  }
  if (out.molecules.empty()) throw Error(ErrorKind::kEmptyResult, "no structured leaf falls under any label class");
  out.stats = compute_stats(out.molecules, labels.size());
  return out;
}

// Largest-remainder apportionment of n items over the given ratios. Ties on
// the fractional part go to the earlier bucket.
template <std::size_t N>
std::array<std::size_t, N> largest_remainder(std::size_t n, const std::array<double, N>& ratios) {
  std::array<std::size_t, N> counts{};
  std::array<double, N> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::array<std::size_t, N> order;
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[order[r % N]];
  return counts;
}

// Train/validation/test proportions of the reference ChEBI dataset
// (21,896 / 2,815 / 6,569 of 31,280 molecules).
inline constexpr std::array<double, 3> kReferenceSplitRatios = {21896.0 / 31280.0, 2815.0 / 31280.0,
                                                                6569.0 / 31280.0};

inline DatasetSplits split_dataset(const std::vector<LabeledMolecule>& data, const std::array<double, 3>& ratios,
                                   std::uint64_t seed) {
  for (double r : ratios)
    if (!(r > 0.0)) throw Error(ErrorKind::kInvalidArgument, "split ratios must be positive");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw Error(ErrorKind::kInvalidArgument, "split ratios must sum to 1");
  if (data.size() < 3) throw Error(ErrorKind::kInvalidArgument, "dataset smaller than 3");

  const auto counts = largest_remainder<3>(data.size(), ratios);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x5b117}));
  rng.shuffle(order);

  DatasetSplits s;
  s.seed = seed;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < counts[0]; ++i) s.train.push_back(data[order[pos++]]);
  for (std::size_t i = 0; i < counts[1]; ++i) s.validation.push_back(data[order[pos++]]);
  for (std::size_t i = 0; i < counts[2]; ++i) s.test.push_back(data[order[pos++]]);
  return s;
}

// ---------------------------------------------------------------------------
// TSV persistence
// ---------------------------------------------------------------------------

inline std::string to_tsv(const std::vector<LabeledMolecule>& rows, const LabelIndex& labels) {
  std::string out = "smiles";
  for (const auto& id : labels.ids()) out += "\t" + id.str();
  out += "\n";
  for (const auto& m : rows) {
    out += m.smiles;
    for (auto b : m.labels) out += b ? "\t1" : "\t0";
    out += "\n";
  }
  return out;
}

inline std::vector<LabeledMolecule> parse_tsv(std::string_view text, const LabelIndex* expected,
                                              LabelIndex* header_out = nullptr) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw ParseError(ErrorKind::kMalformedRow, 1, "missing header");
  const auto header = split(lines[0], '\t');
  if (header.empty() || header[0] != "smiles") throw ParseError(ErrorKind::kMalformedRow, 1, "header must start with 'smiles'");
  std::vector<ClassId> ids;
  for (std::size_t i = 1; i < header.size(); ++i) ids.emplace_back(header[i]);
  LabelIndex header_labels(std::move(ids));
  if (expected && !(header_labels == *expected)) {
    if (header_labels.size() != expected->size())
      throw ParseError(ErrorKind::kLabelMismatch, 1,
                       "header has " + std::to_string(header_labels.size()) + " labels, expected " +
                           std::to_string(expected->size()));
    throw ParseError(ErrorKind::kLabelMismatch, 1, "header label order differs from label index");
  }
  const std::size_t k = header_labels.size();
  std::vector<LabeledMolecule> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cols = split(lines[i], '\t');
    if (cols.size() != k + 1)
      throw ParseError(ErrorKind::kMalformedRow, i + 1,
                       "expected " + std::to_string(k + 1) + " columns, found " + std::to_string(cols.size()));
    if (cols[0].empty()) throw ParseError(ErrorKind::kMalformedRow, i + 1, "empty SMILES");
    LabeledMolecule m{cols[0], std::vector<std::uint8_t>(k, 0)};
    for (std::size_t j = 0; j < k; ++j) {
      if (cols[j + 1] == "1") {
        m.labels[j] = 1;
      } else if (cols[j + 1] != "0") {
        throw ParseError(ErrorKind::kMalformedRow, i + 1, "label value must be 0 or 1");
      }
    }
    if (m.label_count() == 0) throw ParseError(ErrorKind::kMalformedRow, i + 1, "row has no label set");
    rows.push_back(std::move(m));
  }
  if (header_out) *header_out = std::move(header_labels);
  return rows;
}

inline LabelIndex load_labels(const std::filesystem::path& path) {
  std::vector<ClassId> ids;
  for (const auto& line : split_lines(read_file(path))) {
    auto t = trim(line);
    if (!t.empty()) ids.emplace_back(std::string(t));
  }
  return LabelIndex(std::move(ids));
}

inline std::string labels_text(const LabelIndex& labels) {
  std::string out;
  for (const auto& id : labels.ids()) out += id.str() + "\n";
  return out;
}

inline void save_tsv(const DatasetSplits& splits, const LabelIndex& labels, const std::filesystem::path& dir) {
  for (const auto* part : {&splits.train, &splits.validation, &splits.test})
    for (const auto& m : *part)
      if (m.labels.size() != labels.size())
        throw Error(ErrorKind::kLabelMismatch, "label vector length differs from label index");
  write_file_atomic(dir / "labels.txt", labels_text(labels));
  write_file_atomic(dir / "train.tsv", to_tsv(splits.train, labels));
  write_file_atomic(dir / "validation.tsv", to_tsv(splits.validation, labels));
  write_file_atomic(dir / "test.tsv", to_tsv(splits.test, labels));
  write_file_atomic(dir / "splits.meta", "seed=" + std::to_string(splits.seed) + "\n");
}

inline std::vector<LabeledMolecule> load_split_file(const std::filesystem::path& path, const LabelIndex& labels) {
  try {
    return parse_tsv(read_file(path), &labels);
  } catch (const ParseError& e) {
    throw Error(e.kind(), path.filename().string() + ": " + e.what());
  }
}

struct LoadedDataset {
  LabelIndex labels;
  DatasetSplits splits;
};

inline LoadedDataset load_tsv(const std::filesystem::path& dir) {
  LoadedDataset out;
  out.labels = load_labels(dir / "labels.txt");
  out.splits.train = load_split_file(dir / "train.tsv", out.labels);
  out.splits.validation = load_split_file(dir / "validation.tsv", out.labels);
  out.splits.test = load_split_file(dir / "test.tsv", out.labels);
  if (std::filesystem::exists(dir / "splits.meta")) {
    for (const auto& line : split_lines(read_file(dir / "splits.meta")))
      if (line.rfind("seed=", 0) == 0) out.splits.seed = std::stoull(line.substr(5));
  }
  return out;
}

}  // namespace ontoext
