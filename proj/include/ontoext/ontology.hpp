#pragma once

#include <algorithm>
#include <compare>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ontoext/error.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

// Opaque ontology class identifier, e.g. "CHEBI:22908".
struct ClassId {
  std::string value;

  ClassId() = default;
  explicit ClassId(std::string v) : value(std::move(v)) {}

  bool empty() const { return value.empty(); }
  const std::string& str() const { return value; }

  friend auto operator<=>(const ClassId&, const ClassId&) = default;
  friend bool operator==(const ClassId&, const ClassId&) = default;
};

struct OntologyClass {
  ClassId id;
  std::string name;
  std::optional<std::string> smiles;
  std::set<ClassId> parents;
  bool obsolete = false;
  // Free text emitted after "!" on an is_a line, keyed by parent.
  std::map<ClassId, std::string> parent_comments;
  // Stanza lines outside the supported subset, kept verbatim.
  std::vector<std::string> extra_lines;

  friend bool operator==(const OntologyClass&, const OntologyClass&) = default;
};

// Immutable, validated class hierarchy. Every parent reference resolves and
// the is_a relation is acyclic.
class OntologyGraph {
 public:
  OntologyGraph() = default;

  // Validates and indexes a set of classes. Throws kDuplicateId,
  // kDanglingReference or kCycle.
  static OntologyGraph build(std::vector<OntologyClass> classes,
                             std::vector<std::string> header_lines = {},
                             std::vector<std::string> other_stanzas = {});

  std::size_t size() const { return classes_.size(); }
  bool empty() const { return classes_.empty(); }
  bool contains(const ClassId& id) const { return classes_.count(id) != 0; }

  const OntologyClass& at(const ClassId& id) const {
    auto it = classes_.find(id);
    if (it == classes_.end()) throw Error(ErrorKind::kUnknownId, "unknown class " + id.str());
    return it->second;
  }

  const std::map<ClassId, OntologyClass>& classes() const { return classes_; }

  const std::vector<ClassId>& children(const ClassId& id) const {
    static const std::vector<ClassId> kNone;
    auto it = children_.find(id);
    return it == children_.end() ? kNone : it->second;
  }

  bool is_leaf(const ClassId& id) const { return children(id).empty(); }

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& [id, cls] : classes_) n += cls.parents.size();
    return n;
  }

  const std::vector<std::string>& header_lines() const { return header_lines_; }
  const std::vector<std::string>& other_stanzas() const { return other_stanzas_; }

  friend bool operator==(const OntologyGraph& a, const OntologyGraph& b) {
    return a.classes_ == b.classes_ && a.header_lines_ == b.header_lines_ &&
           a.other_stanzas_ == b.other_stanzas_;
  }

 private:
  std::map<ClassId, OntologyClass> classes_;
  std::map<ClassId, std::vector<ClassId>> children_;
  std::vector<std::string> header_lines_;
  std::vector<std::string> other_stanzas_;
};

// Returns one cycle (closed path, first id repeated at the end) if the parent
// relation over `classes` has any. Parents missing from the map are ignored.
inline std::optional<std::vector<ClassId>> find_cycle(const std::map<ClassId, OntologyClass>& classes) {
  enum class Mark : char { kWhite, kGrey, kBlack };
  std::map<ClassId, Mark> mark;
  for (const auto& [id, _] : classes) mark[id] = Mark::kWhite;

  for (const auto& [root, _] : classes) {
    if (mark[root] != Mark::kWhite) continue;
    // Iterative DFS; the stack holds (node, next-parent iterator).
    std::vector<std::pair<ClassId, std::set<ClassId>::const_iterator>> stack;
    mark[root] = Mark::kGrey;
    stack.emplace_back(root, classes.at(root).parents.begin());
    while (!stack.empty()) {
      auto& [node, it] = stack.back();
      const auto& parents = classes.at(node).parents;
      if (it == parents.end()) {
        mark[node] = Mark::kBlack;
        stack.pop_back();
        continue;
      }
      const ClassId next = *it++;
      auto m = mark.find(next);
      if (m == mark.end()) continue;
      if (m->second == Mark::kGrey) {
        std::vector<ClassId> cycle;
        auto start = std::find_if(stack.begin(), stack.end(),
                                  [&](const auto& frame) { return frame.first == next; });
        for (auto f = start; f != stack.end(); ++f) cycle.push_back(f->first);
        cycle.push_back(next);
        return cycle;
      }
      if (m->second == Mark::kWhite) {
        m->second = Mark::kGrey;
        stack.emplace_back(next, classes.at(next).parents.begin());
      }
    }
  }
  return std::nullopt;
}

inline std::string describe_cycle(const std::vector<ClassId>& cycle) {
  std::string s;
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    if (i) s += " -> ";
    s += cycle[i].str();
  }
  return s;
}

inline OntologyGraph OntologyGraph::build(std::vector<OntologyClass> classes,
                                          std::vector<std::string> header_lines,
                                          std::vector<std::string> other_stanzas) {
  OntologyGraph g;
  for (auto& cls : classes) {
    if (cls.id.empty()) throw Error(ErrorKind::kInvalidArgument, "class with empty id");
    if (cls.smiles && cls.smiles->empty())
      throw Error(ErrorKind::kInvalidArgument, "empty SMILES on " + cls.id.str());
    if (cls.parents.count(cls.id))
      throw Error(ErrorKind::kCycle, "cycle detected: " + cls.id.str() + " -> " + cls.id.str());
    ClassId id = cls.id;
    if (!g.classes_.emplace(id, std::move(cls)).second)
      throw Error(ErrorKind::kDuplicateId, "duplicate id " + id.str());
  }
  for (const auto& [id, cls] : g.classes_) {
    for (const auto& p : cls.parents) {
      if (!g.classes_.count(p))
        throw Error(ErrorKind::kDanglingReference, id.str() + " is_a undeclared " + p.str());
      g.children_[p].push_back(id);
    }
  }
  if (auto cycle = find_cycle(g.classes_))
    throw Error(ErrorKind::kCycle, "cycle detected: " + describe_cycle(*cycle));
  g.header_lines_ = std::move(header_lines);
  g.other_stanzas_ = std::move(other_stanzas);
  return g;
}

// Kahn's algorithm; parents come before children. Throws kCycle on failure.
inline std::vector<ClassId> topological_order(const OntologyGraph& graph) {
  std::map<ClassId, std::size_t> pending;
  std::deque<ClassId> ready;
  for (const auto& [id, cls] : graph.classes()) {
    pending[id] = cls.parents.size();
    if (cls.parents.empty()) ready.push_back(id);
  }
  std::vector<ClassId> order;
  order.reserve(graph.size());
  while (!ready.empty()) {
    ClassId id = ready.front();
    ready.pop_front();
    for (const auto& child : graph.children(id))
      if (--pending[child] == 0) ready.push_back(child);
    order.push_back(std::move(id));
  }
  if (order.size() != graph.size()) throw Error(ErrorKind::kCycle, "graph is cyclic");
  return order;
}

// Transitive superclasses of `id`, excluding `id` itself.
inline std::set<ClassId> ancestors(const OntologyGraph& graph, const ClassId& id) {
  std::set<ClassId> seen;
  std::deque<ClassId> queue;
  for (const auto& p : graph.at(id).parents) queue.push_back(p);
  while (!queue.empty()) {
    ClassId cur = std::move(queue.front());
    queue.pop_front();
    if (!seen.insert(cur).second) continue;
    for (const auto& p : graph.at(cur).parents)
      if (!seen.count(p)) queue.push_back(p);
  }
  return seen;
}

// Leaves (no subclasses) that carry a SMILES annotation and are not obsolete.
inline std::set<ClassId> structured_leaves(const OntologyGraph& graph) {
  std::set<ClassId> out;
  for (const auto& [id, cls] : graph.classes())
    if (cls.smiles && !cls.obsolete && graph.is_leaf(id)) out.insert(id);
  return out;
}

struct Addition {
  OntologyClass cls;
  std::vector<ClassId> superclasses;
};

// Returns a new graph with every addition inserted as a leaf. The input graph
// is left untouched.
inline OntologyGraph insert_subsumptions(const OntologyGraph& graph, const std::vector<Addition>& additions) {
  if (additions.empty()) return graph;
  std::vector<OntologyClass> classes;
  classes.reserve(graph.size() + additions.size());
  for (const auto& [_, cls] : graph.classes()) classes.push_back(cls);

  std::set<ClassId> fresh;
  for (const auto& add : additions) {
    if (add.cls.id.empty()) throw Error(ErrorKind::kInvalidArgument, "new class with empty id");
    if (graph.contains(add.cls.id) || !fresh.insert(add.cls.id).second)
      throw Error(ErrorKind::kDuplicateId, "duplicate id " + add.cls.id.str());
  }
  for (const auto& add : additions) {
    OntologyClass cls = add.cls;
    for (const auto& sup : add.superclasses) {
      if (!graph.contains(sup))
        throw Error(ErrorKind::kUnknownId, "unknown superclass " + sup.str() + " for " + cls.id.str());
      cls.parents.insert(sup);
    }
    for (const auto& p : cls.parents)
      if (!graph.contains(p))
        throw Error(ErrorKind::kUnknownId, "unknown superclass " + p.str() + " for " + cls.id.str());
    classes.push_back(std::move(cls));
  }
  OntologyGraph out = [&] {
    try {
      return OntologyGraph::build(std::move(classes), graph.header_lines(), graph.other_stanzas());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kCycle) throw Error(ErrorKind::kCycle, std::string("would create cycle: ") + e.what());
      throw;
    }
  }();
  for (const auto& add : additions)
    if (!out.is_leaf(add.cls.id))
      throw Error(ErrorKind::kInvalidArgument, "added class " + add.cls.id.str() + " is not a leaf");
  return out;
}

// ---------------------------------------------------------------------------
// OBO subset reader/writer
// ---------------------------------------------------------------------------

struct OboOptions {
  std::string smiles_key = "http://purl.obolibrary.org/obo/chebi/smiles";
};

namespace detail {

inline std::string obo_unescape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == '\\' || s[i + 1] == '"')) {
      out.push_back(s[++i]);
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

inline std::string obo_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '\\' || c == '"') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

// Parses `"<text>" <rest>` and returns the unescaped text.
inline std::optional<std::string> parse_quoted(std::string_view s) {
  if (s.empty() || s.front() != '"') return std::nullopt;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] == '\\') {
      ++i;
      continue;
    }
    if (s[i] == '"') return obo_unescape(s.substr(1, i - 1));
  }
  return std::nullopt;
}

struct StanzaBuilder {
  OntologyClass cls;
  std::size_t start_line = 0;
  bool has_id = false;
};

}  // namespace detail

inline OntologyGraph parse_obo(std::string_view text, const OboOptions& options = {}) {
  std::vector<OntologyClass> classes;
  std::vector<std::string> header;
  std::vector<std::string> others;
  std::map<ClassId, std::size_t> id_lines;
  std::vector<std::pair<ClassId, std::size_t>> is_a_refs;

  enum class Section { kHeader, kTerm, kOther } section = Section::kHeader;
  std::optional<detail::StanzaBuilder> term;
  std::string other;

  auto finish = [&]() {
    if (section == Section::kTerm && term) {
      if (!term->has_id) throw ParseError(ErrorKind::kSyntax, term->start_line, "[Term] stanza without id");
      ClassId id = term->cls.id;
      auto [it, inserted] = id_lines.emplace(id, term->start_line);
      if (!inserted)
        throw ParseError(ErrorKind::kDuplicateId, term->start_line,
                         "duplicate id " + id.str() + " (first declared on line " + std::to_string(it->second) + ")");
      classes.push_back(std::move(term->cls));
      term.reset();
    } else if (section == Section::kOther) {
      while (!other.empty() && other.back() == '\n') other.pop_back();
      others.push_back(std::move(other));
      other.clear();
    }
  };

  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    const std::string& raw = lines[i];
    const std::string_view line = trim(raw);

    if (!line.empty() && line.front() == '[') {
      if (line.back() != ']') throw ParseError(ErrorKind::kSyntax, lineno, "malformed stanza header");
      finish();
      if (line == "[Term]") {
        section = Section::kTerm;
        term.emplace();
        term->start_line = lineno;
      } else {
        section = Section::kOther;
        other = std::string(line) + "\n";
      }
      continue;
    }

    if (section == Section::kHeader) {
      if (!line.empty()) header.push_back(raw);
      continue;
    }
    if (section == Section::kOther) {
      if (!line.empty()) other += raw + "\n";
      continue;
    }
    if (line.empty()) continue;

    const auto colon = line.find(':');
    if (line.front() == '!') {
      term->cls.extra_lines.push_back(std::string(line));
      continue;
    }
    if (colon == std::string_view::npos || colon == 0)
      throw ParseError(ErrorKind::kSyntax, lineno, "expected 'tag: value'");
    const std::string_view tag = line.substr(0, colon);
    const std::string_view value = trim(line.substr(colon + 1));
    auto& cls = term->cls;

    if (tag == "id") {
      if (value.empty()) throw ParseError(ErrorKind::kSyntax, lineno, "empty id");
      if (term->has_id) throw ParseError(ErrorKind::kSyntax, lineno, "second id in stanza");
      cls.id = ClassId(std::string(value));
      term->has_id = true;
    } else if (tag == "name") {
      cls.name = std::string(value);
    } else if (tag == "is_a") {
      std::string_view target = value;
      std::string comment;
      if (auto bang = target.find('!'); bang != std::string_view::npos) {
        comment = std::string(trim(target.substr(bang + 1)));
        target = trim(target.substr(0, bang));
      }
      if (auto ws = target.find_first_of(" \t"); ws != std::string_view::npos) target = target.substr(0, ws);
      if (target.empty()) throw ParseError(ErrorKind::kSyntax, lineno, "is_a without target");
      ClassId parent{std::string(target)};
      if (!comment.empty()) cls.parent_comments[parent] = comment;
      cls.parents.insert(parent);
      is_a_refs.emplace_back(parent, lineno);
    } else if (tag == "property_value" && value.substr(0, value.find_first_of(" \t")) == options.smiles_key) {
      const std::string_view rest = trim(value.substr(options.smiles_key.size()));
      auto smiles = detail::parse_quoted(rest);
      if (!smiles) throw ParseError(ErrorKind::kSyntax, lineno, "SMILES property without quoted value");
      if (smiles->empty()) throw ParseError(ErrorKind::kSyntax, lineno, "empty SMILES value");
      if (cls.smiles) throw ParseError(ErrorKind::kSyntax, lineno, "second SMILES property in stanza");
      cls.smiles = std::move(*smiles);
    } else {
      if (tag == "is_obsolete" && value == "true") cls.obsolete = true;
      cls.extra_lines.push_back(std::string(line));
    }
  }
  finish();

  // is_a lines may precede the id line, so resolve references afterwards.
  std::map<ClassId, std::string> names;
  for (const auto& cls : classes) names[cls.id] = cls.name;
  for (const auto& [target, line] : is_a_refs) {
    if (!id_lines.count(target))
      throw ParseError(ErrorKind::kDanglingReference, line, "is_a references undeclared " + target.str());
  }
  for (auto& cls : classes) {
    if (cls.parents.count(cls.id))
      throw ParseError(ErrorKind::kCycle, id_lines[cls.id], "cycle detected: " + cls.id.str() + " -> " + cls.id.str());
    // A comment that merely repeats the parent's name is regenerated on output.
    std::erase_if(cls.parent_comments, [&](const auto& kv) { return names[kv.first] == kv.second; });
  }
  return OntologyGraph::build(std::move(classes), std::move(header), std::move(others));
}

inline std::string serialize_obo(const OntologyGraph& graph, const OboOptions& options = {}) {
  std::string out;
  for (const auto& h : graph.header_lines()) out += h + "\n";
  if (!graph.header_lines().empty()) out += "\n";
  for (const auto& [id, cls] : graph.classes()) {
    out += "[Term]\nid: " + id.str() + "\n";
    if (!cls.name.empty()) out += "name: " + cls.name + "\n";
    for (const auto& line : cls.extra_lines) out += line + "\n";
    for (const auto& p : cls.parents) {
      out += "is_a: " + p.str();
      auto c = cls.parent_comments.find(p);
      if (c != cls.parent_comments.end()) {
        out += " ! " + c->second;
      } else if (!graph.at(p).name.empty()) {
        out += " ! " + graph.at(p).name;
      }
      out += "\n";
    }
    if (cls.smiles)
      out += "property_value: " + options.smiles_key + " \"" + detail::obo_escape(*cls.smiles) + "\" xsd:string\n";
    out += "\n";
  }
  for (const auto& stanza : graph.other_stanzas()) out += stanza + "\n\n";
  while (out.size() >= 2 && out[out.size() - 1] == '\n' && out[out.size() - 2] == '\n') out.pop_back();
  return out;
}

}  // namespace ontoext
