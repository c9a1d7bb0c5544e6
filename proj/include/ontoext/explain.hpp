#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ontoext/bpe.hpp"
#include "ontoext/error.hpp"
#include "ontoext/model.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

// Importance per real (non-special) token, in sequence order.
struct TokenAttribution {
  std::vector<std::size_t> positions;
  std::vector<TokenId> ids;
  std::vector<std::string> tokens;
  std::vector<double> scores;

  std::size_t size() const { return scores.size(); }
};

// Percent of each head's attention received by each real token.
// rows are (layer, head) pairs in layer-major order.
struct HeadTokenShare {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<std::string> tokens;
  std::vector<TokenId> ids;
  std::vector<double> percent;  // [row][token]

  std::size_t rows() const { return n_layers * n_heads; }
  std::size_t cols() const { return tokens.size(); }
  double at(std::size_t row, std::size_t col) const { return percent[row * cols() + col]; }
};

namespace detail {

inline std::string token_text(const Tokenizer* tok, TokenId id) {
  if (tok && static_cast<std::size_t>(id) < tok->vocab_size()) return tok->token(id);
  return "#" + std::to_string(id);
}

inline std::vector<std::size_t> real_positions(const AttentionSummary& att) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < att.seq_len; ++t)
    if (att.is_content(t)) out.push_back(t);
  return out;
}

inline void require_attention(const AttentionSummary& att) {
  if (att.weights.empty() || att.seq_len == 0)
    throw Error(ErrorKind::kInvalidArgument, "attention was not captured");
  if (att.weights.size() != att.n_layers * att.n_heads * att.seq_len * att.seq_len || att.ids.size() != att.seq_len)
    throw Error(ErrorKind::kInvalidArgument, "attention summary has inconsistent shape");
}

}  // namespace detail

// Mean over heads and non-PAD queries of attention given to each real key in
// `layer` (default: the last), renormalized over real keys.
inline TokenAttribution token_importance(const AttentionSummary& att, std::optional<std::size_t> layer = std::nullopt,
                                         const Tokenizer* tok = nullptr) {
  detail::require_attention(att);
  const std::size_t l = layer.value_or(att.n_layers - 1);
  if (l >= att.n_layers) throw Error(ErrorKind::kInvalidArgument, "layer " + std::to_string(l) + " out of range");
  TokenAttribution out;
  out.positions = detail::real_positions(att);
  if (out.positions.empty()) return out;
  std::vector<double> raw(out.positions.size(), 0.0);
  for (std::size_t h = 0; h < att.n_heads; ++h)
    for (std::size_t q = 0; q < att.seq_len; ++q) {
      if (att.is_pad(q)) continue;
      for (std::size_t i = 0; i < out.positions.size(); ++i) raw[i] += att.at(l, h, q, out.positions[i]);
    }
  double total = 0.0;
  for (double v : raw) total += v;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const TokenId id = att.ids[out.positions[i]];
    out.ids.push_back(id);
    out.tokens.push_back(detail::token_text(tok, id));
    out.scores.push_back(total > 0.0 ? raw[i] / total : 1.0 / static_cast<double>(raw.size()));
  }
  return out;
}

inline HeadTokenShare head_token_share(const AttentionSummary& att, const Tokenizer* tok = nullptr) {
  detail::require_attention(att);
  HeadTokenShare out;
  out.n_layers = att.n_layers;
  out.n_heads = att.n_heads;
  const auto pos = detail::real_positions(att);
  for (auto p : pos) {
    out.ids.push_back(att.ids[p]);
    out.tokens.push_back(detail::token_text(tok, att.ids[p]));
  }
  out.percent.assign(out.rows() * pos.size(), 0.0);
  if (pos.empty()) return out;
  std::vector<double> raw(pos.size());
  for (std::size_t l = 0; l < att.n_layers; ++l)
    for (std::size_t h = 0; h < att.n_heads; ++h) {
      std::fill(raw.begin(), raw.end(), 0.0);
      for (std::size_t q = 0; q < att.seq_len; ++q) {
        if (att.is_pad(q)) continue;
        for (std::size_t i = 0; i < pos.size(); ++i) raw[i] += att.at(l, h, q, pos[i]);
      }
      double total = 0.0;
      for (double v : raw) total += v;
      double* row = out.percent.data() + (l * att.n_heads + h) * pos.size();
      for (std::size_t i = 0; i < pos.size(); ++i)
        row[i] = total > 0.0 ? 100.0 * raw[i] / total : 100.0 / static_cast<double>(pos.size());
    }
  return out;
}

// Corpus view: per-molecule shares summed by token type, then averaged over
// molecules. Columns are the distinct token ids in ascending order.
inline HeadTokenShare average_shares(const std::vector<HeadTokenShare>& per_molecule) {
  if (per_molecule.empty()) throw Error(ErrorKind::kInvalidArgument, "no share matrices to average");
  HeadTokenShare out;
  out.n_layers = per_molecule.front().n_layers;
  out.n_heads = per_molecule.front().n_heads;
  std::map<TokenId, std::string> columns;
  for (const auto& s : per_molecule) {
    if (s.n_layers != out.n_layers || s.n_heads != out.n_heads)
      throw Error(ErrorKind::kInvalidArgument, "share matrices come from different architectures");
    for (std::size_t i = 0; i < s.cols(); ++i) columns.emplace(s.ids[i], s.tokens[i]);
  }
  std::map<TokenId, std::size_t> col_of;
  for (const auto& [id, text] : columns) {
    col_of[id] = out.ids.size();
    out.ids.push_back(id);
    out.tokens.push_back(text);
  }
  out.percent.assign(out.rows() * out.cols(), 0.0);
  std::size_t used = 0;
  for (const auto& s : per_molecule) {
    if (s.cols() == 0) continue;
    ++used;
    for (std::size_t r = 0; r < s.rows(); ++r)
      for (std::size_t i = 0; i < s.cols(); ++i) out.percent[r * out.cols() + col_of[s.ids[i]]] += s.at(r, i);
  }
  if (used)
    for (auto& v : out.percent) v /= static_cast<double>(used);
  return out;
}

struct Prediction {
  std::string class_id;
  std::string name;
  double probability = 0.0;
};

// Shade bucket 0..4 relative to the most important token.
inline int importance_quintile(double score, double max_score) {
  if (!(max_score > 0.0)) return 0;
  return std::min(4, static_cast<int>(std::floor(5.0 * score / max_score)));
}

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string render_report(const std::string& smiles, const TokenAttribution& attribution,
                                 const HeadTokenShare& shares, const std::vector<Prediction>& predictions,
                                 double threshold) {
  std::string h;
  h += "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" + html_escape(smiles) + "</title>\n";
  h += "<style>\n"
       "body{font-family:sans-serif;margin:2em}\n"
       ".smiles{font-family:monospace;font-size:1.4em}\n"
       ".tok{padding:0 1px}\n"
       ".q0{background:#f7fcf5}.q1{background:#c7e9c0}.q2{background:#74c476}.q3{background:#31a354}"
       ".q4{background:#006d2c;color:#fff}\n"
       "table.grid{border-collapse:collapse;font-family:monospace}\n"
       "table.grid td,table.grid th{border:1px solid #ccc;padding:2px 4px;text-align:right}\n"
       ".banner{padding:0.5em;background:#fee;border:1px solid #c33}\n"
       "</style>\n</head>\n<body>\n";
  h += "<h1>Attention report</h1>\n<p>SMILES: <code>" + html_escape(smiles) + "</code></p>\n";

  h += "<h2>Token importance</h2>\n<div class=\"smiles\">";
  double mx = 0.0;
  for (double s : attribution.scores) mx = std::max(mx, s);
  for (std::size_t i = 0; i < attribution.size(); ++i) {
    h += "<span class=\"tok q" + std::to_string(importance_quintile(attribution.scores[i], mx)) + "\" title=\"" +
         format_fixed(attribution.scores[i], 4) + "\">" + html_escape(attribution.tokens[i]) + "</span>";
  }
  h += "</div>\n";

  h += "<h2>Predicted classes</h2>\n";
  if (predictions.empty()) {
    h += "<p class=\"banner\">no class above threshold " + format_fixed(threshold, 2) + "</p>\n";
  } else {
    h += "<table class=\"grid\">\n<tr><th>class</th><th>name</th><th>probability</th></tr>\n";
    for (const auto& p : predictions)
      h += "<tr><td>" + html_escape(p.class_id) + "</td><td>" + html_escape(p.name) + "</td><td>" +
           format_fixed(p.probability, 4) + "</td></tr>\n";
    h += "</table>\n";
  }

  h += "<h2>Attention share per head (%)</h2>\n<table class=\"grid\">\n<tr><th>layer-head</th>";
  for (const auto& t : shares.tokens) h += "<th>" + html_escape(t) + "</th>";
  h += "</tr>\n";
  for (std::size_t l = 0; l < shares.n_layers; ++l)
    for (std::size_t hd = 0; hd < shares.n_heads; ++hd) {
      const std::size_t r = l * shares.n_heads + hd;
      h += "<tr><th>" + std::to_string(l + 1) + "-" + std::to_string(hd + 1) + "</th>";
      for (std::size_t c = 0; c < shares.cols(); ++c) {
        const double v = shares.at(r, c);
        const int alpha = static_cast<int>(std::lround(std::clamp(v, 0.0, 100.0) * 0.8));
        h += "<td style=\"background:rgba(0,109,44," + format_fixed(alpha / 100.0, 2) + ")\">" + format_fixed(v, 1) +
             "</td>";
      }
      h += "</tr>\n";
    }
  h += "</table>\n</body>\n</html>\n";
  return h;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string attribution_csv(const TokenAttribution& a) {
  std::string out = "token_index,token,score\n";
  for (std::size_t i = 0; i < a.size(); ++i)
    out += std::to_string(a.positions[i]) + "," + csv_field(a.tokens[i]) + "," + format_double(a.scores[i]) + "\n";
  return out;
}

inline std::string shares_csv(const HeadTokenShare& s) {
  std::string out = "layer,head,token_index,token,percent\n";
  for (std::size_t l = 0; l < s.n_layers; ++l)
    for (std::size_t h = 0; h < s.n_heads; ++h)
      for (std::size_t c = 0; c < s.cols(); ++c)
        out += std::to_string(l) + "," + std::to_string(h) + "," + std::to_string(c) + "," + csv_field(s.tokens[c]) +
               "," + format_double(s.at(l * s.n_heads + h, c)) + "\n";
  return out;
}

}  // namespace ontoext
