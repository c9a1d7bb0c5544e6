#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "ontoext/error.hpp"
#include "ontoext/util.hpp"

namespace ontoext {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kCount = 5;
inline constexpr std::string_view kNames[] = {"<pad>", "<unk>", "<s>", "</s>", "<mask>"};
}  // namespace special

inline bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }

// Model input: BOS, content tokens, EOS, then optional trailing PAD.
struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct DecodeResult {
  std::string text;
  bool lossy = false;  // an UNK token was rendered as a placeholder
};

struct EncodeResult {
  TokenSequence seq;
  bool truncated = false;
};

inline constexpr std::size_t kDefaultMaxLen = 512;

// Learned byte-pair-encoding state over SMILES characters. Immutable once
// trained or loaded.
class Tokenizer {
 public:
  Tokenizer() { reset_specials(); }

  std::size_t vocab_size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  // Content token ids for `s` (no BOS/EOS), merges applied in rank order.
  std::vector<TokenId> tokenize(std::string_view s) const {
    std::vector<TokenId> ids;
    ids.reserve(s.size());
    for (char c : s) {
      auto it = ids_.find(std::string(1, c));
      ids.push_back(it == ids_.end() ? special::kUnk : it->second);
    }
    if (ids.size() < 2 || merge_rank_.empty()) return ids;
    while (true) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = merge_rank_.find({ids[i], ids[i + 1]});
        if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second.first);
      }
      if (best_rank == SIZE_MAX) break;
      std::vector<TokenId> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i + 1 < ids.size()) {
          auto it = merge_rank_.find({ids[i], ids[i + 1]});
          if (it != merge_rank_.end() && it->second.first == best_rank) {
            next.push_back(it->second.second);
            ++i;
            continue;
          }
        }
        next.push_back(ids[i]);
      }
      ids.swap(next);
    }
    return ids;
  }

  // Throws kTooLong when BOS + content + EOS exceeds max_len.
  TokenSequence encode(std::string_view s, std::size_t max_len = kDefaultMaxLen) const {
    if (s.empty()) throw Error(ErrorKind::kInvalidArgument, "cannot encode empty SMILES");
    auto content = tokenize(s);
    if (content.size() + 2 > max_len)
      throw Error(ErrorKind::kTooLong, "SMILES encodes to " + std::to_string(content.size() + 2) +
                                           " tokens, limit " + std::to_string(max_len));
    return wrap(content);
  }

  // Inference-time variant: over-long input is cut to max_len (EOS kept).
  EncodeResult encode_truncating(std::string_view s, std::size_t max_len = kDefaultMaxLen) const {
    if (s.empty()) throw Error(ErrorKind::kInvalidArgument, "cannot encode empty SMILES");
    if (max_len < 3) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 3");
    auto content = tokenize(s);
    EncodeResult r;
    if (content.size() + 2 > max_len) {
      content.resize(max_len - 2);
      r.truncated = true;
      log_warn("tokenizer", "truncated over-long SMILES to " + std::to_string(max_len) + " tokens");
    }
    r.seq = wrap(content);
    return r;
  }

  DecodeResult decode(const TokenSequence& seq) const {
    DecodeResult r;
    for (TokenId id : seq.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw Error(ErrorKind::kInvalidToken, "token id " + std::to_string(id) + " out of range");
      if (id == special::kUnk) {
        r.text += special::kNames[special::kUnk];
        r.lossy = true;
      } else if (!is_special(id)) {
        r.text += tokens_[static_cast<std::size_t>(id)];
      }
    }
    return r;
  }

  std::string serialize() const {
    std::string out = "ontoext-bpe\t1\n";
    out += "vocab\t" + std::to_string(tokens_.size()) + "\n";
    for (std::size_t i = 0; i < tokens_.size(); ++i) out += std::to_string(i) + "\t" + tokens_[i] + "\n";
    out += "merges\t" + std::to_string(merges_.size()) + "\n";
    for (const auto& [l, r] : merges_) out += l + "\t" + r + "\n";
    return out;
  }

  static Tokenizer deserialize(std::string_view text) {
    const auto lines = split_lines(text);
    std::size_t pos = 0;
    auto next = [&]() -> const std::string& {
      if (pos >= lines.size()) throw ParseError(ErrorKind::kSyntax, pos + 1, "unexpected end of tokenizer file");
      return lines[pos++];
    };
    auto expect_count = [&](std::string_view tag) {
      const auto f = split(next(), '\t');
      if (f.size() != 2 || f[0] != tag) throw ParseError(ErrorKind::kSyntax, pos, "expected '" + std::string(tag) + "'");
      return static_cast<std::size_t>(std::stoull(f[1]));
    };
    const auto head = split(next(), '\t');
    if (head.size() != 2 || head[0] != "ontoext-bpe") throw ParseError(ErrorKind::kSyntax, 1, "not a tokenizer file");
    if (head[1] != "1") throw Error(ErrorKind::kVersion, "unsupported tokenizer version " + head[1]);

    Tokenizer t;
    t.tokens_.clear();
    t.ids_.clear();
    const std::size_t n_vocab = expect_count("vocab");
    for (std::size_t i = 0; i < n_vocab; ++i) {
      const std::string& line = next();
      const auto tab = line.find('\t');
      if (tab == std::string::npos || std::stoull(line.substr(0, tab)) != i)
        throw ParseError(ErrorKind::kSyntax, pos, "vocabulary ids must be contiguous");
      t.add_token(line.substr(tab + 1));
    }
    for (TokenId s = 0; s < special::kCount; ++s)
      if (t.tokens_.size() <= static_cast<std::size_t>(s) || t.tokens_[s] != special::kNames[s])
        throw ParseError(ErrorKind::kSyntax, 3, "reserved tokens missing");
    const std::size_t n_merges = expect_count("merges");
    for (std::size_t i = 0; i < n_merges; ++i) {
      const auto f = split(next(), '\t');
      if (f.size() != 2) throw ParseError(ErrorKind::kSyntax, pos, "merge line needs two fields");
      t.add_merge(f[0], f[1]);
    }
    return t;
  }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_;
  }

 private:
  friend Tokenizer train_bpe(const std::vector<std::string>&, std::size_t, std::size_t);

  void reset_specials() {
    tokens_.clear();
    ids_.clear();
    for (auto name : special::kNames) add_token(std::string(name));
  }

  TokenId add_token(const std::string& tok) {
    auto [it, inserted] = ids_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    if (inserted) tokens_.push_back(tok);
    return it->second;
  }

  void add_merge(const std::string& left, const std::string& right) {
    auto l = find(left), r = find(right), m = find(left + right);
    if (!l || !r || !m) throw Error(ErrorKind::kSyntax, "merge refers to unknown token: " + left + " + " + right);
    merge_rank_.emplace(std::make_pair(*l, *r), std::make_pair(merges_.size(), *m));
    merges_.emplace_back(left, right);
  }

  TokenSequence wrap(const std::vector<TokenId>& content) const {
    TokenSequence seq;
    seq.ids.reserve(content.size() + 2);
    seq.ids.push_back(special::kBos);
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.ids.push_back(special::kEos);
    return seq;
  }

  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<TokenId, TokenId>, std::pair<std::size_t, TokenId>> merge_rank_;
};

// Learns a character-level BPE vocabulary. Each SMILES string is one word.
// The most frequent adjacent pair is merged first; equal frequencies go to the
// lexicographically smaller (left, right) token pair. Training stops when the
// vocabulary reaches `target_vocab` or no pair occurs `min_frequency` times.
inline Tokenizer train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab,
                           std::size_t min_frequency = 2) {
  if (corpus.empty()) throw Error(ErrorKind::kInvalidArgument, "empty tokenizer corpus");
  std::set<char> alphabet;
  std::map<std::string, std::size_t> word_freq;
  for (const auto& s : corpus) {
    if (s.empty()) continue;
    alphabet.insert(s.begin(), s.end());
    ++word_freq[s];
  }
  if (alphabet.empty()) throw Error(ErrorKind::kInvalidArgument, "tokenizer corpus has no characters");
  const std::size_t base = alphabet.size() + special::kCount;
  if (target_vocab < base)
    throw Error(ErrorKind::kInvalidArgument, "target vocabulary " + std::to_string(target_vocab) +
                                                 " is smaller than alphabet + reserved (" + std::to_string(base) + ")");

  Tokenizer tok;
  for (char c : alphabet) tok.add_token(std::string(1, c));

  struct Word {
    std::vector<TokenId> ids;
    std::size_t freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    Word word{{}, f};
    for (char c : w) word.ids.push_back(*tok.find(std::string(1, c)));
    words.push_back(std::move(word));
  }

  using Pair = std::pair<TokenId, TokenId>;
  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;
  auto add_pairs = [&](std::size_t w, std::int64_t sign) {
    const auto& ids = words[w].ids;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const Pair p{ids[i], ids[i + 1]};
      counts[p] += sign * static_cast<std::int64_t>(words[w].freq);
      if (sign > 0) where[p].insert(w);
    }
  };
  for (std::size_t w = 0; w < words.size(); ++w) add_pairs(w, +1);

  while (tok.vocab_size() < target_vocab) {
    const Pair* best = nullptr;
    std::int64_t best_count = 0;
    for (const auto& [p, c] : counts) {
      if (c <= 0) continue;
      if (!best || c > best_count ||
          (c == best_count && std::tie(tok.token(p.first), tok.token(p.second)) <
                                  std::tie(tok.token(best->first), tok.token(best->second)))) {
        best = &p;
        best_count = c;
      }
    }
    if (!best || best_count < static_cast<std::int64_t>(min_frequency)) break;
    const Pair pair = *best;
    const std::string left = tok.token(pair.first), right = tok.token(pair.second);
    const TokenId merged = tok.add_token(left + right);
    tok.add_merge(left, right);

    const std::set<std::size_t> affected = where[pair];
    for (std::size_t w : affected) {
      add_pairs(w, -1);
      auto& ids = words[w].ids;
      std::vector<TokenId> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i + 1 < ids.size() && ids[i] == pair.first && ids[i + 1] == pair.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(ids[i]);
        }
      }
      ids.swap(next);
      add_pairs(w, +1);
    }
    std::erase_if(counts, [](const auto& kv) { return kv.second <= 0; });
  }
  return tok;
}

inline Tokenizer load_tokenizer(const std::filesystem::path& path) { return Tokenizer::deserialize(read_file(path)); }

}  // namespace ontoext
