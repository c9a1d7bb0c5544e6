#include <gtest/gtest.h>

#include "ontoext/explain.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ontoext;

namespace {

AttentionSummary capture(const ParameterStore<double>& p, const ModelConfig& c, const TokenSequence& seq) {
  return *forward(p, c, {seq}, true)[0].attention;
}

// Zero query and key projections make every score equal, so each query
// spreads its weight evenly over the non-PAD keys.
ParameterStore<double> uniform_attention_model(const ModelConfig& c) {
  auto p = init_model(c);
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (const char* n : {"attn.query.weight", "attn.query.bias", "attn.key.weight", "attn.key.bias"}) {
      auto& t = p["layers." + std::to_string(l) + "." + n];
      std::fill(t.value.begin(), t.value.end(), 0.0);
    }
  return p;
}

// Hand-built single-layer summary for exact arithmetic.
AttentionSummary manual(std::vector<TokenId> ids, std::size_t heads, std::vector<double> w) {
  AttentionSummary a;
  a.n_layers = 1;
  a.n_heads = heads;
  a.seq_len = ids.size();
  a.ids = std::move(ids);
  a.weights = std::move(w);
  return a;
}

}  // namespace

TEST(TokenImportance, SumsToOneOnRandomModels) {
  const auto c = oracle::tiny_config(5);
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto cc = c;
    cc.seed = 100 + trial;
    const auto p = init_model(cc);
    const auto seq = oracle::random_sequence(rng, cc, 1 + rng.below(8), rng.below(3));
    const auto att = capture(p, cc, seq);
    for (std::size_t l = 0; l < cc.n_layers; ++l) {
      const auto a = token_importance(att, l);
      double s = 0;
      for (double v : a.scores) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (auto pos : a.positions) EXPECT_FALSE(is_special(seq.ids[pos]));
    }
  }
}

TEST(TokenImportance, UniformAttentionIsExact) {
  const auto c = oracle::tiny_config(2);
  const auto p = uniform_attention_model(c);
  Rng rng(4);
  for (std::size_t content = 1; content <= 8; ++content) {
    const auto seq = oracle::random_sequence(rng, c, content, 2);
    const auto att = capture(p, c, seq);
    const auto a = token_importance(att);
    ASSERT_EQ(a.size(), content);
    for (double v : a.scores) EXPECT_DOUBLE_EQ(v, 1.0 / static_cast<double>(content));
    const auto s = head_token_share(att);
    for (std::size_t r = 0; r < s.rows(); ++r)
      for (std::size_t col = 0; col < s.cols(); ++col) EXPECT_DOUBLE_EQ(s.at(r, col), 100.0 / double(content));
  }
}

TEST(TokenImportance, HandComputedExample) {
  // BOS, A, B, EOS with one head. Column sums of real keys: A = 1.0, B = 2.0.
  const TokenId A = 7, B = 8;
  auto att = manual({special::kBos, A, B, special::kEos}, 1,
                    {0.25, 0.25, 0.25, 0.25,  //
                     0.0, 0.5, 0.5, 0.0,      //
                     0.0, 0.0, 1.0, 0.0,      //
                     0.5, 0.25, 0.25, 0.0});
  const auto a = token_importance(att);
  EXPECT_EQ(a.positions, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(a.ids, (std::vector<TokenId>{A, B}));
  EXPECT_DOUBLE_EQ(a.scores[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(a.scores[1], 2.0 / 3.0);
  EXPECT_EQ(a.tokens[0], "#7");
}

TEST(TokenImportance, PadQueriesIgnoredAndErrors) {
  const TokenId A = 7, B = 8;
  // The PAD query row points everything at A and must not count.
  auto att = manual({special::kBos, A, B, special::kPad}, 1,
                    {0.0, 0.5, 0.5, 0.0,  //
                     0.0, 0.5, 0.5, 0.0,  //
                     0.0, 0.5, 0.5, 0.0,  //
                     0.0, 1.0, 0.0, 0.0});
  const auto a = token_importance(att);
  EXPECT_DOUBLE_EQ(a.scores[0], 0.5);
  EXPECT_THROW_KIND(token_importance(att, 3), ErrorKind::kInvalidArgument);
  EXPECT_THROW_KIND(token_importance(AttentionSummary{}), ErrorKind::kInvalidArgument);
  auto bad = att;
  bad.weights.pop_back();
  EXPECT_THROW_KIND(head_token_share(bad), ErrorKind::kInvalidArgument);
}

TEST(HeadTokenShare, RowsSumToHundred) {
  const auto c = oracle::tiny_config(6);
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    auto cc = c;
    cc.seed = 500 + trial;
    const auto p = init_model(cc);
    const auto seq = oracle::random_sequence(rng, cc, 1 + rng.below(8), rng.below(3));
    const auto s = head_token_share(capture(p, cc, seq));
    ASSERT_EQ(s.rows(), cc.n_layers * cc.n_heads);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double sum = 0;
      for (std::size_t col = 0; col < s.cols(); ++col) sum += s.at(r, col);
      EXPECT_NEAR(sum, 100.0, 0.01);
    }
  }
}

TEST(AverageShares, AlignsByTokenAndKeepsRowSums) {
  const TokenId A = 7, B = 8, C = 9;
  HeadTokenShare x{1, 1, {"#7", "#8"}, {A, B}, {40.0, 60.0}};
  HeadTokenShare y{1, 1, {"#9", "#7"}, {C, A}, {30.0, 70.0}};
  const auto avg = average_shares({x, y});
  EXPECT_EQ(avg.ids, (std::vector<TokenId>{A, B, C}));
  EXPECT_DOUBLE_EQ(avg.at(0, 0), 55.0);
  EXPECT_DOUBLE_EQ(avg.at(0, 1), 30.0);
  EXPECT_DOUBLE_EQ(avg.at(0, 2), 15.0);
  EXPECT_THROW_KIND(average_shares({}), ErrorKind::kInvalidArgument);
  HeadTokenShare z{2, 1, {"#7"}, {A}, {100.0, 100.0}};
  EXPECT_THROW_KIND(average_shares({x, z}), ErrorKind::kInvalidArgument);
}

TEST(Render, QuintilesAndEscaping) {
  EXPECT_EQ(importance_quintile(0.0, 1.0), 0);
  EXPECT_EQ(importance_quintile(0.19, 1.0), 0);
  EXPECT_EQ(importance_quintile(0.2, 1.0), 1);
  EXPECT_EQ(importance_quintile(0.79, 1.0), 3);
  EXPECT_EQ(importance_quintile(1.0, 1.0), 4);
  EXPECT_EQ(importance_quintile(0.3, 0.0), 0);
  EXPECT_EQ(html_escape("a<b>&\"'"), "a&lt;b&gt;&amp;&quot;&#39;");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("x\"y"), "\"x\"\"y\"");
}

TEST(Render, DeterministicAndComplete) {
  const auto c = oracle::tiny_config(3);
  const auto p = init_model(c);
  Rng rng(2);
  const auto seq = oracle::random_sequence(rng, c, 5, 1);
  const auto att = capture(p, c, seq);
  const auto a = token_importance(att);
  const auto s = head_token_share(att);
  const std::vector<Prediction> preds = {{"CHEBI:1", "thing <x>", 0.91}};
  const auto h1 = render_report("C[Cl]&O", a, s, preds, 0.5);
  const auto h2 = render_report("C[Cl]&O", token_importance(capture(p, c, seq)), head_token_share(att), preds, 0.5);
  EXPECT_EQ(h1, h2);
  EXPECT_NE(h1.find("C[Cl]&amp;O"), std::string::npos);
  EXPECT_NE(h1.find("thing &lt;x&gt;"), std::string::npos);
  EXPECT_NE(h1.find("0.9100"), std::string::npos);
  EXPECT_NE(h1.find("class=\"tok q4\""), std::string::npos);
  EXPECT_EQ(h1.find("no class above threshold"), std::string::npos);
  const auto empty = render_report("CC", a, s, {}, 0.5);
  EXPECT_NE(empty.find("no class above threshold 0.50"), std::string::npos);
}

TEST(Csv, Layouts) {
  HeadTokenShare s{1, 2, {"C", "O"}, {7, 8}, {25.0, 75.0, 50.0, 50.0}};
  EXPECT_EQ(shares_csv(s),
            "layer,head,token_index,token,percent\n0,0,0,C,25\n0,0,1,O,75\n0,1,0,C,50\n0,1,1,O,50\n");
  TokenAttribution a{{1, 2}, {7, 8}, {"C", ","}, {0.25, 0.75}};
  EXPECT_EQ(attribution_csv(a), "token_index,token,score\n1,C,0.25\n2,\",\",0.75\n");
}
