#include <gtest/gtest.h>

#include <cmath>

#include "ontoext/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ontoext;

namespace {

// Moves every value away from the special initial points (unit scales, zero
// biases) so that every code path carries signal.
ParameterStore<double> jittered(const ModelConfig& c, std::uint64_t seed, double spread = 0.4) {
  auto p = init_model<double>(c);
  Rng rng(seed);
  for (auto& t : p)
    for (auto& v : t.value) v = (t.name.ends_with(".scale") ? 1.0 : 0.0) + spread * rng.normal();
  return p;
}

std::vector<TrainingExample> multilabel_batch(Rng& rng, const ModelConfig& c) {
  std::vector<TrainingExample> b;
  for (std::size_t i = 0; i < 3; ++i) {
    TrainingExample ex;
    ex.input = oracle::random_sequence(rng, c, 2 + i, i);
    for (std::size_t j = 0; j < c.n_labels; ++j) ex.labels.push_back(static_cast<std::uint8_t>(rng.below(2)));
    b.push_back(ex);
  }
  return b;
}

std::vector<TrainingExample> mlm_batch(Rng& rng, const ModelConfig& c) {
  std::vector<TrainingExample> b;
  for (std::size_t i = 0; i < 3; ++i) {
    TrainingExample ex;
    ex.input = oracle::random_sequence(rng, c, 4 + i, 1);
    for (std::size_t pos : {1ul, 3ul}) {
      ex.targets.push_back({pos, ex.input.ids[pos]});
      ex.input.ids[pos] = special::kMask;
    }
    b.push_back(ex);
  }
  return b;
}

}  // namespace

TEST(Init, ParameterCountMatchesShapeFormula) {
  const auto c = oracle::tiny_config();
  EXPECT_EQ(init_model<double>(c).parameter_count(), oracle::parameter_count(c));
  ModelConfig big;
  EXPECT_EQ(declare_parameters<float>(big).parameter_count(), oracle::parameter_count(big));
}

TEST(Init, DeterministicAndStructured) {
  const auto c = oracle::tiny_config(5);
  auto a = init_model<double>(c), b = init_model<double>(c);
  EXPECT_TRUE(a.same_values(b));
  auto other = c;
  other.seed = 6;
  EXPECT_FALSE(a.same_values(init_model<double>(other)));
  for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_EQ(a["embeddings.token"].value[j], 0.0);
  for (double v : a["layers.0.attn_norm.scale"].value) EXPECT_EQ(v, 1.0);
  for (double v : a["layers.1.ffn.in.bias"].value) EXPECT_EQ(v, 0.0);
  double sq = 0;
  const auto& w = a["layers.0.ffn.in.weight"].value;
  for (double v : w) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / double(w.size())), 0.02, 0.006);
}

TEST(Config, Validation) {
  auto c = oracle::tiny_config();
  c.n_heads = 3;
  EXPECT_THROW_KIND(c.validate(), ErrorKind::kInvalidArgument);
  c = oracle::tiny_config();
  c.attention_dropout = 1.0;
  EXPECT_THROW_KIND(c.validate(), ErrorKind::kInvalidArgument);
  c = oracle::tiny_config();
  c.n_layers = 0;
  EXPECT_THROW_KIND(c.validate(), ErrorKind::kInvalidArgument);
}

TEST(Forward, MatchesStraightLineOracle) {
  const auto c = oracle::tiny_config(3);
  const auto p = jittered(c, 11);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto seq = oracle::random_sequence(rng, c, 1 + rng.below(6), rng.below(3));
    const auto out = forward(p, c, {seq}, true)[0];
    const auto ref = oracle::forward(p, c, seq.ids);
    for (std::size_t j = 0; j < c.n_labels; ++j) {
      EXPECT_NEAR(out.logits[j], ref.logits[j], 1e-6);
      EXPECT_NEAR(out.probabilities[j], 1.0 / (1.0 + std::exp(-ref.logits[j])), 1e-6);
    }
    for (std::size_t t = 0; t < seq.size(); ++t)
      for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_NEAR(out.hidden[t * c.hidden_dim + j], ref.hidden[t][j], 1e-6);
    for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_EQ(out.pooled[j], out.hidden[j]);
    const auto& att = *out.attention;
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (std::size_t h = 0; h < c.n_heads; ++h)
        for (std::size_t q = 0; q < seq.size(); ++q)
          for (std::size_t k = 0; k < seq.size(); ++k) EXPECT_NEAR(att.at(l, h, q, k), ref.probs[l][h][q][k], 1e-9);
  }
}

TEST(Forward, SingleTokenAttentionRowSumsToOne) {
  auto c = oracle::tiny_config();
  c.n_heads = 1;
  const auto p = jittered(c, 2);
  const auto out = forward(p, c, {TokenSequence{{special::kBos, 7, special::kEos}}}, true)[0];
  for (std::size_t q = 0; q < 3; ++q) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += out.attention->at(0, 0, q, k);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, Errors) {
  const auto c = oracle::tiny_config();
  const auto p = init_model<double>(c);
  EXPECT_THROW_KIND(forward(p, c, {TokenSequence{std::vector<TokenId>(c.max_len + 1, 7)}}), ErrorKind::kTooLong);
  EXPECT_THROW_KIND(forward(p, c, {TokenSequence{{special::kBos, 99, special::kEos}}}), ErrorKind::kInvalidToken);
  EXPECT_THROW_KIND(forward(p, c, {TokenSequence{}}), ErrorKind::kInvalidArgument);
}

TEST(Properties, AttentionNormalizationAndPadding) {
  const auto c = oracle::tiny_config(8);
  const auto p = jittered(c, 8, 0.6);
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t content = 1 + rng.below(5);
    const std::size_t pad = rng.below(c.max_len - content - 1);
    const auto padded = oracle::random_sequence(rng, c, content, pad);
    TokenSequence plain{{padded.ids.begin(), padded.ids.begin() + static_cast<std::ptrdiff_t>(content + 2)}};
    const auto a = forward(p, c, {padded}, true)[0];
    const auto b = forward(p, c, {plain}, false)[0];
    const auto& att = *a.attention;
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (std::size_t h = 0; h < c.n_heads; ++h)
        for (std::size_t q = 0; q < padded.size(); ++q) {
          double s = 0;
          for (std::size_t k = 0; k < padded.size(); ++k) {
            s += att.at(l, h, q, k);
            if (att.is_pad(k)) EXPECT_EQ(att.at(l, h, q, k), 0.0);
          }
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
    for (std::size_t i = 0; i < plain.size() * c.hidden_dim; ++i) EXPECT_NEAR(a.hidden[i], b.hidden[i], 1e-5);
    for (std::size_t j = 0; j < c.n_labels; ++j) {
      EXPECT_NEAR(a.logits[j], b.logits[j], 1e-5);
      EXPECT_GT(a.probabilities[j], 0.0);
      EXPECT_LT(a.probabilities[j], 1.0);
    }
  }
}

TEST(Properties, InferenceIsBitwiseStable) {
  const auto c = oracle::tiny_config(9);
  const auto p = jittered(c, 9);
  Rng rng(3);
  const auto seq = oracle::random_sequence(rng, c, 5, 2);
  const auto a = forward(p, c, {seq})[0], b = forward(p, c, {seq})[0];
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(a.logits, b.logits);
}

TEST(Dropout, ChangesOutputsOnlyInTrainingMode) {
  auto c = oracle::tiny_config(2);
  c.attention_dropout = 0.5;
  const auto p = jittered(c, 2);
  Rng rng(3);
  const auto seq = oracle::random_sequence(rng, c, 6);
  Rng d1(1), d2(1);
  const auto t1 = forward(p, c, {seq}, false, &d1)[0], t2 = forward(p, c, {seq}, false, &d2)[0];
  EXPECT_EQ(t1.logits, t2.logits);
  const auto inference = forward(p, c, {seq})[0];
  EXPECT_NE(t1.logits, inference.logits);
  c.attention_dropout = 0.0;
  EXPECT_EQ(forward(p, c, {seq})[0].logits, inference.logits);
}

TEST(MlmLogits, UniformForZeroHiddenAndOracleArgmax) {
  const auto c = oracle::tiny_config(4);
  auto p = jittered(c, 4);
  std::fill(p["mlm.bias"].value.begin(), p["mlm.bias"].value.end(), 0.0);
  std::vector<double> zero(2 * c.hidden_dim, 0.0);
  const std::vector<std::size_t> one{1};
  auto z = mlm_logits<double>(p, c, zero, one);
  ASSERT_EQ(z.size(), c.vocab_size);
  for (double v : z) EXPECT_EQ(v, 0.0);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW_KIND(mlm_logits<double>(p, c, zero, bad), ErrorKind::kInvalidArgument);

  p = jittered(c, 5);
  Rng rng(6);
  const auto seq = oracle::random_sequence(rng, c, 4);
  const auto out = forward(p, c, {seq})[0];
  const auto ref = oracle::forward(p, c, seq.ids);
  const std::vector<std::size_t> pos{2};
  const auto got = mlm_logits<double>(p, c, out.hidden, pos);
  const auto want = oracle::mlm_row(p, ref.hidden[2]);
  for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(got[v], want[v], 1e-6);
  EXPECT_EQ(std::max_element(got.begin(), got.end()) - got.begin(),
            std::max_element(want.begin(), want.end()) - want.begin());
}

TEST(Loss, ZeroLogitsGiveLn2) {
  const auto c = oracle::tiny_config();
  auto p = init_model<double>(c);
  std::fill(p["classifier.weight"].value.begin(), p["classifier.weight"].value.end(), 0.0);
  Rng rng(1);
  auto batch = multilabel_batch(rng, c);
  EXPECT_NEAR(compute_loss(p, c, batch, Objective::kMultilabel), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_and_grad(p, c, batch, Objective::kMultilabel), std::log(2.0), 1e-12);
}

TEST(Loss, SaturatedPerfectLabels) {
  const auto c = oracle::tiny_config();
  auto p = init_model<double>(c);
  std::fill(p["classifier.weight"].value.begin(), p["classifier.weight"].value.end(), 0.0);
  p["classifier.bias"].value = {20.0, -20.0, 20.0};
  Rng rng(1);
  auto batch = multilabel_batch(rng, c);
  for (auto& ex : batch) ex.labels = {1, 0, 1};
  EXPECT_LT(compute_loss(p, c, batch, Objective::kMultilabel), 1e-8);
}

TEST(Loss, Errors) {
  const auto c = oracle::tiny_config();
  auto p = init_model<double>(c);
  EXPECT_THROW_KIND(loss_and_grad(p, c, {}, Objective::kMultilabel), ErrorKind::kInvalidArgument);
  Rng rng(1);
  auto batch = multilabel_batch(rng, c);
  batch[0].labels.pop_back();
  EXPECT_THROW_KIND(loss_and_grad(p, c, batch, Objective::kMultilabel), ErrorKind::kLabelMismatch);
  auto mlm = mlm_batch(rng, c);
  for (auto& ex : mlm) ex.targets.clear();
  EXPECT_THROW_KIND(loss_and_grad(p, c, mlm, Objective::kMlm), ErrorKind::kInvalidArgument);
  p["classifier.bias"].value[0] = std::numeric_limits<double>::quiet_NaN();
  auto ok = multilabel_batch(rng, c);
  EXPECT_THROW_KIND(loss_and_grad(p, c, ok, Objective::kMultilabel), ErrorKind::kNumeric);
}

TEST(GradientCheck, Multilabel) {
  const auto c = oracle::tiny_config(12);
  Rng rng(12);
  const auto r = oracle::gradient_check(jittered(c, 12), c, multilabel_batch(rng, c), Objective::kMultilabel);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_parameter;
  EXPECT_EQ(r.checked, oracle::parameter_count(c));
}

TEST(GradientCheck, SoftmaxMlm) {
  const auto c = oracle::tiny_config(13);
  Rng rng(13);
  const auto r = oracle::gradient_check(jittered(c, 13), c, mlm_batch(rng, c), Objective::kMlm);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_parameter;
}

TEST(GradientCheck, BinaryMlmAndTanhGelu) {
  auto c = oracle::tiny_config(14);
  c.mlm_loss = MlmLoss::kBinary;
  c.activation = Activation::kGeluTanh;
  Rng rng(14);
  const auto r = oracle::gradient_check(jittered(c, 14), c, mlm_batch(rng, c), Objective::kMlm);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_parameter;
}

TEST(Persistence, BitwiseRoundTrip) {
  const auto c = oracle::tiny_config(15);
  const auto p = jittered(c, 15);
  const auto bytes = serialize_model(c, p);
  auto [c2, p2] = deserialize_model<double>(bytes);
  EXPECT_EQ(c2, c);
  EXPECT_TRUE(p2.same_values(p));
  EXPECT_EQ(serialize_model(c2, p2), bytes);
  EXPECT_EQ(bytes.substr(0, 8), "ONTOXMDL");
  auto corrupt = bytes;
  corrupt[0] = 'X';
  EXPECT_THROW_KIND(deserialize_model<double>(corrupt), ErrorKind::kVersion);
}

TEST(ResizeHead, KeepsEncoderWeights) {
  auto c = oracle::tiny_config(16);
  auto p = jittered(c, 16);
  const auto before = p;
  resize_label_head(p, c, 7, 3);
  EXPECT_EQ(c.n_labels, 7u);
  EXPECT_EQ(p["classifier.weight"].size(), c.hidden_dim * 7);
  EXPECT_EQ(p["layers.1.ffn.out.weight"].value, before["layers.1.ffn.out.weight"].value);
  EXPECT_EQ(p["embeddings.token"].value, before["embeddings.token"].value);
}

TEST(Precision, FloatTracksDouble) {
  const auto c = oracle::tiny_config(17);
  const auto p = jittered(c, 17);
  const auto pf = p.cast<float>();
  Rng rng(1);
  const auto seq = oracle::random_sequence(rng, c, 5);
  const auto a = forward(p, c, {seq})[0];
  const auto b = forward(pf, c, {seq})[0];
  for (std::size_t j = 0; j < c.n_labels; ++j) EXPECT_NEAR(a.logits[j], b.logits[j], 1e-4);
}
