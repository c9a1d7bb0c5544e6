#include <gtest/gtest.h>

#include "ontoext/config.hpp"
#include "test_util.hpp"

using namespace ontoext;

TEST(RunConfig, DefaultsMatchReferenceTable) {
  const RunConfig c;
  EXPECT_FALSE(c.seed.has_value());
  EXPECT_EQ(c.threshold, 0.5);
  EXPECT_EQ(c.n_labels, 500u);
  EXPECT_EQ(c.vocab_size, 1395u);
  EXPECT_EQ(c.model.n_layers, 6u);
  EXPECT_EQ(c.model.n_heads, 12u);
  EXPECT_EQ(c.model.hidden_dim, 768u);
  EXPECT_EQ(c.model.ffn_dim, 3072u);
  EXPECT_EQ(c.model.max_len, 512u);
  EXPECT_EQ(c.pretrain.epochs, 100u);
  EXPECT_EQ(c.finetune.epochs, 30u);
  EXPECT_EQ(c.pretrain.batch_size, 4u);
  EXPECT_EQ(c.masking.mask_probability, 0.15);
  EXPECT_THROW_KIND(c.require_seed(), ErrorKind::kInvalidArgument);
  EXPECT_THROW_KIND(c.path("model"), ErrorKind::kInvalidArgument);
}

TEST(RunConfig, DefaultTextRoundTrips) {
  const auto text = default_config_text();
  const auto c = parse_run_config(text);
  const RunConfig d;
  EXPECT_FALSE(c.seed.has_value());
  EXPECT_EQ(c.threshold, d.threshold);
  EXPECT_EQ(c.split_ratios, d.split_ratios);
  EXPECT_EQ(c.smiles_key, d.smiles_key);
  EXPECT_EQ(c.model.n_layers, d.model.n_layers);
  EXPECT_EQ(c.model.attention_dropout, d.model.attention_dropout);
  EXPECT_EQ(c.model.init_std, d.model.init_std);
  EXPECT_EQ(c.pretrain.adam.learning_rate, d.pretrain.adam.learning_rate);
  EXPECT_EQ(c.finetune.adam.weight_decay, d.finetune.adam.weight_decay);
  EXPECT_EQ(c.masking.keep_fraction, d.masking.keep_fraction);
  EXPECT_EQ(c.extension.id_prefix, d.extension.id_prefix);
  EXPECT_EQ(c.extension.curator_note, d.extension.curator_note);
  EXPECT_FALSE(c.explain_layer.has_value());
  EXPECT_TRUE(c.paths.empty());
}

TEST(RunConfig, OverridesApply) {
  const auto c = parse_run_config(
      "[run]\nseed = 42\nthreshold = 0.3\n"
      "[paths]\nmodel = out/model.bin\n"
      "[model]\nlayers = 2\nheads = 2\nhidden = 8\nffn = 16\nactivation = gelu_tanh\nmlm_loss = binary\n"
      "[finetune]\nepochs = 7\nlearning_rate = 0.001\n"
      "[pretrain]\nforce_minimum = false\nmask_probability = 0.2\n"
      "[explain]\nlayer = 1\ncorpus = yes\n"
      "[extension]\nid_prefix = NEW:\nid_width = 4\n");
  EXPECT_EQ(c.require_seed(), 42u);
  EXPECT_EQ(c.threshold, 0.3);
  EXPECT_EQ(c.path("model"), std::filesystem::path("out/model.bin"));
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.model.activation, Activation::kGeluTanh);
  EXPECT_EQ(c.model.mlm_loss, MlmLoss::kBinary);
  EXPECT_EQ(c.finetune.epochs, 7u);
  EXPECT_EQ(c.finetune.adam.learning_rate, 0.001);
  EXPECT_FALSE(c.masking.force_minimum);
  EXPECT_EQ(c.masking.mask_probability, 0.2);
  EXPECT_EQ(*c.explain_layer, 1u);
  EXPECT_TRUE(c.explain_corpus);
  EXPECT_EQ(c.extension.id_prefix, "NEW:");
  EXPECT_EQ(c.extension.id_width, 4u);
}

TEST(RunConfig, BaseIsLayered) {
  RunConfig base;
  base.seed = 9;
  base.n_labels = 12;
  const auto c = parse_run_config("[dataset]\nmin_members = 3\n", base);
  EXPECT_EQ(*c.seed, 9u);
  EXPECT_EQ(c.n_labels, 12u);
  EXPECT_EQ(c.min_members, 3u);
}

TEST(RunConfig, Errors) {
  EXPECT_THROW_KIND(parse_run_config("[model]\nlayers = two\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("[model]\nlayers = 2 3\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("[model]\ncolour = red\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("[nosuch]\nx = 1\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("[model]\nactivation = relu\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("[explain]\ncorpus = maybe\n"), ErrorKind::kSyntax);
  EXPECT_THROW_KIND(parse_run_config("stray = 1\n"), ErrorKind::kSyntax);
  try {
    parse_run_config("[run]\nseed = 1\n[model]\nthis line is broken\n");
    ADD_FAILURE() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSyntax);
    EXPECT_EQ(e.line(), 4u);
  }
}

TEST(RunConfig, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "ontoext_config_test";
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "run.ini", "[run]\nseed = 5\n");
  EXPECT_EQ(*load_run_config(dir / "run.ini").seed, 5u);
  EXPECT_THROW(load_run_config(dir / "missing.ini"), Error);
  std::filesystem::remove_all(dir);
}
