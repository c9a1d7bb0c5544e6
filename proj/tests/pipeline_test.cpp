#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "ontoext/pipeline.hpp"
#include "test_util.hpp"

using namespace ontoext;
namespace fs = std::filesystem;

namespace {

const char* kToyIni =
    "[dataset]\nlabels = 12\nmin_members = 10\ntrain_ratio = 0.7\nvalidation_ratio = 0.1\ntest_ratio = 0.2\n"
    "[tokenizer]\nvocab_size = 40\nmax_len = 64\n"
    "[model]\nlayers = 1\nheads = 2\nhidden = 8\nffn = 16\n"
    "[pretrain]\nepochs = 2\n"
    "[finetune]\nepochs = 3\nlearning_rate = 0.001\n";

struct CliRun {
  int status = 0;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ontoext_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_file_atomic(dir_ / "toy.ini", kToyIni);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun cli(const std::string& args) {
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = std::string(ONTOEXT_CLI_PATH) + " " + args + " 2> " + err.string();
    const int raw = std::system(cmd.c_str());
    CliRun r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.err = fs::exists(err) ? read_file(err) : "";
    return r;
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  std::string common() const { return "--config " + p("toy.ini") + " --seed 7 --quiet"; }

  // generate-toy through evaluate, into directory `tag`.
  void full_pipeline(const std::string& tag) {
    const auto w = dir_ / tag;
    fs::create_directories(w);
    auto q = [&](const char* n) { return (w / n).string(); };
    const auto c = common();
    ASSERT_EQ(cli("generate-toy " + c + " --leaves 120 --output " + q("toy.obo")).status, 0);
    ASSERT_EQ(cli("build-dataset " + c + " --ontology " + q("toy.obo") + " --dataset " + q("data")).status, 0);
    ASSERT_EQ(cli("train-tokenizer " + c + " --dataset " + q("data") + " --tokenizer " + q("tok.txt")).status, 0);
    ASSERT_EQ(cli("pretrain " + c + " --dataset " + q("data") + " --tokenizer " + q("tok.txt") + " --output " +
                  q("pre.bin"))
                  .status,
              0);
    ASSERT_EQ(cli("finetune " + c + " --dataset " + q("data") + " --tokenizer " + q("tok.txt") + " --model " +
                  q("pre.bin") + " --output " + q("ft.bin"))
                  .status,
              0);
    ASSERT_EQ(cli("evaluate " + c + " --dataset " + q("data") + " --tokenizer " + q("tok.txt") + " --model " +
                  q("ft.bin") + " --output " + q("eval"))
                  .status,
              0);
    write_file_atomic(w / "new.smi", "CCBrCC\nCC[Fe]OC\n\nCCCC\n");
    ASSERT_EQ(cli("extend " + c + " --ontology " + q("toy.obo") + " --tokenizer " + q("tok.txt") + " --model " +
                  q("ft.bin") + " --dataset " + q("data") + " --input " + q("new.smi") + " --output " +
                  q("ext.obo"))
                  .status,
              0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, FullPipelineWritesEveryArtifact) {
  full_pipeline("a");
  const auto w = dir_ / "a";
  for (const char* f : {"data/labels.txt", "data/train.tsv", "data/validation.tsv", "data/test.tsv",
                        "data/splits.meta", "data/stats.json", "tok.txt", "pre.bin", "ft.bin", "pre.bin.epochs.csv",
                        "ft.bin.epochs.csv", "eval/report.json", "eval/per_class_f1.csv", "eval/per_molecule_f1.csv",
                        "ext.obo", "ext.obo.report.json"})
    EXPECT_TRUE(fs::exists(w / f)) << f;
  const auto report = nlohmann::json::parse(read_file(w / "eval/report.json"));
  for (const char* a : {"samples", "micro", "macro", "weighted"})
    for (const char* m : {"f1", "precision", "recall", "roc_auc"}) EXPECT_TRUE(report[a].contains(m)) << a << m;
  EXPECT_EQ(read_file(w / "eval/per_class_f1.csv").rfind("class_id,support,f1\n", 0), 0u);
  EXPECT_EQ(read_file(w / "eval/per_molecule_f1.csv").rfind("row_index,f1\n", 0), 0u);
  EXPECT_EQ(split_lines(read_file(w / "ft.bin.epochs.csv")).size(), 4u);  // header + 3 epochs

  const auto graph = parse_obo(read_file(w / "toy.obo"));
  const auto extended = parse_obo(read_file(w / "ext.obo"));
  const auto change = nlohmann::json::parse(read_file(w / "ext.obo.report.json"));
  EXPECT_EQ(extended.size(), graph.size() + change["added"].size());
  EXPECT_EQ(change["added"].size() + change["below_threshold"].size(), 3u);
  for (const auto& [id, cls] : graph.classes()) EXPECT_EQ(extended.at(id).parents, cls.parents);
}

TEST_F(Cli, SameSeedIsByteIdentical) {
  full_pipeline("a");
  full_pipeline("b");
  for (const char* f : {"toy.obo", "data/train.tsv", "data/test.tsv", "data/labels.txt", "tok.txt", "pre.bin",
                        "ft.bin", "eval/report.json", "eval/per_class_f1.csv", "ext.obo", "ext.obo.report.json"})
    EXPECT_EQ(read_file(dir_ / "a" / f), read_file(dir_ / "b" / f)) << f;
}

TEST_F(Cli, InputsAreNotMutated) {
  full_pipeline("a");
  const auto w = dir_ / "a";
  const auto obo = read_file(w / "toy.obo"), model = read_file(w / "ft.bin"), tok = read_file(w / "tok.txt");
  ASSERT_EQ(cli("classify " + common() + " --tokenizer " + (w / "tok.txt").string() + " --model " +
                (w / "ft.bin").string() + " --dataset " + (w / "data").string() + " --ontology " +
                (w / "toy.obo").string() + " --input " + (w / "new.smi").string() + " --output " + p("cls.json"))
                .status,
            0);
  ASSERT_EQ(cli("explain " + common() + " --set explain.corpus=true --tokenizer " + (w / "tok.txt").string() +
                " --model " + (w / "ft.bin").string() + " --dataset " + (w / "data").string() + " --input " +
                (w / "new.smi").string() + " --output " + p("expl"))
                .status,
            0);
  EXPECT_EQ(read_file(w / "toy.obo"), obo);
  EXPECT_EQ(read_file(w / "ft.bin"), model);
  EXPECT_EQ(read_file(w / "tok.txt"), tok);
  const auto cls = nlohmann::json::parse(read_file(p("cls.json")));
  EXPECT_EQ(cls.size(), 3u);
  EXPECT_EQ(cls[0]["smiles"], "CCBrCC");
  for (const char* f : {"molecule_0001.html", "molecule_0003_tokens.csv", "molecule_0002_shares.csv",
                        "corpus_shares.csv"})
    EXPECT_TRUE(fs::exists(dir_ / "expl" / f)) << f;
}

TEST_F(Cli, PretrainZeroEpochsCopiesModel) {
  full_pipeline("a");
  const auto w = dir_ / "a";
  ASSERT_EQ(cli("pretrain " + common() + " --epochs 0 --dataset " + (w / "data").string() + " --tokenizer " +
                (w / "tok.txt").string() + " --model " + (w / "ft.bin").string() + " --output " + p("copy.bin"))
                .status,
            0);
  EXPECT_EQ(read_file(p("copy.bin")), read_file(w / "ft.bin"));
}

TEST_F(Cli, ErrorsAreMachineReadable) {
  auto r = cli("generate-toy --output " + p("x.obo"));
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("ERROR\tinvalid_argument\t", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(p("x.obo")));

  r = cli("evaluate --seed 1 --dataset " + p("missing") + " --tokenizer a --model b --output c");
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("ERROR\tio\t", 0), 0u) << r.err;

  write_file_atomic(dir_ / "bad.ini", "[model]\nlayers = many\n");
  r = cli("generate-toy --seed 1 --config " + p("bad.ini") + " --output " + p("x.obo"));
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("ERROR\tsyntax\t", 0), 0u) << r.err;

  r = cli("generate-toy --seed 1 --set model.layers --output " + p("x.obo"));
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("ERROR\tsyntax\t", 0), 0u) << r.err;

  r = cli("generate-toy --seed 1 --threshold 1.5 --output " + p("x.obo"));
  EXPECT_NE(r.status, 0);

  full_pipeline("a");
  const auto w = dir_ / "a";
  auto bytes = read_file(w / "ft.bin");
  bytes[8] = 9;  // format version
  write_file_atomic(dir_ / "bad.bin", bytes);
  r = cli("evaluate " + common() + " --dataset " + (w / "data").string() + " --tokenizer " +
          (w / "tok.txt").string() + " --model " + p("bad.bin") + " --output " + p("ev"));
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("ERROR\tversion\t", 0), 0u) << r.err;
}

TEST_F(Cli, FlagsOverrideConfig) {
  write_file_atomic(dir_ / "seeded.ini", "[run]\nseed = 3\n");
  ASSERT_EQ(cli("generate-toy --config " + p("seeded.ini") + " --leaves 30 --output " + p("a.obo")).status, 0);
  ASSERT_EQ(cli("generate-toy --config " + p("seeded.ini") + " --seed 3 --leaves 30 --output " + p("b.obo")).status,
            0);
  ASSERT_EQ(cli("generate-toy --config " + p("seeded.ini") + " --seed 4 --leaves 30 --output " + p("c.obo")).status,
            0);
  EXPECT_EQ(read_file(p("a.obo")), read_file(p("b.obo")));
  EXPECT_NE(read_file(p("a.obo")), read_file(p("c.obo")));
}

TEST_F(Cli, DefaultConfigParses) {
  const auto out = dir_ / "default.ini";
  const std::string cmd = std::string(ONTOEXT_CLI_PATH) + " default-config > " + out.string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(read_file(out), default_config_text());
  EXPECT_NO_THROW(parse_run_config(read_file(out)));
}

TEST(Pipeline, SplitNamesAndSmilesLists) {
  DatasetSplits s;
  s.test.push_back({"C", {1}});
  EXPECT_EQ(pipeline::pick_split(s, "test").size(), 1u);
  EXPECT_THROW_KIND(pipeline::pick_split(s, "holdout"), ErrorKind::kInvalidArgument);
  const auto f = fs::temp_directory_path() / "ontoext_smiles_list.txt";
  write_file_atomic(f, "# header\nCCO\n\n  CN  \n");
  EXPECT_EQ(pipeline::read_smiles_list(f), (std::vector<std::string>{"CCO", "CN"}));
  write_file_atomic(f, "\n# only a comment\n");
  EXPECT_THROW_KIND(pipeline::read_smiles_list(f), ErrorKind::kEmptyResult);
  fs::remove(f);
}
