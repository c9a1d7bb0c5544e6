#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ontoext/config.hpp"
#include "ontoext/pipeline.hpp"

using namespace ontoext;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<std::size_t> epochs;
  std::vector<std::string> settings;
  std::map<std::string, std::string> paths;
  bool quiet = false;
};

void add_path(CLI::App* cmd, CommonFlags& f, const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>("--" + key, [&f, key](const std::string& v) { f.paths[key] = v; }, help);
}

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "random seed (mandatory here or in the config)");
  cmd->add_option("--threshold", f.threshold, "decision threshold in (0, 1)");
  cmd->add_option("--set", f.settings, "override a config key: section.key=value")->take_all();
  cmd->add_flag("--quiet", f.quiet, "only print warnings and errors");
}

// Config file, then --set overrides, then dedicated flags.
RunConfig resolve(const CommonFlags& f, const std::string& phase) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  for (const auto& s : f.settings) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw Error(ErrorKind::kSyntax, "--set expects section.key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, dot), std::string(trim(s.substr(dot + 1, eq - dot - 1))),
                  std::string(trim(s.substr(eq + 1))));
  }
  if (f.seed) cfg.seed = f.seed;
  if (f.threshold) {
    if (!(*f.threshold > 0.0 && *f.threshold < 1.0))
      throw Error(ErrorKind::kInvalidArgument, "threshold must lie in (0, 1)");
    cfg.threshold = *f.threshold;
  }
  if (f.epochs) (phase == "pretrain" ? cfg.pretrain : cfg.finetune).epochs = *f.epochs;
  for (const auto& [k, v] : f.paths) cfg.paths[k] = v;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ontology extension with a SMILES transformer"};
  app.require_subcommand(1);
  CommonFlags f;
  std::string split = "test";
  synthetic::ToyConfig toy;

  struct Sub {
    const char* name;
    const char* help;
    std::vector<std::pair<const char*, const char*>> paths;
  };
  const std::vector<Sub> subs = {
      {"build-dataset", "select label classes, build and split the dataset",
       {{"ontology", "input OBO file"}, {"dataset", "output dataset directory"}}},
      {"train-tokenizer", "train the BPE tokenizer on training-split SMILES",
       {{"dataset", "dataset directory"}, {"tokenizer", "output tokenizer file"}}},
      {"pretrain", "masked-language-model pretraining",
       {{"dataset", "dataset directory"},
        {"tokenizer", "tokenizer file"},
        {"model", "optional starting model"},
        {"output", "output model file"},
        {"checkpoint", "periodic checkpoint file"},
        {"log", "epoch log CSV (default: <output>.epochs.csv)"}}},
      {"finetune", "multi-label fine-tuning",
       {{"dataset", "dataset directory"},
        {"tokenizer", "tokenizer file"},
        {"model", "optional pretrained model"},
        {"output", "output model file"},
        {"checkpoint", "periodic checkpoint file"},
        {"log", "epoch log CSV (default: <output>.epochs.csv)"}}},
      {"evaluate", "score a split and write the metric report",
       {{"dataset", "dataset directory"}, {"tokenizer", "tokenizer file"}, {"model", "model file"},
        {"output", "report directory"}}},
      {"classify", "classify SMILES into label classes",
       {{"tokenizer", "tokenizer file"}, {"model", "model file"}, {"dataset", "dataset directory (for labels.txt)"},
        {"labels", "labels.txt (overrides --dataset)"}, {"ontology", "optional OBO for class names"},
        {"input", "newline-delimited SMILES"}, {"output", "output JSON"}}},
      {"explain", "render attention reports",
       {{"tokenizer", "tokenizer file"}, {"model", "model file"}, {"dataset", "dataset directory (for labels.txt)"},
        {"labels", "labels.txt (overrides --dataset)"}, {"ontology", "optional OBO for class names"},
        {"input", "newline-delimited SMILES"}, {"output", "output directory"}}},
      {"extend", "classify new SMILES and insert them into the ontology",
       {{"ontology", "input OBO file"}, {"tokenizer", "tokenizer file"}, {"model", "model file"},
        {"dataset", "dataset directory (for labels.txt)"}, {"labels", "labels.txt (overrides --dataset)"},
        {"input", "newline-delimited SMILES"}, {"output", "extended OBO file"},
        {"report", "change report JSON (default: <output>.report.json)"}}},
      {"generate-toy", "write a synthetic toy ontology", {{"output", "output OBO file"}}},
  };

  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, f);
    for (const auto& [key, help] : s.paths) add_path(cmd, f, key, help);
    cmds[s.name] = cmd;
  }
  cmds["pretrain"]->add_option("--epochs", f.epochs, "override [pretrain] epochs");
  cmds["finetune"]->add_option("--epochs", f.epochs, "override [finetune] epochs");
  cmds["evaluate"]->add_option("--split", split, "train, validation or test")->capture_default_str();
  auto* gen = cmds["generate-toy"];
  gen->add_option("--leaves", toy.n_leaves, "number of leaf molecules")->capture_default_str();
  gen->add_option("--refinements", toy.refinements, "subclasses per motif class")->capture_default_str();
  auto* defaults = app.add_subcommand("default-config", "print the default configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (defaults->parsed()) {
      std::cout << default_config_text();
      return 0;
    }
    std::string name;
    for (const auto& [n, cmd] : cmds)
      if (cmd->parsed()) name = n;
    if (f.quiet) log_threshold() = LogLevel::kWarn;
    const auto cfg = resolve(f, name);
    if (name == "build-dataset") pipeline::run_build_dataset(cfg);
    else if (name == "train-tokenizer") pipeline::run_train_tokenizer(cfg);
    else if (name == "pretrain") pipeline::run_pretrain(cfg);
    else if (name == "finetune") pipeline::run_finetune(cfg);
    else if (name == "evaluate") pipeline::run_evaluate(cfg, split);
    else if (name == "classify") pipeline::run_classify(cfg);
    else if (name == "explain") pipeline::run_explain(cfg);
    else if (name == "extend") pipeline::run_extend(cfg);
    else if (name == "generate-toy") pipeline::run_generate_toy(cfg, toy);
    return 0;
  } catch (const Error& e) {
    log(LogLevel::kError, to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    log(LogLevel::kError, "internal", e.what());
    return 1;
  }
}
