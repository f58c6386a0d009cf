// Pipeline driver: deterministic, resumable stages from corpus generation
// through the ablation report.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "treecls/error.h"
#include "treecls/masks.h"
#include "treecls/pipeline.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  size_t start = 0;
  while (start <= text.size()) {
    size_t comma = text.find(',', start);
    std::string part = text.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!part.empty()) seeds.push_back(std::stoull(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (seeds.empty()) throw treecls::ConfigError("--seeds given but empty");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional classification pipeline"};
  app.require_subcommand(1);

  // Flag storage; only values the user actually passed override the config
  // file (flags win).
  std::string config_path, mask, cross_link, negatives, split, preset;
  std::string data_path, trees_path, run, seeds, embed_masks, model_kind;
  uint64_t seed = 0;
  std::string out_dir;
  int corpus_n = 0, top_k = 0, steps = 0, batch = 0, threads = 0;
  bool include_test = false;

  app.add_option("--config", config_path, "JSON config file (flags win)");
  app.add_option("--seed", seed, "global pipeline seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--mask", mask, "attention mask mode")
      ->check(CLI::IsMember({"none", "hard", "soft", "both", "block"}));
  app.add_option("--cross-link", cross_link, "entity cross links")
      ->check(CLI::IsMember({"on", "off"}));
  app.add_option("--negatives", negatives, "negative strategy")
      ->check(CLI::IsMember({"random", "model"}));
  app.add_option("--split", split, "split kind")
      ->check(CLI::IsMember({"random", "mcd"}));
  app.add_option("--preset", preset, "hyper-parameter preset")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_flag("--include-test", include_test, "allow test-set evaluation");
  app.add_option("--threads", threads, "batch worker threads");

  auto* cmd_gen = app.add_subcommand("generate", "synthesize a corpus");
  cmd_gen->add_option("--n", corpus_n, "number of examples");

  auto* cmd_ingest = app.add_subcommand("ingest", "load CFQ-format files");
  cmd_ingest->add_option("--data", data_path, "JSON-lines dataset file")
      ->required();
  cmd_ingest->add_option("--trees", trees_path, "optional parallel trees file");

  auto* cmd_split = app.add_subcommand("split", "build the train/dev/test split");

  auto* cmd_neg =
      app.add_subcommand("negatives", "build the classification dataset");
  cmd_neg->add_option("--k", top_k, "top-k candidates per question");

  auto* cmd_annot =
      app.add_subcommand("annotate", "attach structure annotations");
  cmd_annot
      ->add_option("--embed-masks", embed_masks,
                   "also serialize masks for this mode")
      ->check(CLI::IsMember({"hard", "soft", "both", "block"}));

  auto* cmd_train = app.add_subcommand("train", "train a classifier");
  cmd_train->add_option("--model", model_kind, "model kind")
      ->check(CLI::IsMember({"etc", "lstm"}));
  cmd_train->add_option("--steps", steps, "override training steps");
  cmd_train->add_option("--batch", batch, "override batch size");
  cmd_train->add_option("--seeds", seeds, "comma-separated training seeds");

  auto* cmd_eval = app.add_subcommand("eval", "evaluate a finished run");
  cmd_eval->add_option("--run", run, "run name (defaults to current flags)");

  auto* cmd_report =
      app.add_subcommand("report", "aggregate run reports into one table");

  // Global flags may follow the subcommand name.
  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  treecls::PipelineConfig cfg;
  try {
    if (!config_path.empty()) {
      cfg = treecls::PipelineConfig::from_json_file(config_path);
    }
    if (app.count("--seed")) cfg.seed = seed;
    if (app.count("--out")) cfg.out_dir = out_dir;
    if (app.count("--mask")) cfg.mask = treecls::mask_mode_from_name(mask);
    if (app.count("--cross-link")) cfg.cross_link = cross_link == "on";
    if (app.count("--negatives")) cfg.negative_strategy = negatives;
    if (app.count("--split")) cfg.split_kind = split;
    if (app.count("--preset")) cfg.preset = preset;
    if (app.count("--threads")) cfg.threads = threads;
    if (include_test) cfg.include_test = true;
    if (cmd_gen->count("--n")) cfg.corpus_n = corpus_n;
    if (cmd_neg->count("--k")) cfg.top_k = top_k;
    if (cmd_annot->count("--embed-masks")) cfg.annotate_mask = embed_masks;
    if (cmd_train->count("--model")) cfg.model_kind = model_kind;
    if (cmd_train->count("--steps")) cfg.train_steps_override = steps;
    if (cmd_train->count("--batch")) cfg.batch_override = batch;
    if (cmd_train->count("--seeds")) cfg.train_seeds = parse_seed_list(seeds);
  } catch (const treecls::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (cmd_gen->parsed()) {
      treecls::stage_generate(cfg);
    } else if (cmd_ingest->parsed()) {
      treecls::stage_ingest(cfg, data_path, trees_path);
    } else if (cmd_split->parsed()) {
      treecls::stage_split(cfg);
    } else if (cmd_neg->parsed()) {
      treecls::stage_negatives(cfg);
    } else if (cmd_annot->parsed()) {
      treecls::stage_annotate(cfg);
    } else if (cmd_train->parsed()) {
      treecls::stage_train(cfg);
    } else if (cmd_eval->parsed()) {
      treecls::stage_eval(cfg, run, cfg.include_test);
    } else if (cmd_report->parsed()) {
      treecls::stage_report(cfg);
    }
  } catch (const treecls::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const treecls::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitOk;
}
