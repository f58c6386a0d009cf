#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>

#include "treecls/error.h"
#include "treecls/pipeline.h"
#include "treecls/util.h"

using namespace treecls;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config(const std::string& out_dir) {
  PipelineConfig cfg;
  cfg.seed = 11;
  cfg.out_dir = out_dir;
  cfg.corpus_n = 60;
  cfg.split_kind = "random";
  cfg.negative_strategy = "random";
  cfg.train_seeds = {1};
  cfg.train_steps_override = 40;
  cfg.batch_override = 8;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = (fs::temp_directory_path() / name).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void run_data_stages(const PipelineConfig& cfg) {
  stage_generate(cfg);
  stage_split(cfg);
  stage_negatives(cfg);
  stage_annotate(cfg);
}

}  // namespace

TEST_CASE("pipeline stages produce aligned, schema-correct artifacts") {
  PipelineConfig cfg = small_config(fresh_dir("treecls_pipe1"));
  cfg.annotate_mask = "hard";
  run_data_stages(cfg);

  CHECK(file_exists(cfg.out_dir + "/corpus.jsonl"));
  CHECK(file_exists(cfg.out_dir + "/vocab.txt"));
  CHECK(file_exists(cfg.out_dir + "/split_random.json"));
  CHECK(file_exists(cfg.out_dir + "/manifests/corpus.json"));

  Corpus corpus = load_pipeline_corpus(cfg.out_dir);
  CHECK(corpus.examples.size() == 60);

  std::string ds = dataset_name(cfg);
  CHECK(ds == "dataset_random_random");
  DatasetBundle bundle = read_dataset_bundle(cfg.out_dir, ds, true);
  SplitAssignment split = load_pipeline_split(cfg.out_dir, "random");
  CHECK(audit_dataset(corpus, split, bundle).violations == 0);

  // Dataset record schema, exact key order.
  auto lines = read_lines(cfg.out_dir + "/" + ds + "/dev.jsonl");
  REQUIRE_FALSE(lines.empty());
  CHECK(lines[0].rfind("{\"question_id\":", 0) == 0);
  CHECK(lines[0].find("\"question\":") != std::string::npos);
  CHECK(lines[0].find("\"query\":") != std::string::npos);
  CHECK(lines[0].find("\"label\":") != std::string::npos);
  CHECK(lines[0].find("\"negative_source\":") != std::string::npos);
  CHECK(lines[0].find("\"set\":\"dev\"") != std::string::npos);

  // Annotated files line-align with dataset files; masks serialized too.
  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    auto data_lines = read_lines(cfg.out_dir + "/" + ds + "/" + set_name + ".jsonl");
    auto annot_lines = read_lines(cfg.out_dir + "/annotated_random_random/" +
                                  set_name + ".annot.jsonl");
    CHECK(data_lines.size() == annot_lines.size());
    auto mask_lines = read_lines(cfg.out_dir + "/annotated_random_random/" +
                                 set_name + ".masks.jsonl");
    CHECK(mask_lines.size() == annot_lines.size());
    if (!mask_lines.empty()) {
      MaskSet set = mask_set_from_json(mask_lines[0]);
      CHECK(set.mode == MaskMode::kHard);
      CHECK(set.consistent());
    }
  }
}

TEST_CASE("stale inputs are detected and name the stage to rerun") {
  PipelineConfig cfg = small_config(fresh_dir("treecls_pipe2"));
  stage_generate(cfg);
  stage_split(cfg);

  // Appending a line to the corpus invalidates everything downstream.
  std::string corpus_path = cfg.out_dir + "/corpus.jsonl";
  write_text_file(corpus_path, read_text_file(corpus_path) + "\n");
  try {
    stage_split(cfg);
    FAIL("expected StaleInputError");
  } catch (const StaleInputError& e) {
    CHECK(e.stage_to_rerun == "corpus");
  }

  // Missing artifact entirely.
  PipelineConfig cfg3 = small_config(fresh_dir("treecls_pipe3"));
  CHECK_THROWS_AS(stage_split(cfg3), StaleInputError);
}

TEST_CASE("pipeline stages are byte-identical across reruns") {
  PipelineConfig a = small_config(fresh_dir("treecls_pipe_a"));
  PipelineConfig b = small_config(fresh_dir("treecls_pipe_b"));
  run_data_stages(a);
  run_data_stages(b);

  std::vector<std::string> artifacts{
      "corpus.jsonl",
      "vocab.txt",
      "split_random.json",
      "dataset_random_random/train.jsonl",
      "dataset_random_random/holdout.jsonl",
      "dataset_random_random/dev.jsonl",
      "dataset_random_random/test.jsonl",
      "dataset_random_random/provenance.jsonl",
      "dataset_random_random/manifest.json",
      "annotated_random_random/train.annot.jsonl",
      "annotated_random_random/dev.annot.jsonl",
  };
  for (const auto& rel : artifacts) {
    CHECK(read_text_file(a.out_dir + "/" + rel) ==
          read_text_file(b.out_dir + "/" + rel));
  }
}

TEST_CASE("train, eval, and report stages") {
  PipelineConfig cfg = small_config(fresh_dir("treecls_pipe4"));
  run_data_stages(cfg);
  cfg.model_kind = "etc";
  cfg.mask = MaskMode::kNone;
  stage_train(cfg);

  std::string run = run_name(cfg);
  CHECK(run == "dataset_random_random__etc__none__linkoff");
  std::string run_dir = cfg.out_dir + "/runs/" + run;
  CHECK(file_exists(run_dir + "/report.json"));
  CHECK(file_exists(run_dir + "/seed1/checkpoint.bin"));
  CHECK(file_exists(run_dir + "/seed1/metrics.csv"));

  auto csv = read_lines(run_dir + "/seed1/metrics.csv");
  CHECK(csv[0] == "step,set,accuracy,f1,auc,seed");
  CHECK(csv.size() >= 4);  // header + >= one eval point x 3 sets

  // Eval without --include-test never touches the test set.
  stage_eval(cfg, run, false);
  std::string eval_text = read_text_file(run_dir + "/eval.json");
  CHECK(eval_text.find("\"test\"") == std::string::npos);
  CHECK(eval_text.find("\"dev\"") != std::string::npos);

  stage_eval(cfg, run, true);
  eval_text = read_text_file(run_dir + "/eval.json");
  CHECK(eval_text.find("\"test\"") != std::string::npos);

  // LSTM run lands in the report as well.
  cfg.model_kind = "lstm";
  cfg.train_steps_override = 20;
  stage_train(cfg);
  stage_report(cfg);
  auto report = read_lines(cfg.out_dir + "/report.csv");
  REQUIRE(report.size() >= 3);
  CHECK(report[0].rfind("dataset,model,mask,cross_link,", 0) == 0);
  std::string txt = read_text_file(cfg.out_dir + "/report.txt");
  // ETC rows come before the LSTM row within a dataset.
  CHECK(txt.find("etc") < txt.find("lstm"));
}

#ifdef TREECLS_CLI_PATH
TEST_CASE("cli exit codes: 0 ok, 2 config error, 3 stage error") {
  std::string cli = TREECLS_CLI_PATH;
  std::string dir = fresh_dir("treecls_pipe_cli");
  std::string base = cli + " --out " + dir + " --seed 3";

  int ok = std::system((base + " generate --n 30 > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(ok) == 0);

  int config_err =
      std::system((cli + " --mask sideways generate > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(config_err) != 0);

  // Split before negatives exists is fine, but negatives without split is a
  // stage error (exit 3).
  int stage_err =
      std::system((base + " negatives > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(stage_err) == 3);

  int ok2 = std::system((base + " split --split random > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(ok2) == 0);
}
#endif
