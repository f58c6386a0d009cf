#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "treecls/corpus.h"
#include "treecls/divergence.h"
#include "treecls/grammar.h"
#include "treecls/masks.h"
#include "treecls/model.h"
#include "treecls/negatives.h"
#include "treecls/train.h"

namespace treecls {

// Every stage writes its artifacts plus a manifest with content hashes of
// its inputs and outputs; downstream stages verify input hashes against the
// producer manifest and fail with StaleInputError naming the stage to rerun.
struct StageManifest {
  std::string stage;
  int version = 1;
  uint64_t seed = 0;
  std::map<std::string, std::string> params;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
};

void write_stage_manifest(const std::string& out_dir, const StageManifest& m);
StageManifest read_stage_manifest(const std::string& out_dir,
                                  const std::string& stage);
std::string file_hash_hex(const std::string& path);

// Returns the artifact's absolute path after verifying freshness.
std::string require_fresh(const std::string& out_dir, const std::string& artifact,
                          const std::string& producer_stage);

struct PipelineConfig {
  uint64_t seed = 7;
  std::string out_dir = "out";

  int corpus_n = 5000;
  GrammarConfig grammar;

  std::string split_kind = "mcd";  // random | mcd
  double atom_cap = kDefaultAtomCap;
  int mcd_sweeps = 4;

  std::string negative_strategy = "model";  // random | model
  int top_k = 10;

  std::string preset = "desk";  // desk | paper
  std::string model_kind = "etc";  // etc | lstm
  MaskMode mask = MaskMode::kNone;
  bool cross_link = false;
  std::vector<uint64_t> train_seeds = {1, 2};
  int train_steps_override = 0;
  int batch_override = 0;
  int threads = 1;
  bool include_test = false;
  std::string annotate_mask;  // nonempty = also serialize masks for this mode

  static PipelineConfig from_json_file(const std::string& path);
  void apply_json(const std::string& text);
};

std::string dataset_name(const PipelineConfig& cfg);
std::string run_name(const PipelineConfig& cfg);

// Preset expansion (desk-scale defaults; "paper" restores the published
// hyper-parameters).
EncoderConfig encoder_preset(const PipelineConfig& cfg, int vocab_size);
LstmConfig lstm_preset(const PipelineConfig& cfg, int vocab_size);
Seq2SeqConfig seq2seq_preset(const PipelineConfig& cfg, int vocab_size);
TrainConfig classifier_train_preset(const PipelineConfig& cfg);
TrainConfig seq2seq_train_preset(const PipelineConfig& cfg);

// Stages. Each throws on error; the CLI maps exceptions to exit codes.
void stage_generate(const PipelineConfig& cfg);
void stage_ingest(const PipelineConfig& cfg, const std::string& data_path,
                  const std::string& trees_path);
void stage_split(const PipelineConfig& cfg);
void stage_negatives(const PipelineConfig& cfg);
void stage_annotate(const PipelineConfig& cfg);
void stage_train(const PipelineConfig& cfg);
void stage_eval(const PipelineConfig& cfg, const std::string& which_run,
                bool include_test);
void stage_report(const PipelineConfig& cfg);

// Shared loaders (also used by tests and the acceptance suite).
Corpus load_pipeline_corpus(const std::string& out_dir);
SplitAssignment load_pipeline_split(const std::string& out_dir,
                                    const std::string& kind);
DatasetBundle read_dataset_bundle(const std::string& out_dir,
                                  const std::string& dataset,
                                  bool with_provenance);
TrainingData load_training_data(const std::string& out_dir,
                                const std::string& dataset,
                                const Vocabulary& vocab,
                                const EncoderConfig& enc_cfg, bool include_test);

void write_dataset_bundle(const std::string& out_dir, const std::string& dataset,
                          const Corpus& corpus, const DatasetBundle& bundle,
                          const PipelineConfig& cfg,
                          const SplitAssignment& split);

}  // namespace treecls
