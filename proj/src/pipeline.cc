#include "treecls/pipeline.h"

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "json.hpp"
#include "treecls/error.h"
#include "treecls/structure.h"
#include "treecls/util.h"

namespace treecls {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string file_hash_hex(const std::string& path) {
  return hash_hex(read_text_file(path));
}

void write_stage_manifest(const std::string& out_dir, const StageManifest& m) {
  ordered_json j;
  j["stage"] = m.stage;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["params"] = m.params;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  write_text_file(out_dir + "/manifests/" + m.stage + ".json", j.dump(2) + "\n");
}

StageManifest read_stage_manifest(const std::string& out_dir,
                                  const std::string& stage) {
  std::string path = out_dir + "/manifests/" + stage + ".json";
  if (!file_exists(path)) {
    throw StaleInputError("manifest " + stage + ".json", stage);
  }
  ordered_json j;
  try {
    j = ordered_json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string(e.what()) + " in " + path);
  }
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.version = j.at("version").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  for (auto& [k, v] : j.at("params").items()) m.params[k] = v.get<std::string>();
  for (auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v.get<std::string>();
  for (auto& [k, v] : j.at("outputs").items()) m.outputs[k] = v.get<std::string>();
  return m;
}

std::string require_fresh(const std::string& out_dir, const std::string& artifact,
                          const std::string& producer_stage) {
  std::string path = out_dir + "/" + artifact;
  if (!file_exists(path)) throw StaleInputError(artifact, producer_stage);
  StageManifest producer = read_stage_manifest(out_dir, producer_stage);
  auto it = producer.outputs.find(artifact);
  if (it == producer.outputs.end() || it->second != file_hash_hex(path)) {
    throw StaleInputError(artifact, producer_stage);
  }
  return path;
}

// ---- config -----------------------------------------------------------------

void PipelineConfig::apply_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  seed = j.value("seed", seed);
  out_dir = j.value("out", out_dir);
  if (j.contains("corpus")) {
    const auto& c = j["corpus"];
    corpus_n = c.value("n", corpus_n);
    if (c.contains("grammar")) grammar = GrammarConfig::from_json(c["grammar"].dump());
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    split_kind = s.value("kind", split_kind);
    atom_cap = s.value("atom_cap", atom_cap);
    mcd_sweeps = s.value("sweeps", mcd_sweeps);
  }
  if (j.contains("negatives")) {
    const auto& n = j["negatives"];
    negative_strategy = n.value("strategy", negative_strategy);
    top_k = n.value("k", top_k);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    model_kind = m.value("kind", model_kind);
    if (m.contains("mask")) mask = mask_mode_from_name(m["mask"].get<std::string>());
    if (m.contains("cross_link")) cross_link = m["cross_link"].get<bool>();
    preset = m.value("preset", preset);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    train_steps_override = t.value("steps", train_steps_override);
    batch_override = t.value("batch", batch_override);
    threads = t.value("threads", threads);
    if (t.contains("seeds")) {
      train_seeds.clear();
      for (const auto& s : t["seeds"]) train_seeds.push_back(s.get<uint64_t>());
    }
  }
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  PipelineConfig cfg;
  cfg.apply_json(read_text_file(path));
  return cfg;
}

std::string dataset_name(const PipelineConfig& cfg) {
  return "dataset_" + cfg.split_kind + "_" + cfg.negative_strategy;
}

std::string run_name(const PipelineConfig& cfg) {
  std::string mask_part =
      cfg.model_kind == "lstm" ? "nomask" : mask_mode_name(cfg.mask);
  std::string link_part =
      cfg.model_kind == "lstm" ? "nolink" : (cfg.cross_link ? "linkon" : "linkoff");
  return dataset_name(cfg) + "__" + cfg.model_kind + "__" + mask_part + "__" +
         link_part;
}

// ---- presets ------------------------------------------------------------------

EncoderConfig encoder_preset(const PipelineConfig& cfg, int vocab_size) {
  EncoderConfig e;
  if (cfg.preset == "paper") {
    e.layers = 6;
    e.hidden_size = 128;
    e.filter_size = 512;
    e.heads = 16;
  } else {
    e.layers = 2;
    e.hidden_size = 64;
    e.filter_size = 256;
    e.heads = 4;
  }
  e.dropout = 0.1;
  e.mode = cfg.mask;
  e.use_cross_links = cfg.cross_link;
  e.vocab_size = vocab_size;
  e.max_positions = 160;
  return e;
}

LstmConfig lstm_preset(const PipelineConfig& cfg, int vocab_size) {
  LstmConfig l;
  if (cfg.preset == "paper") {
    l.hidden_size = 512;
    l.dense_hidden = 512;
    l.dropout = 0.4;
  } else {
    l.hidden_size = 64;
    l.dense_hidden = 64;
    l.dropout = 0.2;
  }
  l.layers = 2;
  l.vocab_size = vocab_size;
  return l;
}

Seq2SeqConfig seq2seq_preset(const PipelineConfig& cfg, int vocab_size) {
  Seq2SeqConfig s;
  if (cfg.preset == "paper") {
    s.layers = 2;
    s.hidden_size = 128;
    s.filter_size = 2048;
    s.heads = 16;
  } else {
    s.layers = 2;
    s.hidden_size = 64;
    s.filter_size = 256;
    s.heads = 4;
  }
  s.dropout = 0.1;
  s.vocab_size = vocab_size;
  s.max_positions = 160;
  s.max_decode_len = 48;
  return s;
}

TrainConfig classifier_train_preset(const PipelineConfig& cfg) {
  TrainConfig t;
  bool lstm = cfg.model_kind == "lstm";
  bool hard_mode = cfg.mask == MaskMode::kHard || cfg.mask == MaskMode::kBoth;
  if (cfg.preset == "paper") {
    t.batch_size = lstm ? 1024 : 112;
    t.train_steps = lstm ? 30000 : 200000;
    t.warmup_steps = 1000;
  } else {
    t.batch_size = 24;
    // Hard-mask runs converge more slowly; they get twice the steps.
    t.train_steps = (lstm ? 1200 : 1200) * (hard_mode ? 2 : 1);
    t.warmup_steps = 120;
    t.eval_train_cap = 1500;
  }
  t.beta1 = lstm ? 0.85 : 0.9;
  t.beta2 = 0.997;
  t.base_lr = 0.001;
  t.schedule = lstm ? LrSchedule::kConstant : LrSchedule::kInverseSqrt;
  t.weight_decay = 0.0;
  t.seeds = cfg.train_seeds;
  t.threads = cfg.threads;
  if (cfg.train_steps_override > 0) t.train_steps = cfg.train_steps_override;
  if (cfg.batch_override > 0) t.batch_size = cfg.batch_override;
  return t;
}

TrainConfig seq2seq_train_preset(const PipelineConfig& cfg) {
  TrainConfig t;
  t.beta1 = 0.9;
  t.beta2 = 0.997;
  t.base_lr = 0.001;
  t.schedule = LrSchedule::kInverseSqrt;
  if (cfg.preset == "paper") {
    t.batch_size = 512;
    t.train_steps = 20000;
    t.warmup_steps = 1000;
  } else {
    t.batch_size = 16;
    t.train_steps = 1100;
    t.warmup_steps = 120;
  }
  t.threads = cfg.threads;
  return t;
}

// ---- corpus stages --------------------------------------------------------------

namespace {

StageManifest base_manifest(const std::string& stage, const PipelineConfig& cfg) {
  StageManifest m;
  m.stage = stage;
  m.seed = cfg.seed;
  return m;
}

void finish_outputs(StageManifest& m, const std::string& out_dir,
                    const std::vector<std::string>& artifacts) {
  for (const auto& a : artifacts) m.outputs[a] = file_hash_hex(out_dir + "/" + a);
}

}  // namespace

void stage_generate(const PipelineConfig& cfg) {
  Corpus corpus = generate_synthetic(cfg.grammar, cfg.seed, cfg.corpus_n);
  write_corpus(corpus, cfg.out_dir + "/corpus.jsonl");
  write_vocabulary(build_vocabulary(corpus), cfg.out_dir + "/vocab.txt");

  StageManifest m = base_manifest("corpus", cfg);
  m.params["n"] = std::to_string(cfg.corpus_n);
  m.params["grammar"] = cfg.grammar.to_json();
  m.params["provenance"] = "synthetic";
  finish_outputs(m, cfg.out_dir, {"corpus.jsonl", "vocab.txt"});
  write_stage_manifest(cfg.out_dir, m);
}

void stage_ingest(const PipelineConfig& cfg, const std::string& data_path,
                  const std::string& trees_path) {
  std::vector<RejectedLine> rejects;
  Corpus corpus = load_cfq(data_path, trees_path, /*strict=*/false, &rejects);
  write_corpus(corpus, cfg.out_dir + "/corpus.jsonl");
  write_vocabulary(build_vocabulary(corpus), cfg.out_dir + "/vocab.txt");
  std::string report;
  for (const auto& r : rejects) {
    ordered_json j;
    j["line"] = r.line;
    j["id"] = r.id;
    j["error"] = r.message;
    report += j.dump() + "\n";
  }
  write_text_file(cfg.out_dir + "/ingest_rejects.jsonl", report);

  StageManifest m = base_manifest("corpus", cfg);
  m.params["provenance"] = "ingested";
  m.params["source"] = data_path;
  m.params["rejects"] = std::to_string(rejects.size());
  finish_outputs(m, cfg.out_dir,
                 {"corpus.jsonl", "vocab.txt", "ingest_rejects.jsonl"});
  write_stage_manifest(cfg.out_dir, m);
}

Corpus load_pipeline_corpus(const std::string& out_dir) {
  return read_corpus(require_fresh(out_dir, "corpus.jsonl", "corpus"));
}

void stage_split(const PipelineConfig& cfg) {
  Corpus corpus = load_pipeline_corpus(cfg.out_dir);
  SplitAssignment split;
  if (cfg.split_kind == "random") {
    split = random_split(corpus, {0.5, 0.25, 0.25}, cfg.seed);
    std::vector<int> eval_ids = split.ids_with(SplitTag::kDev);
    for (int id : split.ids_with(SplitTag::kTest)) eval_ids.push_back(id);
    split.atom_divergence =
        set_divergence(corpus, split.ids_with(SplitTag::kTrain), eval_ids,
                       false, kAtomAlpha);
    split.compound_divergence =
        set_divergence(corpus, split.ids_with(SplitTag::kTrain), eval_ids,
                       true, kCompoundAlpha);
  } else if (cfg.split_kind == "mcd") {
    split = mcd_split(corpus, cfg.seed, cfg.atom_cap, cfg.mcd_sweeps);
  } else {
    throw ConfigError("unknown split kind '" + cfg.split_kind + "'");
  }
  std::string artifact = "split_" + cfg.split_kind + ".json";
  split.write(cfg.out_dir + "/" + artifact,
              kAtomAlpha, kCompoundAlpha);

  StageManifest m = base_manifest("split_" + cfg.split_kind, cfg);
  m.inputs["corpus.jsonl"] = file_hash_hex(cfg.out_dir + "/corpus.jsonl");
  m.params["atom_cap"] = std::to_string(cfg.atom_cap);
  m.params["sweeps"] = std::to_string(cfg.mcd_sweeps);
  finish_outputs(m, cfg.out_dir, {artifact});
  write_stage_manifest(cfg.out_dir, m);
}

SplitAssignment load_pipeline_split(const std::string& out_dir,
                                    const std::string& kind) {
  return SplitAssignment::read(
      require_fresh(out_dir, "split_" + kind + ".json", "split_" + kind));
}

// ---- dataset stage ---------------------------------------------------------------

void write_dataset_bundle(const std::string& out_dir, const std::string& dataset,
                          const Corpus& corpus, const DatasetBundle& bundle,
                          const PipelineConfig& cfg,
                          const SplitAssignment& split) {
  ordered_json counts, positives;
  std::string provenance;
  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    const auto& instances = bundle.set(set_name);
    std::string lines;
    int64_t pos = 0;
    for (const auto& inst : instances) {
      ordered_json j;
      j["question_id"] = inst.question_id;
      j["question"] = corpus.examples[inst.question_id].question;
      j["query"] = inst.query_text;
      j["label"] = inst.label;
      j["negative_source"] = negative_source_name(inst.negative_source);
      j["set"] = set_name;
      lines += j.dump() + "\n";
      pos += inst.label;

      ordered_json p;
      p["set"] = set_name;
      p["question_id"] = inst.question_id;
      p["label"] = inst.label;
      p["negative_source"] = negative_source_name(inst.negative_source);
      p["source_example_id"] = inst.source_example_id;
      p["generator_tag"] = inst.generator_tag;
      provenance += p.dump() + "\n";
    }
    write_text_file(out_dir + "/" + dataset + "/" + set_name + ".jsonl", lines);
    counts[set_name] = instances.size();
    positives[set_name] = pos;
  }
  write_text_file(out_dir + "/" + dataset + "/provenance.jsonl", provenance);

  ordered_json manifest;
  manifest["dataset"] = dataset;
  manifest["seed"] = cfg.seed;
  manifest["split"] = cfg.split_kind;
  manifest["strategy"] = cfg.negative_strategy;
  manifest["k"] = cfg.top_k;
  manifest["counts"] = counts;
  manifest["positives"] = positives;
  manifest["atom_divergence"] = split.atom_divergence;
  manifest["compound_divergence"] = split.compound_divergence;
  ordered_json gens = ordered_json::object();
  for (const auto& [tag, ids] : bundle.generator_training_ids) gens[tag] = ids;
  manifest["generator_training_ids"] = gens;
  write_text_file(out_dir + "/" + dataset + "/manifest.json",
                  manifest.dump(2) + "\n");
}

void stage_negatives(const PipelineConfig& cfg) {
  Corpus corpus = load_pipeline_corpus(cfg.out_dir);
  SplitAssignment split = load_pipeline_split(cfg.out_dir, cfg.split_kind);
  Vocabulary vocab(read_vocabulary(
      require_fresh(cfg.out_dir, "vocab.txt", "corpus")));

  NegativePlan plan;
  plan.strategy = cfg.negative_strategy == "model"
                      ? NegativePlan::Strategy::kModel
                      : NegativePlan::Strategy::kRandom;
  plan.k_candidates = cfg.top_k;

  std::unique_ptr<Seq2SeqGeneratorFactory> factory;
  if (plan.strategy == NegativePlan::Strategy::kModel) {
    factory = std::make_unique<Seq2SeqGeneratorFactory>(
        vocab, seq2seq_preset(cfg, vocab.size()), seq2seq_train_preset(cfg));
  }
  DatasetBundle bundle =
      assemble_dataset(corpus, split, plan, cfg.seed, factory.get());

  std::string ds = dataset_name(cfg);
  write_dataset_bundle(cfg.out_dir, ds, corpus, bundle, cfg, split);

  StageManifest m = base_manifest(ds, cfg);
  m.inputs["corpus.jsonl"] = file_hash_hex(cfg.out_dir + "/corpus.jsonl");
  m.inputs["split_" + cfg.split_kind + ".json"] =
      file_hash_hex(cfg.out_dir + "/split_" + cfg.split_kind + ".json");
  m.params["strategy"] = cfg.negative_strategy;
  m.params["k"] = std::to_string(cfg.top_k);
  finish_outputs(m, cfg.out_dir,
                 {ds + "/train.jsonl", ds + "/holdout.jsonl", ds + "/dev.jsonl",
                  ds + "/test.jsonl", ds + "/provenance.jsonl",
                  ds + "/manifest.json"});
  write_stage_manifest(cfg.out_dir, m);
}

DatasetBundle read_dataset_bundle(const std::string& out_dir,
                                  const std::string& dataset,
                                  bool with_provenance) {
  DatasetBundle bundle;
  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    auto lines = read_lines(out_dir + "/" + dataset + "/" + set_name + ".jsonl");
    auto& dst = bundle.mutable_set(set_name);
    int line_no = 0;
    for (const auto& line : lines) {
      ++line_no;
      if (line.empty()) continue;
      ordered_json j;
      try {
        j = ordered_json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(line_no, e.what());
      }
      ClassificationInstance inst;
      inst.question_id = j.at("question_id").get<int>();
      inst.query_text = j.at("query").get<std::string>();
      inst.label = j.at("label").get<int>();
      inst.negative_source =
          negative_source_from_name(j.at("negative_source").get<std::string>());
      inst.set_name = set_name;
      dst.push_back(std::move(inst));
    }
  }
  if (with_provenance) {
    auto lines = read_lines(out_dir + "/" + dataset + "/provenance.jsonl");
    std::map<std::string, size_t> cursor{{"train", 0}, {"holdout", 0},
                                          {"dev", 0}, {"test", 0}};
    for (const auto& line : lines) {
      if (line.empty()) continue;
      ordered_json j = ordered_json::parse(line);
      std::string set_name = j.at("set").get<std::string>();
      auto& dst = bundle.mutable_set(set_name);
      size_t& i = cursor[set_name];
      if (i >= dst.size()) throw ParseError(0, "provenance longer than dataset");
      dst[i].source_example_id = j.at("source_example_id").get<int>();
      dst[i].generator_tag = j.at("generator_tag").get<std::string>();
      ++i;
    }
    ordered_json manifest = ordered_json::parse(
        read_text_file(out_dir + "/" + dataset + "/manifest.json"));
    for (auto& [tag, ids] : manifest.at("generator_training_ids").items()) {
      bundle.generator_training_ids[tag] = ids.get<std::vector<int>>();
    }
  }
  return bundle;
}

// ---- annotate stage -----------------------------------------------------------

void stage_annotate(const PipelineConfig& cfg) {
  Corpus corpus = load_pipeline_corpus(cfg.out_dir);
  std::string ds = dataset_name(cfg);
  StageManifest m = base_manifest("annotated_" + ds.substr(8), cfg);
  // Dataset files are the inputs; verify against the dataset stage manifest.
  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    require_fresh(cfg.out_dir, ds + "/" + set_name + ".jsonl", ds);
    m.inputs[ds + "/" + set_name + ".jsonl"] =
        file_hash_hex(cfg.out_dir + "/" + ds + "/" + set_name + ".jsonl");
  }

  std::string annot_dir = "annotated_" + ds.substr(8);
  std::vector<std::string> artifacts;
  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    auto lines = read_lines(cfg.out_dir + "/" + ds + "/" + set_name + ".jsonl");
    std::string out, mask_out;
    int id = 0;
    for (const auto& line : lines) {
      if (line.empty()) continue;
      ordered_json j = ordered_json::parse(line);
      int qid = j.at("question_id").get<int>();
      const Example& ex = corpus.examples[qid];
      AnnotatedInstance inst =
          annotate_pair(id, tokenize_question(ex.question), ex.question_tree,
                        j.at("query").get<std::string>());
      out += annotated_to_json_line(inst) + "\n";
      if (!cfg.annotate_mask.empty()) {
        MaskSet set = build_mask_set(inst, mask_mode_from_name(cfg.annotate_mask),
                                     cfg.cross_link);
        mask_out += mask_set_to_json(set) + "\n";
      }
      ++id;
    }
    std::string rel = annot_dir + "/" + set_name + ".annot.jsonl";
    write_text_file(cfg.out_dir + "/" + rel, out);
    artifacts.push_back(rel);
    if (!cfg.annotate_mask.empty()) {
      std::string mrel = annot_dir + "/" + set_name + ".masks.jsonl";
      write_text_file(cfg.out_dir + "/" + mrel, mask_out);
      artifacts.push_back(mrel);
    }
  }
  m.params["mask"] = cfg.annotate_mask.empty() ? "none" : cfg.annotate_mask;
  finish_outputs(m, cfg.out_dir, artifacts);
  write_stage_manifest(cfg.out_dir, m);
}

// ---- training stage --------------------------------------------------------------

namespace {

std::vector<int> lstm_ids_for(const AnnotatedInstance& inst,
                              const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  for (int i = 0; i < inst.layout.size(); ++i) {
    if (inst.layout.segments[i] == Segment::kQuestion) {
      tokens.push_back(inst.layout.tokens[i]);
    }
  }
  tokens.push_back(kSepToken);
  for (int i = 0; i < inst.layout.size(); ++i) {
    if (inst.layout.segments[i] == Segment::kQuery) {
      tokens.push_back(inst.layout.tokens[i]);
    }
  }
  return vocab.ids_for(tokens);
}

std::vector<TrainingInstance> load_set_instances(
    const std::string& out_dir, const std::string& dataset,
    const std::string& annot_dir, const std::string& set_name,
    const Vocabulary& vocab, const EncoderConfig& enc_cfg) {
  auto data_lines = read_lines(out_dir + "/" + dataset + "/" + set_name + ".jsonl");
  auto annot_lines =
      read_lines(out_dir + "/" + annot_dir + "/" + set_name + ".annot.jsonl");
  std::vector<TrainingInstance> out;
  size_t ai = 0;
  for (size_t i = 0; i < data_lines.size(); ++i) {
    if (data_lines[i].empty()) continue;
    if (ai >= annot_lines.size()) {
      throw ParseError(static_cast<int>(i) + 1,
                       "annotated file shorter than dataset file");
    }
    ordered_json j = ordered_json::parse(data_lines[i]);
    AnnotatedInstance inst =
        annotated_from_json_line(annot_lines[ai++], static_cast<int>(i) + 1);
    TrainingInstance ti;
    ti.enc = make_encoder_input(inst, vocab, enc_cfg);
    ti.lstm_ids = lstm_ids_for(inst, vocab);
    ti.label = j.at("label").get<int>();
    out.push_back(std::move(ti));
  }
  return out;
}

}  // namespace

TrainingData load_training_data(const std::string& out_dir,
                                const std::string& dataset,
                                const Vocabulary& vocab,
                                const EncoderConfig& enc_cfg, bool include_test) {
  std::string annot_dir = "annotated_" + dataset.substr(8);
  TrainingData data;
  data.train = load_set_instances(out_dir, dataset, annot_dir, "train", vocab, enc_cfg);
  data.holdout =
      load_set_instances(out_dir, dataset, annot_dir, "holdout", vocab, enc_cfg);
  data.dev = load_set_instances(out_dir, dataset, annot_dir, "dev", vocab, enc_cfg);
  if (include_test) {
    data.test = load_set_instances(out_dir, dataset, annot_dir, "test", vocab, enc_cfg);
  }
  return data;
}

namespace {

ordered_json report_to_json(const MetricReport& report) {
  ordered_json j = ordered_json::object();
  for (const auto& [set, m] : report.sets) {
    ordered_json sj;
    sj["accuracy"] = m.accuracy;
    sj["f1"] = m.f1;
    sj["auc"] = m.auc;
    j[set] = sj;
  }
  return j;
}

MetricReport report_from_json(const ordered_json& j) {
  MetricReport r;
  for (auto& [set, sj] : j.items()) {
    r.sets[set] = {sj.at("accuracy").get<double>(), sj.at("f1").get<double>(),
                   sj.at("auc").get<double>()};
  }
  return r;
}

}  // namespace

void stage_train(const PipelineConfig& cfg) {
  std::string ds = dataset_name(cfg);
  std::string annot_dir = "annotated_" + ds.substr(8);
  Vocabulary vocab(read_vocabulary(
      require_fresh(cfg.out_dir, "vocab.txt", "corpus")));
  for (const std::string set_name : {"train", "holdout", "dev"}) {
    require_fresh(cfg.out_dir, annot_dir + "/" + set_name + ".annot.jsonl",
                  annot_dir);
  }

  EncoderConfig enc_cfg = encoder_preset(cfg, vocab.size());
  LstmConfig lstm_cfg = lstm_preset(cfg, vocab.size());
  TrainConfig train_cfg = classifier_train_preset(cfg);
  TrainingData data =
      load_training_data(cfg.out_dir, ds, vocab, enc_cfg, /*include_test=*/false);

  std::string run = run_name(cfg);
  std::string run_dir = cfg.out_dir + "/runs/" + run;
  std::vector<MetricReport> best_reports, final_reports;
  ordered_json per_seed = ordered_json::array();
  for (uint64_t seed : train_cfg.seeds) {
    std::string seed_dir = run_dir + "/seed" + std::to_string(seed);
    std::filesystem::create_directories(seed_dir);
    TrainResult result;
    if (cfg.model_kind == "lstm") {
      result = train_lstm_classifier(data, lstm_cfg, train_cfg, seed,
                                     seed_dir + "/checkpoint.bin");
    } else {
      result = train_encoder_classifier(data, enc_cfg, train_cfg, seed,
                                        seed_dir + "/checkpoint.bin");
    }
    write_metric_csv(result.log, seed_dir + "/metrics.csv");
    best_reports.push_back(result.best_report);
    final_reports.push_back(result.final_report);
    ordered_json sj;
    sj["seed"] = seed;
    sj["best_step"] = result.best_step;
    sj["best"] = report_to_json(result.best_report);
    sj["final"] = report_to_json(result.final_report);
    per_seed.push_back(sj);
    std::cout << "run " << run << " seed " << seed << ": dev auc best "
              << result.best_report.sets.at("dev").auc << " final "
              << result.final_report.sets.at("dev").auc << "\n";
  }

  ordered_json report;
  report["run"] = run;
  report["dataset"] = ds;
  report["model"] = cfg.model_kind;
  report["mask"] = cfg.model_kind == "lstm" ? "-" : mask_mode_name(cfg.mask);
  report["cross_link"] =
      cfg.model_kind == "lstm" ? "-" : (cfg.cross_link ? "Y" : "N");
  report["preset"] = cfg.preset;
  report["steps"] = train_cfg.train_steps;
  report["batch"] = train_cfg.batch_size;
  report["seeds"] = train_cfg.seeds;
  report["seed_averaged_best"] = report_to_json(seed_average(best_reports));
  report["seed_averaged_final"] = report_to_json(seed_average(final_reports));
  report["per_seed"] = per_seed;
  write_text_file(run_dir + "/report.json", report.dump(2) + "\n");

  StageManifest m = base_manifest("run_" + run, cfg);
  for (const std::string set_name : {"train", "holdout", "dev"}) {
    std::string rel = annot_dir + "/" + set_name + ".annot.jsonl";
    m.inputs[rel] = file_hash_hex(cfg.out_dir + "/" + rel);
  }
  m.params["steps"] = std::to_string(train_cfg.train_steps);
  m.params["model"] = cfg.model_kind;
  m.params["mask"] = mask_mode_name(cfg.mask);
  m.params["cross_link"] = cfg.cross_link ? "Y" : "N";
  std::vector<std::string> artifacts{"runs/" + run + "/report.json"};
  for (uint64_t seed : train_cfg.seeds) {
    artifacts.push_back("runs/" + run + "/seed" + std::to_string(seed) +
                        "/metrics.csv");
    artifacts.push_back("runs/" + run + "/seed" + std::to_string(seed) +
                        "/checkpoint.bin");
  }
  finish_outputs(m, cfg.out_dir, artifacts);
  write_stage_manifest(cfg.out_dir, m);
}

// ---- eval stage --------------------------------------------------------------------

void stage_eval(const PipelineConfig& cfg, const std::string& which_run,
                bool include_test) {
  std::string run = which_run.empty() ? run_name(cfg) : which_run;
  std::string run_dir = cfg.out_dir + "/runs/" + run;
  ordered_json report = ordered_json::parse(read_text_file(run_dir + "/report.json"));
  std::string ds = report.at("dataset").get<std::string>();
  std::string model_kind = report.at("model").get<std::string>();

  Vocabulary vocab(read_vocabulary(cfg.out_dir + "/vocab.txt"));
  PipelineConfig run_cfg = cfg;
  run_cfg.model_kind = model_kind;
  if (model_kind != "lstm") {
    run_cfg.mask = mask_mode_from_name(report.at("mask").get<std::string>());
    run_cfg.cross_link = report.at("cross_link").get<std::string>() == "Y";
  }
  run_cfg.preset = report.at("preset").get<std::string>();
  EncoderConfig enc_cfg = encoder_preset(run_cfg, vocab.size());
  TrainingData data =
      load_training_data(cfg.out_dir, ds, vocab, enc_cfg, include_test);

  ordered_json out;
  out["run"] = run;
  out["include_test"] = include_test;
  ordered_json per_seed = ordered_json::array();
  for (const auto& sj : report.at("per_seed")) {
    uint64_t seed = sj.at("seed").get<uint64_t>();
    std::string ckpt = run_dir + "/seed" + std::to_string(seed) + "/checkpoint.bin";
    MetricReport r;
    r.seed = seed;
    if (model_kind == "lstm") {
      LstmClassifier model(lstm_preset(run_cfg, vocab.size()), 0);
      load_checkpoint(model.params().all(), ckpt);
      r.sets["train"] = evaluate_lstm(model, data.train);
      r.sets["holdout"] = evaluate_lstm(model, data.holdout);
      r.sets["dev"] = evaluate_lstm(model, data.dev);
      if (include_test) r.sets["test"] = evaluate_lstm(model, data.test);
    } else {
      EncoderClassifier model(enc_cfg, 0);
      load_checkpoint(model.params().all(), ckpt);
      r.sets["train"] = evaluate_encoder(model, data.train);
      r.sets["holdout"] = evaluate_encoder(model, data.holdout);
      r.sets["dev"] = evaluate_encoder(model, data.dev);
      if (include_test) r.sets["test"] = evaluate_encoder(model, data.test);
    }
    ordered_json rs;
    rs["seed"] = seed;
    rs["metrics"] = report_to_json(r);
    per_seed.push_back(rs);
    std::cout << "eval " << run << " seed " << seed << ": dev auc "
              << r.sets.at("dev").auc << "\n";
  }
  out["per_seed"] = per_seed;
  write_text_file(run_dir + "/eval.json", out.dump(2) + "\n");
}

// ---- report stage -----------------------------------------------------------------

namespace {

struct ReportRow {
  std::string run, dataset, model, mask, link;
  MetricReport best;
};

int table_order(const ReportRow& r) {
  // Ablation rows first, in the published order, then the rest.
  if (r.model == "lstm") return 100;
  if (r.mask == "none") return 0;
  if (r.mask == "hard" && r.link == "N") return 1;
  if (r.mask == "hard" && r.link == "Y") return 2;
  if (r.mask == "soft" && r.link == "Y") return 3;
  if (r.mask == "both" && r.link == "Y") return 4;
  if (r.mask == "soft" && r.link == "N") return 5;
  if (r.mask == "both" && r.link == "N") return 6;
  if (r.mask == "block") return 7;
  return 50;
}

}  // namespace

void stage_report(const PipelineConfig& cfg) {
  std::vector<ReportRow> rows;
  std::string runs_dir = cfg.out_dir + "/runs";
  if (fs::exists(runs_dir)) {
    std::vector<std::string> run_names;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
      if (entry.is_directory()) run_names.push_back(entry.path().filename().string());
    }
    std::sort(run_names.begin(), run_names.end());
    for (const auto& name : run_names) {
      std::string path = runs_dir + "/" + name + "/report.json";
      if (!file_exists(path)) continue;
      ordered_json j = ordered_json::parse(read_text_file(path));
      ReportRow row;
      row.run = name;
      row.dataset = j.at("dataset").get<std::string>();
      row.model = j.at("model").get<std::string>();
      row.mask = j.at("mask").get<std::string>();
      row.link = j.at("cross_link").get<std::string>();
      row.best = report_from_json(j.at("seed_averaged_best"));
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.dataset != b.dataset) return a.dataset < b.dataset;
    return table_order(a) < table_order(b);
  });

  std::string csv =
      "dataset,model,mask,cross_link,train_acc,train_f1,train_auc,"
      "holdout_acc,holdout_f1,holdout_auc,dev_acc,dev_f1,dev_auc\n";
  std::string txt =
      "dataset                model  mask   link   train_auc  holdout_auc  dev_auc\n";
  char buf[360];
  for (const auto& r : rows) {
    auto get = [&r](const std::string& set) {
      auto it = r.best.sets.find(set);
      return it == r.best.sets.end() ? SetMetrics{} : it->second;
    };
    SetMetrics tr = get("train"), ho = get("holdout"), de = get("dev");
    std::snprintf(buf, sizeof(buf),
                  "%s,%s,%s,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  r.dataset.c_str(), r.model.c_str(), r.mask.c_str(),
                  r.link.c_str(), tr.accuracy, tr.f1, tr.auc, ho.accuracy, ho.f1,
                  ho.auc, de.accuracy, de.f1, de.auc);
    csv += buf;
    std::snprintf(buf, sizeof(buf), "%-22s %-6s %-6s %-6s %9.4f %12.4f %8.4f\n",
                  r.dataset.c_str(), r.model.c_str(), r.mask.c_str(),
                  r.link.c_str(), tr.auc, ho.auc, de.auc);
    txt += buf;
  }
  write_text_file(cfg.out_dir + "/report.csv", csv);
  write_text_file(cfg.out_dir + "/report.txt", txt);
  std::cout << txt;

  StageManifest m = base_manifest("report", cfg);
  finish_outputs(m, cfg.out_dir, {"report.csv", "report.txt"});
  write_stage_manifest(cfg.out_dir, m);
}

}  // namespace treecls
