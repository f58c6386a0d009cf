#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "treecls/model.h"
#include "treecls/tensor.h"

namespace treecls {

enum class LrSchedule { kConstant, kInverseSqrt };

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.997;
  double base_lr = 0.001;
  LrSchedule schedule = LrSchedule::kInverseSqrt;
  int warmup_steps = 1000;
  int batch_size = 32;
  int train_steps = 5000;
  double weight_decay = 0.0;
  double adam_epsilon = 1e-9;
  std::vector<uint64_t> seeds = {1, 2};
  int eval_every = 0;         // 0 = train_steps / 10
  int eval_train_cap = 2000;  // train metrics use a deterministic prefix
  int threads = 1;            // batch items split over replicas, fixed reduce order
};

// Linear warmup to base_lr at step == warmup, then inverse-sqrt decay.
double lr_at(int64_t step, const TrainConfig& config);

struct AdamState {
  std::vector<Tensor> m, v;
  void init(const std::vector<Parameter*>& params);
};

// Standard bias-corrected update reading Parameter::gradient; gradients are
// left untouched (callers zero them).
void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               int64_t step, const TrainConfig& config);

// Tie-aware rank AUC (Mann-Whitney); throws UndefinedMetric unless both
// classes are present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Threshold 0.5 on the class-1 score; F1 of class 1, 0 when nothing is
// predicted positive.
std::pair<double, double> accuracy_f1(const std::vector<double>& scores,
                                      const std::vector<int>& labels);

struct SetMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
};

struct MetricReport {
  std::map<std::string, SetMetrics> sets;
  uint64_t seed = 0;
  std::vector<MetricReport> per_seed;  // populated by seed_average
};

MetricReport seed_average(const std::vector<MetricReport>& reports);

struct TrainingInstance {
  EncoderInput enc;
  std::vector<int> lstm_ids;
  int label = 0;
};

struct TrainingData {
  std::vector<TrainingInstance> train, holdout, dev, test;
};

struct MetricRow {
  int64_t step = 0;
  std::string set;
  double accuracy = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  uint64_t seed = 0;
};

void write_metric_csv(const std::vector<MetricRow>& rows, const std::string& path);

struct TrainResult {
  MetricReport final_report;
  MetricReport best_report;  // at the best dev-AUC step
  int64_t best_step = -1;
  std::vector<MetricRow> log;
};

// Trains with cross-entropy on seeded shuffled mini-batches; evaluates
// train/holdout/dev at intervals; retains the best-dev checkpoint at
// checkpoint_path (when nonempty). The test set is never evaluated here.
TrainResult train_encoder_classifier(const TrainingData& data,
                                     const EncoderConfig& model_config,
                                     const TrainConfig& config, uint64_t seed,
                                     const std::string& checkpoint_path);

TrainResult train_lstm_classifier(const TrainingData& data,
                                  const LstmConfig& model_config,
                                  const TrainConfig& config, uint64_t seed,
                                  const std::string& checkpoint_path);

SetMetrics evaluate_encoder(const EncoderClassifier& model,
                            const std::vector<TrainingInstance>& instances);
SetMetrics evaluate_lstm(const LstmClassifier& model,
                         const std::vector<TrainingInstance>& instances);

// Teacher-forced seq2seq training over (source ids, target ids) pairs.
std::unique_ptr<Seq2SeqModel> train_seq2seq(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
    const Seq2SeqConfig& model_config, const TrainConfig& config, uint64_t seed);

}  // namespace treecls
