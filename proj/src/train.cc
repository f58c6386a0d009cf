#include "treecls/train.h"

#include <algorithm>
#include <cmath>
#include <thread>

#include "treecls/error.h"

namespace treecls {

double lr_at(int64_t step, const TrainConfig& config) {
  if (config.schedule == LrSchedule::kConstant) return config.base_lr;
  if (config.warmup_steps < 1) throw ConfigError("inverse_sqrt needs warmup_steps >= 1");
  double s = static_cast<double>(step);
  double w = static_cast<double>(config.warmup_steps);
  return config.base_lr * std::min(s / w, std::sqrt(w / s));
}

void AdamState::init(const std::vector<Parameter*>& params) {
  m.clear();
  v.clear();
  for (const Parameter* p : params) {
    m.push_back(Tensor::zeros(p->value.shape, Precision::kDouble));
    v.push_back(Tensor::zeros(p->value.shape, Precision::kDouble));
  }
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               int64_t step, const TrainConfig& config) {
  if (state.m.size() != params.size()) {
    throw ShapeError("adam state does not match the parameter list");
  }
  double lr = lr_at(step, config);
  double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    for (size_t j = 0; j < p->value.data.size(); ++j) {
      double g = p->gradient.data[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p->value.data[j] -=
          lr * (mhat / (std::sqrt(vhat) + config.adam_epsilon) +
                config.weight_decay * p->value.data[j]);
    }
    p->value.round_to_precision();
  }
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: length mismatch");
  int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedMetric("auc needs both classes present");
  }
  // Average ranks with ties, then the Mann-Whitney statistic.
  std::vector<int> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1) rank_sum_pos += rank[k];
  }
  double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::pair<double, double> accuracy_f1(const std::vector<double>& scores,
                                      const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("accuracy_f1: length mismatch");
  int64_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    int pred = scores[i] >= 0.5 ? 1 : 0;
    if (pred == labels[i]) ++correct;
    if (pred == 1 && labels[i] == 1) ++tp;
    if (pred == 1 && labels[i] == 0) ++fp;
    if (pred == 0 && labels[i] == 1) ++fn;
  }
  double accuracy =
      scores.empty() ? 0.0 : static_cast<double>(correct) / scores.size();
  double f1 = 0.0;
  if (tp > 0) {
    double precision = static_cast<double>(tp) / (tp + fp);
    double recall = static_cast<double>(tp) / (tp + fn);
    f1 = 2.0 * precision * recall / (precision + recall);
  }
  return {accuracy, f1};
}

MetricReport seed_average(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw ReportMismatch("no reports to average");
  MetricReport avg;
  avg.per_seed = reports;
  for (const auto& r : reports) {
    if (r.sets.size() != reports[0].sets.size()) {
      throw ReportMismatch("reports cover different set counts");
    }
  }
  for (const auto& [set, first] : reports[0].sets) {
    SetMetrics acc;
    for (const auto& r : reports) {
      auto it = r.sets.find(set);
      if (it == r.sets.end()) throw ReportMismatch("set '" + set + "' missing");
      acc.accuracy += it->second.accuracy;
      acc.f1 += it->second.f1;
      acc.auc += it->second.auc;
    }
    double n = static_cast<double>(reports.size());
    avg.sets[set] = {acc.accuracy / n, acc.f1 / n, acc.auc / n};
  }
  return avg;
}

void write_metric_csv(const std::vector<MetricRow>& rows, const std::string& path) {
  std::string out = "step,set,accuracy,f1,auc,seed\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,%.6f,%.6f,%llu\n",
                  static_cast<long long>(r.step), r.set.c_str(), r.accuracy,
                  r.f1, r.auc, static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  write_text_file(path, out);
}

namespace {

double class1_probability(const Tensor& logits) {
  double a = logits.data[0], b = logits.data[1];
  double mx = std::max(a, b);
  double ea = std::exp(a - mx), eb = std::exp(b - mx);
  return eb / (ea + eb);
}

Var model_forward(const EncoderClassifier& m, Tape& t, const TrainingInstance& inst,
                  Rng* rng, bool training) {
  return m.forward(t, inst.enc, rng, training);
}

Var model_forward(const LstmClassifier& m, Tape& t, const TrainingInstance& inst,
                  Rng* rng, bool training) {
  return m.forward(t, inst.lstm_ids, rng, training);
}

std::unique_ptr<EncoderClassifier> fresh_like(const EncoderClassifier& m) {
  auto r = std::make_unique<EncoderClassifier>(m.config(), 0);
  r->params().copy_values_from(m.params());
  return r;
}

std::unique_ptr<LstmClassifier> fresh_like(const LstmClassifier& m) {
  auto r = std::make_unique<LstmClassifier>(m.config(), 0);
  r->params().copy_values_from(m.params());
  return r;
}

template <typename Model>
SetMetrics evaluate_model(const Model& model,
                          const std::vector<TrainingInstance>& instances) {
  std::vector<double> scores(instances.size());
  std::vector<int> labels(instances.size());
  for (size_t i = 0; i < instances.size(); ++i) {
    Tape t;
    Var logits = model_forward(model, t, instances[i], nullptr, false);
    scores[i] = class1_probability(t.val(logits));
    labels[i] = instances[i].label;
  }
  SetMetrics m;
  auto [acc, f1] = accuracy_f1(scores, labels);
  m.accuracy = acc;
  m.f1 = f1;
  m.auc = auc(scores, labels);
  return m;
}

template <typename Model>
MetricReport evaluate_all(const Model& model, const TrainingData& data,
                          uint64_t seed, int train_cap) {
  MetricReport report;
  report.seed = seed;
  size_t cap = std::min<size_t>(data.train.size(), static_cast<size_t>(train_cap));
  std::vector<TrainingInstance> train_sample(data.train.begin(),
                                             data.train.begin() + cap);
  report.sets["train"] = evaluate_model(model, train_sample);
  if (!data.holdout.empty()) {
    report.sets["holdout"] = evaluate_model(model, data.holdout);
  }
  if (!data.dev.empty()) report.sets["dev"] = evaluate_model(model, data.dev);
  return report;
}

// Forward+backward over items [begin, end), gradients land in the model's
// parameter set. Dropout streams derive from (seed, step, item index) so the
// result is independent of how items are spread over replicas.
template <typename Model>
double run_chunk(const Model& model, const std::vector<TrainingInstance>& insts,
                 const std::vector<int>& batch, size_t begin, size_t end,
                 uint64_t drop_seed, int64_t step) {
  double loss_sum = 0.0;
  for (size_t i = begin; i < end; ++i) {
    const TrainingInstance& inst = insts[batch[i]];
    Rng drop_rng(mix_seed(drop_seed, static_cast<uint64_t>(step) * 4096 + i));
    Tape t;
    Var logits = model_forward(model, t, inst, &drop_rng, true);
    Var loss = cross_entropy(t, logits, inst.label);
    loss_sum += t.val(loss).data[0];
    t.backward(loss);
  }
  return loss_sum;
}

template <typename Model>
TrainResult train_loop(Model& model, const TrainingData& data,
                       const TrainConfig& config, uint64_t seed,
                       const std::string& checkpoint_path) {
  if (config.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (data.train.empty()) throw ConfigError("no training instances");

  std::vector<Parameter*> params = model.params().all();
  AdamState adam;
  adam.init(params);

  int threads = std::max(1, config.threads);
  std::vector<std::unique_ptr<Model>> replicas;
  for (int r = 1; r < threads; ++r) replicas.push_back(fresh_like(model));

  Rng order_rng(mix_seed(seed, 0x04de4));
  std::vector<int> order(data.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  size_t cursor = order.size();  // trigger shuffle on first use

  uint64_t drop_seed = mix_seed(seed, 0xd20b);
  int eval_every = config.eval_every > 0 ? config.eval_every
                                         : std::max(1, config.train_steps / 10);

  TrainResult result;
  double best_dev_auc = -1.0;

  for (int64_t step = 1; step <= config.train_steps; ++step) {
    std::vector<int> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    model.params().zero_grads();
    double loss_sum = 0.0;
    if (threads == 1) {
      loss_sum = run_chunk(model, data.train, batch, 0, batch.size(), drop_seed,
                           step);
    } else {
      for (auto& r : replicas) {
        r->params().copy_values_from(model.params());
        r->params().zero_grads();
      }
      size_t per = (batch.size() + threads - 1) / threads;
      std::vector<double> losses(threads, 0.0);
      std::vector<std::thread> pool;
      for (int tix = 0; tix < threads; ++tix) {
        size_t b0 = std::min(batch.size(), tix * per);
        size_t b1 = std::min(batch.size(), (tix + 1) * per);
        const Model* m = tix == 0 ? &model : replicas[tix - 1].get();
        pool.emplace_back([&, tix, b0, b1, m]() {
          losses[tix] = run_chunk(*m, data.train, batch, b0, b1, drop_seed, step);
        });
      }
      for (auto& th : pool) th.join();
      for (double l : losses) loss_sum += l;
      // Fixed reduction order: main grads, then replicas in index order.
      for (auto& r : replicas) {
        auto rp = r->params().all();
        for (size_t pi = 0; pi < params.size(); ++pi) {
          for (size_t j = 0; j < params[pi]->gradient.data.size(); ++j) {
            params[pi]->gradient.data[j] += rp[pi]->gradient.data[j];
          }
        }
      }
    }

    double mean_loss = loss_sum / batch.size();
    if (std::isnan(mean_loss)) {
      throw Error("training diverged: NaN loss at step " + std::to_string(step) +
                  " (seed " + std::to_string(seed) + ")");
    }
    double inv_batch = 1.0 / batch.size();
    for (Parameter* p : params) {
      for (double& g : p->gradient.data) g *= inv_batch;
    }
    adam_step(params, adam, step, config);

    if (step % eval_every == 0 || step == config.train_steps) {
      MetricReport report =
          evaluate_all(model, data, seed, config.eval_train_cap);
      for (const auto& [set, m] : report.sets) {
        result.log.push_back({step, set, m.accuracy, m.f1, m.auc, seed});
      }
      result.final_report = report;
      auto dev = report.sets.find("dev");
      double dev_auc = dev != report.sets.end() ? dev->second.auc : 0.0;
      if (dev_auc > best_dev_auc) {
        best_dev_auc = dev_auc;
        result.best_report = report;
        result.best_step = step;
        if (!checkpoint_path.empty()) {
          save_checkpoint(
              std::as_const(model).params().all(), checkpoint_path);
        }
      }
    }
  }
  return result;
}

}  // namespace

SetMetrics evaluate_encoder(const EncoderClassifier& model,
                            const std::vector<TrainingInstance>& instances) {
  return evaluate_model(model, instances);
}

SetMetrics evaluate_lstm(const LstmClassifier& model,
                         const std::vector<TrainingInstance>& instances) {
  return evaluate_model(model, instances);
}

TrainResult train_encoder_classifier(const TrainingData& data,
                                     const EncoderConfig& model_config,
                                     const TrainConfig& config, uint64_t seed,
                                     const std::string& checkpoint_path) {
  EncoderClassifier model(model_config, mix_seed(seed, 0xe0c0d3));
  return train_loop(model, data, config, seed, checkpoint_path);
}

TrainResult train_lstm_classifier(const TrainingData& data,
                                  const LstmConfig& model_config,
                                  const TrainConfig& config, uint64_t seed,
                                  const std::string& checkpoint_path) {
  LstmClassifier model(model_config, mix_seed(seed, 0x15f3));
  return train_loop(model, data, config, seed, checkpoint_path);
}

std::unique_ptr<Seq2SeqModel> train_seq2seq(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
    const Seq2SeqConfig& model_config, const TrainConfig& config, uint64_t seed) {
  if (pairs.empty()) throw ConfigError("no seq2seq training pairs");
  auto model = std::make_unique<Seq2SeqModel>(model_config, mix_seed(seed, 0x5e92));
  std::vector<Parameter*> params = model->params().all();
  AdamState adam;
  adam.init(params);

  Rng order_rng(mix_seed(seed, 0x04d2));
  std::vector<int> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  size_t cursor = order.size();
  uint64_t drop_seed = mix_seed(seed, 0xd20c);

  for (int64_t step = 1; step <= config.train_steps; ++step) {
    model->params().zero_grads();
    double loss_sum = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const auto& [src, tgt] = pairs[order[cursor++]];
      Rng drop_rng(mix_seed(drop_seed, static_cast<uint64_t>(step) * 4096 + b));
      Tape t;
      Var loss = model->loss(t, src, tgt, &drop_rng, true);
      loss_sum += t.val(loss).data[0];
      t.backward(loss);
    }
    if (std::isnan(loss_sum)) {
      throw Error("seq2seq training diverged at step " + std::to_string(step));
    }
    double inv_batch = 1.0 / config.batch_size;
    for (Parameter* p : params) {
      for (double& g : p->gradient.data) g *= inv_batch;
    }
    adam_step(params, adam, step, config);
  }
  return model;
}

}  // namespace treecls
