#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "treecls/corpus.h"
#include "treecls/divergence.h"
#include "treecls/model.h"
#include "treecls/sparql.h"
#include "treecls/train.h"

namespace treecls {

enum class NegativeSource { kGold, kRandom, kModel, kPerturbation };

std::string negative_source_name(NegativeSource s);
NegativeSource negative_source_from_name(const std::string& name);

struct ClassificationInstance {
  int question_id = -1;
  std::string query_text;
  int label = 0;
  NegativeSource negative_source = NegativeSource::kGold;
  std::string set_name;  // train | holdout | dev | test

  // Provenance for the leakage audit; not part of the dataset schema.
  int source_example_id = -1;   // random negatives: example supplying the query
  std::string generator_tag;    // model negatives: which trained model
};

struct NegativePlan {
  enum class Strategy { kRandom, kModel };
  Strategy strategy = Strategy::kRandom;
  int k_candidates = 10;
  int per_example_negatives = 3;
};

struct DatasetBundle {
  std::vector<ClassificationInstance> train, holdout, dev, test;
  // generator tag -> ids the generator was trained on (model strategy).
  std::map<std::string, std::vector<int>> generator_training_ids;

  const std::vector<ClassificationInstance>& set(const std::string& name) const;
  std::vector<ClassificationInstance>& mutable_set(const std::string& name);
};

// Produces top-k query texts for a question; the production implementation
// wraps a trained seq2seq model, tests may inject an oracle.
class QueryGenerator {
 public:
  virtual ~QueryGenerator() = default;
  virtual std::vector<std::string> topk_queries(const std::string& question,
                                                int k) = 0;
};

class QueryGeneratorFactory {
 public:
  virtual ~QueryGeneratorFactory() = default;
  virtual std::unique_ptr<QueryGenerator> train_on(
      const std::vector<const Example*>& data, uint64_t seed,
      const std::string& tag) = 0;
};

// 1 positive + 3 negatives per question, negatives drawn uniformly without
// replacement from other examples of the same split set, never canonically
// equal to the gold. Throws CapacityError when the pool cannot supply 3.
std::vector<ClassificationInstance> sample_random_negatives(
    const std::vector<const Example*>& split_set, uint64_t seed,
    int per_example_negatives = 3);

// One atomic seeded edit: swap two entity tokens, delete a triple (if >= 2),
// or replace a relation with another from relation_vocab. The result parses
// and differs canonically from the input.
std::string perturbation_fallback(const QueryAst& ast,
                                  const std::vector<std::string>& relation_vocab,
                                  uint64_t seed);

// Model negatives with leakage-safe sourcing: train is halved, each half's
// generator is trained on the other; dev negatives come from a model trained
// on test and vice versa. Candidates are filtered (parse, canonical dedup,
// non-gold); deficits fall back to perturbations tagged as such.
struct ModelNegativesResult {
  std::vector<ClassificationInstance> instances;
  std::map<std::string, std::vector<int>> generator_training_ids;
};
ModelNegativesResult generate_model_negatives(const Corpus& corpus,
                                              const SplitAssignment& split,
                                              QueryGeneratorFactory& factory,
                                              int k, uint64_t seed);

// Full dataset: positives + negatives per split, 5% of train questions
// (ceiling, at least one) carved into holdout with all their instances,
// per-set order shuffled by seed.
DatasetBundle assemble_dataset(const Corpus& corpus, const SplitAssignment& split,
                               const NegativePlan& plan, uint64_t seed,
                               QueryGeneratorFactory* factory);

// Relation tokens seen across the corpus queries, sorted; the perturbation
// edit vocabulary.
std::vector<std::string> corpus_relation_vocab(const Corpus& corpus);

struct AuditResult {
  int violations = 0;
  std::vector<std::string> messages;
};

// Checks: random negatives sourced within the question's split set; model
// negatives generated by models that never saw the question; every negative
// parses and differs canonically from its gold; 1:3 ratio per set.
AuditResult audit_dataset(const Corpus& corpus, const SplitAssignment& split,
                          const DatasetBundle& bundle);

// Seq2seq-backed factory: trains one model per call on the given examples.
class Seq2SeqGeneratorFactory : public QueryGeneratorFactory {
 public:
  Seq2SeqGeneratorFactory(const Vocabulary& vocab, Seq2SeqConfig model_config,
                          TrainConfig train_config);
  std::unique_ptr<QueryGenerator> train_on(const std::vector<const Example*>& data,
                                           uint64_t seed,
                                           const std::string& tag) override;

 private:
  const Vocabulary& vocab_;
  Seq2SeqConfig model_config_;
  TrainConfig train_config_;
};

}  // namespace treecls
