#include "treecls/negatives.h"

#include <algorithm>
#include <set>

#include "treecls/error.h"
#include "treecls/util.h"

namespace treecls {

std::string negative_source_name(NegativeSource s) {
  switch (s) {
    case NegativeSource::kGold: return "gold";
    case NegativeSource::kRandom: return "random";
    case NegativeSource::kModel: return "model";
    case NegativeSource::kPerturbation: return "perturbation";
  }
  return "gold";
}

NegativeSource negative_source_from_name(const std::string& name) {
  if (name == "gold") return NegativeSource::kGold;
  if (name == "random") return NegativeSource::kRandom;
  if (name == "model") return NegativeSource::kModel;
  if (name == "perturbation") return NegativeSource::kPerturbation;
  throw ConfigError("unknown negative source '" + name + "'");
}

const std::vector<ClassificationInstance>& DatasetBundle::set(
    const std::string& name) const {
  if (name == "train") return train;
  if (name == "holdout") return holdout;
  if (name == "dev") return dev;
  if (name == "test") return test;
  throw ConfigError("unknown set '" + name + "'");
}

std::vector<ClassificationInstance>& DatasetBundle::mutable_set(
    const std::string& name) {
  return const_cast<std::vector<ClassificationInstance>&>(
      std::as_const(*this).set(name));
}

std::vector<ClassificationInstance> sample_random_negatives(
    const std::vector<const Example*>& split_set, uint64_t seed,
    int per_example_negatives) {
  if (split_set.size() < 5) {
    throw CapacityError("split set has fewer than 5 examples");
  }
  std::vector<ClassificationInstance> out;
  for (size_t qi = 0; qi < split_set.size(); ++qi) {
    const Example& ex = *split_set[qi];
    std::string gold_canonical = canonical_query(ex.query);

    ClassificationInstance pos;
    pos.question_id = ex.id;
    pos.query_text = ex.query;
    pos.label = 1;
    pos.negative_source = NegativeSource::kGold;
    out.push_back(pos);

    // Partial Fisher-Yates over the other examples, seeded per question.
    Rng rng(mix_seed(seed, static_cast<uint64_t>(ex.id)));
    std::vector<int> pool;
    pool.reserve(split_set.size() - 1);
    for (size_t j = 0; j < split_set.size(); ++j) {
      if (j != qi) pool.push_back(static_cast<int>(j));
    }
    int taken = 0;
    size_t cursor = 0;
    while (taken < per_example_negatives) {
      if (cursor >= pool.size()) {
        throw CapacityError("cannot draw " +
                            std::to_string(per_example_negatives) +
                            " distinct non-gold queries for question " +
                            std::to_string(ex.id));
      }
      size_t pick = cursor + rng.below(pool.size() - cursor);
      std::swap(pool[cursor], pool[pick]);
      const Example& other = *split_set[pool[cursor++]];
      if (canonical_query(other.query) == gold_canonical) continue;
      ClassificationInstance neg;
      neg.question_id = ex.id;
      neg.query_text = other.query;
      neg.label = 0;
      neg.negative_source = NegativeSource::kRandom;
      neg.source_example_id = other.id;
      out.push_back(neg);
      ++taken;
    }
  }
  return out;
}

std::vector<std::string> corpus_relation_vocab(const Corpus& corpus) {
  std::set<std::string> rels;
  for (const auto& ex : corpus.examples) {
    QueryTokens qt = tokenize_query(ex.query);
    for (size_t i = 0; i < qt.size(); ++i) {
      if (qt.kinds[i] == TokenKind::kRelation) rels.insert(qt.tokens[i]);
    }
  }
  return {rels.begin(), rels.end()};
}

namespace {

std::string render_with_edit(const QueryAst& ast) { return canonicalize(ast); }

bool parses_cleanly(const std::string& text) {
  try {
    parse_query(tokenize_query(text));
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

std::string perturbation_fallback(const QueryAst& ast,
                                  const std::vector<std::string>& relation_vocab,
                                  uint64_t seed) {
  std::string original = canonicalize(ast);
  Rng rng(seed);
  // Edits tried in seeded order until one yields a valid, different query.
  std::vector<int> edits{0, 1, 2};
  rng.shuffle(edits);
  for (int edit : edits) {
    if (edit == 0) {
      // Swap two entity tokens with different text.
      QueryAst copy = ast;
      std::vector<std::string*> entities;
      for (auto& tr : copy.triples) {
        if (tr.subject.kind == TokenKind::kEntity) entities.push_back(&tr.subject.text);
        if (tr.object.kind == TokenKind::kEntity) entities.push_back(&tr.object.text);
      }
      for (auto& f : copy.filters) {
        if (f.lhs.kind == TokenKind::kEntity) entities.push_back(&f.lhs.text);
        if (f.rhs.kind == TokenKind::kEntity) entities.push_back(&f.rhs.text);
      }
      if (entities.size() < 2) continue;
      std::vector<int> order(entities.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      rng.shuffle(order);
      bool swapped = false;
      for (size_t a = 0; a < order.size() && !swapped; ++a) {
        for (size_t b = a + 1; b < order.size() && !swapped; ++b) {
          if (*entities[order[a]] != *entities[order[b]]) {
            std::swap(*entities[order[a]], *entities[order[b]]);
            swapped = true;
          }
        }
      }
      if (!swapped) continue;
      std::string text = render_with_edit(copy);
      if (text != original && parses_cleanly(text)) return text;
    } else if (edit == 1) {
      // Delete one triple.
      if (ast.triples.size() < 2) continue;
      std::vector<int> order(ast.triples.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      rng.shuffle(order);
      for (int victim : order) {
        QueryAst copy = ast;
        copy.triples.erase(copy.triples.begin() + victim);
        std::string text = render_with_edit(copy);
        // Deleting can unbind a filter variable; re-parse to verify.
        if (text != original && parses_cleanly(text)) return text;
      }
    } else {
      // Replace one relation predicate.
      std::vector<int> slots;
      for (size_t i = 0; i < ast.triples.size(); ++i) {
        if (ast.triples[i].predicate.kind == TokenKind::kRelation) {
          slots.push_back(static_cast<int>(i));
        }
      }
      if (slots.empty() || relation_vocab.size() < 2) continue;
      rng.shuffle(slots);
      for (int slot : slots) {
        std::vector<int> ridx(relation_vocab.size());
        for (size_t i = 0; i < ridx.size(); ++i) ridx[i] = static_cast<int>(i);
        rng.shuffle(ridx);
        for (int r : ridx) {
          if (relation_vocab[r] == ast.triples[slot].predicate.text) continue;
          QueryAst copy = ast;
          copy.triples[slot].predicate.text = relation_vocab[r];
          std::string text = render_with_edit(copy);
          if (text != original && parses_cleanly(text)) return text;
        }
      }
    }
  }
  throw NoEditPossible();
}

namespace {

std::vector<ClassificationInstance> negatives_from_generator(
    const Corpus& corpus, const std::vector<int>& question_ids,
    QueryGenerator& generator, const std::string& tag, int k, uint64_t seed,
    const std::vector<std::string>& relation_vocab, int per_example) {
  std::vector<ClassificationInstance> out;
  for (int qid : question_ids) {
    const Example& ex = corpus.examples[qid];
    std::string gold_canonical = canonical_query(ex.query);

    ClassificationInstance pos;
    pos.question_id = qid;
    pos.query_text = ex.query;
    pos.label = 1;
    pos.negative_source = NegativeSource::kGold;
    out.push_back(pos);

    std::set<std::string> seen{gold_canonical};
    int kept = 0;
    for (const std::string& cand : generator.topk_queries(ex.question, k)) {
      if (kept >= per_example) break;
      std::string canon;
      try {
        canon = canonical_query(cand);
      } catch (const Error&) {
        continue;  // syntactically invalid prediction
      }
      if (!seen.insert(canon).second) continue;  // duplicate or gold
      ClassificationInstance neg;
      neg.question_id = qid;
      neg.query_text = canon;
      neg.label = 0;
      neg.negative_source = NegativeSource::kModel;
      neg.generator_tag = tag;
      out.push_back(neg);
      ++kept;
    }
    QueryAst gold_ast = parse_query(tokenize_query(ex.query));
    uint64_t salt = 0;
    while (kept < per_example) {
      std::string text = perturbation_fallback(
          gold_ast, relation_vocab,
          mix_seed(seed, static_cast<uint64_t>(qid) * 131 + salt));
      ++salt;
      std::string canon = canonical_query(text);
      if (!seen.insert(canon).second) {
        if (salt > 64) {
          // The edit space is exhausted for this query; widen by editing an
          // already accepted perturbation.
          gold_ast = parse_query(tokenize_query(*seen.rbegin()));
          salt = 0;
        }
        continue;
      }
      ClassificationInstance neg;
      neg.question_id = qid;
      neg.query_text = canon;
      neg.label = 0;
      neg.negative_source = NegativeSource::kPerturbation;
      neg.generator_tag = tag;
      out.push_back(neg);
      ++kept;
    }
  }
  return out;
}

std::vector<const Example*> examples_for(const Corpus& corpus,
                                         const std::vector<int>& ids) {
  std::vector<const Example*> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(&corpus.examples[id]);
  return out;
}

}  // namespace

ModelNegativesResult generate_model_negatives(const Corpus& corpus,
                                              const SplitAssignment& split,
                                              QueryGeneratorFactory& factory,
                                              int k, uint64_t seed) {
  if (k < 3) throw ConfigError("model negatives need k >= 3");
  ModelNegativesResult result;
  auto relation_vocab = corpus_relation_vocab(corpus);

  std::vector<int> train_ids = split.ids_with(SplitTag::kTrain);
  std::vector<int> dev_ids = split.ids_with(SplitTag::kDev);
  std::vector<int> test_ids = split.ids_with(SplitTag::kTest);

  Rng half_rng(mix_seed(seed, 0xa1f));
  std::vector<int> shuffled = train_ids;
  half_rng.shuffle(shuffled);
  std::vector<int> half_a(shuffled.begin(), shuffled.begin() + shuffled.size() / 2);
  std::vector<int> half_b(shuffled.begin() + shuffled.size() / 2, shuffled.end());
  std::sort(half_a.begin(), half_a.end());
  std::sort(half_b.begin(), half_b.end());

  result.generator_training_ids["train_half_a"] = half_a;
  result.generator_training_ids["train_half_b"] = half_b;
  result.generator_training_ids["dev_model"] = dev_ids;
  result.generator_training_ids["test_model"] = test_ids;

  struct Job {
    std::string tag;              // generator identity
    const std::vector<int>* fit;  // examples the generator trains on
    const std::vector<int>* emit; // questions it produces negatives for
  };
  std::vector<Job> jobs{
      {"train_half_a", &half_a, &half_b},
      {"train_half_b", &half_b, &half_a},
      {"dev_model", &dev_ids, &test_ids},
      {"test_model", &test_ids, &dev_ids},
  };
  for (const Job& job : jobs) {
    auto generator =
        factory.train_on(examples_for(corpus, *job.fit),
                         mix_seed(seed, fnv1a64(job.tag)), job.tag);
    auto instances = negatives_from_generator(corpus, *job.emit, *generator,
                                              job.tag, k, seed, relation_vocab, 3);
    result.instances.insert(result.instances.end(), instances.begin(),
                            instances.end());
  }
  return result;
}

DatasetBundle assemble_dataset(const Corpus& corpus, const SplitAssignment& split,
                               const NegativePlan& plan, uint64_t seed,
                               QueryGeneratorFactory* factory) {
  DatasetBundle bundle;
  std::vector<int> train_ids = split.ids_with(SplitTag::kTrain);
  std::vector<int> dev_ids = split.ids_with(SplitTag::kDev);
  std::vector<int> test_ids = split.ids_with(SplitTag::kTest);

  std::vector<ClassificationInstance> all;
  if (plan.strategy == NegativePlan::Strategy::kRandom) {
    for (const auto* ids : {&train_ids, &dev_ids, &test_ids}) {
      auto instances = sample_random_negatives(examples_for(corpus, *ids), seed,
                                               plan.per_example_negatives);
      all.insert(all.end(), instances.begin(), instances.end());
    }
  } else {
    if (factory == nullptr) {
      throw ConfigError("model negatives need a generator factory");
    }
    auto result =
        generate_model_negatives(corpus, split, *factory, plan.k_candidates, seed);
    all = std::move(result.instances);
    bundle.generator_training_ids = std::move(result.generator_training_ids);
  }

  // 5% of train questions (ceiling, at least 1) become the holdout set,
  // carried with every one of their instances.
  Rng hold_rng(mix_seed(seed, 0x601d));
  std::vector<int> hold_pool = train_ids;
  hold_rng.shuffle(hold_pool);
  size_t hold_n = std::max<size_t>(
      1, static_cast<size_t>(
             std::ceil(0.05 * static_cast<double>(train_ids.size()))));
  std::set<int> holdout_ids(hold_pool.begin(), hold_pool.begin() + hold_n);

  for (auto& inst : all) {
    SplitTag tag = split.assignment.at(inst.question_id);
    if (tag == SplitTag::kTrain) {
      inst.set_name = holdout_ids.count(inst.question_id) ? "holdout" : "train";
    } else {
      inst.set_name = tag == SplitTag::kDev ? "dev" : "test";
    }
    if (inst.set_name == "train") bundle.train.push_back(inst);
    else if (inst.set_name == "holdout") bundle.holdout.push_back(inst);
    else if (inst.set_name == "dev") bundle.dev.push_back(inst);
    else bundle.test.push_back(inst);
  }

  int set_index = 0;
  for (auto* s : {&bundle.train, &bundle.holdout, &bundle.dev, &bundle.test}) {
    Rng rng(mix_seed(seed, 0x5f0f + set_index++));
    rng.shuffle(*s);
  }
  return bundle;
}

AuditResult audit_dataset(const Corpus& corpus, const SplitAssignment& split,
                          const DatasetBundle& bundle) {
  AuditResult audit;
  auto flag = [&audit](const std::string& msg) {
    ++audit.violations;
    if (audit.messages.size() < 20) audit.messages.push_back(msg);
  };

  for (const std::string set_name : {"train", "holdout", "dev", "test"}) {
    const auto& instances = bundle.set(set_name);
    int64_t positives = 0, negatives = 0;
    for (const auto& inst : instances) {
      const Example& ex = corpus.examples[inst.question_id];
      std::string gold_canonical = canonical_query(ex.query);
      if (inst.label == 1) {
        ++positives;
        if (inst.negative_source != NegativeSource::kGold) {
          flag("positive with non-gold source for question " +
               std::to_string(inst.question_id));
        }
        continue;
      }
      ++negatives;
      std::string canon;
      try {
        canon = canonical_query(inst.query_text);
      } catch (const Error& e) {
        flag("negative does not parse for question " +
             std::to_string(inst.question_id) + ": " + e.what());
        continue;
      }
      if (canon == gold_canonical) {
        flag("negative equals gold for question " +
             std::to_string(inst.question_id));
      }
      SplitTag qtag = split.assignment.at(inst.question_id);
      if (inst.negative_source == NegativeSource::kRandom) {
        if (inst.source_example_id < 0) {
          flag("random negative without source example");
        } else if (split.assignment.at(inst.source_example_id) != qtag) {
          flag("random negative for question " +
               std::to_string(inst.question_id) + " sourced across splits");
        }
      } else if (inst.negative_source == NegativeSource::kModel ||
                 inst.negative_source == NegativeSource::kPerturbation) {
        auto it = bundle.generator_training_ids.find(inst.generator_tag);
        if (it == bundle.generator_training_ids.end()) {
          flag("unknown generator tag '" + inst.generator_tag + "'");
        } else if (std::binary_search(it->second.begin(), it->second.end(),
                                      inst.question_id)) {
          flag("generator '" + inst.generator_tag + "' saw question " +
               std::to_string(inst.question_id) + " during training");
        }
      }
    }
    if (!instances.empty() && negatives != 3 * positives) {
      flag(std::string(set_name) + " set ratio is " + std::to_string(negatives) +
           ":" + std::to_string(positives) + ", expected 3:1");
    }
  }
  return audit;
}

// ---- seq2seq-backed generator ------------------------------------------------

namespace {

class Seq2SeqGenerator : public QueryGenerator {
 public:
  Seq2SeqGenerator(std::unique_ptr<Seq2SeqModel> model, const Vocabulary& vocab)
      : model_(std::move(model)), vocab_(vocab) {}

  std::vector<std::string> topk_queries(const std::string& question,
                                        int k) override {
    std::vector<int> src = vocab_.ids_for(tokenize_question(question));
    std::vector<std::string> out;
    for (const auto& seq : model_->topk(src, k)) {
      std::vector<std::string> tokens;
      for (int id : seq.token_ids) tokens.push_back(vocab_.token_of(id));
      out.push_back(join_tokens(tokens));
    }
    return out;
  }

 private:
  std::unique_ptr<Seq2SeqModel> model_;
  const Vocabulary& vocab_;
};

}  // namespace

Seq2SeqGeneratorFactory::Seq2SeqGeneratorFactory(const Vocabulary& vocab,
                                                 Seq2SeqConfig model_config,
                                                 TrainConfig train_config)
    : vocab_(vocab),
      model_config_(model_config),
      train_config_(train_config) {}

std::unique_ptr<QueryGenerator> Seq2SeqGeneratorFactory::train_on(
    const std::vector<const Example*>& data, uint64_t seed,
    const std::string& tag) {
  (void)tag;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  pairs.reserve(data.size());
  for (const Example* ex : data) {
    pairs.emplace_back(vocab_.ids_for(tokenize_question(ex->question)),
                       vocab_.ids_for(tokenize_query(ex->query).tokens));
  }
  Seq2SeqConfig cfg = model_config_;
  cfg.bos_id = vocab_.id_of(kBosToken);
  cfg.eos_id = vocab_.id_of(kEosToken);
  auto model = train_seq2seq(pairs, cfg, train_config_, seed);
  return std::make_unique<Seq2SeqGenerator>(std::move(model), vocab_);
}

}  // namespace treecls
