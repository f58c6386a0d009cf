#include "treecls/grammar.h"

#include <set>

#include "json.hpp"
#include "treecls/error.h"
#include "treecls/util.h"

namespace treecls {

namespace {

struct Verb {
  const char* inf;
  const char* past;
  const char* relation;
};

constexpr Verb kVerbInventory[] = {
    {"direct", "directed", "ns:film.director.film"},
    {"edit", "edited", "ns:film.editor.film"},
    {"produce", "produced", "ns:film.producer.film"},
    {"write", "wrote", "ns:film.writer.film"},
    {"found", "founded", "ns:org.founder.org"},
    {"acquire", "acquired", "ns:org.acquirer.org"},
    {"finance", "financed", "ns:film.financier.film"},
    {"distribute", "distributed", "ns:film.distributor.film"},
};
constexpr int kInventorySize = 8;

constexpr const char* kTypeNouns[][2] = {
    {"film", "ns:film.film"},
    {"company", "ns:org.company"},
};

// Builds a tree and its token sequence together so leaves always align.
class TreeBuilder {
 public:
  int leaf(const std::string& token) {
    int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back({token, {}, static_cast<int>(tokens_.size())});
    tokens_.push_back(token);
    return id;
  }

  int internal(const std::string& label, std::vector<int> children) {
    int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back({label, std::move(children), -1});
    return id;
  }

  // Renumbers into pre-order (root 0) so trees built bottom-up compare equal
  // to trees parsed from disk.
  ConstituencyTree finish(int root) {
    ConstituencyTree out;
    std::vector<std::pair<int, int>> stack{{root, -1}};  // (old id, parent new id)
    while (!stack.empty()) {
      auto [old_id, parent_new] = stack.back();
      stack.pop_back();
      int new_id = static_cast<int>(out.nodes.size());
      out.nodes.push_back({tree_.nodes[old_id].label, {}, tree_.nodes[old_id].token});
      if (parent_new >= 0) out.nodes[parent_new].children.push_back(new_id);
      const auto& ch = tree_.nodes[old_id].children;
      for (auto it = ch.rbegin(); it != ch.rend(); ++it) {
        stack.push_back({*it, new_id});
      }
    }
    out.root = 0;
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  ConstituencyTree tree_;
  std::vector<std::string> tokens_;
};

struct Draft {
  TreeBuilder tb;
  int root = -1;
  std::string query;
};

std::string who_query(const std::vector<std::string>& clauses) {
  std::string q = "SELECT DISTINCT ?x0 WHERE {";
  for (size_t i = 0; i < clauses.size(); ++i) {
    q += (i ? " . " : " ") + clauses[i];
  }
  return q + " }";
}

std::string count_query(const std::vector<std::string>& clauses) {
  std::string q = "SELECT count ( * ) WHERE {";
  for (size_t i = 0; i < clauses.size(); ++i) {
    q += (i ? " . " : " ") + clauses[i];
  }
  return q + " }";
}

class Generator {
 public:
  Generator(const GrammarConfig& config, Rng& rng) : cfg_(config), rng_(rng) {
    for (int i = 0; i < std::min(cfg_.n_relations, kInventorySize); ++i) {
      verbs_.push_back(kVerbInventory[(i + cfg_.seed_vocab) % kInventorySize]);
    }
    for (int i = 0; i < std::min(cfg_.n_entities, 10); ++i) {
      entities_.push_back("M" + std::to_string(i));
    }
    // Overlapping slot groups (stride 2). Every example draws all of its
    // verbs and entities from one group of each kind, so the corpus is
    // dense in same-token reorderings and slot combinations stay sparse.
    int vg = std::min<int>(4, static_cast<int>(verbs_.size()));
    for (size_t start = 0; start < verbs_.size(); start += 2) {
      std::vector<int> group;
      for (int i = 0; i < vg; ++i) {
        group.push_back(static_cast<int>((start + i) % verbs_.size()));
      }
      verb_groups_.push_back(std::move(group));
      if (verbs_.size() <= 2) break;
    }
    int eg = std::min<int>(5, static_cast<int>(entities_.size()));
    for (size_t start = 0; start < entities_.size(); start += 2) {
      std::vector<int> group;
      for (int i = 0; i < eg; ++i) {
        group.push_back(static_cast<int>((start + i) % entities_.size()));
      }
      entity_groups_.push_back(std::move(group));
      if (entities_.size() <= 2) break;
    }
  }

  // One candidate example; question text may collide with earlier draws,
  // the caller dedupes.
  Draft draw() {
    verb_pool_ = &verb_groups_[rng_.below(verb_groups_.size())];
    entity_pool_ = &entity_groups_[rng_.below(entity_groups_.size())];
    switch (rng_.below(7)) {
      case 0: return who_subject();
      case 1: return did_subject_verbs();
      case 2: return did_object_conj();
      case 3: return was_by();
      case 4: return who_other_than();
      case 5: return who_passive();
      default: return did_type();
    }
  }

 private:
  int conjunct_count() {
    int cap = std::min<int>(cfg_.max_depth + 1,
                            static_cast<int>(verb_pool_->size()));
    cap = std::min<int>(cap, static_cast<int>(entity_pool_->size()));
    return 1 + static_cast<int>(rng_.below(std::max(cap, 1)));
  }

  // k distinct members of the current group, in seeded order.
  std::vector<int> draw_verbs(int k) { return from_pool(*verb_pool_, k); }
  std::vector<int> draw_entities(int k) { return from_pool(*entity_pool_, k); }

  std::vector<int> from_pool(const std::vector<int>& pool, int k) {
    std::vector<int> all = pool;
    rng_.shuffle(all);
    all.resize(k);
    return all;
  }

  int np(TreeBuilder& tb, const std::string& entity) {
    return tb.internal("NP", {tb.leaf(entity)});
  }

  // Right-nested "VP and VP and VP". Leaves must be created left to right so
  // token indices match the surface order, hence the lazy recursion.
  template <typename BuildVp>
  int conj_vps(TreeBuilder& tb, int index, int count, const BuildVp& build_vp) {
    int vp = build_vp(index);
    if (index + 1 == count) return vp;
    int and_leaf = tb.leaf("and");
    int rest = conj_vps(tb, index + 1, count, build_vp);
    return tb.internal("VP", {vp, and_leaf, rest});
  }

  Draft who_subject() {
    int c = conjunct_count();
    auto verb_ids = draw_verbs(c);
    auto ent_ids = draw_entities(c);
    Draft d;
    int who = d.tb.internal("NP", {d.tb.leaf("Who")});
    std::vector<std::string> clauses;
    int vps = conj_vps(d.tb, 0, c, [&](int i) {
      const Verb& v = verbs_[verb_ids[i]];
      const std::string& e = entities_[ent_ids[i]];
      clauses.push_back("?x0 " + std::string(v.relation) + " " + e);
      int verb = d.tb.leaf(v.past);
      return d.tb.internal("VP", {verb, np(d.tb, e)});
    });
    d.root = d.tb.internal("S", {who, vps});
    d.query = who_query(clauses);
    return d;
  }

  Draft did_subject_verbs() {
    int c = conjunct_count();
    auto verb_ids = draw_verbs(c);
    auto ent_ids = draw_entities(c + 1);
    Draft d;
    int did = d.tb.leaf("Did");
    const std::string& subj = entities_[ent_ids[0]];
    int subj_np = np(d.tb, subj);
    std::vector<std::string> clauses;
    int vps = conj_vps(d.tb, 0, c, [&](int i) {
      const Verb& v = verbs_[verb_ids[i]];
      const std::string& e = entities_[ent_ids[i + 1]];
      clauses.push_back(subj + " " + v.relation + " " + e);
      int verb = d.tb.leaf(v.inf);
      return d.tb.internal("VP", {verb, np(d.tb, e)});
    });
    d.root = d.tb.internal("S", {did, subj_np, vps});
    d.query = count_query(clauses);
    return d;
  }

  Draft did_object_conj() {
    auto ent_ids = draw_entities(3);
    const Verb& v = verbs_[(*verb_pool_)[rng_.below(verb_pool_->size())]];
    const std::string& subj = entities_[ent_ids[0]];
    const std::string& o1 = entities_[ent_ids[1]];
    const std::string& o2 = entities_[ent_ids[2]];
    Draft d;
    int did = d.tb.leaf("Did");
    int subj_np = np(d.tb, subj);
    int verb = d.tb.leaf(v.inf);
    int np1 = np(d.tb, o1);
    int and_leaf = d.tb.leaf("and");
    int np2 = np(d.tb, o2);
    int obj = d.tb.internal("NP", {np1, and_leaf, np2});
    int vp = d.tb.internal("VP", {verb, obj});
    d.root = d.tb.internal("S", {did, subj_np, vp});
    d.query = count_query({subj + " " + v.relation + " " + o1,
                           subj + " " + v.relation + " " + o2});
    return d;
  }

  Draft was_by() {
    auto ent_ids = draw_entities(2);
    const Verb& v = verbs_[(*verb_pool_)[rng_.below(verb_pool_->size())]];
    const std::string& obj = entities_[ent_ids[0]];
    const std::string& subj = entities_[ent_ids[1]];
    Draft d;
    int was = d.tb.leaf("Was");
    int obj_np = np(d.tb, obj);
    int verb = d.tb.leaf(v.past);
    int by = d.tb.leaf("by");
    int pp = d.tb.internal("PP", {by, np(d.tb, subj)});
    int vp = d.tb.internal("VP", {verb, pp});
    d.root = d.tb.internal("S", {was, obj_np, vp});
    d.query = count_query({subj + " " + v.relation + " " + obj});
    return d;
  }

  Draft who_other_than() {
    auto ent_ids = draw_entities(2);
    const Verb& v = verbs_[(*verb_pool_)[rng_.below(verb_pool_->size())]];
    const std::string& excluded = entities_[ent_ids[0]];
    const std::string& obj = entities_[ent_ids[1]];
    Draft d;
    int who = d.tb.leaf("Who");
    int other = d.tb.leaf("other");
    int than = d.tb.leaf("than");
    int pp = d.tb.internal("PP", {other, than, np(d.tb, excluded)});
    int subj_np = d.tb.internal("NP", {who, pp});
    int verb = d.tb.leaf(v.past);
    int vp = d.tb.internal("VP", {verb, np(d.tb, obj)});
    d.root = d.tb.internal("S", {subj_np, vp});
    d.query = who_query({"?x0 " + std::string(v.relation) + " " + obj,
                         "FILTER ( ?x0 != " + excluded + " )"});
    return d;
  }

  Draft who_passive() {
    const Verb& v = verbs_[(*verb_pool_)[rng_.below(verb_pool_->size())]];
    const std::string& subj = entities_[(*entity_pool_)[rng_.below(entity_pool_->size())]];
    Draft d;
    int who = d.tb.internal("NP", {d.tb.leaf("Who")});
    int was = d.tb.leaf("was");
    int verb = d.tb.leaf(v.past);
    int by = d.tb.leaf("by");
    int pp = d.tb.internal("PP", {by, np(d.tb, subj)});
    int vp = d.tb.internal("VP", {was, verb, pp});
    d.root = d.tb.internal("S", {who, vp});
    d.query = who_query({subj + " " + std::string(v.relation) + " ?x0"});
    return d;
  }

  Draft did_type() {
    const Verb& v = verbs_[(*verb_pool_)[rng_.below(verb_pool_->size())]];
    const std::string& subj = entities_[(*entity_pool_)[rng_.below(entity_pool_->size())]];
    const auto& noun = kTypeNouns[rng_.below(2)];
    Draft d;
    int did = d.tb.leaf("Did");
    int subj_np = np(d.tb, subj);
    int verb = d.tb.leaf(v.inf);
    int a = d.tb.leaf("a");
    int noun_leaf = d.tb.leaf(noun[0]);
    int obj = d.tb.internal("NP", {a, noun_leaf});
    int vp = d.tb.internal("VP", {verb, obj});
    d.root = d.tb.internal("S", {did, subj_np, vp});
    d.query = count_query({subj + " " + v.relation + " ?x0",
                           "?x0 a " + std::string(noun[1])});
    return d;
  }

  const GrammarConfig& cfg_;
  Rng& rng_;
  std::vector<Verb> verbs_;
  std::vector<std::string> entities_;
  std::vector<std::vector<int>> verb_groups_, entity_groups_;
  const std::vector<int>* verb_pool_ = nullptr;
  const std::vector<int>* entity_pool_ = nullptr;
};

}  // namespace

std::string GrammarConfig::to_json() const {
  nlohmann::ordered_json j;
  j["max_depth"] = max_depth;
  j["n_entities"] = n_entities;
  j["n_relations"] = n_relations;
  j["seed_vocab"] = seed_vocab;
  return j.dump();
}

GrammarConfig GrammarConfig::from_json(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grammar config: ") + e.what());
  }
  GrammarConfig cfg;
  cfg.max_depth = j.value("max_depth", cfg.max_depth);
  cfg.n_entities = j.value("n_entities", cfg.n_entities);
  cfg.n_relations = j.value("n_relations", cfg.n_relations);
  cfg.seed_vocab = j.value("seed_vocab", cfg.seed_vocab);
  if (cfg.max_depth < 0 || cfg.n_entities < 1 || cfg.n_relations < 1) {
    throw ConfigError("grammar config values out of range");
  }
  return cfg;
}

Corpus generate_synthetic(const GrammarConfig& config, uint64_t seed, int n) {
  if (n < 1) throw ConfigError("generate_synthetic requires n >= 1");
  Rng rng(seed);
  Generator gen(config, rng);
  Corpus corpus;
  corpus.provenance = Provenance::kSynthetic;
  corpus.grammar_seed = seed;
  std::set<std::string> seen;
  long long attempts = 0;
  const long long max_attempts = 60LL * n + 2000;
  while (static_cast<int>(corpus.examples.size()) < n) {
    if (++attempts > max_attempts) {
      throw CapacityError("grammar produced only " +
                          std::to_string(corpus.examples.size()) + " of " +
                          std::to_string(n) + " distinct examples");
    }
    Draft d = gen.draw();
    std::string question = join_tokens(d.tb.tokens());
    if (!seen.insert(question).second) continue;
    Example ex;
    ex.id = static_cast<int>(corpus.examples.size());
    ex.question = question;
    ex.query = d.query;
    ex.question_tree = d.tb.finish(d.root);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace treecls
