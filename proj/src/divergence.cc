#include "treecls/divergence.h"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "treecls/error.h"
#include "treecls/util.h"

namespace treecls {

using ordered_json = nlohmann::ordered_json;

double WeightedDistribution::total() const {
  double t = 0.0;
  for (const auto& [k, w] : weights) t += w;
  return t;
}

std::vector<int> SplitAssignment::ids_with(SplitTag tag) const {
  std::vector<int> ids;
  for (const auto& [id, t] : assignment) {
    if (t == tag) ids.push_back(id);
  }
  return ids;
}

void SplitAssignment::write(const std::string& path, double alpha_a,
                            double alpha_c) const {
  ordered_json j;
  j["split_name"] = split_name;
  j["seed"] = seed;
  j["alpha_a"] = alpha_a;
  j["alpha_c"] = alpha_c;
  ordered_json assign = ordered_json::object();
  for (const auto& [id, tag] : assignment) {
    assign[std::to_string(id)] = split_tag_name(tag);
  }
  j["assignment"] = assign;
  j["atom_divergence"] = atom_divergence;
  j["compound_divergence"] = compound_divergence;
  j["compound_divergence_dev"] = compound_divergence_dev;
  j["compound_divergence_test"] = compound_divergence_test;
  write_text_file(path, j.dump(2) + "\n");
}

SplitAssignment SplitAssignment::read(const std::string& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string(e.what()) + " in " + path);
  }
  SplitAssignment split;
  split.split_name = j.at("split_name").get<std::string>();
  split.seed = j.at("seed").get<uint64_t>();
  for (const auto& [key, value] : j.at("assignment").items()) {
    split.assignment[std::stoi(key)] = split_tag_from_name(value.get<std::string>());
  }
  split.atom_divergence = j.at("atom_divergence").get<double>();
  split.compound_divergence = j.at("compound_divergence").get<double>();
  split.compound_divergence_dev = j.value("compound_divergence_dev", 0.0);
  split.compound_divergence_test = j.value("compound_divergence_test", 0.0);
  return split;
}

std::vector<std::string> extract_atoms(const Example& ex) {
  std::set<std::string> keys;
  for (const auto& tok : tokenize_question(ex.question)) keys.insert(tok);
  for (const auto& tok : tokenize_query(canonical_query(ex.query)).tokens) {
    keys.insert(tok);
  }
  return {keys.begin(), keys.end()};
}

namespace {

// Token text at each layout position, built without the dependency tree:
// compounds only need the parent array plus position texts.
std::vector<std::string> layout_texts(const Example& ex) {
  std::vector<std::string> texts{kClsToken};
  for (const auto& tok : tokenize_question(ex.question)) texts.push_back(tok);
  for (int node : ex.question_tree.internal_post_order()) {
    texts.push_back("<" + ex.question_tree.nodes[node].label + ">");
  }
  for (const auto& tok : tokenize_query(ex.query).tokens) texts.push_back(tok);
  return texts;
}

}  // namespace

std::vector<std::string> extract_compounds(const Example& ex, const GlobalTree& tree) {
  auto texts = layout_texts(ex);
  if (static_cast<int>(texts.size()) != tree.size()) {
    throw ShapeError("global tree does not cover the example layout");
  }
  std::set<std::string> keys;
  for (int j = 1; j < tree.size(); ++j) {
    int p = tree.parent[j];
    keys.insert(texts[p] + ">" + texts[j]);
    if (p != 0) {
      int g = tree.parent[p];
      keys.insert(texts[g] + ">" + texts[p] + ">" + texts[j]);
    }
  }
  return {keys.begin(), keys.end()};
}

double chernoff_divergence(const WeightedDistribution& p,
                           const WeightedDistribution& q, double alpha) {
  if (alpha <= 0.0 || alpha >= 1.0) {
    throw ConfigError("chernoff alpha must be in (0, 1)");
  }
  double pt = p.total();
  double qt = q.total();
  if (pt <= 0.0 || qt <= 0.0) throw DegenerateDistribution();
  double coeff = 0.0;
  for (const auto& [key, w] : p.weights) {
    if (w <= 0.0) continue;
    auto it = q.weights.find(key);
    if (it == q.weights.end() || it->second <= 0.0) continue;
    coeff += std::pow(w / pt, alpha) * std::pow(it->second / qt, 1.0 - alpha);
  }
  return 1.0 - coeff;
}

SplitAssignment random_split(const Corpus& corpus,
                             const std::vector<double>& ratios, uint64_t seed) {
  if (ratios.size() != 3) throw ConfigError("random_split expects 3 ratios");
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("ratios must sum to 1");
  int n = static_cast<int>(corpus.examples.size());
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = corpus.examples[i].id;
  Rng rng(seed);
  rng.shuffle(ids);
  int cut1 = static_cast<int>(std::llround(n * ratios[0]));
  int cut2 = static_cast<int>(std::llround(n * (ratios[0] + ratios[1])));
  SplitAssignment split;
  split.split_name = "random";
  split.seed = seed;
  for (int i = 0; i < n; ++i) {
    SplitTag tag = i < cut1 ? SplitTag::kTrain
                            : (i < cut2 ? SplitTag::kDev : SplitTag::kTest);
    split.assignment[ids[i]] = tag;
  }
  return split;
}

namespace {

// Interned per-example key ids plus the count bookkeeping the swap search
// needs to evaluate a candidate in O(keys of the two examples).
class DivergenceState {
 public:
  DivergenceState(const std::vector<std::vector<int>>& example_keys, double alpha)
      : keys_(example_keys), alpha_(alpha) {
    int max_key = 0;
    for (const auto& ks : keys_) {
      for (int k : ks) max_key = std::max(max_key, k + 1);
    }
    train_.assign(max_key, 0);
    eval_.assign(max_key, 0);
  }

  void assign(const std::vector<int>& order, const std::vector<bool>& in_train) {
    train_total_ = eval_total_ = 0;
    std::fill(train_.begin(), train_.end(), 0);
    std::fill(eval_.begin(), eval_.end(), 0);
    for (int idx : order) {
      auto& side = in_train[idx] ? train_ : eval_;
      for (int k : keys_[idx]) ++side[k];
      (in_train[idx] ? train_total_ : eval_total_) +=
          static_cast<long long>(keys_[idx].size());
    }
    recompute_sum();
  }

  double divergence() const {
    double norm = std::pow(static_cast<double>(train_total_), alpha_) *
                  std::pow(static_cast<double>(eval_total_), 1.0 - alpha_);
    return 1.0 - sum_ / norm;
  }

  // Divergence if example `out` left train for eval and `in` came back.
  double divergence_after_swap(int out, int in) const {
    double s = sum_;
    for (int k : keys_[out]) {
      s -= term(train_[k], eval_[k]);
      s += term(train_[k] - 1, eval_[k] + 1);
    }
    // Keys shared by both examples need the intermediate counts.
    for (int k : keys_[in]) {
      int tc = train_[k], ec = eval_[k];
      if (contains(keys_[out], k)) {
        s -= term(tc - 1, ec + 1);
        tc -= 1;
        ec += 1;
      } else {
        s -= term(tc, ec);
      }
      s += term(tc + 1, ec - 1);
    }
    long long tt = train_total_ - static_cast<long long>(keys_[out].size()) +
                   static_cast<long long>(keys_[in].size());
    long long et = eval_total_ + static_cast<long long>(keys_[out].size()) -
                   static_cast<long long>(keys_[in].size());
    double norm = std::pow(static_cast<double>(tt), alpha_) *
                  std::pow(static_cast<double>(et), 1.0 - alpha_);
    return 1.0 - s / norm;
  }

  void apply_swap(int out, int in) {
    for (int k : keys_[out]) {
      sum_ -= term(train_[k], eval_[k]);
      --train_[k];
      ++eval_[k];
      sum_ += term(train_[k], eval_[k]);
    }
    for (int k : keys_[in]) {
      sum_ -= term(train_[k], eval_[k]);
      ++train_[k];
      --eval_[k];
      sum_ += term(train_[k], eval_[k]);
    }
    train_total_ += static_cast<long long>(keys_[in].size()) -
                    static_cast<long long>(keys_[out].size());
    eval_total_ += static_cast<long long>(keys_[out].size()) -
                   static_cast<long long>(keys_[in].size());
  }

  // Accumulated floating error is flushed between sweeps.
  void recompute_sum() {
    sum_ = 0.0;
    for (size_t k = 0; k < train_.size(); ++k) sum_ += term(train_[k], eval_[k]);
  }

 private:
  static bool contains(const std::vector<int>& v, int k) {
    return std::find(v.begin(), v.end(), k) != v.end();
  }

  double term(int train_count, int eval_count) const {
    if (train_count <= 0 || eval_count <= 0) return 0.0;
    return std::pow(static_cast<double>(train_count), alpha_) *
           std::pow(static_cast<double>(eval_count), 1.0 - alpha_);
  }

  const std::vector<std::vector<int>>& keys_;
  double alpha_;
  std::vector<int> train_, eval_;
  long long train_total_ = 0, eval_total_ = 0;
  double sum_ = 0.0;
};

class KeyInterner {
 public:
  int intern(const std::string& key) {
    auto [it, inserted] = ids_.try_emplace(key, static_cast<int>(ids_.size()));
    return it->second;
  }

 private:
  std::unordered_map<std::string, int> ids_;
};

std::vector<std::string> compounds_for(const Example& ex) {
  QueryTokens qt = tokenize_query(ex.query);
  DependencyTree dep = to_dependency_tree(parse_query(qt), qt);
  InputLayout layout = build_input_layout(ex, dep);
  GlobalTree tree = build_global_tree(layout, ex.question_tree, dep);
  return extract_compounds(ex, tree);
}


}  // namespace

double set_divergence(const Corpus& corpus, const std::vector<int>& left,
                      const std::vector<int>& right, bool compounds, double alpha) {
  WeightedDistribution p, q;
  for (int id : left) {
    const Example& ex = corpus.examples[id];
    for (const auto& key : compounds ? compounds_for(ex) : extract_atoms(ex)) {
      p.add(key);
    }
  }
  for (int id : right) {
    const Example& ex = corpus.examples[id];
    for (const auto& key : compounds ? compounds_for(ex) : extract_atoms(ex)) {
      q.add(key);
    }
  }
  return chernoff_divergence(p, q, alpha);
}

SplitAssignment mcd_split(const Corpus& corpus, uint64_t seed, double atom_cap,
                          int sweeps) {
  if (atom_cap <= 0.0 || atom_cap >= 1.0) {
    throw ConfigError("atom_cap must be in (0, 1)");
  }
  if (sweeps < 1) throw ConfigError("sweeps must be >= 1");
  int n = static_cast<int>(corpus.examples.size());
  if (n < 4) throw ConfigError("corpus too small for an mcd split");

  SplitAssignment split = random_split(corpus, {0.5, 0.25, 0.25}, seed);
  split.split_name = "mcd";

  KeyInterner atom_keys, compound_keys;
  std::vector<std::vector<int>> atoms(n), compounds(n);
  for (int i = 0; i < n; ++i) {
    const Example& ex = corpus.examples[i];
    for (const auto& key : extract_atoms(ex)) {
      atoms[i].push_back(atom_keys.intern(key));
    }
    for (const auto& key : compounds_for(ex)) {
      compounds[i].push_back(compound_keys.intern(key));
    }
  }

  std::vector<bool> in_train(n, false);
  std::vector<int> train_ids, eval_ids;
  for (const auto& [id, tag] : split.assignment) {
    if (tag == SplitTag::kTrain) {
      in_train[id] = true;
      train_ids.push_back(id);
    } else {
      eval_ids.push_back(id);
    }
  }
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;

  DivergenceState atom_state(atoms, kAtomAlpha);
  DivergenceState compound_state(compounds, kCompoundAlpha);
  atom_state.assign(all, in_train);
  compound_state.assign(all, in_train);

  double effective_cap = atom_cap;
  if (atom_state.divergence() > atom_cap) {
    std::cerr << "mcd_split: initial atom divergence "
              << atom_state.divergence() << " already exceeds cap " << atom_cap
              << "; proceeding from best-effort start\n";
    effective_cap = atom_state.divergence() + 1e-12;
  }

  // Static key -> example index for guided proposals.
  int n_keys = 0;
  for (const auto& ks : compounds) {
    for (int k : ks) n_keys = std::max(n_keys, k + 1);
  }
  std::vector<std::vector<int>> key_examples(n_keys);
  for (int i = 0; i < n; ++i) {
    for (int k : compounds[i]) key_examples[k].push_back(i);
  }
  std::vector<int> train_count(n_keys, 0), eval_count(n_keys, 0);
  for (int i = 0; i < n; ++i) {
    auto& side = in_train[i] ? train_count : eval_count;
    for (int k : compounds[i]) ++side[k];
  }
  std::vector<int> pos_of(n);  // index of each example in its side vector
  for (size_t i = 0; i < train_ids.size(); ++i) pos_of[train_ids[i]] = static_cast<int>(i);
  for (size_t i = 0; i < eval_ids.size(); ++i) pos_of[eval_ids[i]] = static_cast<int>(i);

  // Atom-twin buckets: examples with identical atom sets. Swapping twins
  // moves compound counts at zero atom cost, which is the only way to keep
  // separating compounds once the atom budget is spent.
  std::map<std::vector<int>, int> bucket_index;
  std::vector<std::vector<int>> buckets;
  std::vector<int> bucket_of(n);
  for (int i = 0; i < n; ++i) {
    std::vector<int> sig = atoms[i];
    std::sort(sig.begin(), sig.end());
    auto [it, inserted] = bucket_index.try_emplace(std::move(sig),
                                                   static_cast<int>(buckets.size()));
    if (inserted) buckets.emplace_back();
    bucket_of[i] = it->second;
    buckets[it->second].push_back(i);
  }

  Rng rng(mix_seed(seed, 0x6d6364));  // independent stream from the shuffle
  double current = compound_state.divergence();
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int step = 0; step < n; ++step) {
      // Proposal: mostly chase near-disjoint shared compound keys
      // (alpha_c = 0.1 only rewards a key once one side's count hits zero),
      // purging the minority side's holders; the rest stays uniform.
      int out = -1, in = -1;
      if (rng.below(8) != 0) {
        int best_key = -1;
        int best_shared = std::numeric_limits<int>::max();
        for (int probe = 0; probe < 40; ++probe) {
          int k = static_cast<int>(rng.below(n_keys));
          if (train_count[k] == 0 || eval_count[k] == 0) continue;
          int shared = std::min(train_count[k], eval_count[k]);
          if (shared < best_shared) {
            best_shared = shared;
            best_key = k;
          }
        }
        if (best_key >= 0) {
          const auto& owners = key_examples[best_key];
          bool purge_train = train_count[best_key] <= eval_count[best_key];
          for (int probe = 0; probe < 12 && out < 0 && in < 0; ++probe) {
            int ex = owners[rng.below(owners.size())];
            if (purge_train && in_train[ex]) out = ex;
            if (!purge_train && !in_train[ex]) in = ex;
          }
        }
      }
      if (out < 0) out = train_ids[rng.below(train_ids.size())];
      if (in < 0) in = eval_ids[rng.below(eval_ids.size())];
      double new_compound = compound_state.divergence_after_swap(out, in);
      if (new_compound <= current + 1e-12) continue;
      double new_atom = atom_state.divergence_after_swap(out, in);
      if (new_atom > effective_cap) continue;
      compound_state.apply_swap(out, in);
      atom_state.apply_swap(out, in);
      current = new_compound;
      int ti = pos_of[out], ei = pos_of[in];
      std::swap(train_ids[ti], eval_ids[ei]);
      pos_of[out] = ei;
      pos_of[in] = ti;
      in_train[out] = false;
      in_train[in] = true;
      for (int k : compounds[out]) {
        --train_count[k];
        ++eval_count[k];
      }
      for (int k : compounds[in]) {
        ++train_count[k];
        --eval_count[k];
      }
      SplitTag eval_tag = split.assignment[in];
      split.assignment[in] = SplitTag::kTrain;
      split.assignment[out] = eval_tag;
    }
    atom_state.recompute_sum();
    compound_state.recompute_sum();
    current = compound_state.divergence();
  }

  split.atom_divergence = atom_state.divergence();
  split.compound_divergence = compound_state.divergence();
  split.compound_divergence_dev =
      set_divergence(corpus, split.ids_with(SplitTag::kTrain),
                     split.ids_with(SplitTag::kDev), true, kCompoundAlpha);
  split.compound_divergence_test =
      set_divergence(corpus, split.ids_with(SplitTag::kTrain),
                     split.ids_with(SplitTag::kTest), true, kCompoundAlpha);
  return split;
}

}  // namespace treecls
