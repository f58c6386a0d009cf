#pragma once

#include <cstdint>
#include <string>

#include "treecls/corpus.h"

namespace treecls {

// Miniature compositional template grammar producing question/query pairs
// with constituency trees. Entity slots M0..M9, single-token relation verbs,
// "and" conjunction nested up to max_depth, did/was/who question forms.
struct GrammarConfig {
  int max_depth = 3;      // conjunction nesting depth; d allows d+1 conjuncts
  int n_entities = 10;    // uses M0..M{n-1}, capped at 10
  int n_relations = 8;    // capped at the built-in verb inventory
  int seed_vocab = 0;     // rotates the verb inventory

  std::string to_json() const;
  static GrammarConfig from_json(const std::string& text);
};

// Deterministic in (config, seed, n); every question maps to exactly one gold
// query. Throws CapacityError when n distinct questions cannot be produced.
Corpus generate_synthetic(const GrammarConfig& config, uint64_t seed, int n);

}  // namespace treecls
