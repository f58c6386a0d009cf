#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "treecls/corpus.h"
#include "treecls/structure.h"

namespace treecls {

// Nonnegative weights over string keys, normalized on demand.
struct WeightedDistribution {
  std::map<std::string, double> weights;

  void add(const std::string& key, double w = 1.0) { weights[key] += w; }
  double total() const;
  bool operator==(const WeightedDistribution&) const = default;
};

struct SplitAssignment {
  std::string split_name;
  uint64_t seed = 0;
  std::map<int, SplitTag> assignment;
  double atom_divergence = 0.0;
  double compound_divergence = 0.0;
  // Pairwise figures kept for inspection; the search optimizes train vs
  // (dev + test) jointly.
  double compound_divergence_dev = 0.0;
  double compound_divergence_test = 0.0;

  std::vector<int> ids_with(SplitTag tag) const;
  void write(const std::string& path, double alpha_a, double alpha_c) const;
  static SplitAssignment read(const std::string& path);
};

// Presence semantics: one key per distinct token (question plus canonical
// query) per example.
std::vector<std::string> extract_atoms(const Example& ex);

// Parent>child pairs and parent>child>grandchild chains over the global
// tree, keyed by token text; presence semantics.
std::vector<std::string> extract_compounds(const Example& ex, const GlobalTree& tree);

inline constexpr double kAtomAlpha = 0.5;
inline constexpr double kCompoundAlpha = 0.1;
inline constexpr double kDefaultAtomCap = 0.02;

// 1 - sum_k p_k^alpha * q_k^(1-alpha) over normalized weights, with 0^x = 0.
double chernoff_divergence(const WeightedDistribution& p,
                           const WeightedDistribution& q, double alpha);

SplitAssignment random_split(const Corpus& corpus,
                             const std::vector<double>& ratios, uint64_t seed);

// Greedy swap search from a random 50/25/25 start: accept a train <-> eval
// swap iff compound divergence rises and atom divergence stays at or below
// atom_cap. Divergences compare train against dev+test.
SplitAssignment mcd_split(const Corpus& corpus, uint64_t seed,
                          double atom_cap = kDefaultAtomCap, int sweeps = 4);

// Divergence between the distributions accumulated over two id sets.
double set_divergence(const Corpus& corpus, const std::vector<int>& left,
                      const std::vector<int>& right, bool compounds, double alpha);

}  // namespace treecls
