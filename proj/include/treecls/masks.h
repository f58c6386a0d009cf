#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treecls/structure.h"

namespace treecls {

// Dense boolean matrix over layout positions.
struct HardMask {
  int n = 0;
  std::vector<uint8_t> allowed;  // row-major n*n

  bool at(int i, int j) const { return allowed[i * n + j] != 0; }
  void set(int i, int j, bool v) { allowed[i * n + j] = v ? 1 : 0; }
  int count_true() const;
  bool operator==(const HardMask&) const = default;
};

// Relative attention labels per position pair.
enum RelationLabel : int {
  kItself = 0,
  kParentToChild = 1,
  kChildToParent = 2,
  kRootLink = 3,
  kCrossLink = 4,
  kUnrelated = 5,
};
inline constexpr int kRelationLabelCount = 6;

struct SoftLabels {
  int n = 0;
  std::vector<int> label;  // row-major n*n

  int at(int i, int j) const { return label[i * n + j]; }
  bool operator==(const SoftLabels&) const = default;
};

enum class MaskMode { kNone, kHard, kSoft, kBoth, kBlock };

std::string mask_mode_name(MaskMode m);
MaskMode mask_mode_from_name(const std::string& name);

struct MaskSet {
  MaskMode mode = MaskMode::kNone;
  std::optional<HardMask> hard;
  std::optional<SoftLabels> soft;

  bool consistent() const;
  bool operator==(const MaskSet&) const = default;
};

// allowed[i][j] iff i==j, {i,j} is a tree edge, or (use_cross and {i,j} is a
// cross link). CLS therefore reaches only its two subtree-root children.
HardMask hard_mask(const GlobalTree& tree, const CrossLinks& links, bool use_cross);

// Label precedence when several relations apply:
//   ITSELF > CROSS_LINK > ROOT_LINK > PARENT_TO_CHILD/CHILD_TO_PARENT > UNRELATED
// ROOT_LINK covers every pair touching the CLS root (i != j).
SoftLabels soft_labels(const GlobalTree& tree, const CrossLinks& links);

// Segment-group attention: question+q_internal form one group, query the
// other; CLS attends to and from everything; cross links punch through.
HardMask block_mask(const InputLayout& layout, const CrossLinks& links);

// Masks for an annotated instance under a given mode and cross-link flag.
// use_cross=false drops the links before any mask or label is built.
MaskSet build_mask_set(const AnnotatedInstance& inst, MaskMode mode, bool use_cross);

// JSON value serialization: hard rows run-length encoded as
// [first_value, run1, run2, ...], soft label rows dense.
std::string mask_set_to_json(const MaskSet& set);
MaskSet mask_set_from_json(const std::string& text);

}  // namespace treecls
