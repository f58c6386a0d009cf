#include "treecls/masks.h"

#include <numeric>

#include "json.hpp"
#include "treecls/error.h"

namespace treecls {

using ordered_json = nlohmann::ordered_json;

int HardMask::count_true() const {
  return static_cast<int>(
      std::accumulate(allowed.begin(), allowed.end(), 0));
}

std::string mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::kNone: return "none";
    case MaskMode::kHard: return "hard";
    case MaskMode::kSoft: return "soft";
    case MaskMode::kBoth: return "both";
    case MaskMode::kBlock: return "block";
  }
  return "none";
}

MaskMode mask_mode_from_name(const std::string& name) {
  if (name == "none") return MaskMode::kNone;
  if (name == "hard") return MaskMode::kHard;
  if (name == "soft") return MaskMode::kSoft;
  if (name == "both") return MaskMode::kBoth;
  if (name == "block") return MaskMode::kBlock;
  throw ConfigError("unknown mask mode '" + name + "'");
}

bool MaskSet::consistent() const {
  switch (mode) {
    case MaskMode::kNone: return !hard && !soft;
    case MaskMode::kHard: return hard && !soft;
    case MaskMode::kSoft: return !hard && soft.has_value();
    case MaskMode::kBoth: return hard && soft;
    case MaskMode::kBlock: return hard && !soft;
  }
  return false;
}

HardMask hard_mask(const GlobalTree& tree, const CrossLinks& links, bool use_cross) {
  int n = tree.size();
  HardMask mask;
  mask.n = n;
  mask.allowed.assign(static_cast<size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) {
    mask.set(i, i, true);
    if (i != 0) {
      mask.set(i, tree.parent[i], true);
      mask.set(tree.parent[i], i, true);
    }
  }
  if (use_cross) {
    for (const auto& [a, b] : links.pairs) {
      mask.set(a, b, true);
      mask.set(b, a, true);
    }
  }
  return mask;
}

SoftLabels soft_labels(const GlobalTree& tree, const CrossLinks& links) {
  int n = tree.size();
  SoftLabels labels;
  labels.n = n;
  labels.label.assign(static_cast<size_t>(n) * n, kUnrelated);
  auto& lab = labels.label;
  auto idx = [n](int i, int j) { return static_cast<size_t>(i) * n + j; };

  // Lowest precedence first; later writes win.
  for (int j = 1; j < n; ++j) {
    int p = tree.parent[j];
    lab[idx(p, j)] = kParentToChild;
    lab[idx(j, p)] = kChildToParent;
  }
  for (int i = 1; i < n; ++i) {
    lab[idx(0, i)] = kRootLink;
    lab[idx(i, 0)] = kRootLink;
  }
  for (const auto& [a, b] : links.pairs) {
    lab[idx(a, b)] = kCrossLink;
    lab[idx(b, a)] = kCrossLink;
  }
  for (int i = 0; i < n; ++i) lab[idx(i, i)] = kItself;
  return labels;
}

HardMask block_mask(const InputLayout& layout, const CrossLinks& links) {
  int n = layout.size();
  HardMask mask;
  mask.n = n;
  mask.allowed.assign(static_cast<size_t>(n) * n, 0);
  auto group = [&layout](int i) {
    return layout.segments[i] == Segment::kQuery ? 1 : 0;
  };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      bool ok = i == 0 || j == 0 || group(i) == group(j) || links.linked(i, j);
      mask.set(i, j, ok);
    }
  }
  return mask;
}

MaskSet build_mask_set(const AnnotatedInstance& inst, MaskMode mode, bool use_cross) {
  const CrossLinks empty;
  const CrossLinks& links = use_cross ? inst.links : empty;
  MaskSet set;
  set.mode = mode;
  switch (mode) {
    case MaskMode::kNone:
      break;
    case MaskMode::kHard:
      set.hard = hard_mask(inst.tree, links, use_cross);
      break;
    case MaskMode::kSoft:
      set.soft = soft_labels(inst.tree, links);
      break;
    case MaskMode::kBoth:
      set.hard = hard_mask(inst.tree, links, use_cross);
      set.soft = soft_labels(inst.tree, links);
      break;
    case MaskMode::kBlock:
      set.hard = block_mask(inst.layout, links);
      break;
  }
  return set;
}

namespace {

ordered_json rle_rows(const HardMask& mask) {
  ordered_json rows = ordered_json::array();
  for (int i = 0; i < mask.n; ++i) {
    ordered_json row = ordered_json::array();
    row.push_back(mask.at(i, 0) ? 1 : 0);
    int run = 1;
    for (int j = 1; j < mask.n; ++j) {
      if (mask.at(i, j) == mask.at(i, j - 1)) {
        ++run;
      } else {
        row.push_back(run);
        run = 1;
      }
    }
    row.push_back(run);
    rows.push_back(row);
  }
  return rows;
}

HardMask mask_from_rle(const ordered_json& rows) {
  HardMask mask;
  mask.n = static_cast<int>(rows.size());
  mask.allowed.assign(static_cast<size_t>(mask.n) * mask.n, 0);
  for (int i = 0; i < mask.n; ++i) {
    const auto& row = rows[i];
    bool value = row.at(0).get<int>() != 0;
    int j = 0;
    for (size_t k = 1; k < row.size(); ++k) {
      int run = row[k].get<int>();
      for (int r = 0; r < run; ++r) mask.set(i, j++, value);
      value = !value;
    }
    if (j != mask.n) throw Error("run-length row does not cover the mask width");
  }
  return mask;
}

}  // namespace

std::string mask_set_to_json(const MaskSet& set) {
  ordered_json j;
  j["mode"] = mask_mode_name(set.mode);
  if (set.hard) j["hard"] = rle_rows(*set.hard);
  if (set.soft) {
    ordered_json rows = ordered_json::array();
    for (int i = 0; i < set.soft->n; ++i) {
      ordered_json row = ordered_json::array();
      for (int jj = 0; jj < set.soft->n; ++jj) row.push_back(set.soft->at(i, jj));
      rows.push_back(row);
    }
    j["soft"] = rows;
  }
  return j.dump();
}

MaskSet mask_set_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, e.what());
  }
  MaskSet set;
  set.mode = mask_mode_from_name(j.at("mode").get<std::string>());
  if (j.contains("hard")) set.hard = mask_from_rle(j.at("hard"));
  if (j.contains("soft")) {
    SoftLabels labels;
    labels.n = static_cast<int>(j.at("soft").size());
    for (const auto& row : j.at("soft")) {
      for (const auto& v : row) labels.label.push_back(v.get<int>());
    }
    if (labels.label.size() != static_cast<size_t>(labels.n) * labels.n) {
      throw Error("soft label rows are ragged");
    }
    set.soft = std::move(labels);
  }
  return set;
}

}  // namespace treecls
