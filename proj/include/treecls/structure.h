#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "treecls/corpus.h"
#include "treecls/sparql.h"

namespace treecls {

enum class Segment { kCls, kQuestion, kQInternal, kQuery };

std::string segment_name(Segment s);
Segment segment_from_name(const std::string& name);

// The model input sequence: CLS, question tokens, one token per internal
// constituency node (post-order), query tokens.
struct InputLayout {
  std::vector<std::string> tokens;
  std::vector<Segment> segments;
  int source_id = -1;

  int size() const { return static_cast<int>(tokens.size()); }
  bool operator==(const InputLayout&) const = default;
};

// parent[i] is the layout position of i's parent; parent[0] == 0 (CLS root).
struct GlobalTree {
  std::vector<int> parent;

  int size() const { return static_cast<int>(parent.size()); }
  bool well_formed() const;
  std::vector<int> children_of(int pos) const;
  bool operator==(const GlobalTree&) const = default;
};

// Unordered position pairs {i, j}, stored with i < j.
struct CrossLinks {
  std::set<std::pair<int, int>> pairs;

  bool linked(int i, int j) const {
    if (i > j) std::swap(i, j);
    return pairs.count({i, j}) > 0;
  }
  bool operator==(const CrossLinks&) const = default;
};

// The dependency tree must come from Example.query.
InputLayout build_input_layout(const Example& ex, const DependencyTree& dep);

// As build_input_layout but for an arbitrary (question, query) pairing, used
// for classification instances whose query is not the gold one.
InputLayout build_input_layout(int source_id,
                               const std::vector<std::string>& question_tokens,
                               const ConstituencyTree& question_tree,
                               const QueryTokens& query_tokens);

GlobalTree build_global_tree(const InputLayout& layout,
                             const ConstituencyTree& question_tree,
                             const DependencyTree& dep);

inline constexpr const char* kDefaultEntityPattern = "M\\d+";

// All (question position, query position) pairs with identical token text
// matching entity_pattern; every occurrence pair links (Cartesian product).
CrossLinks find_cross_links(const InputLayout& layout,
                            const std::string& entity_pattern = kDefaultEntityPattern);

// Everything downstream consumers need for one instance, and the JSON-lines
// record exchanged between the annotate and train stages:
//   {id, tokens, segments, parent, cross_links}
struct AnnotatedInstance {
  int id = -1;
  InputLayout layout;
  GlobalTree tree;
  CrossLinks links;

  bool operator==(const AnnotatedInstance&) const = default;
};

AnnotatedInstance annotate_pair(int id,
                                const std::vector<std::string>& question_tokens,
                                const ConstituencyTree& question_tree,
                                const std::string& query_text,
                                const std::string& entity_pattern = kDefaultEntityPattern);

std::string annotated_to_json_line(const AnnotatedInstance& inst);
AnnotatedInstance annotated_from_json_line(const std::string& line, int line_no);

}  // namespace treecls
