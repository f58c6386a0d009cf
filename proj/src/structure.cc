#include "treecls/structure.h"

#include <regex>

#include "json.hpp"
#include "treecls/error.h"

namespace treecls {

using ordered_json = nlohmann::ordered_json;

std::string segment_name(Segment s) {
  switch (s) {
    case Segment::kCls: return "cls";
    case Segment::kQuestion: return "question";
    case Segment::kQInternal: return "q_internal";
    case Segment::kQuery: return "query";
  }
  return "cls";
}

Segment segment_from_name(const std::string& name) {
  if (name == "cls") return Segment::kCls;
  if (name == "question") return Segment::kQuestion;
  if (name == "q_internal") return Segment::kQInternal;
  if (name == "query") return Segment::kQuery;
  throw ConfigError("unknown segment '" + name + "'");
}

bool GlobalTree::well_formed() const {
  int n = size();
  if (n == 0 || parent[0] != 0) return false;
  for (int i = 1; i < n; ++i) {
    if (parent[i] < 0 || parent[i] >= n || parent[i] == i) return false;
  }
  // Acyclic and connected: every node must reach position 0.
  for (int i = 0; i < n; ++i) {
    int cur = i;
    int steps = 0;
    while (cur != 0) {
      cur = parent[cur];
      if (++steps > n) return false;
    }
  }
  return true;
}

std::vector<int> GlobalTree::children_of(int pos) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (i != 0 && parent[i] == pos) out.push_back(i);
  }
  return out;
}

InputLayout build_input_layout(int source_id,
                               const std::vector<std::string>& question_tokens,
                               const ConstituencyTree& question_tree,
                               const QueryTokens& query_tokens) {
  InputLayout layout;
  layout.source_id = source_id;
  layout.tokens.push_back(kClsToken);
  layout.segments.push_back(Segment::kCls);
  for (const auto& tok : question_tokens) {
    layout.tokens.push_back(tok);
    layout.segments.push_back(Segment::kQuestion);
  }
  for (int node : question_tree.internal_post_order()) {
    layout.tokens.push_back("<" + question_tree.nodes[node].label + ">");
    layout.segments.push_back(Segment::kQInternal);
  }
  for (const auto& tok : query_tokens.tokens) {
    layout.tokens.push_back(tok);
    layout.segments.push_back(Segment::kQuery);
  }
  return layout;
}

InputLayout build_input_layout(const Example& ex, const DependencyTree& dep) {
  QueryTokens qt = tokenize_query(ex.query);
  if (qt.size() != dep.heads.size()) {
    throw ShapeError("dependency tree does not cover the query tokens");
  }
  return build_input_layout(ex.id, tokenize_question(ex.question),
                            ex.question_tree, qt);
}

GlobalTree build_global_tree(const InputLayout& layout,
                             const ConstituencyTree& question_tree,
                             const DependencyTree& dep) {
  int n_question = 0, n_internal = 0;
  for (Segment s : layout.segments) {
    if (s == Segment::kQuestion) ++n_question;
    if (s == Segment::kQInternal) ++n_internal;
  }
  const int question_base = 1;
  const int internal_base = 1 + n_question;
  const int query_base = 1 + n_question + n_internal;

  // Layout position of each constituency node: leaves sit at their question
  // token position, internal nodes at their post-order slot.
  auto post = question_tree.internal_post_order();
  std::vector<int> node_pos(question_tree.nodes.size(), -1);
  for (size_t i = 0; i < post.size(); ++i) {
    node_pos[post[i]] = internal_base + static_cast<int>(i);
  }
  for (size_t i = 0; i < question_tree.nodes.size(); ++i) {
    if (question_tree.is_leaf(static_cast<int>(i))) {
      node_pos[i] = question_base + question_tree.nodes[i].token;
    }
  }

  GlobalTree tree;
  tree.parent.assign(layout.size(), -1);
  tree.parent[0] = 0;
  for (size_t i = 0; i < question_tree.nodes.size(); ++i) {
    for (int child : question_tree.nodes[i].children) {
      tree.parent[node_pos[child]] = node_pos[i];
    }
  }
  tree.parent[node_pos[question_tree.root]] = 0;
  for (size_t i = 0; i < dep.heads.size(); ++i) {
    int pos = query_base + static_cast<int>(i);
    tree.parent[pos] = dep.heads[i] == static_cast<int>(i)
                           ? 0
                           : query_base + dep.heads[i];
  }
  return tree;
}

CrossLinks find_cross_links(const InputLayout& layout,
                            const std::string& entity_pattern) {
  std::regex pattern("^(" + entity_pattern + ")$");
  CrossLinks links;
  for (int i = 0; i < layout.size(); ++i) {
    if (layout.segments[i] != Segment::kQuestion) continue;
    if (!std::regex_match(layout.tokens[i], pattern)) continue;
    for (int j = 0; j < layout.size(); ++j) {
      if (layout.segments[j] != Segment::kQuery) continue;
      if (layout.tokens[j] == layout.tokens[i]) {
        links.pairs.insert({std::min(i, j), std::max(i, j)});
      }
    }
  }
  return links;
}

AnnotatedInstance annotate_pair(int id,
                                const std::vector<std::string>& question_tokens,
                                const ConstituencyTree& question_tree,
                                const std::string& query_text,
                                const std::string& entity_pattern) {
  QueryTokens qt = tokenize_query(query_text);
  QueryAst ast = parse_query(qt);
  DependencyTree dep = to_dependency_tree(ast, qt);
  AnnotatedInstance inst;
  inst.id = id;
  inst.layout = build_input_layout(id, question_tokens, question_tree, qt);
  inst.tree = build_global_tree(inst.layout, question_tree, dep);
  inst.links = find_cross_links(inst.layout, entity_pattern);
  return inst;
}

std::string annotated_to_json_line(const AnnotatedInstance& inst) {
  ordered_json j;
  j["id"] = inst.id;
  j["tokens"] = inst.layout.tokens;
  ordered_json segs = ordered_json::array();
  for (Segment s : inst.layout.segments) segs.push_back(segment_name(s));
  j["segments"] = segs;
  j["parent"] = inst.tree.parent;
  ordered_json links = ordered_json::array();
  for (const auto& [a, b] : inst.links.pairs) {
    links.push_back(ordered_json::array({a, b}));
  }
  j["cross_links"] = links;
  return j.dump();
}

AnnotatedInstance annotated_from_json_line(const std::string& line, int line_no) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  AnnotatedInstance inst;
  try {
    inst.id = j.at("id").get<int>();
    inst.layout.source_id = inst.id;
    inst.layout.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& s : j.at("segments")) {
      inst.layout.segments.push_back(segment_from_name(s.get<std::string>()));
    }
    inst.tree.parent = j.at("parent").get<std::vector<int>>();
    for (const auto& p : j.at("cross_links")) {
      inst.links.pairs.insert({p.at(0).get<int>(), p.at(1).get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  if (inst.layout.tokens.size() != inst.layout.segments.size() ||
      inst.layout.tokens.size() != inst.tree.parent.size()) {
    throw ParseError(line_no, "annotated record field lengths disagree");
  }
  return inst;
}

}  // namespace treecls
