#include "treecls/corpus.h"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "treecls/error.h"
#include "treecls/sparql.h"
#include "treecls/util.h"

namespace treecls {

using ordered_json = nlohmann::ordered_json;

std::string split_tag_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kDev: return "dev";
    case SplitTag::kTest: return "test";
    case SplitTag::kUnassigned: return "unassigned";
  }
  return "unassigned";
}

SplitTag split_tag_from_name(const std::string& name) {
  if (name == "train") return SplitTag::kTrain;
  if (name == "dev") return SplitTag::kDev;
  if (name == "test") return SplitTag::kTest;
  if (name == "unassigned") return SplitTag::kUnassigned;
  throw ConfigError("unknown split tag '" + name + "'");
}

int ConstituencyTree::leaf_count() const {
  int n = 0;
  for (const auto& node : nodes) {
    if (node.children.empty()) ++n;
  }
  return n;
}

std::vector<int> ConstituencyTree::leaves_in_order() const {
  std::vector<int> order;
  std::vector<int> stack{root};
  // Depth-first with children pushed in reverse keeps left-to-right order.
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (is_leaf(id)) {
      order.push_back(id);
    } else {
      const auto& ch = nodes[id].children;
      for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
    }
  }
  return order;
}

std::vector<int> ConstituencyTree::internal_post_order() const {
  std::vector<int> order;
  // Explicit stack post-order: (node, child cursor).
  std::vector<std::pair<int, size_t>> stack{{root, 0}};
  if (is_leaf(root)) return order;
  while (!stack.empty()) {
    auto& [id, cursor] = stack.back();
    const auto& ch = nodes[id].children;
    if (cursor < ch.size()) {
      int child = ch[cursor++];
      if (!is_leaf(child)) stack.push_back({child, 0});
    } else {
      order.push_back(id);
      stack.pop_back();
    }
  }
  return order;
}

std::vector<std::string> ConstituencyTree::leaf_tokens() const {
  std::vector<std::string> tokens;
  for (int id : leaves_in_order()) tokens.push_back(nodes[id].label);
  return tokens;
}

bool ConstituencyTree::well_formed(int n_tokens) const {
  if (nodes.empty()) return false;
  if (root < 0 || root >= static_cast<int>(nodes.size())) return false;
  std::vector<int> seen_parent(nodes.size(), -1);
  std::vector<int> stack{root};
  int visited = 0;
  std::vector<bool> token_seen(n_tokens, false);
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    ++visited;
    if (visited > static_cast<int>(nodes.size())) return false;  // cycle
    const auto& node = nodes[id];
    if (node.children.empty()) {
      if (node.token < 0 || node.token >= n_tokens) return false;
      if (token_seen[node.token]) return false;
      token_seen[node.token] = true;
    } else {
      for (int c : node.children) {
        if (c < 0 || c >= static_cast<int>(nodes.size()) || c == root)
          return false;
        if (seen_parent[c] != -1) return false;  // two parents
        seen_parent[c] = id;
        stack.push_back(c);
      }
    }
  }
  if (visited != static_cast<int>(nodes.size())) return false;  // disconnected
  for (bool b : token_seen) {
    if (!b) return false;
  }
  return true;
}

std::vector<std::string> tokenize_question(const std::string& text) {
  auto tokens = split_whitespace(text);
  if (tokens.empty()) throw EmptyInput();
  return tokens;
}

namespace {

ordered_json tree_to_json(const ConstituencyTree& tree, int id) {
  const TreeNode& node = tree.nodes[id];
  if (node.children.empty()) return node.label;
  ordered_json arr = ordered_json::array();
  arr.push_back(node.label);
  for (int c : node.children) arr.push_back(tree_to_json(tree, c));
  return arr;
}

int tree_from_json(const ordered_json& j, ConstituencyTree& tree,
                   int& next_token) {
  if (j.is_string()) {
    int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({j.get<std::string>(), {}, next_token++});
    return id;
  }
  if (!j.is_array() || j.size() < 2 || !j[0].is_string()) {
    throw Error("malformed tree node: expected [label, child, ...]");
  }
  int id = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({j[0].get<std::string>(), {}, -1});
  for (size_t i = 1; i < j.size(); ++i) {
    int child = tree_from_json(j[i], tree, next_token);
    tree.nodes[id].children.push_back(child);
  }
  return id;
}

ConstituencyTree parse_tree_json(const ordered_json& j) {
  ConstituencyTree tree;
  int next_token = 0;
  tree.root = tree_from_json(j, tree, next_token);
  return tree;
}

Example example_from_json(const ordered_json& j, int line_no) {
  Example ex;
  if (!j.is_object()) throw ParseError(line_no, "record is not an object");
  try {
    ex.id = j.at("id").get<int>();
    ex.question = j.at("question").get<std::string>();
    ex.query = j.at("query").get<std::string>();
    if (j.contains("tree") && !j.at("tree").is_null()) {
      ex.question_tree = parse_tree_json(j.at("tree"));
    }
    const auto& split = j.at("split");
    ex.split_tag = split.is_null() ? SplitTag::kUnassigned
                                   : split_tag_from_name(split.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  } catch (const ConfigError& e) {
    throw ParseError(line_no, e.what());
  }
  if (ex.question.empty()) throw ParseError(line_no, "empty question");
  if (ex.query.empty()) throw ParseError(line_no, "empty query");
  return ex;
}

void check_alignment(const Example& ex) {
  auto tokens = tokenize_question(ex.question);
  if (!ex.question_tree.well_formed(static_cast<int>(tokens.size())) ||
      ex.question_tree.leaf_tokens() != tokens) {
    throw AlignmentError(ex.id);
  }
}

}  // namespace

std::string example_to_json_line(const Example& ex) {
  ordered_json j;
  j["id"] = ex.id;
  j["question"] = ex.question;
  j["query"] = ex.query;
  j["tree"] = tree_to_json(ex.question_tree, ex.question_tree.root);
  if (ex.split_tag == SplitTag::kUnassigned) {
    j["split"] = nullptr;
  } else {
    j["split"] = split_tag_name(ex.split_tag);
  }
  return j.dump();
}

Example example_from_json_line(const std::string& line, int line_no) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  return example_from_json(j, line_no);
}

Corpus load_cfq(const std::string& dataset_path, const std::string& trees_path,
                bool strict, std::vector<RejectedLine>* rejects) {
  auto lines = read_lines(dataset_path);
  std::vector<std::string> tree_lines;
  bool separate_trees = !trees_path.empty() && trees_path != dataset_path;
  if (separate_trees) {
    tree_lines = read_lines(trees_path);
    if (tree_lines.size() != lines.size()) {
      throw ParseError(0, "trees file has " + std::to_string(tree_lines.size()) +
                              " lines, dataset has " +
                              std::to_string(lines.size()));
    }
  }

  Corpus corpus;
  corpus.provenance = Provenance::kIngested;
  for (size_t i = 0; i < lines.size(); ++i) {
    int line_no = static_cast<int>(i) + 1;
    if (lines[i].empty()) continue;
    Example ex = example_from_json_line(lines[i], line_no);
    if (separate_trees) {
      ordered_json tj;
      try {
        tj = ordered_json::parse(tree_lines[i]);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(line_no, std::string("trees file: ") + e.what());
      }
      ex.question_tree = parse_tree_json(tj);
    }
    try {
      check_alignment(ex);
    } catch (const AlignmentError& e) {
      if (strict) throw;
      if (rejects) rejects->push_back({line_no, ex.id, e.what()});
      continue;
    }
    corpus.examples.push_back(std::move(ex));
  }
  // Ids must be dense from 0; renumber after rejects or sparse input.
  bool dense = true;
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    if (corpus.examples[i].id != static_cast<int>(i)) dense = false;
  }
  if (!dense) {
    for (size_t i = 0; i < corpus.examples.size(); ++i) {
      corpus.examples[i].id = static_cast<int>(i);
    }
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
  std::string out;
  out += "# provenance=" +
         std::string(corpus.provenance == Provenance::kSynthetic ? "synthetic"
                                                                 : "ingested");
  if (corpus.grammar_seed) {
    out += " grammar_seed=" + std::to_string(*corpus.grammar_seed);
  }
  out += "\n";
  for (const auto& ex : corpus.examples) {
    out += example_to_json_line(ex);
    out += "\n";
  }
  write_text_file(path, out);
}

Corpus read_corpus(const std::string& path) {
  auto lines = read_lines(path);
  Corpus corpus;
  size_t start = 0;
  if (!lines.empty() && !lines[0].empty() && lines[0][0] == '#') {
    auto fields = split_whitespace(lines[0].substr(1));
    for (const auto& f : fields) {
      if (f == "provenance=synthetic") corpus.provenance = Provenance::kSynthetic;
      if (f == "provenance=ingested") corpus.provenance = Provenance::kIngested;
      if (f.rfind("grammar_seed=", 0) == 0) {
        corpus.grammar_seed = std::stoull(f.substr(13));
      }
    }
    start = 1;
  }
  for (size_t i = start; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    Example ex = example_from_json_line(lines[i], static_cast<int>(i) + 1);
    check_alignment(ex);
    corpus.examples.push_back(std::move(ex));
  }
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    if (corpus.examples[i].id != static_cast<int>(i)) {
      throw ParseError(static_cast<int>(i) + 1, "example ids are not dense");
    }
  }
  return corpus;
}

std::vector<std::string> build_vocabulary(const Corpus& corpus) {
  std::set<std::string> seen;
  for (const auto& ex : corpus.examples) {
    for (const auto& tok : tokenize_question(ex.question)) seen.insert(tok);
    for (const auto& tok : tokenize_query(ex.query).tokens) seen.insert(tok);
    for (const auto& node : ex.question_tree.nodes) {
      if (!node.children.empty()) seen.insert("<" + node.label + ">");
    }
  }
  std::vector<std::string> vocab{kClsToken, kSepToken, kUnkToken, kBosToken,
                                 kEosToken};
  for (const auto& tok : seen) {
    if (std::find(vocab.begin(), vocab.end(), tok) == vocab.end()) {
      vocab.push_back(tok);
    }
  }
  return vocab;
}

void write_vocabulary(const std::vector<std::string>& vocab,
                      const std::string& path) {
  std::string out;
  for (const auto& tok : vocab) {
    out += tok;
    out += "\n";
  }
  write_text_file(path, out);
}

std::vector<std::string> read_vocabulary(const std::string& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace treecls
