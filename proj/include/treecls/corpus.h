#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace treecls {

enum class SplitTag { kTrain, kDev, kTest, kUnassigned };

std::string split_tag_name(SplitTag tag);
SplitTag split_tag_from_name(const std::string& name);

// One node of a constituency tree. Leaves carry the index of the question
// token they cover and use the token text as their label.
struct TreeNode {
  std::string label;
  std::vector<int> children;  // node ids; empty for leaves
  int token = -1;             // question token index; -1 for internal nodes

  bool operator==(const TreeNode&) const = default;
};

struct ConstituencyTree {
  std::vector<TreeNode> nodes;
  int root = 0;

  bool is_leaf(int id) const { return nodes[id].children.empty(); }
  int leaf_count() const;
  // Node ids of leaves in left-to-right question order.
  std::vector<int> leaves_in_order() const;
  // Node ids of internal nodes in post-order (children before parents).
  std::vector<int> internal_post_order() const;
  // Leaf token texts in left-to-right order.
  std::vector<std::string> leaf_tokens() const;

  // Single root, acyclic, every token index 0..n_tokens-1 in exactly one
  // leaf, internal nodes nonempty.
  bool well_formed(int n_tokens) const;

  bool operator==(const ConstituencyTree&) const = default;
};

struct Example {
  int id = 0;
  std::string question;
  std::string query;
  ConstituencyTree question_tree;
  SplitTag split_tag = SplitTag::kUnassigned;

  bool operator==(const Example&) const = default;
};

enum class Provenance { kIngested, kSynthetic };

struct Corpus {
  std::vector<Example> examples;
  Provenance provenance = Provenance::kSynthetic;
  std::optional<uint64_t> grammar_seed;

  bool operator==(const Corpus&) const = default;
};

// Whitespace split, case preserving; punctuation stays attached as produced
// by the grammar or the ingested file. Throws EmptyInput on empty/blank text.
std::vector<std::string> tokenize_question(const std::string& text);

struct RejectedLine {
  int line = 0;
  int id = -1;
  std::string message;
};

// Loads a JSON-lines corpus file. When trees_path is nonempty the trees come
// from a parallel JSON-lines file (one nested-array tree per line); otherwise
// each record carries its tree inline under the "tree" key.
//
// strict=true throws AlignmentError on the first tree/token mismatch.
// strict=false skips misaligned records, collects them in *rejects, and
// renumbers the surviving examples densely from 0.
Corpus load_cfq(const std::string& dataset_path, const std::string& trees_path,
                bool strict = true, std::vector<RejectedLine>* rejects = nullptr);

void write_corpus(const Corpus& corpus, const std::string& path);
Corpus read_corpus(const std::string& path);

// Serialization of a single example to/from the JSON-lines record, exposed
// for tests and the ingest adapter.
std::string example_to_json_line(const Example& ex);
Example example_from_json_line(const std::string& line, int line_no);

// Token vocabulary over the corpus: specials first, then all question/query
// tokens and internal-node label tokens, sorted. One token per line on disk,
// line number = id.
std::vector<std::string> build_vocabulary(const Corpus& corpus);
void write_vocabulary(const std::vector<std::string>& vocab,
                      const std::string& path);
std::vector<std::string> read_vocabulary(const std::string& path);

inline constexpr const char* kClsToken = "<CLS>";
inline constexpr const char* kSepToken = "<SEP>";
inline constexpr const char* kUnkToken = "<UNK>";
inline constexpr const char* kBosToken = "<BOS>";
inline constexpr const char* kEosToken = "<EOS>";

}  // namespace treecls
