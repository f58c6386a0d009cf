#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "treecls/grammar.h"
#include "treecls/structure.h"
#include "treecls/util.h"

using namespace treecls;

namespace {

AnnotatedInstance annotate_example(const Example& ex) {
  return annotate_pair(ex.id, tokenize_question(ex.question), ex.question_tree,
                       ex.query);
}

// Two-level constituency tree over "Who directed M0":
//   (S (NP Who) (VP directed (NP M0)))
Example hand_example() {
  Example ex;
  ex.id = 0;
  ex.question = "Who directed M0";
  ex.query = "SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M0 }";
  ConstituencyTree& t = ex.question_tree;
  t.nodes = {
      {"S", {1, 3}, -1},         // 0
      {"NP", {2}, -1},           // 1
      {"Who", {}, 0},            // 2
      {"VP", {4, 5}, -1},        // 3
      {"directed", {}, 1},       // 4
      {"NP", {6}, -1},           // 5
      {"M0", {}, 2},             // 6
  };
  t.root = 0;
  return ex;
}

}  // namespace

TEST_CASE("layout composition and segment order") {
  Example ex = hand_example();
  AnnotatedInstance inst = annotate_example(ex);
  // 1 CLS + 3 question + 4 internal (NP, NP, VP, S post-order) + 10 query.
  CHECK(inst.layout.size() == 1 + 3 + 4 + 9);
  CHECK(inst.layout.tokens[0] == kClsToken);
  CHECK(inst.layout.segments[0] == Segment::kCls);

  // Post-order internal labels: NP (Who), NP (M0), VP, S.
  CHECK(inst.layout.tokens[4] == "<NP>");
  CHECK(inst.layout.tokens[5] == "<NP>");
  CHECK(inst.layout.tokens[6] == "<VP>");
  CHECK(inst.layout.tokens[7] == "<S>");

  // Segments are monotone cls < question < q_internal < query.
  int last = -1;
  for (Segment s : inst.layout.segments) {
    CHECK(static_cast<int>(s) >= last);
    last = static_cast<int>(s);
  }
}

TEST_CASE("minimal single-token question layout") {
  Example ex;
  ex.id = 1;
  ex.question = "M0";
  ex.query = "SELECT count ( * ) WHERE { M0 ns:a.b M1 }";
  ex.question_tree.nodes = {{"ROOT", {1}, -1}, {"M0", {}, 0}};
  ex.question_tree.root = 0;
  AnnotatedInstance inst = annotate_example(ex);
  CHECK(inst.layout.tokens[0] == kClsToken);
  CHECK(inst.layout.tokens[1] == "M0");
  CHECK(inst.layout.tokens[2] == "<ROOT>");
  CHECK(inst.layout.segments[2] == Segment::kQInternal);
}

TEST_CASE("global tree: exact parent array for the hand-built example") {
  Example ex = hand_example();
  AnnotatedInstance inst = annotate_example(ex);
  const GlobalTree& g = inst.tree;
  REQUIRE(g.size() == 17);
  CHECK(g.well_formed());

  // Positions: 0 CLS; 1..3 question (Who directed M0); 4..7 internal
  // (<NP-who>, <NP-m0>, <VP>, <S>); 8..17 query tokens
  // (SELECT DISTINCT ?x0 WHERE { ?x0 rel M0 } -> 8..16 by the tokenizer).
  CHECK(g.parent[0] == 0);
  CHECK(g.parent[7] == 0);    // constituency root under CLS
  CHECK(g.parent[4] == 7);    // NP(Who) under S
  CHECK(g.parent[6] == 7);    // VP under S
  CHECK(g.parent[1] == 4);    // Who under NP
  CHECK(g.parent[2] == 6);    // directed under VP
  CHECK(g.parent[5] == 6);    // NP(M0) under VP
  CHECK(g.parent[3] == 5);    // M0 under NP

  // Query side: SELECT(8) root under CLS; DISTINCT(9),?x0(10) -> SELECT;
  // WHERE(11) -> SELECT; {(12),}(17) -> WHERE; rel(14) -> WHERE;
  // ?x0(13),M0(15... wait) subject/object -> rel.
  CHECK(inst.layout.tokens[8] == "SELECT");
  CHECK(g.parent[8] == 0);
  CHECK(g.parent[9] == 8);
  CHECK(g.parent[10] == 8);
  CHECK(g.parent[11] == 8);
  CHECK(g.parent[12] == 11);
  CHECK(g.parent[14] == 11);
  CHECK(g.parent[13] == 14);
  CHECK(g.parent[15] == 14);

  // CLS has exactly the two subtree roots as children.
  CHECK(g.children_of(0) == std::vector<int>{7, 8});

  // Edge count over n positions is n-1.
  int edges = 0;
  for (int i = 1; i < g.size(); ++i) {
    if (g.parent[i] != i) ++edges;
  }
  CHECK(edges == g.size() - 1);
}

TEST_CASE("global tree restrictions are isomorphic to the source trees") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 23, 100);
  for (const auto& ex : corpus.examples) {
    QueryTokens qt = tokenize_query(ex.query);
    DependencyTree dep = to_dependency_tree(parse_query(qt), qt);
    InputLayout layout = build_input_layout(ex, dep);
    GlobalTree g = build_global_tree(layout, ex.question_tree, dep);
    REQUIRE(g.well_formed());
    CHECK(g.children_of(0).size() == 2);

    // Query-side restriction equals the dependency tree.
    int query_base = 0;
    for (int i = 0; i < layout.size(); ++i) {
      if (layout.segments[i] == Segment::kQuery) {
        query_base = i;
        break;
      }
    }
    for (size_t i = 0; i < dep.heads.size(); ++i) {
      int pos = query_base + static_cast<int>(i);
      if (dep.heads[i] == static_cast<int>(i)) {
        CHECK(g.parent[pos] == 0);
      } else {
        CHECK(g.parent[pos] == query_base + dep.heads[i]);
      }
    }
  }
}

TEST_CASE("cross links: Cartesian pairs over matching entity tokens") {
  Example ex;
  ex.id = 2;
  ex.question = "Did M0 direct M1";
  ex.query = "SELECT count ( * ) WHERE { M0 ns:a.b M1 . M0 ns:c.d M1 }";
  ConstituencyTree& t = ex.question_tree;
  t.nodes = {{"S", {1, 2, 3, 4}, -1},
             {"Did", {}, 0},
             {"M0", {}, 1},
             {"direct", {}, 2},
             {"M1", {}, 3}};
  t.root = 0;
  AnnotatedInstance inst = annotate_example(ex);

  // M0 question occurrences: 1; query occurrences: 2 -> 2 pairs; same for M1.
  int m0_pairs = 0, m1_pairs = 0;
  for (const auto& [a, b] : inst.links.pairs) {
    CHECK(inst.layout.tokens[a] == inst.layout.tokens[b]);
    CHECK(inst.layout.segments[a] == Segment::kQuestion);
    CHECK(inst.layout.segments[b] == Segment::kQuery);
    if (inst.layout.tokens[a] == "M0") ++m0_pairs;
    if (inst.layout.tokens[a] == "M1") ++m1_pairs;
  }
  CHECK(m0_pairs == 2);
  CHECK(m1_pairs == 2);

  // "Movie" style words do not link; only the entity pattern does.
  Example ex2 = hand_example();
  ex2.question = "Who directed Movie";
  ex2.question_tree.nodes[6].label = "Movie";
  ex2.query = "SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M0 }";
  AnnotatedInstance inst2 = annotate_example(ex2);
  CHECK(inst2.links.pairs.empty());
}

TEST_CASE("no shared entities means no links") {
  Example ex = hand_example();
  ex.query = "SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M7 }";
  AnnotatedInstance inst = annotate_example(ex);
  CHECK(inst.links.pairs.empty());
}

TEST_CASE("cross links are disjoint from tree edges") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 29, 100);
  for (const auto& ex : corpus.examples) {
    AnnotatedInstance inst = annotate_example(ex);
    for (const auto& [a, b] : inst.links.pairs) {
      CHECK(inst.tree.parent[a] != b);
      CHECK(inst.tree.parent[b] != a);
    }
  }
}

TEST_CASE("annotated record JSON round trip") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 31, 20);
  for (const auto& ex : corpus.examples) {
    AnnotatedInstance inst = annotate_example(ex);
    std::string line = annotated_to_json_line(inst);
    AnnotatedInstance back = annotated_from_json_line(line, 1);
    CHECK(back == inst);
  }
}

TEST_CASE("layout construction is deterministic") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 37, 10);
  for (const auto& ex : corpus.examples) {
    CHECK(annotate_example(ex) == annotate_example(ex));
  }
}
