#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "treecls/error.h"
#include "treecls/grammar.h"
#include "treecls/sparql.h"
#include "treecls/util.h"

using namespace treecls;

TEST_CASE("tokenize_query splits punctuation but keeps dotted identifiers") {
  // Hand-applied splitting rules: SELECT | count | ( | * | ) | WHERE | { |
  // ?x0 | a | ns:film.director | }
  QueryTokens t = tokenize_query("SELECT count(*) WHERE { ?x0 a ns:film.director }");
  REQUIRE(t.size() == 11);
  CHECK(t.tokens[0] == "SELECT");
  CHECK(t.kinds[0] == TokenKind::kKeyword);
  CHECK(t.tokens[1] == "count");
  CHECK(t.tokens[2] == "(");
  CHECK(t.tokens[3] == "*");
  CHECK(t.kinds[3] == TokenKind::kStar);
  CHECK(t.tokens[4] == ")");
  CHECK(t.tokens[7] == "?x0");
  CHECK(t.kinds[7] == TokenKind::kVariable);
  CHECK(t.tokens[8] == "a");
  CHECK(t.kinds[8] == TokenKind::kKeyword);
  CHECK(t.tokens[9] == "ns:film.director");
  CHECK(t.kinds[9] == TokenKind::kRelation);
  CHECK(t.kinds[10] == TokenKind::kPunct);
}

TEST_CASE("lexical classification") {
  QueryTokens entity = tokenize_query("M0");
  REQUIRE(entity.size() == 1);
  CHECK(entity.kinds[0] == TokenKind::kEntity);

  QueryTokens var = tokenize_query("?x12");
  REQUIRE(var.size() == 1);
  CHECK(var.kinds[0] == TokenKind::kVariable);

  CHECK(tokenize_query("mystery").kinds[0] == TokenKind::kLiteral);
  CHECK(tokenize_query("!=").kinds[0] == TokenKind::kKeyword);
  // Trailing clause dot splits; the relation keeps its internal dots.
  QueryTokens dotted = tokenize_query("ns:a.b.c .");
  REQUIRE(dotted.size() == 2);
  CHECK(dotted.kinds[0] == TokenKind::kRelation);
  CHECK(dotted.tokens[1] == ".");
}

TEST_CASE("parse_query accepts the fragment grammar") {
  QueryAst ast = parse_query(
      tokenize_query("SELECT count ( * ) WHERE { M0 ns:film.director.film M1 }"));
  CHECK(ast.count_star);
  REQUIRE(ast.triples.size() == 1);
  CHECK(ast.triples[0].subject.text == "M0");
  CHECK(ast.triples[0].predicate.text == "ns:film.director.film");
  CHECK(ast.triples[0].object.text == "M1");

  QueryAst d = parse_query(tokenize_query(
      "SELECT DISTINCT ?x0 ?x1 WHERE { ?x0 ns:a.b M0 . ?x1 ns:a.b ?x0 . FILTER ( ?x0 != ?x1 ) }"));
  CHECK_FALSE(d.count_star);
  CHECK(d.distinct_vars.size() == 2);
  CHECK(d.triples.size() == 2);
  CHECK(d.filters.size() == 1);
}

TEST_CASE("parse_query rejects deviations with positions") {
  CHECK_THROWS_AS(parse_query(tokenize_query("SELECT WHERE { }")), SyntaxError);
  CHECK_THROWS_AS(parse_query(tokenize_query("SELECT count ( * ) WHERE { }")),
                  SyntaxError);
  CHECK_THROWS_AS(
      parse_query(tokenize_query("SELECT count ( * ) WHERE { M0 ns:a.b }")),
      SyntaxError);
  try {
    parse_query(tokenize_query("WHERE { M0 ns:a.b M1 }"));
    FAIL("expected SyntaxError");
  } catch (const SyntaxError& e) {
    CHECK(e.position == 0);
  }
}

TEST_CASE("unbound filter variable is rejected") {
  CHECK_THROWS_AS(
      parse_query(tokenize_query(
          "SELECT count ( * ) WHERE { M0 ns:a.b M1 . FILTER ( ?x9 != M0 ) }")),
      UnboundFilterVariable);
  // Entity-only filters need no binding.
  CHECK_NOTHROW(parse_query(tokenize_query(
      "SELECT count ( * ) WHERE { M0 ns:a.b M1 . FILTER ( M0 != M1 ) }")));
}

TEST_CASE("canonicalize collapses whitespace and is idempotent") {
  std::string doubled = "SELECT  count (   * )  WHERE {  M0  ns:a.b  M1 }";
  std::string canon = canonical_query(doubled);
  CHECK(canon == "SELECT count ( * ) WHERE { M0 ns:a.b M1 }");
  CHECK(canonical_query(canon) == canon);

  // Token-identical queries share a canonical string.
  CHECK(canonical_query("SELECT count(*) WHERE { M0 ns:a.b M1 }") == canon);
}

TEST_CASE("canonicalize is a fixed point over the synthetic corpus") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 13, 1000);
  for (const auto& ex : corpus.examples) {
    std::string c1 = canonical_query(ex.query);
    CHECK(c1 == ex.query);  // the grammar emits canonical text
    CHECK(canonical_query(c1) == c1);
  }
}

TEST_CASE("dependency heads for a single type triple") {
  QueryTokens toks =
      tokenize_query("SELECT count ( * ) WHERE { ?x0 a ns:people.person }");
  // positions: 0 SELECT 1 count 2 ( 3 * 4 ) 5 WHERE 6 { 7 ?x0 8 a
  //            9 ns:people.person 10 }
  DependencyTree dep = to_dependency_tree(parse_query(toks), toks);
  REQUIRE(dep.heads.size() == 11);
  CHECK(dep.heads[0] == 0);   // SELECT is root
  CHECK(dep.heads[5] == 0);   // WHERE -> SELECT
  CHECK(dep.heads[1] == 0);   // count -> SELECT
  CHECK(dep.heads[2] == 0);
  CHECK(dep.heads[3] == 0);
  CHECK(dep.heads[4] == 0);
  CHECK(dep.heads[6] == 5);   // { -> WHERE
  CHECK(dep.heads[10] == 5);  // } -> WHERE
  CHECK(dep.heads[8] == 5);   // predicate 'a' -> WHERE
  CHECK(dep.heads[7] == 8);   // subject -> predicate
  CHECK(dep.heads[9] == 8);   // object -> predicate
  CHECK(dep.well_formed());
}

TEST_CASE("dependency tree properties over the synthetic corpus") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 17, 300);
  for (const auto& ex : corpus.examples) {
    QueryTokens toks = tokenize_query(ex.query);
    QueryAst ast = parse_query(toks);  // grammar closure: must parse
    DependencyTree dep = to_dependency_tree(ast, toks);
    REQUIRE(dep.heads.size() == toks.size());
    CHECK(dep.well_formed());
    // A tree over n tokens has exactly n-1 non-root edges.
    int non_root = 0;
    for (size_t i = 0; i < dep.heads.size(); ++i) {
      if (dep.heads[i] != static_cast<int>(i)) ++non_root;
    }
    CHECK(non_root == static_cast<int>(toks.size()) - 1);
  }
}

TEST_CASE("fuzzing token mutations never crashes the parser") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 19, 50);
  Rng rng(99);
  std::vector<std::string> alphabet{"SELECT", "WHERE",  "{",   "}",  "(",
                                    ")",      "*",      ".",   "a",  "M0",
                                    "?x0",    "ns:a.b", "!=",  "FILTER",
                                    "count",  "DISTINCT"};
  int parsed = 0, rejected = 0;
  for (const auto& ex : corpus.examples) {
    for (int trial = 0; trial < 40; ++trial) {
      auto tokens = split_whitespace(ex.query);
      int op = static_cast<int>(rng.below(3));
      size_t pos = rng.below(tokens.size());
      if (op == 0) {
        tokens[pos] = alphabet[rng.below(alphabet.size())];
      } else if (op == 1 && tokens.size() > 1) {
        tokens.erase(tokens.begin() + pos);
      } else {
        tokens.insert(tokens.begin() + pos, alphabet[rng.below(alphabet.size())]);
      }
      try {
        parse_query(tokenize_query(join_tokens(tokens)));
        ++parsed;
      } catch (const SyntaxError&) {
        ++rejected;
      } catch (const UnboundFilterVariable&) {
        ++rejected;
      }
    }
  }
  CHECK(parsed + rejected == 50 * 40);
  CHECK(rejected > 0);
}
