#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <set>

#include "treecls/corpus.h"
#include "treecls/error.h"
#include "treecls/grammar.h"
#include "treecls/util.h"

using namespace treecls;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("tokenize_question splits on whitespace, case preserved") {
  CHECK(tokenize_question("Who directed M0") ==
        std::vector<std::string>{"Who", "directed", "M0"});
  CHECK(tokenize_question("M0") == std::vector<std::string>{"M0"});
  auto toks = tokenize_question("Did M1 edit and produce M0");
  CHECK(toks.size() == 6);
  CHECK(toks.back() == "M0");
  CHECK_THROWS_AS(tokenize_question(""), EmptyInput);
  CHECK_THROWS_AS(tokenize_question("   "), EmptyInput);
}

TEST_CASE("synthetic generation is deterministic and distinct") {
  GrammarConfig cfg;
  Corpus a = generate_synthetic(cfg, 7, 500);
  Corpus b = generate_synthetic(cfg, 7, 500);
  REQUIRE(a.examples.size() == 500);
  CHECK(a == b);

  std::set<std::string> questions;
  for (const auto& ex : a.examples) questions.insert(ex.question);
  CHECK(questions.size() == 500);

  // Different seed, different corpus.
  Corpus c = generate_synthetic(cfg, 8, 500);
  CHECK(c.examples != a.examples);
}

TEST_CASE("synthetic examples satisfy the leaf/token invariant") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 3, 200);
  for (const auto& ex : corpus.examples) {
    auto tokens = tokenize_question(ex.question);
    REQUIRE(ex.question_tree.well_formed(static_cast<int>(tokens.size())));
    CHECK(ex.question_tree.leaf_tokens() == tokens);
  }
}

TEST_CASE("grammar capacity errors when distinct examples run out") {
  GrammarConfig tiny;
  tiny.max_depth = 0;
  tiny.n_entities = 2;
  tiny.n_relations = 1;
  CHECK_THROWS_AS(generate_synthetic(tiny, 1, 100000), CapacityError);
}

TEST_CASE("single example contract") {
  Corpus one = generate_synthetic(GrammarConfig{}, 7, 1);
  REQUIRE(one.examples.size() == 1);
  CHECK(one.examples[0].id == 0);
  CHECK(one.examples[0].split_tag == SplitTag::kUnassigned);
  CHECK_FALSE(one.examples[0].question.empty());
  CHECK_FALSE(one.examples[0].query.empty());
}

TEST_CASE("corpus write/read round trip is identity") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 11, 100);
  std::string path = temp_path("treecls_corpus_rt.jsonl");
  write_corpus(corpus, path);
  Corpus back = read_corpus(path);
  CHECK(back == corpus);

  Corpus empty;
  empty.provenance = Provenance::kSynthetic;
  write_corpus(empty, path);
  CHECK(read_corpus(path).examples.empty());
}

TEST_CASE("corrupted byte surfaces as ParseError with a line number") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 11, 5);
  std::string path = temp_path("treecls_corpus_corrupt.jsonl");
  write_corpus(corpus, path);
  std::string blob = read_text_file(path);
  // Break the JSON of the third record (line 4 incl. the header comment).
  size_t pos = 0;
  for (int i = 0; i < 3; ++i) pos = blob.find('\n', pos) + 1;
  blob[pos] = '#';
  write_text_file(path, blob);
  try {
    read_corpus(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line == 4);
  }
}

TEST_CASE("load_cfq rejects misaligned trees") {
  std::string good =
      R"({"id":0,"question":"Who directed M0","query":"SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M0 }","tree":["S",["NP","Who"],["VP","directed",["NP","M0"]]],"split":null})";
  std::string bad =
      R"({"id":1,"question":"Who directed M0","query":"SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M0 }","tree":["S",["NP","Who"],["VP","edited",["NP","M0"]]],"split":null})";
  std::string path = temp_path("treecls_cfq.jsonl");
  write_text_file(path, good + "\n" + bad + "\n");

  CHECK_THROWS_AS(load_cfq(path, "", /*strict=*/true), AlignmentError);

  std::vector<RejectedLine> rejects;
  Corpus corpus = load_cfq(path, "", /*strict=*/false, &rejects);
  CHECK(corpus.examples.size() == 1);
  REQUIRE(rejects.size() == 1);
  CHECK(rejects[0].line == 2);
  CHECK(corpus.provenance == Provenance::kIngested);

  write_text_file(path, "");
  CHECK(load_cfq(path, "").examples.empty());
}

TEST_CASE("load_cfq with a separate trees file") {
  std::string data =
      R"({"id":0,"question":"Who directed M0","query":"SELECT DISTINCT ?x0 WHERE { ?x0 ns:film.director.film M0 }","tree":null,"split":"train"})";
  std::string trees = R"(["S",["NP","Who"],["VP","directed",["NP","M0"]]])";
  std::string dpath = temp_path("treecls_cfq_data.jsonl");
  std::string tpath = temp_path("treecls_cfq_trees.jsonl");
  write_text_file(dpath, data + "\n");
  write_text_file(tpath, trees + "\n");
  Corpus corpus = load_cfq(dpath, tpath);
  REQUIRE(corpus.examples.size() == 1);
  CHECK(corpus.examples[0].split_tag == SplitTag::kTrain);
  CHECK(corpus.examples[0].question_tree.leaf_count() == 3);
}

TEST_CASE("vocabulary is stable, sorted, specials first") {
  Corpus corpus = generate_synthetic(GrammarConfig{}, 7, 50);
  auto vocab = build_vocabulary(corpus);
  REQUIRE(vocab.size() > 5);
  CHECK(vocab[0] == kClsToken);
  CHECK(vocab[1] == kSepToken);
  CHECK(vocab[2] == kUnkToken);
  CHECK(vocab[3] == kBosToken);
  CHECK(vocab[4] == kEosToken);
  for (size_t i = 6; i < vocab.size(); ++i) CHECK(vocab[i - 1] < vocab[i]);

  std::string path = temp_path("treecls_vocab.txt");
  write_vocabulary(vocab, path);
  CHECK(read_vocabulary(path) == vocab);
}
