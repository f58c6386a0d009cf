#include "treecls/sparql.h"

#include <algorithm>
#include <cctype>
#include <set>

#include "treecls/error.h"
#include "treecls/util.h"

namespace treecls {

namespace {

bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == ':';
}

bool all_digits(const std::string& s, size_t from) {
  if (from >= s.size()) return false;
  for (size_t i = from; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

bool is_variable(const std::string& t) {
  return t.size() >= 3 && t[0] == '?' && t[1] == 'x' && all_digits(t, 2);
}

bool is_entity(const std::string& t) {
  return t.size() >= 2 && t[0] == 'M' && all_digits(t, 1);
}

bool is_dotted_identifier(const std::string& t) {
  bool has_dot = false;
  for (size_t i = 0; i < t.size(); ++i) {
    char c = t[i];
    if (c == '.') {
      if (i == 0 || i + 1 == t.size()) return false;
      if (!is_ident_char(t[i - 1]) || !is_ident_char(t[i + 1])) return false;
      has_dot = true;
    } else if (!is_ident_char(c)) {
      return false;
    }
  }
  return has_dot;
}

const std::set<std::string>& keywords() {
  static const std::set<std::string> kw = {"SELECT", "WHERE",    "FILTER",
                                           "count",  "DISTINCT", "a",
                                           "!="};
  return kw;
}

TokenKind classify(const std::string& t) {
  if (t == "*") return TokenKind::kStar;
  if (t == "{" || t == "}" || t == "(" || t == ")" || t == "." || t == ",")
    return TokenKind::kPunct;
  if (keywords().count(t)) return TokenKind::kKeyword;
  if (is_variable(t)) return TokenKind::kVariable;
  if (is_entity(t)) return TokenKind::kEntity;
  if (is_dotted_identifier(t)) return TokenKind::kRelation;
  return TokenKind::kLiteral;
}

}  // namespace

std::string token_kind_name(TokenKind kind) {
  switch (kind) {
    case TokenKind::kKeyword: return "keyword";
    case TokenKind::kVariable: return "variable";
    case TokenKind::kEntity: return "entity";
    case TokenKind::kRelation: return "relation";
    case TokenKind::kPunct: return "punct";
    case TokenKind::kStar: return "star";
    case TokenKind::kLiteral: return "literal";
  }
  return "literal";
}

QueryTokens tokenize_query(const std::string& text) {
  QueryTokens out;
  auto emit = [&out](const std::string& t) {
    if (t.empty()) return;
    out.tokens.push_back(t);
    out.kinds.push_back(classify(t));
  };
  for (const auto& chunk : split_whitespace(text)) {
    std::string cur;
    for (size_t i = 0; i < chunk.size(); ++i) {
      char c = chunk[i];
      bool split_here = (c == '{' || c == '}' || c == '(' || c == ')' || c == ',');
      if (c == '.') {
        bool inside_identifier = i > 0 && i + 1 < chunk.size() &&
                                 is_ident_char(chunk[i - 1]) &&
                                 is_ident_char(chunk[i + 1]);
        split_here = !inside_identifier;
      }
      if (split_here) {
        emit(cur);
        cur.clear();
        emit(std::string(1, c));
      } else {
        cur.push_back(c);
      }
    }
    emit(cur);
  }
  return out;
}

namespace {

class Parser {
 public:
  explicit Parser(const QueryTokens& tokens) : toks_(tokens) {}

  QueryAst parse() {
    QueryAst ast;
    ast.select_pos = expect("SELECT");
    if (peek() == "count") {
      ast.count_star = true;
      ast.count_pos = advance();
      ast.count_lparen_pos = expect("(");
      if (peek() != "*") fail("'*'");
      ast.star_pos = advance();
      ast.count_rparen_pos = expect(")");
    } else if (peek() == "DISTINCT") {
      ast.distinct_pos = advance();
      while (pos_ < toks_.size() && kind() == TokenKind::kVariable) {
        ast.distinct_vars.push_back(term());
      }
      if (ast.distinct_vars.empty()) fail("variable after DISTINCT");
    } else {
      fail("'count' or 'DISTINCT'");
    }
    ast.where_pos = expect("WHERE");
    ast.lbrace_pos = expect("{");
    if (peek() == "}") fail("a triple or FILTER clause");
    clause(ast);
    while (peek() == ".") {
      ast.dot_pos.push_back(advance());
      clause(ast);
    }
    ast.rbrace_pos = expect("}");
    if (pos_ != toks_.size()) fail("end of query");
    validate(ast);
    return ast;
  }

 private:
  void clause(QueryAst& ast) {
    if (peek() == "FILTER") {
      FilterClause f;
      f.filter_pos = advance();
      f.lparen_pos = expect("(");
      f.lhs = operand();
      if (peek() != "!=") fail("'!='");
      f.op_pos = advance();
      f.rhs = operand();
      f.rparen_pos = expect(")");
      ast.filters.push_back(f);
      return;
    }
    TriplePattern t;
    t.subject = node_term();
    t.predicate = predicate_term();
    // Type clauses (`a`) take a dotted type name as object; everything else
    // takes a variable or entity.
    t.object = t.predicate.text == "a" ? type_term() : node_term();
    ast.triples.push_back(t);
  }

  Term node_term() {
    if (pos_ >= toks_.size() ||
        (kind() != TokenKind::kVariable && kind() != TokenKind::kEntity)) {
      fail("a variable or entity");
    }
    return term();
  }

  Term type_term() {
    if (pos_ >= toks_.size() ||
        (kind() != TokenKind::kVariable && kind() != TokenKind::kEntity &&
         kind() != TokenKind::kRelation)) {
      fail("a variable, entity, or type name");
    }
    return term();
  }

  Term predicate_term() {
    if (pos_ >= toks_.size() ||
        (kind() != TokenKind::kRelation && peek() != "a")) {
      fail("a relation or 'a'");
    }
    return term();
  }

  Term operand() {
    if (pos_ >= toks_.size() ||
        (kind() != TokenKind::kVariable && kind() != TokenKind::kEntity)) {
      fail("a variable or entity");
    }
    return term();
  }

  void validate(const QueryAst& ast) {
    for (const auto& f : ast.filters) {
      for (const Term* t : {&f.lhs, &f.rhs}) {
        if (t->kind != TokenKind::kVariable) continue;
        bool bound = false;
        for (const auto& tr : ast.triples) {
          if (tr.subject.text == t->text || tr.object.text == t->text) {
            bound = true;
            break;
          }
        }
        if (!bound) throw UnboundFilterVariable(t->text);
      }
    }
  }

  const std::string& peek() const {
    static const std::string kEnd = "<end>";
    return pos_ < toks_.size() ? toks_.tokens[pos_] : kEnd;
  }
  TokenKind kind() const { return toks_.kinds[pos_]; }

  int advance() { return static_cast<int>(pos_++); }

  Term term() {
    Term t{toks_.tokens[pos_], toks_.kinds[pos_], static_cast<int>(pos_)};
    ++pos_;
    return t;
  }

  int expect(const std::string& want) {
    if (peek() != want) fail("'" + want + "'");
    return advance();
  }

  [[noreturn]] void fail(const std::string& expected) const {
    throw SyntaxError(static_cast<int>(pos_), expected, peek());
  }

  const QueryTokens& toks_;
  size_t pos_ = 0;
};

}  // namespace

QueryAst parse_query(const QueryTokens& tokens) { return Parser(tokens).parse(); }

std::string canonicalize(const QueryAst& ast) {
  std::vector<std::string> parts{"SELECT"};
  if (ast.count_star) {
    parts.insert(parts.end(), {"count", "(", "*", ")"});
  } else {
    parts.push_back("DISTINCT");
    for (const auto& v : ast.distinct_vars) parts.push_back(v.text);
  }
  parts.insert(parts.end(), {"WHERE", "{"});
  bool first = true;
  for (const auto& t : ast.triples) {
    if (!first) parts.push_back(".");
    first = false;
    parts.insert(parts.end(), {t.subject.text, t.predicate.text, t.object.text});
  }
  for (const auto& f : ast.filters) {
    if (!first) parts.push_back(".");
    first = false;
    parts.insert(parts.end(), {"FILTER", "(", f.lhs.text, "!=", f.rhs.text, ")"});
  }
  parts.push_back("}");
  return join_tokens(parts);
}

std::string canonical_query(const std::string& text) {
  return canonicalize(parse_query(tokenize_query(text)));
}

int DependencyTree::root() const {
  for (size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == static_cast<int>(i)) return static_cast<int>(i);
  }
  return -1;
}

bool DependencyTree::well_formed() const {
  int n = static_cast<int>(heads.size());
  int roots = 0;
  for (int i = 0; i < n; ++i) {
    if (heads[i] < 0 || heads[i] >= n) return false;
    if (heads[i] == i) ++roots;
  }
  if (roots != 1) return false;
  // Every node must reach the root without revisiting.
  for (int i = 0; i < n; ++i) {
    int cur = i;
    for (int step = 0; heads[cur] != cur; ++step) {
      if (step > n) return false;  // cycle
      cur = heads[cur];
    }
  }
  return true;
}

DependencyTree to_dependency_tree(const QueryAst& ast, const QueryTokens& tokens) {
  DependencyTree tree;
  tree.heads.assign(tokens.size(), -1);
  auto set_head = [&tree](int child, int head) {
    if (child >= 0) tree.heads[child] = head;
  };

  set_head(ast.select_pos, ast.select_pos);  // root
  set_head(ast.where_pos, ast.select_pos);
  set_head(ast.count_pos, ast.select_pos);
  set_head(ast.count_lparen_pos, ast.select_pos);
  set_head(ast.star_pos, ast.select_pos);
  set_head(ast.count_rparen_pos, ast.select_pos);
  set_head(ast.distinct_pos, ast.select_pos);
  for (const auto& v : ast.distinct_vars) set_head(v.pos, ast.select_pos);

  set_head(ast.lbrace_pos, ast.where_pos);
  set_head(ast.rbrace_pos, ast.where_pos);
  for (int dot : ast.dot_pos) set_head(dot, ast.where_pos);

  for (const auto& t : ast.triples) {
    set_head(t.predicate.pos, ast.where_pos);
    set_head(t.subject.pos, t.predicate.pos);
    set_head(t.object.pos, t.predicate.pos);
  }
  for (const auto& f : ast.filters) {
    set_head(f.filter_pos, ast.where_pos);
    set_head(f.lparen_pos, f.filter_pos);
    set_head(f.op_pos, f.filter_pos);
    set_head(f.rparen_pos, f.filter_pos);
    set_head(f.lhs.pos, f.filter_pos);
    set_head(f.rhs.pos, f.filter_pos);
  }
  return tree;
}

}  // namespace treecls
