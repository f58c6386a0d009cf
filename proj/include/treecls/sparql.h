#pragma once

#include <string>
#include <vector>

namespace treecls {

enum class TokenKind { kKeyword, kVariable, kEntity, kRelation, kPunct, kStar, kLiteral };

std::string token_kind_name(TokenKind kind);

struct QueryTokens {
  std::vector<std::string> tokens;
  std::vector<TokenKind> kinds;

  size_t size() const { return tokens.size(); }
  bool operator==(const QueryTokens&) const = default;
};

// A subject/predicate/object or filter operand, with the index of its token.
struct Term {
  std::string text;
  TokenKind kind = TokenKind::kLiteral;
  int pos = -1;

  bool operator==(const Term&) const = default;
};

struct TriplePattern {
  Term subject;
  Term predicate;
  Term object;
};

struct FilterClause {
  Term lhs;
  Term rhs;
  int filter_pos = -1;
  int lparen_pos = -1;
  int op_pos = -1;
  int rparen_pos = -1;
};

// Accepted fragment:
//   SELECT ( count ( * ) | DISTINCT var+ ) WHERE { clause ( . clause )* }
//   clause := subj pred obj | FILTER ( term != term )
struct QueryAst {
  bool count_star = false;
  std::vector<Term> distinct_vars;
  std::vector<TriplePattern> triples;
  std::vector<FilterClause> filters;

  // Token positions of the fixed syntax, used by the dependency parser.
  int select_pos = -1;
  int where_pos = -1;
  int lbrace_pos = -1;
  int rbrace_pos = -1;
  int count_pos = -1;
  int count_lparen_pos = -1;
  int star_pos = -1;
  int count_rparen_pos = -1;
  int distinct_pos = -1;
  std::vector<int> dot_pos;
};

// heads[i] is the token index of token i's head; the root points to itself.
struct DependencyTree {
  std::vector<int> heads;

  int root() const;
  bool well_formed() const;  // single root, connected, acyclic
};

// Splits on whitespace and on { } ( ) , as standalone tokens. A '.' splits
// only when it is not between two identifier characters, so dotted relation
// names like ns:film.director.film stay whole while "count(*)" and trailing
// clause dots come apart. Unknown tokens classify as literal; never throws.
QueryTokens tokenize_query(const std::string& text);

// Recursive-descent parse of the fragment above. Throws SyntaxError with the
// offending token position, or UnboundFilterVariable when a filter variable
// appears in no triple.
QueryAst parse_query(const QueryTokens& tokens);

// Single-space rendering, triples in original order then filters.
// canonicalize(parse(q)) is a fixed point of parse-then-canonicalize and is
// the cross-module query identity key.
std::string canonicalize(const QueryAst& ast);

// Convenience: tokenize + parse + canonicalize.
std::string canonical_query(const std::string& text);

// Head rules: SELECT is root; WHERE -> SELECT; select-form tokens -> SELECT;
// predicates -> WHERE; subjects/objects -> their predicate; FILTER -> WHERE
// with its parens, operands and operator -> FILTER; braces and clause dots
// -> WHERE.
DependencyTree to_dependency_tree(const QueryAst& ast, const QueryTokens& tokens);

}  // namespace treecls
