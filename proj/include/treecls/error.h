#pragma once

#include <stdexcept>
#include <string>

namespace treecls {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

struct EmptyInput : Error {
  EmptyInput() : Error("empty input text") {}
};

struct ParseError : Error {
  int line;
  ParseError(int line_no, const std::string& msg)
      : Error("parse error at line " + std::to_string(line_no) + ": " + msg),
        line(line_no) {}
};

struct AlignmentError : Error {
  int id;
  explicit AlignmentError(int example_id)
      : Error("tree leaves do not match question tokens for example " +
              std::to_string(example_id)),
        id(example_id) {}
};

struct CapacityError : Error {
  explicit CapacityError(const std::string& msg)
      : Error("capacity error: " + msg) {}
};

// Raised by the query parser on any deviation from the accepted grammar.
struct SyntaxError : Error {
  int position;       // token index the parser was looking at
  std::string expected;
  SyntaxError(int pos, const std::string& expected_set, const std::string& got)
      : Error("syntax error at token " + std::to_string(pos) + ": expected " +
              expected_set + ", got '" + got + "'"),
        position(pos),
        expected(expected_set) {}
};

struct UnboundFilterVariable : Error {
  explicit UnboundFilterVariable(const std::string& var)
      : Error("filter variable " + var + " does not appear in any triple") {}
};

struct DegenerateDistribution : Error {
  DegenerateDistribution() : Error("distribution has no positive weight") {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct RankError : Error {
  explicit RankError(const std::string& msg) : Error("rank error: " + msg) {}
};

struct UndefinedMetric : Error {
  explicit UndefinedMetric(const std::string& msg)
      : Error("undefined metric: " + msg) {}
};

struct ReportMismatch : Error {
  explicit ReportMismatch(const std::string& msg)
      : Error("report mismatch: " + msg) {}
};

struct NoEditPossible : Error {
  NoEditPossible() : Error("no applicable perturbation edit") {}
};

struct StaleInputError : Error {
  std::string stage_to_rerun;
  StaleInputError(const std::string& input, const std::string& stage)
      : Error("stale or missing input '" + input + "': rerun stage '" + stage +
              "'"),
        stage_to_rerun(stage) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg)
      : Error("config error: " + msg) {}
};

}  // namespace treecls
