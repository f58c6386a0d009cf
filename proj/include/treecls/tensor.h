#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "treecls/util.h"

namespace treecls {

enum class Precision { kSingle, kDouble };

// Dense row-major tensor, rank 1 or 2. Storage is double; single-precision
// tensors round every op result through float so the values match a float
// pipeline bit-for-bit.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  Precision precision = Precision::kDouble;

  static Tensor zeros(const std::vector<int>& shape,
                      Precision p = Precision::kDouble);
  static Tensor scalar(double v, Precision p = Precision::kDouble);
  static Tensor from(const std::vector<double>& v,
                     Precision p = Precision::kDouble);
  static Tensor from2d(int rows, int cols, const std::vector<double>& v,
                       Precision p = Precision::kDouble);

  int64_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.size() > 1 ? shape[1] : 1; }

  double& at(int i) { return data[i]; }
  double at(int i) const { return data[i]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const {
    return data[static_cast<size_t>(i) * cols() + j];
  }

  void round_to_precision();
  std::string shape_str() const;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor gradient;

  Parameter(std::string n, Tensor v);
  void zero_grad();
};

using Var = int;

// Reverse-mode tape. Nodes are appended in forward order, which is a
// topological order; backward walks it once in reverse.
class Tape {
 public:
  Var leaf(Tensor value);
  Var param(Parameter& p);

  const Tensor& val(Var v) const { return nodes_[v].value; }
  Tensor& grad(Var v) { return nodes_[v].grad; }

  // Populates gradients for every parameter reachable from loss and marks
  // the tape consumed. Throws RankError when loss is not scalar.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

  // Internal: used by the op implementations.
  Var make(Tensor value, std::vector<Var> inputs,
           std::function<void(Tape&, Var)> backward_fn);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<Var> inputs;
    std::function<void(Tape&, Var)> backward_fn;
    Parameter* bound = nullptr;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- op set -------------------------------------------------------------
// All ops throw ShapeError (with both shapes) on incompatible inputs.

Var add(Tape& t, Var a, Var b);        // same shape, or b rank-1 row bias
Var mul(Tape& t, Var a, Var b);        // elementwise
Var scale(Tape& t, Var a, double c);
Var matmul(Tape& t, Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Tape& t, Var a, Var b);  // [n,k] x [m,k]^T -> [n,m]
Var concat(Tape& t, const std::vector<Var>& parts, int axis);
Var slice(Tape& t, Var a, int r0, int r1, int c0, int c1);  // rank-2 block
Var slice1(Tape& t, Var a, int i0, int i1);                 // rank-1 range
Var embedding_gather(Tape& t, Var table, const std::vector<int>& ids);
Var relu(Tape& t, Var a);
Var tanh_op(Tape& t, Var a);
Var sigmoid_op(Tape& t, Var a);
Var dropout(Tape& t, Var a, double rate, Rng& rng, bool training);
Var reduce_sum(Tape& t, Var a);
Var reduce_mean(Tape& t, Var a);

// Row softmax of logits + (-1e9 on masked entries). mask is row-major
// bools of the same shape; empty mask means all allowed. Asserts every row
// keeps at least one allowed entry.
inline constexpr double kMaskPenalty = -1e9;
Var masked_softmax(Tape& t, Var logits, const std::vector<uint8_t>& mask);

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double epsilon = 1e-6);

// out[i][j] = table_proj[i][labels[i*n+j]] where table_proj is [n, L].
Var relation_gather(Tape& t, Var table_proj, const std::vector<int>& labels);
// out[i] = sum_j probs[i][j] * table[labels[i*n+j]]; table is [L, d].
Var relation_context(Tape& t, Var probs, Var table, const std::vector<int>& labels);

// Scalar softmax cross-entropy of a rank-1 [C] (or [1,C]) logit vector.
Var cross_entropy(Tape& t, Var logits, int target);

// Max elementwise relative finite-difference error over the given
// parameters, denominator max(|analytic|, |numeric|, 1e-8). The build
// function must construct the loss afresh on each call.
double grad_check(const std::function<Var(Tape&)>& build,
                  const std::vector<Parameter*>& params, double epsilon = 1e-5);

// ---- checkpoints --------------------------------------------------------
// Flat binary: magic line, JSON header (names, shapes, dtypes), then values
// little-endian in header order. Doubles for double tensors, float32 for
// single ones.
void save_checkpoint(const std::vector<const Parameter*>& params,
                     const std::string& path);
// Loads by name into existing parameters; shapes must match.
void load_checkpoint(const std::vector<Parameter*>& params,
                     const std::string& path);

}  // namespace treecls
