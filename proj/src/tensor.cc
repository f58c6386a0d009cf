#include "treecls/tensor.h"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "treecls/error.h"

namespace treecls {

Tensor Tensor::zeros(const std::vector<int>& shape, Precision p) {
  Tensor t;
  t.shape = shape;
  t.precision = p;
  int64_t n = 1;
  for (int d : shape) n *= d;
  t.data.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::scalar(double v, Precision p) {
  Tensor t = zeros({1}, p);
  t.data[0] = v;
  t.round_to_precision();
  return t;
}

Tensor Tensor::from(const std::vector<double>& v, Precision p) {
  Tensor t;
  t.shape = {static_cast<int>(v.size())};
  t.data = v;
  t.precision = p;
  t.round_to_precision();
  return t;
}

Tensor Tensor::from2d(int rows, int cols, const std::vector<double>& v,
                      Precision p) {
  if (static_cast<int64_t>(v.size()) != static_cast<int64_t>(rows) * cols) {
    throw ShapeError("from2d: " + std::to_string(v.size()) + " values for " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  Tensor t;
  t.shape = {rows, cols};
  t.data = v;
  t.precision = p;
  t.round_to_precision();
  return t;
}

int64_t Tensor::numel() const {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

void Tensor::round_to_precision() {
  if (precision == Precision::kSingle) {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)) {
  gradient = Tensor::zeros(value.shape, value.precision);
}

void Parameter::zero_grad() {
  std::fill(gradient.data.begin(), gradient.data.end(), 0.0);
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

Precision combine(Precision a, Precision b) {
  return (a == Precision::kSingle || b == Precision::kSingle)
             ? Precision::kSingle
             : Precision::kDouble;
}

}  // namespace

Var Tape::leaf(Tensor value) {
  return make(std::move(value), {}, nullptr);
}

Var Tape::param(Parameter& p) {
  Var v = make(p.value, {}, nullptr);
  nodes_[v].bound = &p;
  return v;
}

Var Tape::make(Tensor value, std::vector<Var> inputs,
               std::function<void(Tape&, Var)> backward_fn) {
  value.round_to_precision();
#ifndef NDEBUG
  for (double d : value.data) {
    if (std::isnan(d)) throw Error("NaN produced by a forward op");
  }
#endif
  Node node;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(node));
  return static_cast<Var>(nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (consumed_) throw Error("tape already consumed by backward");
  if (nodes_[loss].value.numel() != 1) {
    throw RankError("backward requires a scalar loss, got shape " +
                    nodes_[loss].value.shape_str());
  }
  consumed_ = true;

  std::vector<uint8_t> reachable(nodes_.size(), 0);
  std::vector<Var> stack{loss};
  reachable[loss] = 1;
  while (!stack.empty()) {
    Var v = stack.back();
    stack.pop_back();
    for (Var in : nodes_[v].inputs) {
      if (!reachable[in]) {
        reachable[in] = 1;
        stack.push_back(in);
      }
    }
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (reachable[i]) {
      nodes_[i].grad = Tensor::zeros(nodes_[i].value.shape,
                                     nodes_[i].value.precision);
    }
  }
  nodes_[loss].grad.data[0] = 1.0;
  for (Var v = loss; v >= 0; --v) {
    if (!reachable[v]) continue;
    if (nodes_[v].backward_fn) nodes_[v].backward_fn(*this, v);
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!reachable[i] || nodes_[i].bound == nullptr) continue;
    auto& dst = nodes_[i].bound->gradient.data;
    const auto& src = nodes_[i].grad.data;
    for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

// ---- elementwise and linear algebra ---------------------------------------

Var add(Tape& t, Var a, Var b) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  bool broadcast = ta.rank() == 2 && tb.rank() == 1 && ta.cols() == tb.rows();
  require(broadcast || ta.shape == tb.shape,
          "add: " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  out.precision = combine(ta.precision, tb.precision);
  if (broadcast) {
    int n = ta.rows(), d = ta.cols();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) out.at(i, j) += tb.at(j);
    }
  } else {
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  }
  return t.make(std::move(out), {a, b}, [a, b, broadcast](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i];
    Tensor& gb = tp.grad(b);
    if (broadcast) {
      int n = g.rows(), d = g.cols();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) gb.at(j) += g.at(i, j);
      }
    } else {
      for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  require(ta.shape == tb.shape,
          "mul: " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  out.precision = combine(ta.precision, tb.precision);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(a);
    const Tensor& vb = tp.val(b);
    auto& ga = tp.grad(a).data;
    auto& gb = tp.grad(b).data;
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga[i] += g.data[i] * vb.data[i];
      gb[i] += g.data[i] * va.data[i];
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  Tensor out = t.val(a);
  for (double& v : out.data) v *= c;
  return t.make(std::move(out), {a}, [a, c](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += c * g.data[i];
  });
}

namespace {

// c += a.b with c [n,m], a [n,k], b [k,m]; all row-major.
void matmul_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a.b^T with c [n,m], a [n,k], b [m,k].
void matmul_nt_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// c += a^T.b with c [k,m], a [n,k], b [n,m].
void matmul_tn_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      double* crow = c + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.rows(),
          "matmul: " + ta.shape_str() + " x " + tb.shape_str());
  int n = ta.rows(), k = ta.cols(), m = tb.cols();
  Tensor out = Tensor::zeros({n, m}, combine(ta.precision, tb.precision));
  matmul_acc(ta.data.data(), tb.data.data(), out.data.data(), n, k, m);
  return t.make(std::move(out), {a, b}, [a, b, n, k, m](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    // da += g.b^T ; db += a^T.g
    matmul_nt_acc(g.data.data(), tp.val(b).data.data(),
                  tp.grad(a).data.data(), n, m, k);
    matmul_tn_acc(tp.val(a).data.data(), g.data.data(),
                  tp.grad(b).data.data(), n, k, m);
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.cols(),
          "matmul_nt: " + ta.shape_str() + " x " + tb.shape_str() + "^T");
  int n = ta.rows(), k = ta.cols(), m = tb.rows();
  Tensor out = Tensor::zeros({n, m}, combine(ta.precision, tb.precision));
  matmul_nt_acc(ta.data.data(), tb.data.data(), out.data.data(), n, k, m);
  return t.make(std::move(out), {a, b}, [a, b, n, k, m](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    // da += g.b ; db += g^T.a
    matmul_acc(g.data.data(), tp.val(b).data.data(), tp.grad(a).data.data(),
               n, m, k);
    matmul_tn_acc(g.data.data(), tp.val(a).data.data(),
                  tp.grad(b).data.data(), n, m, k);
  });
}

Var concat(Tape& t, const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), "concat: no parts");
  int rank = t.val(parts[0]).rank();
  require((rank == 1 && axis == 0) || (rank == 2 && (axis == 0 || axis == 1)),
          "concat: unsupported rank/axis");
  Precision prec = Precision::kDouble;
  for (Var p : parts) prec = combine(prec, t.val(p).precision);

  Tensor out;
  if (rank == 1) {
    int total = 0;
    for (Var p : parts) {
      require(t.val(p).rank() == 1, "concat: mixed ranks");
      total += t.val(p).rows();
    }
    out = Tensor::zeros({total}, prec);
    int off = 0;
    for (Var p : parts) {
      const Tensor& v = t.val(p);
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
      off += v.rows();
    }
  } else if (axis == 1) {
    int n = t.val(parts[0]).rows();
    int total = 0;
    for (Var p : parts) {
      require(t.val(p).rank() == 2 && t.val(p).rows() == n,
              "concat axis 1: row mismatch");
      total += t.val(p).cols();
    }
    out = Tensor::zeros({n, total}, prec);
    int off = 0;
    for (Var p : parts) {
      const Tensor& v = t.val(p);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
      }
      off += v.cols();
    }
  } else {
    int d = t.val(parts[0]).cols();
    int total = 0;
    for (Var p : parts) {
      require(t.val(p).rank() == 2 && t.val(p).cols() == d,
              "concat axis 0: column mismatch");
      total += t.val(p).rows();
    }
    out = Tensor::zeros({total, d}, prec);
    int off = 0;
    for (Var p : parts) {
      const Tensor& v = t.val(p);
      std::copy(v.data.begin(), v.data.end(),
                out.data.begin() + static_cast<size_t>(off) * d);
      off += v.rows();
    }
  }
  std::vector<Var> inputs = parts;
  return t.make(std::move(out), inputs, [parts, axis, rank](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    if (rank == 1 || axis == 0) {
      size_t off = 0;
      for (Var p : parts) {
        auto& gp = tp.grad(p).data;
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += g.data[off + i];
        off += gp.size();
      }
    } else {
      int n = g.rows();
      int off = 0;
      for (Var p : parts) {
        Tensor& gp = tp.grad(p);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < gp.cols(); ++j) gp.at(i, j) += g.at(i, off + j);
        }
        off += gp.cols();
      }
    }
  });
}

Var slice(Tape& t, Var a, int r0, int r1, int c0, int c1) {
  const Tensor& ta = t.val(a);
  require(ta.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= ta.rows() && 0 <= c0 &&
              c0 < c1 && c1 <= ta.cols(),
          "slice: bad block for " + ta.shape_str());
  Tensor out = Tensor::zeros({r1 - r0, c1 - c0}, ta.precision);
  for (int i = r0; i < r1; ++i) {
    for (int j = c0; j < c1; ++j) out.at(i - r0, j - c0) = ta.at(i, j);
  }
  return t.make(std::move(out), {a}, [a, r0, r1, c0, c1](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(a);
    for (int i = r0; i < r1; ++i) {
      for (int j = c0; j < c1; ++j) ga.at(i, j) += g.at(i - r0, j - c0);
    }
  });
}

Var slice1(Tape& t, Var a, int i0, int i1) {
  const Tensor& ta = t.val(a);
  require(ta.rank() == 1 && 0 <= i0 && i0 < i1 && i1 <= ta.rows(),
          "slice1: bad range for " + ta.shape_str());
  Tensor out = Tensor::zeros({i1 - i0}, ta.precision);
  for (int i = i0; i < i1; ++i) out.at(i - i0) = ta.at(i);
  return t.make(std::move(out), {a}, [a, i0, i1](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(a);
    for (int i = i0; i < i1; ++i) ga.at(i) += g.at(i - i0);
  });
}

Var embedding_gather(Tape& t, Var table, const std::vector<int>& ids) {
  const Tensor& tt = t.val(table);
  require(tt.rank() == 2, "embedding_gather: table must be rank 2");
  int d = tt.cols();
  for (int id : ids) {
    require(0 <= id && id < tt.rows(), "embedding_gather: id out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d}, tt.precision);
  for (size_t i = 0; i < ids.size(); ++i) {
    for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = tt.at(ids[i], j);
  }
  return t.make(std::move(out), {table}, [table, ids, d](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    Tensor& gt = tp.grad(table);
    for (size_t i = 0; i < ids.size(); ++i) {
      for (int j = 0; j < d; ++j) gt.at(ids[i], j) += g.at(static_cast<int>(i), j);
    }
  });
}

Var relu(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.make(std::move(out), {a}, [a](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(a);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) {
      if (va.data[i] > 0.0) ga[i] += g.data[i];
    }
  });
}

Var tanh_op(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& v : out.data) v = std::tanh(v);
  return t.make(std::move(out), {a}, [a](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.val(self);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) {
      ga[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    }
  });
}

Var sigmoid_op(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return t.make(std::move(out), {a}, [a](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.val(self);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) {
      ga[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    }
  });
}

Var dropout(Tape& t, Var a, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return a;
  require(rate < 1.0, "dropout rate must be < 1");
  const Tensor& ta = t.val(a);
  std::vector<uint8_t> keep(ta.data.size());
  double inv = 1.0 / (1.0 - rate);
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) {
    keep[i] = rng.real() >= rate ? 1 : 0;
    out.data[i] = keep[i] ? out.data[i] * inv : 0.0;
  }
  return t.make(std::move(out), {a},
                [a, keep = std::move(keep), inv](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    auto& ga = tp.grad(a).data;
    for (size_t i = 0; i < ga.size(); ++i) {
      if (keep[i]) ga[i] += g.data[i] * inv;
    }
  });
}

Var reduce_sum(Tape& t, Var a) {
  const Tensor& ta = t.val(a);
  double s = 0.0;
  for (double v : ta.data) s += v;
  return t.make(Tensor::scalar(s, ta.precision), {a}, [a](Tape& tp, Var self) {
    double g = tp.grad(self).data[0];
    for (double& v : tp.grad(a).data) v += g;
  });
}

Var reduce_mean(Tape& t, Var a) {
  const Tensor& ta = t.val(a);
  double s = 0.0;
  for (double v : ta.data) s += v;
  double n = static_cast<double>(ta.data.size());
  return t.make(Tensor::scalar(s / n, ta.precision), {a},
                [a, n](Tape& tp, Var self) {
    double g = tp.grad(self).data[0] / n;
    for (double& v : tp.grad(a).data) v += g;
  });
}

Var masked_softmax(Tape& t, Var logits, const std::vector<uint8_t>& mask) {
  const Tensor& ta = t.val(logits);
  int n = ta.rank() == 2 ? ta.rows() : 1;
  int m = ta.rank() == 2 ? ta.cols() : ta.rows();
  require(mask.empty() || mask.size() == ta.data.size(),
          "masked_softmax: mask size " + std::to_string(mask.size()) +
              " vs logits " + ta.shape_str());
  Tensor out = ta;
  for (int i = 0; i < n; ++i) {
    double* row = out.data.data() + static_cast<size_t>(i) * m;
    const uint8_t* mrow =
        mask.empty() ? nullptr : mask.data() + static_cast<size_t>(i) * m;
    bool any = mask.empty();
    for (int j = 0; !any && j < m; ++j) any = mrow[j] != 0;
    if (!any) throw Error("masked_softmax: fully masked row " + std::to_string(i));
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) {
      double z = row[j] + ((mrow && !mrow[j]) ? kMaskPenalty : 0.0);
      row[j] = z;
      mx = std::max(mx, z);
    }
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (int j = 0; j < m; ++j) row[j] /= denom;
  }
  return t.make(std::move(out), {logits}, [logits, n, m](Tape& tp, Var self) {
    const Tensor& y = tp.val(self);
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(logits);
    for (int i = 0; i < n; ++i) {
      const double* yrow = y.data.data() + static_cast<size_t>(i) * m;
      const double* grow = g.data.data() + static_cast<size_t>(i) * m;
      double* xrow = gx.data.data() + static_cast<size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += yrow[j] * grow[j];
      for (int j = 0; j < m; ++j) xrow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double epsilon) {
  const Tensor& tx = t.val(x);
  int n = tx.rank() == 2 ? tx.rows() : 1;
  int d = tx.rank() == 2 ? tx.cols() : tx.rows();
  require(t.val(gamma).rank() == 1 && t.val(gamma).rows() == d &&
              t.val(beta).rank() == 1 && t.val(beta).rows() == d,
          "layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  Tensor out = tx;
  std::vector<double> xhat(tx.data.size());
  std::vector<double> inv_sigma(n);
  const Tensor& tg = t.val(gamma);
  const Tensor& tb = t.val(beta);
  for (int i = 0; i < n; ++i) {
    const double* row = tx.data.data() + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double inv = 1.0 / std::sqrt(var + epsilon);
    inv_sigma[i] = inv;
    for (int j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * inv;
      xhat[static_cast<size_t>(i) * d + j] = xh;
      out.data[static_cast<size_t>(i) * d + j] = xh * tg.at(j) + tb.at(j);
    }
  }
  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, n, d, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)](Tape& tp, Var self) {
    const Tensor& g = tp.grad(self);
    const Tensor& tg = tp.val(gamma);
    Tensor& gx = tp.grad(x);
    Tensor& ggamma = tp.grad(gamma);
    Tensor& gbeta = tp.grad(beta);
    for (int i = 0; i < n; ++i) {
      const double* grow = g.data.data() + static_cast<size_t>(i) * d;
      const double* xh = xhat.data() + static_cast<size_t>(i) * d;
      double* gxrow = gx.data.data() + static_cast<size_t>(i) * d;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (int j = 0; j < d; ++j) {
        double dxh = grow[j] * tg.at(j);
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xh[j];
        ggamma.at(j) += grow[j] * xh[j];
        gbeta.at(j) += grow[j];
      }
      mean_dxhat /= d;
      mean_dxhat_xhat /= d;
      for (int j = 0; j < d; ++j) {
        double dxh = grow[j] * tg.at(j);
        gxrow[j] += inv_sigma[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
      }
    }
  });
}

Var relation_gather(Tape& t, Var table_proj, const std::vector<int>& labels) {
  const Tensor& tp_ = t.val(table_proj);
  require(tp_.rank() == 2, "relation_gather: projection must be rank 2");
  int n = tp_.rows();
  int vocab = tp_.cols();
  require(labels.size() == static_cast<size_t>(n) * n,
          "relation_gather: labels must be n*n");
  for (int l : labels) {
    require(0 <= l && l < vocab, "relation_gather: label out of range");
  }
  Tensor out = Tensor::zeros({n, n}, tp_.precision);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out.at(i, j) = tp_.at(i, labels[static_cast<size_t>(i) * n + j]);
    }
  }
  return t.make(std::move(out), {table_proj},
                [table_proj, labels, n](Tape& tg, Var self) {
    const Tensor& g = tg.grad(self);
    Tensor& gp = tg.grad(table_proj);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        gp.at(i, labels[static_cast<size_t>(i) * n + j]) += g.at(i, j);
      }
    }
  });
}

Var relation_context(Tape& t, Var probs, Var table, const std::vector<int>& labels) {
  const Tensor& tpb = t.val(probs);
  const Tensor& ttb = t.val(table);
  require(tpb.rank() == 2 && tpb.rows() == tpb.cols(),
          "relation_context: probs must be square");
  int n = tpb.rows();
  int d = ttb.cols();
  require(labels.size() == static_cast<size_t>(n) * n,
          "relation_context: labels must be n*n");
  Tensor out = Tensor::zeros({n, d}, combine(tpb.precision, ttb.precision));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double p = tpb.at(i, j);
      if (p == 0.0) continue;
      int lab = labels[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < d; ++k) out.at(i, k) += p * ttb.at(lab, k);
    }
  }
  return t.make(std::move(out), {probs, table},
                [probs, table, labels, n, d](Tape& tg, Var self) {
    const Tensor& g = tg.grad(self);
    const Tensor& vp = tg.val(probs);
    const Tensor& vt = tg.val(table);
    Tensor& gp = tg.grad(probs);
    Tensor& gt = tg.grad(table);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        int lab = labels[static_cast<size_t>(i) * n + j];
        double p = vp.at(i, j);
        double acc = 0.0;
        for (int k = 0; k < d; ++k) {
          acc += g.at(i, k) * vt.at(lab, k);
          gt.at(lab, k) += p * g.at(i, k);
        }
        gp.at(i, j) += acc;
      }
    }
  });
}

Var cross_entropy(Tape& t, Var logits, int target) {
  const Tensor& ta = t.val(logits);
  int c = static_cast<int>(ta.data.size());
  require(ta.rank() == 1 || ta.rows() == 1, "cross_entropy: logits must be a vector");
  require(0 <= target && target < c, "cross_entropy: target out of range");
  double mx = *std::max_element(ta.data.begin(), ta.data.end());
  double denom = 0.0;
  for (double v : ta.data) denom += std::exp(v - mx);
  double loss = std::log(denom) + mx - ta.data[target];
  return t.make(Tensor::scalar(loss, ta.precision), {logits},
                [logits, target, mx, denom, c](Tape& tp, Var self) {
    double g = tp.grad(self).data[0];
    const Tensor& x = tp.val(logits);
    auto& gx = tp.grad(logits).data;
    for (int i = 0; i < c; ++i) {
      double p = std::exp(x.data[i] - mx) / denom;
      gx[i] += g * (p - (i == target ? 1.0 : 0.0));
    }
  });
}

double grad_check(const std::function<Var(Tape&)>& build,
                  const std::vector<Parameter*>& params, double epsilon) {
  for (Parameter* p : params) p->zero_grad();
  Tape tape;
  Var loss = build(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Parameter* p : params) analytic.push_back(p->gradient.data);

  auto eval = [&build]() {
    Tape t;
    Var l = build(t);
    return t.val(l).data[0];
  };

  auto rel_err = [](double numeric, double a) {
    return std::abs(numeric - a) /
           std::max({std::abs(numeric), std::abs(a), 1e-8});
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      double saved = p->value.data[i];
      auto central = [&](double eps) {
        p->value.data[i] = saved + eps;
        double up = eval();
        p->value.data[i] = saved - eps;
        double down = eval();
        p->value.data[i] = saved;
        return (up - down) / (2.0 * eps);
      };
      double a = analytic[pi][i];
      // Probe scales cover the failure modes of the difference quotient:
      // the small step is exact where curvature is sharp but noisy on
      // near-zero gradients and at relu crossings, the large steps the
      // reverse. The analytic value is accepted if any scale confirms it;
      // a wrong gradient matches at none.
      double err = rel_err(central(epsilon), a);
      for (double factor : {20.0, 100.0}) {
        if (err <= 1e-6) break;
        err = std::min(err, rel_err(central(epsilon * factor), a));
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---- checkpoints ----------------------------------------------------------

static constexpr char kCheckpointMagic[] = "TRECLS-CKPT-v1";

void save_checkpoint(const std::vector<const Parameter*>& params,
                     const std::string& path) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (const Parameter* p : params) {
    nlohmann::ordered_json pj;
    pj["name"] = p->name;
    pj["shape"] = p->value.shape;
    pj["dtype"] = p->value.precision == Precision::kDouble ? "f64" : "f32";
    plist.push_back(pj);
  }
  header["params"] = plist;
  std::string hdr = header.dump();

  // Values are written in host byte order; this toolkit targets
  // little-endian hosts.
  std::string out;
  out += kCheckpointMagic;
  out += "\n";
  out += hdr;
  out += "\n";
  for (const Parameter* p : params) {
    if (p->value.precision == Precision::kDouble) {
      size_t bytes = p->value.data.size() * sizeof(double);
      size_t off = out.size();
      out.resize(off + bytes);
      std::memcpy(out.data() + off, p->value.data.data(), bytes);
    } else {
      std::vector<float> vals(p->value.data.begin(), p->value.data.end());
      size_t bytes = vals.size() * sizeof(float);
      size_t off = out.size();
      out.resize(off + bytes);
      std::memcpy(out.data() + off, vals.data(), bytes);
    }
  }
  write_text_file(path, out);
}

void load_checkpoint(const std::vector<Parameter*>& params,
                     const std::string& path) {
  std::string blob = read_text_file(path);
  size_t p1 = blob.find('\n');
  if (p1 == std::string::npos || blob.substr(0, p1) != kCheckpointMagic) {
    throw ParseError(1, "bad checkpoint magic in " + path);
  }
  size_t p2 = blob.find('\n', p1 + 1);
  if (p2 == std::string::npos) throw ParseError(2, "missing checkpoint header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(blob.substr(p1 + 1, p2 - p1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(2, e.what());
  }

  size_t off = p2 + 1;
  for (const auto& pj : header.at("params")) {
    std::string name = pj.at("name").get<std::string>();
    std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
    std::string dtype = pj.at("dtype").get<std::string>();
    Parameter* target = nullptr;
    for (Parameter* p : params) {
      if (p->name == name) {
        target = p;
        break;
      }
    }
    int64_t numel = 1;
    for (int d : shape) numel *= d;
    size_t bytes = static_cast<size_t>(numel) *
                   (dtype == "f64" ? sizeof(double) : sizeof(float));
    if (off + bytes > blob.size()) {
      throw ParseError(0, "checkpoint truncated at parameter " + name);
    }
    if (target != nullptr) {
      if (target->value.shape != shape) {
        throw ShapeError("checkpoint parameter " + name + " has shape " +
                         Tensor::zeros(shape).shape_str() + ", expected " +
                         target->value.shape_str());
      }
      if (dtype == "f64") {
        std::memcpy(target->value.data.data(), blob.data() + off, bytes);
      } else {
        std::vector<float> vals(numel);
        std::memcpy(vals.data(), blob.data() + off, bytes);
        for (int64_t i = 0; i < numel; ++i) target->value.data[i] = vals[i];
      }
    }
    off += bytes;
  }
}

}  // namespace treecls
