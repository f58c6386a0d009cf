#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "treecls/error.h"
#include "treecls/tensor.h"
#include "treecls/util.h"

using namespace treecls;

namespace {

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = (2.0 * rng.real() - 1.0) * scale;
  return t;
}

}  // namespace

TEST_CASE("masked_softmax matches the spec examples") {
  Tape t;
  Var x = t.leaf(Tensor::from({5.0, 9.0}));
  Var y = masked_softmax(t, x, {1, 0});
  CHECK(t.val(y).data[0] == doctest::Approx(1.0));
  CHECK(t.val(y).data[1] == doctest::Approx(0.0));

  Tape t2;
  Var x2 = t2.leaf(Tensor::from({1.0, 1.0, 1.0}));
  Var y2 = masked_softmax(t2, x2, {});
  for (int i = 0; i < 3; ++i) {
    CHECK(t2.val(y2).data[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  Tape t3;
  Var x3 = t3.leaf(Tensor::from({0.0, 0.0}));
  CHECK_THROWS_AS(masked_softmax(t3, x3, {0, 0}), Error);
}

TEST_CASE("masked_softmax matches the direct-formula oracle on random masks") {
  Rng rng(123);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + static_cast<int>(rng.below(6));
    int m = 2 + static_cast<int>(rng.below(7));
    Tensor logits = random_tensor({n, m}, rng, 4.0);
    std::vector<uint8_t> mask(static_cast<size_t>(n) * m, 0);
    for (int i = 0; i < n; ++i) {
      int allowed = 0;
      for (int j = 0; j < m; ++j) {
        mask[static_cast<size_t>(i) * m + j] = rng.real() < 0.6 ? 1 : 0;
        allowed += mask[static_cast<size_t>(i) * m + j];
      }
      if (allowed == 0) mask[static_cast<size_t>(i) * m + rng.below(m)] = 1;
    }
    Tape t;
    Var y = masked_softmax(t, t.leaf(logits), mask);

    // Oracle: softmax(logits + kMaskPenalty * (1 - mask)) per row.
    for (int i = 0; i < n; ++i) {
      double denom = 0.0;
      std::vector<double> z(m);
      double mx = -1e300;
      for (int j = 0; j < m; ++j) {
        z[j] = logits.at(i, j) +
               (mask[static_cast<size_t>(i) * m + j] ? 0.0 : kMaskPenalty);
        mx = std::max(mx, z[j]);
      }
      for (int j = 0; j < m; ++j) denom += std::exp(z[j] - mx);
      double row_mass = 0.0, masked_mass = 0.0;
      for (int j = 0; j < m; ++j) {
        double expect = std::exp(z[j] - mx) / denom;
        CHECK(t.val(y).at(i, j) == doctest::Approx(expect).epsilon(1e-12));
        row_mass += t.val(y).at(i, j);
        if (!mask[static_cast<size_t>(i) * m + j]) masked_mass += t.val(y).at(i, j);
      }
      CHECK(row_mass == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(masked_mass < 1e-6);
    }
  }
}

TEST_CASE("layer_norm of a constant vector is zero before affine") {
  Tape t;
  Var x = t.leaf(Tensor::from({3.7, 3.7, 3.7, 3.7}));
  Var gamma = t.leaf(Tensor::from({1.0, 1.0, 1.0, 1.0}));
  Var beta = t.leaf(Tensor::from({0.0, 0.0, 0.0, 0.0}));
  Var y = layer_norm(t, x, gamma, beta);
  for (double v : t.val(y).data) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("backward on sum of squares gives the analytic gradient") {
  Parameter p("x", Tensor::from({1.0, 2.0}));
  Tape t;
  Var x = t.param(p);
  Var loss = reduce_sum(t, mul(t, x, x));
  t.backward(loss);
  CHECK(p.gradient.data[0] == doctest::Approx(2.0));
  CHECK(p.gradient.data[1] == doctest::Approx(4.0));

  // Tape is consumed.
  CHECK_THROWS_AS(t.backward(loss), Error);
}

TEST_CASE("backward requires a scalar loss") {
  Parameter p("x", Tensor::from({1.0, 2.0}));
  Tape t;
  Var x = t.param(p);
  CHECK_THROWS_AS(t.backward(x), RankError);
}

TEST_CASE("gradient of a parameter off the loss path stays zero") {
  Parameter used("used", Tensor::from({2.0}));
  Parameter unused("unused", Tensor::from({3.0}));
  Tape t;
  Var a = t.param(used);
  t.param(unused);
  t.backward(reduce_sum(t, mul(t, a, a)));
  CHECK(used.gradient.data[0] == doctest::Approx(4.0));
  CHECK(unused.gradient.data[0] == 0.0);
}

TEST_CASE("masked softmax gradient matches finite differences") {
  Rng rng(7);
  Parameter x("x", random_tensor({3, 5}, rng));
  Tensor coeff = random_tensor({3, 5}, rng);
  std::vector<uint8_t> mask(15, 1);
  mask[1] = mask[7] = mask[12] = 0;
  auto build = [&](Tape& t) {
    Var probs = masked_softmax(t, t.param(x), mask);
    return reduce_sum(t, mul(t, probs, t.leaf(coeff)));
  };
  CHECK(grad_check(build, {&x}, 1e-5) < 1e-4);
}

TEST_CASE("every differentiable op passes grad_check") {
  Rng rng(31);

  SUBCASE("matmul chain with bias, relu, mean") {
    Parameter a("a", random_tensor({4, 3}, rng));
    Parameter b("b", random_tensor({3, 5}, rng));
    Parameter bias("bias", random_tensor({5}, rng));
    auto build = [&](Tape& t) {
      Var h = add(t, matmul(t, t.param(a), t.param(b)), t.param(bias));
      return reduce_mean(t, relu(t, h));
    };
    CHECK(grad_check(build, {&a, &b, &bias}, 1e-5) < 1e-6);
  }

  SUBCASE("matmul_nt, scale, mul") {
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({5, 4}, rng));
    Tensor c = random_tensor({3, 5}, rng);
    auto build = [&](Tape& t) {
      Var s = scale(t, matmul_nt(t, t.param(a), t.param(b)), 0.37);
      return reduce_sum(t, mul(t, s, t.leaf(c)));
    };
    CHECK(grad_check(build, {&a, &b}, 1e-5) < 1e-6);
  }

  SUBCASE("concat and slice") {
    Parameter a("a", random_tensor({2, 3}, rng));
    Parameter b("b", random_tensor({2, 2}, rng));
    auto build = [&](Tape& t) {
      Var cat = concat(t, {t.param(a), t.param(b)}, 1);
      Var block = slice(t, cat, 0, 2, 1, 4);
      return reduce_sum(t, mul(t, block, block));
    };
    CHECK(grad_check(build, {&a, &b}, 1e-5) < 1e-6);
  }

  SUBCASE("rank-1 concat and slice1") {
    Parameter a("a", random_tensor({3}, rng));
    Parameter b("b", random_tensor({4}, rng));
    auto build = [&](Tape& t) {
      Var cat = concat(t, {t.param(a), t.param(b)}, 0);
      Var piece = slice1(t, cat, 1, 6);
      return reduce_sum(t, mul(t, piece, piece));
    };
    CHECK(grad_check(build, {&a, &b}, 1e-5) < 1e-6);
  }

  SUBCASE("embedding gather") {
    Parameter table("table", random_tensor({6, 4}, rng));
    std::vector<int> ids{0, 3, 3, 5};
    Tensor c = random_tensor({4, 4}, rng);
    auto build = [&](Tape& t) {
      Var e = embedding_gather(t, t.param(table), ids);
      return reduce_sum(t, mul(t, e, t.leaf(c)));
    };
    CHECK(grad_check(build, {&table}, 1e-5) < 1e-6);
  }

  SUBCASE("tanh and sigmoid") {
    Parameter a("a", random_tensor({7}, rng));
    auto build = [&](Tape& t) {
      Var h = tanh_op(t, t.param(a));
      Var s = sigmoid_op(t, h);
      return reduce_sum(t, mul(t, s, s));
    };
    CHECK(grad_check(build, {&a}, 1e-5) < 1e-6);
  }

  SUBCASE("layer_norm") {
    Parameter x("x", random_tensor({3, 6}, rng));
    Parameter g("g", random_tensor({6}, rng, 0.5));
    Parameter b("b", random_tensor({6}, rng, 0.5));
    Tensor c = random_tensor({3, 6}, rng);
    auto build = [&](Tape& t) {
      Var y = layer_norm(t, t.param(x), t.param(g), t.param(b));
      return reduce_sum(t, mul(t, y, t.leaf(c)));
    };
    CHECK(grad_check(build, {&x, &g, &b}, 1e-5) < 1e-5);
  }

  SUBCASE("relation_gather") {
    Parameter proj("proj", random_tensor({4, 6}, rng));
    std::vector<int> labels(16);
    for (size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<int>(rng.below(6));
    }
    Tensor c = random_tensor({4, 4}, rng);
    auto build = [&](Tape& t) {
      Var r = relation_gather(t, t.param(proj), labels);
      return reduce_sum(t, mul(t, r, t.leaf(c)));
    };
    CHECK(grad_check(build, {&proj}, 1e-5) < 1e-6);
  }

  SUBCASE("relation_context") {
    Parameter probs("probs", random_tensor({4, 4}, rng));
    Parameter table("table", random_tensor({5, 3}, rng));
    std::vector<int> labels(16);
    for (size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<int>(rng.below(5));
    }
    Tensor c = random_tensor({4, 3}, rng);
    auto build = [&](Tape& t) {
      Var r = relation_context(t, t.param(probs), t.param(table), labels);
      return reduce_sum(t, mul(t, r, t.leaf(c)));
    };
    CHECK(grad_check(build, {&probs, &table}, 1e-5) < 1e-6);
  }

  SUBCASE("cross_entropy") {
    Parameter logits("logits", random_tensor({5}, rng, 2.0));
    auto build = [&](Tape& t) { return cross_entropy(t, t.param(logits), 2); };
    CHECK(grad_check(build, {&logits}, 1e-5) < 1e-6);
  }
}

TEST_CASE("quadratic form gradient error is tiny") {
  Rng rng(17);
  Parameter x("x", random_tensor({1, 6}, rng));
  Tensor q = random_tensor({6, 6}, rng);
  auto build = [&](Tape& t) {
    Var xr = t.param(x);
    Var qx = matmul(t, xr, t.leaf(q));  // x Q
    return reduce_sum(t, mul(t, qx, xr));  // x Q . x
  };
  CHECK(grad_check(build, {&x}, 1e-5) < 1e-7);
}

TEST_CASE("dropout is identity when off and rescales when on") {
  Rng rng(3);
  Tape t;
  Var x = t.leaf(Tensor::from({1.0, 2.0, 3.0, 4.0}));
  Var same = dropout(t, x, 0.5, rng, false);
  CHECK(same == x);

  // With training on, surviving entries are scaled by 1/(1-rate).
  int kept = 0;
  Rng rng2(5);
  Tape t2;
  Var x2 = t2.leaf(Tensor::from(std::vector<double>(1000, 1.0)));
  Var y2 = dropout(t2, x2, 0.25, rng2, true);
  for (double v : t2.val(y2).data) {
    if (v != 0.0) {
      CHECK(v == doctest::Approx(1.0 / 0.75));
      ++kept;
    }
  }
  CHECK(kept > 600);
  CHECK(kept < 900);
}

TEST_CASE("forward determinism and shape errors") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tape t1, t2;
  Var y1 = matmul(t1, t1.leaf(a), t1.leaf(b));
  Var y2 = matmul(t2, t2.leaf(a), t2.leaf(b));
  CHECK(t1.val(y1).data == t2.val(y2).data);

  Tape t3;
  CHECK_THROWS_AS(matmul(t3, t3.leaf(a), t3.leaf(a)), ShapeError);
  try {
    matmul(t3, t3.leaf(a), t3.leaf(a));
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[3,4]") != std::string::npos);
  }
}

TEST_CASE("single precision rounds through float") {
  Tensor t = Tensor::from({0.1}, Precision::kSingle);
  CHECK(t.data[0] == static_cast<double>(static_cast<float>(0.1)));

  Tape tape;
  Var a = tape.leaf(Tensor::from({0.1, 0.2}, Precision::kSingle));
  Var b = tape.leaf(Tensor::from({0.3, 0.4}, Precision::kSingle));
  Var c = add(tape, a, b);
  CHECK(tape.val(c).precision == Precision::kSingle);
  float expect = static_cast<float>(static_cast<double>(static_cast<float>(0.1)) +
                                    static_cast<double>(static_cast<float>(0.3)));
  CHECK(tape.val(c).data[0] == static_cast<double>(expect));
}

TEST_CASE("checkpoint save/load round trip by name") {
  Rng rng(13);
  Parameter a("layer0.w", random_tensor({3, 4}, rng));
  Parameter b("layer0.b", random_tensor({4}, rng));
  Parameter c("single.t", random_tensor({2}, rng));
  c.value.precision = Precision::kSingle;
  c.value.round_to_precision();

  std::string path =
      (std::filesystem::temp_directory_path() / "treecls_ckpt.bin").string();
  save_checkpoint({&a, &b, &c}, path);

  Parameter a2("layer0.w", Tensor::zeros({3, 4}));
  Parameter b2("layer0.b", Tensor::zeros({4}));
  Parameter c2("single.t", Tensor::zeros({2}, Precision::kSingle));
  std::vector<Parameter*> params{&a2, &b2, &c2};
  load_checkpoint(params, path);
  CHECK(a2.value.data == a.value.data);
  CHECK(b2.value.data == b.value.data);
  CHECK(c2.value.data == c.value.data);

  Parameter wrong("layer0.w", Tensor::zeros({4, 3}));
  std::vector<Parameter*> bad{&wrong};
  CHECK_THROWS_AS(load_checkpoint(bad, path), ShapeError);
}
