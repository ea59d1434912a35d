#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "okbc/adam.hpp"
#include "okbc/tensor.hpp"
#include "support/oracles.hpp"

using namespace okbc;
using okbc::testing::conv2d_oracle;
using okbc::testing::finite_diff_check;

using D = TensorT<double>;
using F = TensorT<float>;

TEST_CASE("elementwise basics") {
  D x = D::from({3}, {0.0, 1.0, -1.0});
  CHECK(sigmoid(x).values()[0] == doctest::Approx(0.5));
  CHECK(tanh_op(x).values()[0] == doctest::Approx(0.0));
  D a = D::from({2}, {1.0, 2.0});
  D b = D::from({2}, {3.0, 4.0});
  auto m = mul(a, b);
  CHECK(m.values()[0] == doctest::Approx(3.0));
  CHECK(m.values()[1] == doctest::Approx(8.0));
  CHECK(exp_op(D::scalar(0.0)).item() == doctest::Approx(1.0));
  CHECK(log_op(D::scalar(1.0)).item() == doctest::Approx(0.0));
}

TEST_CASE("broadcasting rules") {
  D a = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  D row = D::from({3}, {10, 20, 30});
  auto s = add(a, row);
  CHECK(s.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  D col = D::from({2, 1}, {100, 200});
  auto s2 = add(a, col);
  CHECK(s2.values() == std::vector<double>{101, 102, 103, 204, 205, 206});
  CHECK_THROWS_WITH_AS(add(a, D::from({2}, {1, 2})),
                       doctest::Contains("[2,3]"), std::runtime_error);
}

TEST_CASE("broadcast gradient reduces over expanded dims") {
  D a = D::from({2, 2}, {1, 2, 3, 4}, true);
  D row = D::from({2}, {5, 6}, true);
  auto out = mul(a, row);
  auto loss = sum_all(out);
  backward(loss);
  CHECK((*row.grad)[0] == doctest::Approx(1 + 3));
  CHECK((*row.grad)[1] == doctest::Approx(2 + 4));
  CHECK((*a.grad)[0] == doctest::Approx(5));
  CHECK((*a.grad)[3] == doctest::Approx(6));
}

TEST_CASE("matmul identity and inner product") {
  D eye = D::from({2, 2}, {1, 0, 0, 1});
  D m = D::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).values() == m.values());
  D r = D::from({1, 2}, {1, 2});
  D c = D::from({2, 1}, {3, 4});
  CHECK(matmul(r, c).item() == doctest::Approx(11.0));
  CHECK_THROWS_AS(matmul(r, r), std::runtime_error);
}

TEST_CASE("gradient of sum(A*B) wrt A at A=I, B=ones") {
  // frozen from the finite-difference oracle: d/dA sum(A.B) = ones * ones^T
  D a = D::from({2, 2}, {1, 0, 0, 1}, true);
  D b = D::from({2, 2}, {1, 1, 1, 1});
  auto loss = sum_all(matmul(a, b));
  backward(loss);
  for (double g : *a.grad) CHECK(g == doctest::Approx(2.0));
  NamedParams<double> params{{"a", a}};
  auto report = finite_diff_check(params, [&] { return sum_all(matmul(a, b)); });
  CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("matmul transpose flags against plain compose") {
  Rng rng(7);
  D a = D::uniform({3, 4}, -1, 1, rng, false);
  D b = D::uniform({5, 4}, -1, 1, rng, false);
  auto nt = matmul(a, b, false, true);  // [3,5]
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double want = 0;
      for (int k = 0; k < 4; ++k) want += a.values()[i * 4 + k] * b.values()[j * 4 + k];
      CHECK(nt.values()[i * 5 + j] == doctest::Approx(want));
    }
  D c = D::uniform({4, 3}, -1, 1, rng, false);
  auto tn = matmul(c, a, true, true);  // c^T [3,4] * a^T [4,3] -> [3,3]
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double want = 0;
      for (int k = 0; k < 4; ++k) want += c.values()[k * 3 + i] * a.values()[j * 4 + k];
      CHECK(tn.values()[i * 3 + j] == doctest::Approx(want));
    }
}

TEST_CASE("conv2d matches hand examples") {
  // all-ones 1x5x5 input, all-ones kernel: center cell sums the full window
  D x = D::from({1, 1, 5, 5}, std::vector<double>(25, 1.0));
  D k = D::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto out = conv2d(x, k);
  CHECK(out.values()[2 * 5 + 2] == doctest::Approx(9.0));
  CHECK(out.values()[0] == doctest::Approx(4.0));  // corner sees a 2x2 window

  D zk = D::zeros({1, 1, 3, 3});
  auto zero_out = conv2d(x, zk);
  for (double v : zero_out.values()) CHECK(v == 0.0);

  D delta = D::zeros({1, 1, 3, 3});
  delta.values()[4] = 1.0;  // center tap
  Rng rng(3);
  D xr = D::uniform({2, 1, 4, 4}, -1, 1, rng, false);
  CHECK(conv2d(xr, delta).values() == xr.values());
}

TEST_CASE("conv2d equals the quintuple-loop oracle exactly in 64-bit") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    int ci = 1 + rng.below(4), h = 2 + rng.below(7), w = 2 + rng.below(7);
    int co = 1 + rng.below(4), b = 1 + rng.below(3);
    D x = D::uniform({b, ci, h, w}, -1, 1, rng, false);
    D k = D::uniform({co, ci, 3, 3}, -1, 1, rng, false);
    auto got = conv2d(x, k);
    auto want = conv2d_oracle(x.values(), b, ci, h, w, k.values(), co);
    for (size_t i = 0; i < want.size(); ++i) CHECK(got.values()[i] == want[i]);
  }
  CHECK_THROWS_AS(conv2d(D::zeros({1, 2, 4, 4}), D::zeros({1, 1, 3, 3})), std::runtime_error);
}

TEST_CASE("batchnorm training and inference") {
  BatchNormT<double> bn(1);
  D x = D::from({2, 1}, {1.0, 3.0});
  auto y = bn.forward(x, true);
  CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(bn.running_mean.values()[0] == doctest::Approx(0.2));  // momentum 0.1

  BatchNormT<double> bn_zero(2);
  std::fill(bn_zero.gamma.values().begin(), bn_zero.gamma.values().end(), 0.0);
  auto z = bn_zero.forward(D::from({2, 2}, {1, 2, 3, 4}), true);
  for (double v : z.values()) CHECK(v == 0.0);

  BatchNormT<double> bn_eval(2);
  D xe = D::from({1, 2}, {0.5, -0.25});
  auto ye = bn_eval.forward(xe, false);  // running mean 0, var 1: near identity
  CHECK(ye.values()[0] == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(ye.values()[1] == doctest::Approx(-0.25).epsilon(1e-4));

  CHECK_THROWS_WITH_AS(bn_eval.forward(D::from({1, 2}, {1, 2}), true),
                       doctest::Contains("batch of 1"), std::runtime_error);
}

TEST_CASE("dropout modes") {
  Rng rng(5);
  D x = D::from({4}, {1, 2, 3, 4}, false);
  CHECK(dropout(x, 0.0, true, rng).values() == x.values());
  CHECK(dropout(x, 0.9, false, rng).values() == x.values());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), std::runtime_error);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), std::runtime_error);

  // expected mean preserved within 5% over 1e5 elements at rate 0.5
  size_t n = 100000;
  D big = D::from({static_cast<int>(n)}, std::vector<double>(n, 1.0));
  auto dropped = dropout(big, 0.5, true, rng);
  double mean = 0;
  for (double v : dropped.values()) mean += v;
  mean /= static_cast<double>(n);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("dropout is bit-reproducible under a fixed seed") {
  D x = D::from({64}, std::vector<double>(64, 1.0));
  Rng r1(99), r2(99);
  auto a = dropout(x, 0.3, true, r1);
  auto b = dropout(x, 0.3, true, r2);
  CHECK(a.values() == b.values());
}

TEST_CASE("softmax cross entropy anchors") {
  // uniform logits, one-hot target: ln 2
  D l2 = D::from({1, 2}, {0.0, 0.0});
  D t2 = D::from({1, 2}, {1.0, 0.0});
  CHECK(softmax_cross_entropy(l2, t2).item() == doctest::Approx(std::log(2.0)));

  D big = D::from({1, 2}, {100.0, 0.0});
  CHECK(softmax_cross_entropy(big, t2).item() == doctest::Approx(0.0).epsilon(1e-6));

  // logits [1,2,3], target index 2: lse - 3 = 0.40761
  D l3 = D::from({1, 3}, {1.0, 2.0, 3.0});
  D t3 = D::from({1, 3}, {0.0, 0.0, 1.0});
  CHECK(softmax_cross_entropy(l3, t3).item() == doctest::Approx(0.40761).epsilon(1e-4));

  CHECK_THROWS_WITH_AS(softmax_cross_entropy(l3, D::zeros({1, 3})),
                       doctest::Contains("all-zero"), std::runtime_error);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(17);
  D l = D::uniform({5, 9}, -30, 30, rng, false);
  auto p = softmax_rows(l);
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += p[i * 9 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward anchors") {
  D x = D::from({2}, {1.0, 2.0}, true);
  auto loss = sum_all(mul(x, x));
  backward(loss);
  CHECK((*x.grad)[0] == doctest::Approx(2.0));
  CHECK((*x.grad)[1] == doctest::Approx(4.0));

  // loss constant wrt y: zero gradient
  D y = D::from({2}, {1.0, 2.0}, true);
  auto c = sum_all(mul(x, x));
  backward(c);
  y.ensure_grad();
  for (double g : *y.grad) CHECK(g == 0.0);

  CHECK_THROWS_AS(backward(x), std::runtime_error);  // non-scalar loss
}

TEST_CASE("tape visits every node exactly once, consumers first") {
  D x = D::from({2}, {0.3, -0.7}, true);
  auto a = sigmoid(x);
  auto b = mul(a, a);       // a consumed twice
  auto c = add(b, a);       // diamond
  auto loss = sum_all(c);
  TapeT<double> tape;
  tape.build(loss);
  // each node appears once, and only after every node that consumes it
  std::unordered_set<const NodeT<double>*> emitted;
  for (auto& t : tape.order) {
    CHECK(!emitted.count(t.node.get()));
    for (const auto& parent : t.node->parents)
      if (parent.node) CHECK(!emitted.count(parent.node.get()));
    emitted.insert(t.node.get());
  }
  CHECK(emitted.size() == tape.order.size());
  // gradient through the diamond: compare against finite differences
  NamedParams<double> params{{"x", x}};
  auto report = finite_diff_check(params, [&] {
    auto aa = sigmoid(x);
    return sum_all(add(mul(aa, aa), aa));
  });
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("composite expression matches central finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 3; ++trial) {
    D w = D::uniform({4, 3}, -1, 1, rng, true);
    D v = D::uniform({3, 4}, -1, 1, rng, true);
    D b = D::uniform({1, 4}, -0.5, 0.5, rng, true);
    NamedParams<double> params{{"w", w}, {"v", v}, {"b", b}};
    auto loss_fn = [&] {
      auto h = tanh_op(matmul(w, v));
      auto s = sigmoid(add(h, b));
      auto e = exp_op(mul_scalar(s, -0.5));
      auto p = pow_scalar(add_scalar(mul(e, e), 1.0), 1.5);
      return sum_all(log_op(p));
    };
    auto report = finite_diff_check(params, loss_fn);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("relu and slicing ops gradients") {
  Rng rng(31);
  D x = D::uniform({3, 6}, -1, 1, rng, true);
  NamedParams<double> params{{"x", x}};
  auto report = finite_diff_check(params, [&] {
    auto s = slice_cols(x, 1, 3);
    auto r = relu(s);
    auto rep = repeat_row(sum_all(r), 2);  // scalar as [1] -> repeated rows
    return sum_all(add(rep, rep));
  });
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("adam anchors") {
  D p = D::from({2}, {1.0, -2.0}, true);
  NamedParams<double> params{{"p", p}};
  AdamState<double> adam(params, 0.1);

  SUBCASE("zero gradient leaves parameters unchanged") {
    p.zero_grad();
    adam.step(params);
    CHECK(p.values()[0] == doctest::Approx(1.0));
    CHECK(p.values()[1] == doctest::Approx(-2.0));
  }

  SUBCASE("first step moves by about lr in the -sign direction") {
    p.zero_grad();
    (*p.grad)[0] = 0.7;
    (*p.grad)[1] = -3.1;
    adam.step(params);
    CHECK(p.values()[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-4));
    CHECK(p.values()[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-4));
    CHECK(adam.step_count == 1);

    // second identical step keeps moving the same way
    adam.step(params);
    CHECK(p.values()[0] < 1.0 - 0.1);
    CHECK(p.values()[1] > -2.0 + 0.1);
  }

  SUBCASE("non-finite gradient aborts naming the parameter") {
    p.zero_grad();
    (*p.grad)[0] = std::nan("");
    CHECK_THROWS_WITH_AS(adam.step(params), doctest::Contains("'p'"), std::runtime_error);
  }
}

TEST_CASE("unreachable parameters keep zero gradients") {
  D used = D::from({2}, {1.0, 2.0}, true);
  D unused = D::from({2}, {3.0, 4.0}, true);
  auto loss = sum_all(mul(used, used));
  backward(loss);
  unused.ensure_grad();
  CHECK((*unused.grad) == std::vector<double>{0.0, 0.0});
  CHECK((*used.grad)[0] != 0.0);
}
