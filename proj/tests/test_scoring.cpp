#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>

#include "okbc/scoring.hpp"
#include "support/oracles.hpp"

using namespace okbc;
using okbc::testing::tucker_oracle;

using D = TensorT<double>;

TEST_CASE("conve reshape factorization") {
  CHECK(conve_reshape_dims(300) == std::pair<int, int>{15, 20});
  CHECK(conve_reshape_dims(500) == std::pair<int, int>{20, 25});
  CHECK(conve_reshape_dims(32) == std::pair<int, int>{4, 8});
  CHECK(conve_reshape_dims(12) == std::pair<int, int>{3, 4});
  CHECK_THROWS_AS(conve_reshape_dims(13), std::runtime_error);  // prime
}

TEST_CASE("tucker rank-1 core anchor") {
  Rng rng(1);
  TuckerT<double> sc(1, 0.0, rng);
  sc.core.values()[0] = 0.5;
  D vh = D::from({1, 1}, {2.0});
  D vr = D::from({1, 1}, {3.0});
  D tails = D::from({1, 1}, {4.0});
  // eval mode: fresh batch-norm running stats make bn the identity
  auto logits = sc.score(vh, vr, tails, false, rng);
  CHECK(logits.item() == doctest::Approx(12.0).epsilon(1e-4));

  std::fill(sc.core.values().begin(), sc.core.values().end(), 0.0);
  auto zero = sc.score(vh, vr, tails, false, rng);
  CHECK(zero.item() == doctest::Approx(0.0));
}

TEST_CASE("tucker matches the triple-loop oracle") {
  Rng rng(5);
  int d = 2, b = 3, n = 4;
  TuckerT<double> sc(d, 0.0, rng);
  D vh = D::uniform({b, d}, -1, 1, rng, false);
  D vr = D::uniform({b, d}, -1, 1, rng, false);
  D tails = D::uniform({n, d}, -1, 1, rng, false);
  auto logits = sc.score(vh, vr, tails, false, rng);  // eval: bn is identity here
  for (int i = 0; i < b; ++i) {
    std::vector<double> h(vh.values().begin() + i * d, vh.values().begin() + (i + 1) * d);
    std::vector<double> r(vr.values().begin() + i * d, vr.values().begin() + (i + 1) * d);
    for (int j = 0; j < n; ++j) {
      std::vector<double> t(tails.values().begin() + j * d,
                            tails.values().begin() + (j + 1) * d);
      double want = tucker_oracle(sc.core.values(), d, h, r, t);
      CHECK(logits.values()[i * n + j] == doctest::Approx(want).epsilon(1e-5));
    }
  }
}

TEST_CASE("tucker tail permutation permutes logit columns") {
  Rng rng(7);
  int d = 3, n = 5;
  TuckerT<double> sc(d, 0.0, rng);
  D vh = D::uniform({2, d}, -1, 1, rng, false);
  D vr = D::uniform({2, d}, -1, 1, rng, false);
  D tails = D::uniform({n, d}, -1, 1, rng, false);
  auto base = sc.score(vh, vr, tails, false, rng);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<double> permuted(n * d);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < d; ++k) permuted[j * d + k] = tails.values()[perm[j] * d + k];
  auto moved = sc.score(vh, vr, D::from({n, d}, permuted), false, rng);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < n; ++j)
      CHECK(moved.values()[i * n + j] == base.values()[i * n + perm[j]]);
}

TEST_CASE("conve zero kernel and projection produce bias-only logits") {
  Rng rng(11);
  int d = 12, n = 5, b = 2;
  ConvET<double> sc(d, n, 0.0, rng, conve_reshape_dims(d));
  std::fill(sc.kernel.values().begin(), sc.kernel.values().end(), 0.0);
  std::fill(sc.proj.values().begin(), sc.proj.values().end(), 0.0);
  D vh = D::uniform({b, d}, -1, 1, rng, false);
  D vr = D::uniform({b, d}, -1, 1, rng, false);
  D tails = D::uniform({n, d}, -1, 1, rng, false);
  auto logits = sc.score(vh, vr, tails, {}, false, rng);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j)
      CHECK(logits.values()[i * n + j] == doctest::Approx(sc.bias.values()[j]));
}

TEST_CASE("conve with zero biases and identity tails returns the feature") {
  Rng rng(13);
  int d = 12, b = 2;
  ConvET<double> sc(d, d, 0.0, rng, conve_reshape_dims(d));
  std::fill(sc.bias.values().begin(), sc.bias.values().end(), 0.0);
  D vh = D::uniform({b, d}, -1, 1, rng, false);
  D vr = D::uniform({b, d}, -1, 1, rng, false);
  D eye = D::zeros({d, d});
  for (int j = 0; j < d; ++j) eye.values()[j * d + j] = 1.0;
  auto f = sc.features(vh, vr, false, rng);
  auto logits = sc.score(vh, vr, eye, {}, false, rng);
  for (size_t i = 0; i < logits.numel(); ++i)
    CHECK(logits.values()[i] == doctest::Approx(f.values()[i]));
}

TEST_CASE("conve matches a composed-oracle evaluation at d=12") {
  // independent route: raw loops over conv, relu, projection in eval mode
  Rng rng(17);
  int d = 12, n = 6, b = 3;
  auto [rows_, cols_] = conve_reshape_dims(d);
  ConvET<double> sc(d, n, 0.0, rng, {rows_, cols_});
  D vh = D::uniform({b, d}, -1, 1, rng, false);
  D vr = D::uniform({b, d}, -1, 1, rng, false);
  D tails = D::uniform({n, d}, -1, 1, rng, false);
  auto logits = sc.score(vh, vr, tails, {}, false, rng);

  int h = 2 * rows_, w = cols_;
  std::vector<double> image(static_cast<size_t>(b) * h * w);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < d; ++j) {
      image[i * h * w + j] = vh.values()[i * d + j];
      image[i * h * w + d + j] = vr.values()[i * d + j];
    }
  }
  // eval-mode bn0/bn1 with fresh stats: x / sqrt(1 + eps)
  double inv0 = 1.0 / std::sqrt(1.0 + sc.bn0.eps);
  for (auto& v : image) v *= inv0;
  auto conv = okbc::testing::conv2d_oracle(image, b, 1, h, w, sc.kernel.values(), 32);
  double inv1 = 1.0 / std::sqrt(1.0 + sc.bn1.eps);
  for (auto& v : conv) v = std::max(0.0, v) * inv1;
  int flat = 32 * h * w;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j) {
      double logit = sc.bias.values()[j];
      for (int q = 0; q < d; ++q) {
        double fq = 0;
        for (int p = 0; p < flat; ++p)
          fq += conv[i * flat + p] * sc.proj.values()[static_cast<size_t>(p) * d + q];
        logit += std::max(0.0, fq) * tails.values()[j * d + q];
      }
      CHECK(logits.values()[i * n + j] == doctest::Approx(logit).epsilon(1e-5));
    }
}

TEST_CASE("conve inference is deterministic under dropout config") {
  Rng rng(19);
  int d = 12, n = 4;
  ConvET<float> sc(d, n, 0.4, rng, conve_reshape_dims(d));
  Rng drop1(1), drop2(2);
  TensorT<float> vh = TensorT<float>::uniform({2, d}, -1, 1, rng, false);
  TensorT<float> vr = TensorT<float>::uniform({2, d}, -1, 1, rng, false);
  TensorT<float> tails = TensorT<float>::uniform({n, d}, -1, 1, rng, false);
  auto a = sc.score(vh, vr, tails, {}, false, drop1);
  auto b = sc.score(vh, vr, tails, {}, false, drop2);
  CHECK(a.values() == b.values());
}

TEST_CASE("5star identity Moebius, zero relations, scalar oracle") {
  int k = 3;
  FiveStarT<double> sc(k);
  // unit coordinates: h1 = 1+0i, h2 = 0
  D vh = D::zeros({1, 4 * k});
  for (int i = 0; i < k; ++i) vh.values()[i] = 1.0;  // h1.re block
  D vt = vh;
  D vr = D::zeros({1, 8 * k});
  for (int i = 0; i < k; ++i) {
    vr.values()[i] = 1.0;          // a = 1
    vr.values()[6 * k + i] = 1.0;  // d = 1
  }
  auto logits = sc.score(vh, vr, vt);
  CHECK(logits.item() == doctest::Approx(static_cast<double>(k)));

  auto zero = sc.score(vh, D::zeros({1, 8 * k}), vt);
  CHECK(zero.item() == doctest::Approx(0.0));
}

TEST_CASE("5star K=1 matches hand-expanded complex arithmetic") {
  Rng rng(23);
  FiveStarT<double> sc(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = [&] { return std::complex<double>(rng.uniform(-1, 1), rng.uniform(-1, 1)); };
    std::complex<double> h1 = c(), h2 = c(), a = c(), b = c(), cc = c(), dd = c(), t1 = c(),
                         t2 = c();
    D vh = D::from({1, 4}, {h1.real(), h1.imag(), h2.real(), h2.imag()});
    D vt = D::from({1, 4}, {t1.real(), t1.imag(), t2.real(), t2.imag()});
    D vr = D::from({1, 8}, {a.real(), a.imag(), b.real(), b.imag(), cc.real(), cc.imag(),
                            dd.real(), dd.imag()});
    std::complex<double> u1 = a * h1 + b * h2;
    std::complex<double> u2 = cc * h1 + dd * h2;
    double want = (u1 * std::conj(t1) + u2 * std::conj(t2)).real();
    CHECK(sc.score(vh, vr, vt).item() == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("5star relation scaling scales logits linearly") {
  Rng rng(29);
  FiveStarT<double> sc(2);
  D vh = D::uniform({2, 8}, -1, 1, rng, false);
  D vr = D::uniform({2, 16}, -1, 1, rng, false);
  D vt = D::uniform({3, 8}, -1, 1, rng, false);
  auto base = sc.score(vh, vr, vt);
  double lambda = 2.75;
  D scaled_r = vr;
  scaled_r.data = std::make_shared<std::vector<double>>(*vr.data);
  for (auto& v : *scaled_r.data) v *= lambda;
  auto scaled = sc.score(vh, scaled_r, vt);
  for (size_t i = 0; i < base.numel(); ++i)
    CHECK(scaled.values()[i] == doctest::Approx(lambda * base.values()[i]));
}

TEST_CASE("n3 penalty anchors") {
  D single = D::from({1}, {2.0});
  CHECK(mul_scalar(n3_real(single), 0.1).item() == doctest::Approx(0.8));

  D re = D::from({1, 1}, {3.0});
  D im = D::from({1, 1}, {4.0});
  CHECK(n3_complex(re, im).item() == doctest::Approx(125.0));  // |3+4i|^3

  D m = D::from({1, 4}, {3.0, 4.0, 0.0, 0.0});  // one coordinate, h1=3+4i, h2=0
  CHECK(n3_penalty<double>({m}, 1, 1.0).item() == doctest::Approx(125.0));
  CHECK(n3_penalty<double>({m}, 1, 0.0).item() == doctest::Approx(0.0));
  CHECK_THROWS_AS(n3_penalty<double>({m}, 1, -0.5), std::runtime_error);
}

TEST_CASE("1-N batched logits equal per-row scoring") {
  Rng rng(31);
  int d = 4, n = 5, b = 3;
  TuckerT<double> tucker(d, 0.0, rng);
  D vh = D::uniform({b, d}, -1, 1, rng, false);
  D vr = D::uniform({b, d}, -1, 1, rng, false);
  D tails = D::uniform({n, d}, -1, 1, rng, false);
  auto batched = tucker.score(vh, vr, tails, false, rng);
  for (int i = 0; i < b; ++i) {
    D vh1 = D::from({1, d}, std::vector<double>(vh.values().begin() + i * d,
                                                vh.values().begin() + (i + 1) * d));
    D vr1 = D::from({1, d}, std::vector<double>(vr.values().begin() + i * d,
                                                vr.values().begin() + (i + 1) * d));
    auto row = tucker.score(vh1, vr1, tails, false, rng);
    for (int j = 0; j < n; ++j)
      CHECK(batched.values()[i * n + j] == doctest::Approx(row.values()[j]).epsilon(1e-6));
  }

  FiveStarT<double> fs(1);
  D fh = D::uniform({b, 4}, -1, 1, rng, false);
  D fr = D::uniform({b, 8}, -1, 1, rng, false);
  D ft = D::uniform({n, 4}, -1, 1, rng, false);
  auto fb = fs.score(fh, fr, ft);
  for (int i = 0; i < b; ++i) {
    D h1 = D::from({1, 4}, std::vector<double>(fh.values().begin() + i * 4,
                                               fh.values().begin() + (i + 1) * 4));
    D r1 = D::from({1, 8}, std::vector<double>(fr.values().begin() + i * 8,
                                               fr.values().begin() + (i + 1) * 8));
    auto row = fs.score(h1, r1, ft);
    for (int j = 0; j < n; ++j)
      CHECK(fb.values()[i * n + j] == doctest::Approx(row.values()[j]).epsilon(1e-9));
  }
}

TEST_CASE("training-mode gradients through each scorer pass finite differences") {
  Rng rng(37);
  SUBCASE("tucker with batch norm and the 1-N loss") {
    int d = 3, n = 4, b = 3;
    TuckerT<double> sc(d, 0.0, rng);
    D vh = D::uniform({b, d}, -1, 1, rng, true);
    D vr = D::uniform({b, d}, -1, 1, rng, true);
    D tails = D::uniform({n, d}, -1, 1, rng, true);
    D targets = D::zeros({b, n});
    targets.values()[0] = targets.values()[n + 2] = targets.values()[2 * n + 1] = 1.0;
    NamedParams<double> params{{"core", sc.core},           {"vh", vh},
                               {"vr", vr},                  {"tails", tails},
                               {"bn0.gamma", sc.bn0.gamma}, {"bn0.beta", sc.bn0.beta},
                               {"bn1.gamma", sc.bn1.gamma}, {"bn1.beta", sc.bn1.beta}};
    auto report = okbc::testing::finite_diff_check(params, [&] {
      Rng drop(0);
      return softmax_cross_entropy(sc.score(vh, vr, tails, true, drop), targets);
    });
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
  }
  SUBCASE("conve in training mode") {
    int d = 6, n = 4, b = 3;
    ConvET<double> sc(d, n, 0.0, rng, conve_reshape_dims(d));
    D vh = D::uniform({b, d}, -1, 1, rng, true);
    D vr = D::uniform({b, d}, -1, 1, rng, true);
    D tails = D::uniform({n, d}, -1, 1, rng, true);
    D targets = D::zeros({b, n});
    targets.values()[1] = targets.values()[n + 0] = targets.values()[2 * n + 3] = 1.0;
    NamedParams<double> params{{"kernel", sc.kernel}, {"proj", sc.proj},
                               {"bias", sc.bias},     {"vh", vh},
                               {"vr", vr},            {"tails", tails},
                               {"bn1.gamma", sc.bn1.gamma}};
    auto report = okbc::testing::finite_diff_check(params, [&] {
      Rng drop(0);
      return softmax_cross_entropy(sc.score(vh, vr, tails, {}, true, drop), targets);
    });
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
  }
  SUBCASE("5star with n3 in the loss") {
    int k = 2, n = 4, b = 2;
    FiveStarT<double> sc(k);
    D vh = D::uniform({b, 4 * k}, -1, 1, rng, true);
    D vr = D::uniform({b, 8 * k}, -1, 1, rng, true);
    D tails = D::uniform({n, 4 * k}, -1, 1, rng, true);
    D targets = D::zeros({b, n});
    targets.values()[2] = targets.values()[n + 1] = 1.0;
    NamedParams<double> params{{"vh", vh}, {"vr", vr}, {"tails", tails}};
    auto report = okbc::testing::finite_diff_check(params, [&] {
      auto loss = softmax_cross_entropy(sc.score(vh, vr, tails), targets);
      return add(loss, n3_penalty<double>({vh, vr, tails}, k, 0.05));
    });
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
  }
}
