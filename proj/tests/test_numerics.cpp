#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fhrformer/dft.hpp"
#include "fhrformer/graph.hpp"
#include "fhrformer/ops.hpp"
#include "fhrformer/optim.hpp"
#include "fhrformer/rng.hpp"
#include "grad_check.hpp"

using namespace fhrformer;
using fhrformer::testing::grad_check;

namespace {

TensorT<double> random_tensor(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  auto t = TensorT<double>::matrix(rows, cols);
  t.fill_uniform(rng, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul basic products") {
  Graph g;
  auto eye = g.constant(Tensor::from_rows({{1.f, 0.f}, {0.f, 1.f}}));
  auto col = g.constant(Tensor::from_rows({{3.f}, {4.f}}));
  auto out = matmul(eye, col);
  CHECK(out.value().at(0, 0) == doctest::Approx(3.0));
  CHECK(out.value().at(1, 0) == doctest::Approx(4.0));

  auto a = g.constant(Tensor::from_rows({{2.f}}));
  auto b = g.constant(Tensor::from_rows({{5.f}}));
  CHECK(matmul(a, b).value().at(0) == doctest::Approx(10.0));
}

TEST_CASE("matmul rejects shape mismatch") {
  Graph g;
  auto a = g.constant(Tensor::matrix(2, 3));
  auto b = g.constant(Tensor::matrix(2, 3));
  CHECK_THROWS_AS((void)matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(11);
  auto a = random_tensor(rng, 4, 3);
  auto b = random_tensor(rng, 3, 2);
  auto r = random_tensor(rng, 4, 2);  // random projection to a scalar
  auto res = grad_check({a, b}, [&](GraphT<double>& g, std::vector<VarT<double>>& v) {
    auto w = g.constant(r);
    return sum_all(mul(matmul(v[0], v[1]), w));
  });
  CHECK(res.checked == 18);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("softmax values") {
  Graph g;
  auto z = softmax(g.constant(Tensor::from_vector({0.f, 0.f, 0.f})));
  for (int i = 0; i < 3; ++i) CHECK(z.value().at(i) == doctest::Approx(1.0 / 3.0));

  auto s = softmax(g.constant(Tensor::from_vector({1000.f, 0.f})));
  CHECK(s.value().at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.value().at(1) == doctest::Approx(0.0).epsilon(1e-12));

  // Direct formula oracle on [1,2,3].
  auto t = softmax(g.constant(Tensor::from_vector({1.f, 2.f, 3.f})));
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(t.value().at(i) - std::exp(1.0 + i) / denom) < 1e-7);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Graph g;
  auto x = Tensor::matrix(6, 9);
  for (int i = 0; i < x.size(); ++i) x.at(i) = static_cast<float>(rng.uniform(-4, 4));
  auto y = softmax(g.constant(x));
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += y.value().at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm values") {
  Graph g;
  auto gain = g.constant(Tensor::from_vector({1.f, 1.f, 1.f, 1.f}));
  auto bias = g.constant(Tensor::from_vector({0.f, 0.f, 0.f, 0.f}));
  auto y = layer_norm(g.constant(Tensor::from_rows({{5.f, 5.f, 5.f, 5.f}})), gain, bias);
  for (int i = 0; i < 4; ++i) CHECK(y.value().at(i) == doctest::Approx(0.0));

  auto gain2 = g.constant(Tensor::from_vector({1.f, 1.f}));
  auto bias2 = g.constant(Tensor::from_vector({0.f, 0.f}));
  auto y2 = layer_norm(g.constant(Tensor::from_rows({{1.f, -1.f}})), gain2, bias2);
  CHECK(y2.value().at(0) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(y2.value().at(1) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm statistics on a random row") {
  Rng rng(7);
  Graph g;
  const int n = 64;
  auto x = Tensor::matrix(1, n);
  for (int i = 0; i < n; ++i) x.at(i) = static_cast<float>(rng.uniform(0, 1));
  auto gain = Tensor::vector(n);
  gain.fill(1.f);
  auto bias = Tensor::vector(n);
  auto y = layer_norm(g.constant(x), g.constant(gain), g.constant(bias));
  double mean = 0;
  for (int i = 0; i < n; ++i) mean += y.value().at(i);
  mean /= n;
  double var = 0;
  for (int i = 0; i < n; ++i) var += (y.value().at(i) - mean) * (y.value().at(i) - mean);
  var /= n;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);
}

TEST_CASE("dropout identity cases and error") {
  Rng rng(3);
  Graph g;
  auto x = Tensor::from_vector({1.f, 2.f, 3.f});
  auto a = dropout(g.constant(x), 0.f, true, rng);
  auto b = dropout(g.constant(x), 0.1f, false, rng);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.value().at(i) == x.at(i));
    CHECK(b.value().at(i) == x.at(i));
  }
  CHECK_THROWS_AS((void)dropout(g.constant(x), 1.0f, true, rng), ParameterError);
}

TEST_CASE("dropout statistics at rate 0.1") {
  Rng rng(17);
  Graph g;
  const int n = 100000;
  auto x = Tensor::vector(n);
  x.fill(1.f);
  auto y = dropout(g.constant(x), 0.1f, true, rng);
  int zeros = 0;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    if (y.value().at(i) == 0.f) ++zeros;
    sum += y.value().at(i);
  }
  const double zero_frac = static_cast<double>(zeros) / n;
  CHECK(zero_frac > 0.09);
  CHECK(zero_frac < 0.11);
  CHECK(std::abs(sum / n - 1.0) < 0.02);  // survivor scaling preserves the mean
}

TEST_CASE("dft_magnitude dc and pure tone") {
  Graph g;
  auto c = Tensor::vector(8);
  c.fill(2.5f);
  auto mag = dft_magnitude(g.constant(c));
  CHECK(mag.value().size() == 5);
  CHECK(mag.value().at(0) == doctest::Approx(8 * 2.5).epsilon(1e-5));
  for (int k = 1; k < 5; ++k) CHECK(mag.value().at(k) < 1e-3);

  const int n = 16;
  auto tone = Tensor::vector(n);
  for (int t = 0; t < n; ++t)
    tone.at(t) = static_cast<float>(std::cos(2.0 * M_PI * 2.0 * t / n));
  auto tm = dft_magnitude(g.constant(tone)).value();
  for (int k = 0; k < n / 2 + 1; ++k) {
    if (k == 2)
      CHECK(tm.at(k) == doctest::Approx(n / 2.0).epsilon(1e-4));
    else
      CHECK(tm.at(k) < 1e-3);
  }
}

TEST_CASE("dft_magnitude matches naive complex DFT oracle") {
  Rng rng(23);
  const int n = 32;
  auto x = Tensor::vector(n);
  for (int t = 0; t < n; ++t) x.at(t) = static_cast<float>(rng.uniform(-1, 1));
  Graph g;
  auto mag = dft_magnitude(g.constant(x)).value();
  for (int k = 0; k <= n / 2; ++k) {
    double re = 0, im = 0;
    for (int t = 0; t < n; ++t) {
      const double a = 2.0 * M_PI * k * t / n;
      re += x.at(t) * std::cos(a);
      im -= x.at(t) * std::sin(a);
    }
    const double expect = std::sqrt(re * re + im * im);
    CHECK(std::abs(mag.at(k) - expect) / (expect + 1.0) < 1e-5);
  }
}

TEST_CASE("dft_magnitude satisfies Parseval's relation") {
  Rng rng(29);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 64;
    auto x = Tensor::vector(n);
    for (int t = 0; t < n; ++t) x.at(t) = static_cast<float>(rng.uniform(-1, 1));
    Graph g;
    auto mag = dft_magnitude(g.constant(x)).value();
    double time_energy = 0;
    for (int t = 0; t < n; ++t) time_energy += x.at(t) * x.at(t);
    double freq_energy = mag.at(0) * mag.at(0) + mag.at(n / 2) * mag.at(n / 2);
    for (int k = 1; k < n / 2; ++k) freq_energy += 2.0 * mag.at(k) * mag.at(k);
    freq_energy /= n;
    CHECK(std::abs(time_energy - freq_energy) / time_energy < 1e-4);
  }
}

TEST_CASE("dft_magnitude rejects length < 2") {
  Graph g;
  auto x = Tensor::vector(1);
  CHECK_THROWS_AS((void)dft_magnitude(g.constant(x)), ParameterError);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(41);
  const auto check = [](testing::GradCheckResult r) {
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  };
  using V = std::vector<VarT<double>>;

  check(grad_check({random_tensor(rng, 3, 4), random_tensor(rng, 5, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(matmul_nt(v[0], v[1]))); }));
  check(grad_check({random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(transpose(v[0]))); }));
  check(grad_check({random_tensor(rng, 3, 4), random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(add(v[0], v[1]))); }));
  check(grad_check({random_tensor(rng, 3, 4), random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(sub(v[0], v[1]))); }));
  check(grad_check({random_tensor(rng, 3, 4), random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(mul(v[0], v[1]))); }));
  check(grad_check({random_tensor(rng, 3, 4), random_tensor(rng, 1, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(add_rowvec(v[0], v[1]))); }));
  check(grad_check({random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(affine(v[0], 1.7, -0.3))); }));
  check(grad_check({random_tensor(rng, 3, 4)},  // keep away from the relu kink
                   [](GraphT<double>& g, V& v) { return sum_all(square(relu(affine(v[0], 1.0, 2.5)))); }));
  check(grad_check({random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return sum_all(exp_op(v[0])); }));
  check(grad_check({random_tensor(rng, 3, 4, 0.5, 2.0)},
                   [](GraphT<double>& g, V& v) { return sum_all(sqrt_op(v[0])); }));
  check(grad_check({random_tensor(rng, 3, 4, 0.2, 1.0)},  // away from |.| kink
                   [](GraphT<double>& g, V& v) { return sum_all(square(abs_op(v[0]))); }));
  check(grad_check({random_tensor(rng, 4, 5)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(softmax(v[0], 1))); }));
  check(grad_check({random_tensor(rng, 4, 5)},
                   [](GraphT<double>& g, V& v) { return sum_all(square(softmax(v[0], 0))); }));
  check(grad_check({random_tensor(rng, 3, 6), random_tensor(rng, 1, 6, 0.5, 1.5),
                    random_tensor(rng, 1, 6)},
                   [](GraphT<double>& g, V& v) {
                     return sum_all(square(layer_norm(v[0], v[1], v[2], 1e-5)));
                   }));
  check(grad_check({random_tensor(rng, 4, 3)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(slice_rows(v[0], {2, 0, 2})));
  }));
  check(grad_check({random_tensor(rng, 2, 3)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(scatter_rows(v[0], {3, 1}, 5)));
  }));
  check(grad_check({random_tensor(rng, 3, 6)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(slice_cols(v[0], 1, 3)));
  }));
  check(grad_check({random_tensor(rng, 3, 2), random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) {
                     return sum_all(square(concat_cols<double>({v[0], v[1]})));
                   }));
  check(grad_check({random_tensor(rng, 1, 5)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(tile_row(v[0], 4)));
  }));
  check(grad_check({random_tensor(rng, 3, 4)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(reshape(v[0], 2, 6)));
  }));
  check(grad_check({random_tensor(rng, 3, 4)},
                   [](GraphT<double>& g, V& v) { return mean_all(square(v[0])); }));
  check(grad_check({random_tensor(rng, 1, 24)}, [](GraphT<double>& g, V& v) {
    return sum_all(square(dft_magnitude(v[0])));
  }));

  // Dropout with a frozen mask (same seed on every evaluation).
  check(grad_check({random_tensor(rng, 3, 4)}, [](GraphT<double>& g, V& v) {
    Rng local(99);
    return sum_all(square(dropout(v[0], 0.3, true, local)));
  }));
}

TEST_CASE("gradient accumulation matches duplicated-input oracle") {
  Rng rng(53);
  auto x = random_tensor(rng, 3, 3);
  auto a = random_tensor(rng, 3, 3);
  auto b = random_tensor(rng, 3, 3);

  // Shared use: x enters two branches of the same graph.
  GraphT<double> g;
  auto xv = g.input(x);
  auto loss = sum_all(square(add(matmul(xv, g.constant(a)), matmul(xv, g.constant(b)))));
  g.backward(loss);
  const auto shared_grad = g.node(xv.id).grad;

  // Oracle: duplicate the input into two leaves and sum their gradients.
  GraphT<double> g2;
  auto x1 = g2.input(x);
  auto x2 = g2.input(x);
  auto loss2 = sum_all(square(add(matmul(x1, g2.constant(a)), matmul(x2, g2.constant(b)))));
  g2.backward(loss2);
  for (int i = 0; i < x.size(); ++i) {
    const double expect = g2.node(x1.id).grad.at(i) + g2.node(x2.id).grad.at(i);
    CHECK(shared_grad.at(i) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("non-finite forward output is a hard error") {
  Graph g;
  auto x = Tensor::from_vector({700.f});  // exp overflows float
  CHECK_THROWS_AS((void)exp_op(g.constant(x)), NumericError);
}

TEST_CASE("adam zero gradient is the identity") {
  Parameter p("w", Tensor::from_vector({1.f, -2.f, 3.f}));
  Adam::Config cfg;
  cfg.weight_decay = 0.f;
  Adam adam(cfg);
  std::vector<Parameter*> params{&p};
  for (int i = 0; i < 3; ++i) adam.step(params);
  CHECK(p.value.at(0) == 1.f);
  CHECK(p.value.at(1) == -2.f);
  CHECK(p.value.at(2) == 3.f);
}

TEST_CASE("adam first step moves by about lr") {
  Parameter p("w", Tensor::from_vector({0.5f}));
  Adam::Config cfg;
  cfg.learning_rate = 0.1f;
  cfg.weight_decay = 0.f;
  Adam adam(cfg);
  p.grad.at(0) = 1.f;
  std::vector<Parameter*> params{&p};
  adam.step(params);
  CHECK(p.value.at(0) == doctest::Approx(0.4).epsilon(1e-6));
}

TEST_CASE("adam three-step trace matches reference update") {
  // Hand-rolled double-precision Adam with decoupled weight decay.
  const double lr = 0.05, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double theta = 1.25, m = 0, v = 0;
  const double grads[3] = {0.3, -0.7, 0.15};
  Parameter p("w", Tensor::from_vector({1.25f}));
  Adam::Config cfg;
  cfg.learning_rate = static_cast<float>(lr);
  cfg.weight_decay = static_cast<float>(wd);
  Adam adam(cfg);
  std::vector<Parameter*> params{&p};
  for (int t = 1; t <= 3; ++t) {
    const double gref = grads[t - 1];
    theta -= lr * wd * theta;
    m = b1 * m + (1 - b1) * gref;
    v = b2 * v + (1 - b2) * gref * gref;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * mh / (std::sqrt(vh) + eps);

    p.grad.at(0) = static_cast<float>(gref);
    adam.step(params);
  }
  CHECK(std::abs(p.value.at(0) - theta) < 1e-7);  // float32 params vs double trace
}

TEST_CASE("adam rejects non-finite gradients with the parameter name") {
  Parameter p("enc0.wq", Tensor::from_vector({1.f}));
  p.grad.at(0) = std::numeric_limits<float>::quiet_NaN();
  Adam adam;
  std::vector<Parameter*> params{&p};
  try {
    adam.step(params);
    CHECK(false);
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("enc0.wq") != std::string::npos);
  }
}

TEST_CASE("plateau scheduler semantics") {
  // Improving losses leave the rate untouched.
  {
    PlateauScheduler s(5, 0.1);
    double lr = 1e-4;
    for (double loss : {1.0, 0.9, 0.8}) lr = s.step(loss, lr);
    CHECK(lr == doctest::Approx(1e-4));
  }
  // Five consecutive stale epochs decay once: 1e-4 -> 1e-5.
  {
    PlateauScheduler s(5, 0.1);
    double lr = s.step(1.0, 1e-4);
    for (int i = 0; i < 5; ++i) lr = s.step(1.5, lr);
    CHECK(lr == doctest::Approx(1e-5));
    CHECK(s.stale_count() == 0);
  }
  // Four stale then one improvement: no decay, counter reset.
  {
    PlateauScheduler s(5, 0.1);
    double lr = s.step(1.0, 1e-4);
    for (int i = 0; i < 4; ++i) lr = s.step(1.5, lr);
    lr = s.step(0.5, lr);
    CHECK(lr == doctest::Approx(1e-4));
    CHECK(s.stale_count() == 0);
  }
}
