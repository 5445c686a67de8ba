#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "fhrformer/graph.hpp"
#include "fhrformer/ops.hpp"
#include "fhrformer/tensor.hpp"

namespace fhrformer {

/// Cosine/sine basis of the real-input DFT for signals of length n:
/// re_k = sum_t x_t cos(2 pi k t / n), im_k = -sum_t x_t sin(2 pi k t / n),
/// k = 0 .. n/2. Matrices are built once per length and shared.
template <typename S>
class DftBasisT {
 public:
  explicit DftBasisT(int n) : n_(n), bins_(n / 2 + 1) {
    cos_ = TensorT<S>::matrix(n, bins_);
    sin_ = TensorT<S>::matrix(n, bins_);
    const double w = 2.0 * 3.14159265358979323846 / static_cast<double>(n);
    for (int t = 0; t < n; ++t) {
      for (int k = 0; k < bins_; ++k) {
        const double a = w * static_cast<double>(t) * static_cast<double>(k);
        cos_.at(t, k) = static_cast<S>(std::cos(a));
        sin_.at(t, k) = static_cast<S>(std::sin(a));
      }
    }
  }

  int length() const { return n_; }
  int bins() const { return bins_; }
  const TensorT<S>& cos_table() const { return cos_; }
  const TensorT<S>& sin_table() const { return sin_; }

  static const DftBasisT& shared(int n) {
    static std::map<int, std::unique_ptr<DftBasisT>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it == cache.end())
      it = cache.emplace(n, std::make_unique<DftBasisT>(n)).first;
    return *it->second;
  }

 private:
  int n_;
  int bins_;
  TensorT<S> cos_;
  TensorT<S> sin_;
};

inline constexpr double kDftMagnitudeEps = 1e-12;

/// DFT magnitude of a plain length-n tensor (no graph), n/2+1 bins.
template <typename S>
TensorT<S> dft_magnitude_value(const TensorT<S>& x) {
  if (x.size() < 2) throw ParameterError("dft_magnitude: signal length must be >= 2");
  const DftBasisT<S>& basis = DftBasisT<S>::shared(x.size());
  const int bins = basis.bins();
  TensorT<S> out = TensorT<S>::vector(bins);
  auto row = x.vec().transpose();
  Eigen::Matrix<S, 1, Eigen::Dynamic> re = row * basis.cos_table().mat();
  Eigen::Matrix<S, 1, Eigen::Dynamic> im = -(row * basis.sin_table().mat());
  out.vec() = (re.array().square() + im.array().square() + S(kDftMagnitudeEps)).sqrt();
  return out;
}

/// Differentiable real-DFT magnitude: input is a length-n signal, output the
/// n/2+1 magnitude bins sqrt(re^2 + im^2 + 1e-12). The epsilon keeps the
/// gradient defined at zero magnitude.
template <typename S>
VarT<S> dft_magnitude(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  const int n = x.value().size();
  if (n < 2) throw ParameterError("dft_magnitude: signal length must be >= 2");
  const DftBasisT<S>& basis = DftBasisT<S>::shared(n);
  const int bins = basis.bins();

  TensorT<S> re = TensorT<S>::vector(bins);
  TensorT<S> im = TensorT<S>::vector(bins);
  auto row = x.value().vec().transpose();
  re.vec().transpose() = row * basis.cos_table().mat();
  im.vec().transpose() = -(row * basis.sin_table().mat());

  TensorT<S> out = TensorT<S>::vector(bins);
  out.vec() = (re.vec().array().square() + im.vec().array().square() + S(kDftMagnitudeEps)).sqrt();

  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, re, im, n](GraphT<S>& gr, int self) {
                  if (!gr.node(xi).requires_grad) return;
                  const DftBasisT<S>& b = DftBasisT<S>::shared(n);
                  const auto& mag = gr.node(self).value.vec();
                  const auto& go = gr.node(self).grad.vec();
                  // d mag / d re = re / mag, d mag / d im = im / mag
                  Eigen::Matrix<S, Eigen::Dynamic, 1> u =
                      (go.array() * re.vec().array() / mag.array()).matrix();
                  Eigen::Matrix<S, Eigen::Dynamic, 1> v =
                      (go.array() * im.vec().array() / mag.array()).matrix();
                  Eigen::Matrix<S, Eigen::Dynamic, 1> gx =
                      b.cos_table().mat() * u - b.sin_table().mat() * v;
                  gr.accumulate(xi, gx.transpose());
                },
                "dft_magnitude");
}

}  // namespace fhrformer
