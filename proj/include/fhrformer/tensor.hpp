#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "fhrformer/errors.hpp"
#include "fhrformer/rng.hpp"

namespace fhrformer {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatrixX<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const MatrixX<S>>;
template <typename S>
using MapVec = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstMapVec = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

/// Dense row-major tensor of rank 1 or 2. Rank-1 tensors are stored as a
/// single row; shape() reports the logical rank.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT vector(int n) { return TensorT(1, n, 1); }
  static TensorT matrix(int rows, int cols) { return TensorT(rows, cols, 2); }

  static TensorT from_vector(const std::vector<S>& v) {
    TensorT t = vector(static_cast<int>(v.size()));
    t.data_ = v;
    return t;
  }

  static TensorT from_rows(std::initializer_list<std::initializer_list<S>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    TensorT t = matrix(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) throw DimensionError("ragged initializer");
      for (S v : row) t.data_[i++] = v;
    }
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int rank() const { return rank_; }
  int size() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  std::vector<int> shape() const {
    if (rank_ == 1) return {cols_};
    return {rows_, cols_};
  }

  bool same_shape(const TensorT& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && rank_ == o.rank_;
  }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& buffer() { return data_; }
  const std::vector<S>& buffer() const { return data_; }

  S& at(int i) { return data_[static_cast<std::size_t>(i)]; }
  S at(int i) const { return data_[static_cast<std::size_t>(i)]; }
  S& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  S at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  MapMat<S> mat() { return MapMat<S>(data_.data(), rows_, cols_); }
  ConstMapMat<S> mat() const { return ConstMapMat<S>(data_.data(), rows_, cols_); }
  MapVec<S> vec() { return MapVec<S>(data_.data(), size()); }
  ConstMapVec<S> vec() const { return ConstMapVec<S>(data_.data(), size()); }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(S(0)); }

  /// Reinterprets the buffer with a new shape; element count must not change.
  TensorT reshaped(int rows, int cols, int rank = 2) const {
    if (rows * cols != size()) throw DimensionError("reshape changes element count");
    TensorT t = *this;
    t.rows_ = rows;
    t.cols_ = cols;
    t.rank_ = rank;
    return t;
  }

  bool all_finite() const { return vec().allFinite(); }

  void fill_uniform(Rng& rng, S lo, S hi) {
    for (auto& v : data_) v = static_cast<S>(rng.uniform(lo, hi));
  }
  void fill_normal(Rng& rng, S mean, S stddev) {
    for (auto& v : data_) v = static_cast<S>(rng.normal(mean, stddev));
  }

  std::string shape_str() const {
    if (rank_ == 1) return "[" + std::to_string(cols_) + "]";
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

 private:
  TensorT(int rows, int cols, int rank) : rows_(rows), cols_(cols), rank_(rank) {
    if (rows < 0 || cols < 0) throw DimensionError("negative dimension");
    data_.assign(static_cast<std::size_t>(rows) * cols, S(0));
  }

  int rows_ = 0;
  int cols_ = 0;
  int rank_ = 2;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

/// Named learnable array with its accumulated gradient.
template <typename S>
struct ParameterT {
  std::string name;
  TensorT<S> value;
  TensorT<S> grad;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<S> v) : name(std::move(n)), value(std::move(v)) {
    grad = value;
    grad.set_zero();
  }

  void zero_grad() { grad.set_zero(); }
};

using Parameter = ParameterT<float>;

}  // namespace fhrformer
