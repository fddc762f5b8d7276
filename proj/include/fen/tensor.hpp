#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace fen {

// Dense 64-bit tensor with flat channel-major storage.
// rank 3 (C,H,W):      index (c*H + y)*W + x
// rank 4 (O,I,kh,kw):  index ((o*I + i)*ky_dim + ky)*kx_dim + kx
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims);

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  int rank() const { return static_cast<int>(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  Eigen::Index size() const { return data_.size(); }

  // rank-3 accessors
  int channels() const { return dims_[0]; }
  int height() const { return dims_[1]; }
  int width() const { return dims_[2]; }

  double& operator()(int c, int y, int x) {
    return data_[(static_cast<Eigen::Index>(c) * dims_[1] + y) * dims_[2] + x];
  }
  double operator()(int c, int y, int x) const {
    return data_[(static_cast<Eigen::Index>(c) * dims_[1] + y) * dims_[2] + x];
  }

  // rank-4 accessors
  double& at4(int o, int i, int ky, int kx) {
    return data_[((static_cast<Eigen::Index>(o) * dims_[1] + i) * dims_[2] + ky) * dims_[3] + kx];
  }
  double at4(int o, int i, int ky, int kx) const {
    return data_[((static_cast<Eigen::Index>(o) * dims_[1] + i) * dims_[2] + ky) * dims_[3] + kx];
  }

  double& operator[](Eigen::Index i) { return data_[i]; }
  double operator[](Eigen::Index i) const { return data_[i]; }

  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
  void set_zero() { data_.setZero(); }
  bool all_finite() const { return data_.isFinite().all(); }

 private:
  std::vector<int> dims_;
  Eigen::ArrayXd data_;
};

struct Parameter {
  Tensor value;
  Tensor grad;
};

// Named parameters with paired gradient buffers. Iteration order is sorted by
// name, which fixes serialization and update order.
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter>;

  // Creates a zero-initialized parameter. Duplicate names are an error.
  Tensor& create(const std::string& name, std::vector<int> dims);

  bool has(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t count() const { return params_.size(); }
  bool empty() const { return params_.empty(); }

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  void zero_grads();

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

}  // namespace fen
