#include "fen/tensor.hpp"

#include <stdexcept>

namespace fen {

Tensor::Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
  Eigen::Index total = 1;
  for (int d : dims_) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
    total *= d;
  }
  data_ = Eigen::ArrayXd::Zero(dims_.empty() ? 0 : total);
}

Tensor& ParameterStore::create(const std::string& name, std::vector<int> dims) {
  if (has(name)) throw std::invalid_argument("ParameterStore: duplicate parameter " + name);
  Parameter p;
  p.value = Tensor(dims);
  p.grad = Tensor(dims);
  auto [it, ok] = params_.emplace(name, std::move(p));
  (void)ok;
  return it->second.value;
}

Tensor& ParameterStore::value(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParameterStore: unknown parameter " + name);
  return it->second.value;
}

const Tensor& ParameterStore::value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParameterStore: unknown parameter " + name);
  return it->second.value;
}

Tensor& ParameterStore::grad(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParameterStore: unknown parameter " + name);
  return it->second.grad;
}

const Tensor& ParameterStore::grad(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParameterStore: unknown parameter " + name);
  return it->second.grad;
}

void ParameterStore::zero_grads() {
  for (auto& [name, p] : params_) p.grad.set_zero();
}

}  // namespace fen
