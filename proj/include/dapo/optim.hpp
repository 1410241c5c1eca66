#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dapo/tensor.hpp"

namespace dapo {

// Adam with bias correction. Parameter order is fixed at registration and
// moments serialize into checkpoints.
class Adam {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void register_params(const std::vector<Tensor>& params) {
    params_ = params;
    m_.clear();
    v_.clear();
    for (const Tensor& p : params_) {
      m_.emplace_back(p.data().size(), 0.0);
      v_.emplace_back(p.data().size(), 0.0);
    }
    step_count_ = 0;
  }

  // A parameter without a populated gradient this step contributes zero.
  void step() {
    ++step_count_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const std::vector<double>* g = p.has_grad() ? &p.grad() : nullptr;
      for (std::size_t k = 0; k < m.size(); ++k) {
        double gk = g ? (*g)[k] : 0.0;
        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
        p.data()[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  long step_count() const { return step_count_; }
  void set_step_count(long n) { step_count_ = n; }
  std::vector<std::vector<double>>& moments_m() { return m_; }
  std::vector<std::vector<double>>& moments_v() { return v_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  long step_count_ = 0;
};

}  // namespace dapo
