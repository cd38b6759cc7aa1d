#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mv3d/core/tensor.hpp"

namespace mv3d {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moments are allocated on the first step and keep the
/// shapes of the parameters they track; the parameter list must not change between steps.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }

  void step(const std::vector<BasicTensor<T>*>& params, const std::vector<BasicTensor<T>>& grads) {
    MV3D_REQUIRE(params.size() == grads.size(), "AdamW: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->shape(), T(0));
        v_.emplace_back(p->shape(), T(0));
      }
    }
    MV3D_REQUIRE(m_.size() == params.size(), "AdamW: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      MV3D_REQUIRE(params[i]->shape() == grads[i].shape() && params[i]->shape() == m_[i].shape(),
                   "AdamW: shape mismatch for parameter " + std::to_string(i) + ": " +
                       shape_str(params[i]->shape()) + " vs grad " + shape_str(grads[i].shape()));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = grads[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        double pj = p[j];
        const double gj = g[j];
        pj -= cfg_.lr * cfg_.weight_decay * pj;
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        pj -= cfg_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        p[j] = static_cast<T>(pj);
      }
    }
  }

  const std::vector<BasicTensor<T>>& first_moments() const { return m_; }
  const std::vector<BasicTensor<T>>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<BasicTensor<T>> m_, v_;
};

}  // namespace mv3d
