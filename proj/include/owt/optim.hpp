#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "owt/errors.hpp"
#include "owt/params.hpp"

namespace owt {

// Betas, eps and weight decay follow MAE's pretraining recipe.
struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Moments live in double so that long runs do not drift with float rounding.
struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
  AdamWOptions options;
};

template <typename T>
class BasicAdamW {
 public:
  BasicAdamW(BasicParameterSet<T> params, AdamWOptions options = {}) : params_(std::move(params)) {
    state_.options = options;
    for (const auto& p : params_.entries()) {
      state_.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state_.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  // One decoupled-weight-decay Adam update at learning rate lr_now.
  // Gradients are read, never cleared.
  void step(double lr_now) {
    for (const auto& p : params_.entries()) {
      if (!p.tensor.requires_grad()) {
        throw ContractError("adamw_step: parameter '" + p.name + "' has no gradient buffer");
      }
    }
    ++state_.step;
    const auto& o = state_.options;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state_.step));
    auto& entries = params_.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& tensor = entries[k].tensor;
      auto value = tensor.mutable_data();
      auto grad = tensor.grad();
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      const double decay = entries[k].decay ? o.weight_decay : 0.0;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i];
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double w = value[i];
        w -= lr_now * decay * w;
        w -= lr_now * mhat / (std::sqrt(vhat) + o.eps);
        value[i] = static_cast<T>(w);
      }
    }
  }

  void zero_grad() { params_.zero_grad(); }

  const OptimizerState& state() const { return state_; }
  const BasicParameterSet<T>& params() const { return params_; }

 private:
  BasicParameterSet<T> params_;
  OptimizerState state_;
};

using AdamW = BasicAdamW<float>;

}  // namespace owt
