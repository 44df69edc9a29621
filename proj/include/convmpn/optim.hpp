#pragma once

// Plain SGD with gradient accumulation: callers run backward() once per batch
// and invoke step() every accumulation_count batches. The update divides the
// accumulated gradient by accumulation_count and clears it.

#include <stdexcept>
#include <string>

#include "convmpn/layers.hpp"
#include "convmpn/tensor.hpp"

namespace convmpn {

template <class T>
class Sgd {
 public:
  Sgd(T learning_rate, int accumulation_count)
      : lr_(learning_rate), accum_(accumulation_count) {
    if (!(learning_rate > T(0))) throw std::invalid_argument("Sgd: learning_rate must be > 0");
    if (accumulation_count < 1) throw std::invalid_argument("Sgd: accumulation_count must be >= 1");
  }

  T learning_rate() const { return lr_; }
  void set_learning_rate(T lr) { lr_ = lr; }
  int accumulation_count() const { return accum_; }

  void step(ParamRegistry<T>& reg) {
    for (auto& e : reg.params) {
      if (!e.trainable) continue;
      if (!e.tensor.has_grad())
        throw std::runtime_error("Sgd: missing gradient for parameter " + e.name);
    }
    const T scale = lr_ / static_cast<T>(accum_);
    for (auto& e : reg.params) {
      if (!e.trainable) continue;
      T* p = e.tensor.data();
      const auto& g = e.tensor.grad_view();
      for (size_t i = 0; i < g.size(); ++i) p[i] -= scale * g[i];
      e.tensor.zero_grad();
    }
  }

  void zero_grad(ParamRegistry<T>& reg) {
    for (auto& e : reg.params) e.tensor.zero_grad();
  }

 private:
  T lr_;
  int accum_;
};

}  // namespace convmpn
