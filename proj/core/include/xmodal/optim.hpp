#pragma once

#include <cstddef>

#include "xmodal/autograd.hpp"

namespace xmodal {

// Step schedule: lr_initial for epochs before switch_epoch, lr_after from
// then on. Epochs are zero-based.
struct LrSchedule {
  double lr_initial = 1e-4;
  double lr_after = 1e-5;
  std::size_t switch_epoch = 40;

  double at(std::size_t epoch) const { return epoch < switch_epoch ? lr_initial : lr_after; }
};

// Adam with bias-corrected moments.
template <typename T>
class Adam {
 public:
  Adam(const ParameterSet<T>& params, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step(ParameterSet<T>& params, const GradientSet<T>& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  GradientSet<T> m_, v_;
};

}  // namespace xmodal
