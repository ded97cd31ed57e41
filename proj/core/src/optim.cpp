#include "xmodal/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace xmodal {

template <typename T>
Adam<T>::Adam(const ParameterSet<T>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(params), v_(params) {}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params, const GradientSet<T>& grads, double lr) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw std::invalid_argument("Adam: parameter/gradient layout mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params.value(p).values();
    auto g = grads.at(p).values();
    auto m = m_.at(p).values();
    auto v = v_.at(p).values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace xmodal
