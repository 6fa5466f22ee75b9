#pragma once

#include <cmath>
#include <map>
#include <string>

#include "cmf/tensor.hpp"
#include "cmf/util.hpp"

namespace cmf {

// Adam with bias correction. State slots are created lazily per parameter
// name and must keep their shape across steps.
template <class S>
class Adam {
 public:
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  Adam() = default;
  explicit Adam(double lr_in) : lr(lr_in) {}

  int64_t steps() const { return t_; }

  void step(std::map<std::string, Tensor<S>>& params,
            const std::map<std::string, Tensor<S>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) fail("Adam: no gradient for parameter '", name, "'");
      const Tensor<S>& g = git->second;
      if (!g.same_shape(p))
        fail("Adam: gradient shape ", shape_str(g.shape()), " for '", name,
             "' does not match parameter ", shape_str(p.shape()));
      Tensor<S>& m = slot(m_, name, p.shape());
      Tensor<S>& v = slot(v_, name, p.shape());
      for (int64_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * gj;
        const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p[j] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

  void reset() {
    m_.clear();
    v_.clear();
    t_ = 0;
  }

 private:
  std::map<std::string, Tensor<S>> m_, v_;
  int64_t t_ = 0;

  Tensor<S>& slot(std::map<std::string, Tensor<S>>& store, const std::string& name,
                  const Shape& shape) {
    auto it = store.find(name);
    if (it == store.end())
      it = store.emplace(name, Tensor<S>::zeros(shape)).first;
    else if (it->second.shape() != shape)
      fail("Adam: parameter '", name, "' changed shape");
    return it->second;
  }
};

}  // namespace cmf
