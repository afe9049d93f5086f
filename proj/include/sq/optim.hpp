#pragma once

#include "sq/nn.hpp"

#include <cmath>
#include <vector>

namespace sq {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a parameter struct. Moments are kept in two more instances of
/// the same struct, so the layout always matches.
template <typename T, typename P>
class Adam {
 public:
  Adam(const P& params, AdamConfig cfg) : cfg_(cfg), m_(nn::zeros_like(params)), v_(nn::zeros_like(params)) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return t_; }

  /// Applies one update to the parameters listed in `only` (all when empty).
  void step(P& params, P& grads, const std::vector<std::string>& only_prefixes = {}) {
    ++t_;
    auto p = nn::param_list<T>(params);
    auto g = nn::param_list<T>(grads);
    auto m = nn::param_list<T>(m_);
    auto v = nn::param_list<T>(v_);
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T c1 = T(1) - T(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = T(1) - T(std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = T(cfg_.lr), eps = T(cfg_.eps);
    for (size_t i = 0; i < p.size(); ++i) {
      if (!only_prefixes.empty()) {
        bool hit = false;
        for (const auto& pre : only_prefixes) hit = hit || p[i].first.rfind(pre, 0) == 0;
        if (!hit) continue;
      }
      auto& mm = *m[i].second;
      auto& vv = *v[i].second;
      const auto& gg = *g[i].second;
      mm = b1 * mm + (T(1) - b1) * gg;
      vv = b2 * vv + (T(1) - b2) * gg.cwiseProduct(gg);
      p[i].second->array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
    }
  }

 private:
  AdamConfig cfg_;
  P m_;
  P v_;
  long t_ = 0;
};

}  // namespace sq
