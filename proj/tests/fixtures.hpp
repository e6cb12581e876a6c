#pragma once

// Small random problems shared by the model-level tests.

#include <functional>
#include <vector>

#include "abflow/denoiser.hpp"
#include "abflow/kernels.hpp"
#include "abflow/rng.hpp"
#include "test_util.hpp"

namespace abflow::testing {

inline ArchConfig small_arch() {
  ArchConfig a;
  a.hidden = 12;
  a.knn = 4;
  a.time_dim = 4;
  return a;
}

inline CdrState random_cdr(Rng& rng, int m, double spread = 1.0) {
  CdrState s;
  for (int j = 0; j < m; ++j)
    s.residues.push_back({rng.uniform_int(kNumTypes), spread * Vec3(rng.normal(), rng.normal(), rng.normal()),
                          sample_uniform(rng)});
  return s;
}

inline ComplexContext random_context(Rng& rng, int n, int l = 2) {
  ComplexContext c;
  c.residues = random_cdr(rng, n, 2.0).residues;
  c.cdr_l = l;
  return c;
}

/// init_params with every segment (heads, log_Z) filled with random values.
inline ParamVector random_params(std::uint64_t seed, const ArchConfig& a, double scale = 0.3) {
  ParamVector p = init_params(seed, a);
  Rng rng(seed ^ 0x5eedULL);
  for (const auto& s : p.segments()) {
    if (s.name.rfind("trunk.w", 0) == 0) continue;
    for (std::size_t i = 0; i < s.size(); ++i) p[s.offset + i] = scale * rng.normal();
  }
  return p;
}

using LossBuilder = std::function<ad::Var(const BoundParams&)>;

struct GradCheck {
  double worst_rel = 0.0;
  std::size_t checked = 0;
};

/// Fourth-order central differences on `n` random parameters (plus `extra` indices)
/// against the reverse-mode gradient. Gradients below 1e-5 in magnitude are
/// compared absolutely, since relative error is undefined at exact zeros
/// where the difference quotient is pure rounding noise. The wider stencil
/// keeps rounding error small for losses in the thousands, where a plain
/// two-point quotient at a small step loses most of its digits.
inline GradCheck check_param_gradient(const ParamVector& p, const LossBuilder& build, std::size_t n, Rng& rng,
                                      std::vector<std::size_t> extra = {}, double h = 1e-4) {
  ad::Tape tape;
  BoundParams b = bind(tape, p, true);
  ParamVector g = backprop(tape, b, build(b));
  auto value = [&](const ParamVector& q) {
    ad::Tape t;
    return build(bind(t, q, false)).scalar();
  };
  std::vector<std::size_t> idx = std::move(extra);
  for (std::size_t i = 0; i < n; ++i) idx.push_back(static_cast<std::size_t>(rng.uniform_int(static_cast<int>(p.size()))));
  GradCheck gc;
  for (auto i : idx) {
    auto at = [&](double d) {
      ParamVector q = p;
      q[i] += d;
      return value(q);
    };
    double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    gc.worst_rel = std::max(gc.worst_rel, rel_err(g[i], fd, 1e-5));
    ++gc.checked;
  }
  return gc;
}

}  // namespace abflow::testing
