#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/digest.hpp"

namespace abflow {

enum class ScheduleKind { linear, cosine };
enum class Channel { type, pos, ori };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }
inline const char* to_string(Channel c) {
  switch (c) {
    case Channel::type: return "type";
    case Channel::pos: return "pos";
    default: return "ori";
  }
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

/// beta^1..beta^T and alpha_bar^t = prod_{tau <= t} (1 - beta^tau).
/// Timesteps are 1-based; alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(Channel channel, ScheduleKind kind, std::vector<double> beta)
      : channel_(channel), kind_(kind), beta_(std::move(beta)) {
    alpha_bar_.resize(beta_.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0))
        throw std::invalid_argument("schedule: beta must lie in (0, 1)");
      acc *= 1.0 - beta_[i];
      alpha_bar_[i] = acc;
    }
  }

  Channel channel() const { return channel_; }
  ScheduleKind kind() const { return kind_; }
  int T() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : alpha_bar_.at(static_cast<std::size_t>(t - 1));
  }
  const std::vector<double>& betas() const { return beta_; }

  /// Stable digest of the beta values.
  std::string digest() const {
    Fnv1a h;
    h.update(std::span<const double>(beta_));
    return h.hex();
  }

 private:
  Channel channel_ = Channel::pos;
  ScheduleKind kind_ = ScheduleKind::linear;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max,
                                   Channel channel = Channel::pos) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw std::invalid_argument("schedule: need 0 < beta_min <= beta_max < 1");
  std::vector<double> beta(static_cast<std::size_t>(T));
  if (kind == ScheduleKind::linear) {
    for (int t = 1; t <= T; ++t) {
      double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      beta[t - 1] = beta_min + (beta_max - beta_min) * frac;
    }
  } else {
    // cosine alpha_bar with offset s = 0.008, betas clipped to the bounds
    constexpr double s = 0.008;
    auto f = [&](int t) {
      double x = (static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0;
      return std::cos(x) * std::cos(x);
    };
    for (int t = 1; t <= T; ++t) {
      double b = 1.0 - f(t) / f(t - 1);
      beta[t - 1] = std::min(std::max(b, beta_min), beta_max);
    }
  }
  return NoiseSchedule(channel, kind, std::move(beta));
}

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::linear;
  double beta_min = 1e-4;
  double beta_max = 0.05;
};

/// One schedule per diffusion channel, all with the same T.
struct ScheduleSet {
  NoiseSchedule type, pos, ori;
  int T() const { return pos.T(); }
};

inline ScheduleSet make_schedule_set(int T, const ScheduleSpec& type, const ScheduleSpec& pos,
                                     const ScheduleSpec& ori) {
  return {make_schedule(type.kind, T, type.beta_min, type.beta_max, Channel::type),
          make_schedule(pos.kind, T, pos.beta_min, pos.beta_max, Channel::pos),
          make_schedule(ori.kind, T, ori.beta_min, ori.beta_max, Channel::ori)};
}

}  // namespace abflow
