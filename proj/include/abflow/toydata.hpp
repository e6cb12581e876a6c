#pragma once

// Procedural desk-scale complexes: a globular "antigen" blob and a heavy
// chain whose CDR-H3 loop arcs from two framework anchors toward it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/reward.hpp"
#include "abflow/rng.hpp"

namespace abflow {

struct ToyDataConfig {
  int complexes = 64;
  int antigen_size = 40;
  double antigen_radius = 9.0;
  int framework = 8;  ///< residues on each side of the loop
  int cdr_min = 6;
  int cdr_max = 10;
  double standoff = 9.0;         ///< initial separation before the contact search
  double contact_min = 4.5;      ///< closest loop-antigen distance range
  double contact_max = 6.0;
  double hydrophobic_max = 0.6;  ///< upper bound of the per-complex hydrophobic fraction

  void validate() const {
    if (complexes < 0) throw std::invalid_argument("toy: complexes must be >= 0");
    if (antigen_size < 1 || framework < 1) throw std::invalid_argument("toy: antigen_size and framework must be >= 1");
    if (cdr_min < 1 || cdr_max < cdr_min) throw std::invalid_argument("toy: need 1 <= cdr_min <= cdr_max");
    if (!(antigen_radius > 0.0) || !(standoff > 0.0)) throw std::invalid_argument("toy: radii must be positive");
    if (!(contact_min > 0.0 && contact_min <= contact_max))
      throw std::invalid_argument("toy: need 0 < contact_min <= contact_max");
    if (!(hydrophobic_max >= 0.0 && hydrophobic_max <= 1.0))
      throw std::invalid_argument("toy: hydrophobic_max must lie in [0, 1]");
  }
};

inline constexpr double kBondLength = 3.8;  ///< consecutive C-alpha spacing

namespace detail {

inline Vec3 random_unit(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  return v / v.norm();
}

/// Frame with x along `tangent` and z as close to `up` as possible.
inline Quaternion tangent_frame(const Vec3& tangent, const Vec3& up) {
  Vec3 x = tangent.normalized();
  Vec3 z = up - up.dot(x) * x;
  if (z.norm() < 1e-6) z = x.unitOrthogonal();
  z.normalize();
  Mat3 m;
  m.col(0) = x;
  m.col(1) = z.cross(x);
  m.col(2) = z;
  return Rotation::from_matrix(m).quaternion();
}

inline char draw_type(Rng& rng, std::string_view pool) {
  return pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
}

}  // namespace detail

/// One complex. Chains: "H" for framework + CDR, "A" for the antigen.
inline ComplexRecord make_toy_complex(const ToyDataConfig& cfg, std::uint64_t seed, int index,
                                      const EnergyModel& model) {
  Rng rng = make_rng(seed, {stream::kToyData, static_cast<std::uint64_t>(index)});
  ComplexRecord rec;
  char id[32];
  std::snprintf(id, sizeof id, "toy%03d", index);
  rec.id = id;

  // antigen: rejection sampling in a ball with a minimum spacing
  std::vector<Vec3> ag;
  for (int tries = 0; static_cast<int>(ag.size()) < cfg.antigen_size && tries < 200000; ++tries) {
    Vec3 p(rng.uniform() * 2 - 1, rng.uniform() * 2 - 1, rng.uniform() * 2 - 1);
    if (p.squaredNorm() > 1.0) continue;
    p *= cfg.antigen_radius;
    bool ok = std::all_of(ag.begin(), ag.end(), [&](const Vec3& q) { return (p - q).norm() >= kBondLength; });
    if (ok) ag.push_back(p);
  }

  // loop: the major arc of a circle through both anchors, with one bond
  // length between consecutive residues, tilted by a random angle about the
  // approach axis
  const int m = cfg.cdr_min + rng.uniform_int(cfg.cdr_max - cfg.cdr_min + 1);
  const Vec3 up = Vec3::UnitZ();  // antibody approaches the antigen from below
  const double tilt = 0.4 * (rng.uniform() - 0.5);
  const Vec3 lateral(std::cos(tilt), std::sin(tilt), 0.0);
  const double chord = 5.0 + 2.0 * rng.uniform();
  // solve rho * (2 pi - 2 asin(chord / 2 rho)) = (m + 1) * bond by bisection
  const double arc = (m + 1) * kBondLength;
  double lo = 0.5 * chord, hi = arc;
  for (int it = 0; it < 200; ++it) {
    double rho = 0.5 * (lo + hi);
    double len = rho * (2 * std::numbers::pi - 2 * std::asin(std::min(1.0, chord / (2 * rho))));
    (len > arc ? hi : lo) = rho;
  }
  const double rho = 0.5 * (lo + hi);
  const double half = std::asin(std::min(1.0, chord / (2 * rho)));
  const Vec3 center = std::sqrt(rho * rho - 0.25 * chord * chord) * up;
  auto on_circle = [&](double phi) {
    // phi = 0 at anchor a, 2 pi - 2 half at anchor b, passing over the top
    double ang = -std::numbers::pi / 2 - half - phi;
    return Vec3(center + rho * (std::cos(ang) * lateral + std::sin(ang) * up));
  };
  const double sweep = 2 * std::numbers::pi - 2 * half;
  std::vector<Vec3> pos;
  const Vec3 a = on_circle(0.0), b = on_circle(sweep);
  const Vec3 down_a = (-0.8 * up - 0.6 * lateral).normalized(), down_b = (-0.8 * up + 0.6 * lateral).normalized();
  for (int k = cfg.framework; k >= 1; --k) pos.push_back(a + kBondLength * k * down_a + 0.3 * detail::random_unit(rng));
  pos.push_back(a);
  for (int j = 1; j <= m; ++j) pos.push_back(on_circle(sweep * j / (m + 1)) + 0.3 * detail::random_unit(rng));
  pos.push_back(b);
  for (int k = 1; k <= cfg.framework; ++k) pos.push_back(b + kBondLength * k * down_b + 0.3 * detail::random_unit(rng));

  // slide the antibody along the approach axis until the closest loop to
  // antigen distance equals a random contact distance
  double min_d = std::numeric_limits<double>::infinity();
  Vec3 shift = -(cfg.antigen_radius + 2.0 * rho + cfg.standoff) * up;
  for (int j = cfg.framework + 1; j <= cfg.framework + m; ++j)
    for (const Vec3& q : ag) min_d = std::min(min_d, (pos[static_cast<std::size_t>(j)] + shift - q).norm());
  const double target = cfg.contact_min + (cfg.contact_max - cfg.contact_min) * rng.uniform();
  for (int iter = 0; iter < 60 && std::isfinite(min_d); ++iter) {
    // move up by the excess gap; the closest pair can change, so iterate
    double excess = min_d - target;
    if (std::abs(excess) < 1e-6) break;
    shift += excess * 0.5 * up;
    min_d = std::numeric_limits<double>::infinity();
    for (int j = cfg.framework + 1; j <= cfg.framework + m; ++j)
      for (const Vec3& q : ag) min_d = std::min(min_d, (pos[static_cast<std::size_t>(j)] + shift - q).norm());
  }
  for (auto& p : pos) p += shift;

  // types: the loop mixes a polar pool with a hydrophobic one at a
  // per-complex rate, which spreads the reference energies
  constexpr std::string_view polar = "GSYDNTGSYNTSDEKR";
  constexpr std::string_view hydrophobic = "ILVFWMA";
  const double hfrac = cfg.hydrophobic_max * rng.uniform();
  const int n_ab = static_cast<int>(pos.size());
  for (int i = 0; i < n_ab; ++i) {
    ResidueRecord r;
    r.chain = "H";
    r.pos = pos[static_cast<std::size_t>(i)];
    bool in_loop = i > cfg.framework && i <= cfg.framework + m;
    if (in_loop)
      r.aa = rng.uniform() < hfrac ? detail::draw_type(rng, hydrophobic) : detail::draw_type(rng, polar);
    else
      r.aa = type_letter(rng.uniform_int(kNumTypes));
    Vec3 prev = pos[static_cast<std::size_t>(std::max(i - 1, 0))];
    Vec3 next = pos[static_cast<std::size_t>(std::min(i + 1, n_ab - 1))];
    r.quat = detail::tangent_frame(next - prev, up);
    rec.residues.push_back(r);
  }
  // the antigen surface is hydrophobic-rich, as epitopes tend to be
  for (const Vec3& p : ag) {
    ResidueRecord r;
    r.chain = "A";
    r.aa = rng.uniform() < 0.5 ? detail::draw_type(rng, hydrophobic) : type_letter(rng.uniform_int(kNumTypes));
    r.pos = p;
    r.quat = sample_uniform(rng).quaternion();
    rec.residues.push_back(r);
  }

  recenter(rec);
  rec.cdr_regions["H3"] = {cfg.framework + 1, m};
  RegionView v = extract_region(rec, "H3", 1.0);
  rec.ref_energy["H3"] = energy(v.s0_global, v.context_global, model);
  validate_record(rec);
  return rec;
}

inline std::vector<ComplexRecord> make_toy_dataset(const ToyDataConfig& cfg, std::uint64_t seed,
                                                   const EnergyModel& model) {
  cfg.validate();
  std::vector<ComplexRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.complexes));
  for (int i = 0; i < cfg.complexes; ++i) out.push_back(make_toy_complex(cfg, seed, i, model));
  return out;
}

}  // namespace abflow
