#pragma once

// Synthetic contact-energy oracle and the precomputed reward cache.
//
// Pair term for a CDR residue i and a context residue k at distance r < r_c:
//   affinity(d_i, d_k) * well(r) + clash_weight * max(0, r_x - r)^2
// with well(r) = depth * (1 - u^2)^2, u = (r - r_opt) / half_width,
// r_opt = (r_x + r_c) / 2 and half_width = (r_c - r_x) / 2. The well is a
// smooth bump equal to `depth` at r_opt and zero with zero slope at r_x and
// r_c. Orientation does not enter.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/digest.hpp"
#include "abflow/kernels.hpp"
#include "abflow/objectives.hpp"
#include "abflow/rng.hpp"

namespace abflow {

inline constexpr const char* kRewardSchema = "abflow.rewards/1";

struct EnergyModel {
  double well_depth = 1.0;
  double contact_radius = 8.0;
  double clash_radius = 3.0;
  double clash_weight = 10.0;
  std::array<double, kNumTypes * kNumTypes> affinity{};

  double optimum() const { return 0.5 * (clash_radius + contact_radius); }
  double pair_affinity(int a, int b) const { return affinity[static_cast<std::size_t>(a * kNumTypes + b)]; }

  double well(double r) const {
    double half = 0.5 * (contact_radius - clash_radius);
    double u = (r - optimum()) / half;
    if (std::abs(u) >= 1.0) return 0.0;
    double s = 1.0 - u * u;
    return well_depth * s * s;
  }

  double pair_energy(int a, int b, double r) const {
    if (r >= contact_radius) return 0.0;
    double e = pair_affinity(a, b) * well(r);
    if (r < clash_radius) e += clash_weight * (clash_radius - r) * (clash_radius - r);
    return e;
  }

  void validate() const {
    if (!(clash_radius > 0.0 && clash_radius < contact_radius))
      throw std::invalid_argument("energy: need 0 < clash_radius < contact_radius");
    if (!(well_depth >= 0.0) || !(clash_weight >= 0.0))
      throw std::invalid_argument("energy: well_depth and clash_weight must be >= 0");
    for (int a = 0; a < kNumTypes; ++a)
      for (int b = 0; b < kNumTypes; ++b)
        if (std::abs(pair_affinity(a, b) - pair_affinity(b, a)) > 1e-12)
          throw std::invalid_argument("energy: affinity matrix is not symmetric");
  }

  std::string digest() const {
    Fnv1a h;
    h.update(std::string_view("contact-v1"));
    for (double x : {well_depth, contact_radius, clash_radius, clash_weight}) h.update(x);
    h.update(std::span<const double>(affinity));
    return h.hex();
  }
};

/// Hydropathy-driven affinities with opposite-charge attraction and a small
/// fixed symmetric perturbation. Values lie roughly in [-1, 1]; negative is
/// favorable.
inline EnergyModel default_energy_model() {
  // Kyte-Doolittle hydropathy in alphabet order ACDEFGHIKLMNPQRSTWYV
  static constexpr std::array<double, kNumTypes> hydro{1.8,  2.5,  -3.5, -3.5, 2.8,  -0.4, -3.2,
                                                       4.5,  -3.9, 3.8,  1.9,  -3.5, -1.6, -3.5,
                                                       -4.5, -0.8, -0.7, -0.9, -1.3, 4.2};
  static constexpr std::array<double, kNumTypes> charge{0, 0, -1, -1, 0, 0, 0.5, 0, 1, 0,
                                                        0, 0, 0,  0,  1, 0, 0,   0, 0, 0};
  EnergyModel m;
  for (int a = 0; a < kNumTypes; ++a)
    for (int b = a; b < kNumTypes; ++b) {
      double h = -0.25 * (hydro[static_cast<std::size_t>(a)] + hydro[static_cast<std::size_t>(b)]) / 4.5;
      double q = 0.5 * charge[static_cast<std::size_t>(a)] * charge[static_cast<std::size_t>(b)];
      std::uint64_t bits = splitmix64(static_cast<std::uint64_t>(a * kNumTypes + b) + 0x9e37ULL);
      double noise = 0.1 * (static_cast<double>(bits >> 11) * 0x1.0p-53 - 0.5);
      double v = h + q + noise;
      m.affinity[static_cast<std::size_t>(a * kNumTypes + b)] = v;
      m.affinity[static_cast<std::size_t>(b * kNumTypes + a)] = v;
    }
  return m;
}

/// Interface energy between the CDR and the frozen context (angstrom frame).
/// This is bound minus unbound: with the CDR at infinity every pair drops.
inline double energy(const CdrState& cdr, const ComplexContext& context, const EnergyModel& model) {
  double e = 0.0;
  const double rc2 = model.contact_radius * model.contact_radius;
  for (const auto& a : cdr.residues)
    for (const auto& b : context.residues) {
      double d2 = (a.pos - b.pos).squaredNorm();
      if (d2 < rc2) e += model.pair_energy(a.dtype, b.dtype, std::sqrt(d2));
    }
  return e;
}

/// Clash penalty among CDR residues that are not sequence neighbours.
inline double intra_cdr_clash(const CdrState& cdr, const EnergyModel& model) {
  double e = 0.0;
  for (std::size_t i = 0; i < cdr.size(); ++i)
    for (std::size_t j = i + 2; j < cdr.size(); ++j) {
      double r = (cdr.residues[i].pos - cdr.residues[j].pos).norm();
      if (r < model.clash_radius) e += model.clash_weight * (model.clash_radius - r) * (model.clash_radius - r);
    }
  return e;
}

struct EnergyTerms {
  double dg = 0.0;       ///< binding energy
  double e_total = 0.0;  ///< dg plus intra-CDR clash
};

inline EnergyTerms energy_terms(const CdrState& cdr, const ComplexContext& context, const EnergyModel& model) {
  double dg = energy(cdr, context, model);
  return {dg, dg + intra_cdr_clash(cdr, model)};
}

// ---- reward cache -----------------------------------------------------------

struct RewardRecord {
  std::string id;
  std::string region;
  double energy = 0.0;
  double reward = 0.0;
  double alpha = 0.0;
  std::string model_digest;
};

struct RewardCache {
  double alpha = 0.0;
  std::string model_digest;
  std::vector<RewardRecord> records;  ///< sorted by (id, region)
  int skipped = 0;                    ///< records lacking a requested region

  const RewardRecord* find(const std::string& id, const std::string& region) const {
    auto it = std::lower_bound(records.begin(), records.end(), std::make_pair(id, region),
                               [](const RewardRecord& r, const std::pair<std::string, std::string>& k) {
                                 return std::tie(r.id, r.region) < std::tie(k.first, k.second);
                               });
    if (it == records.end() || it->id != id || it->region != region) return nullptr;
    return &*it;
  }
};

inline RewardCache precompute_rewards(const std::vector<ComplexRecord>& dataset, const std::vector<std::string>& regions,
                                      const EnergyModel& model, double alpha) {
  model.validate();
  RewardCache cache;
  cache.alpha = alpha;
  cache.model_digest = model.digest();
  for (const auto& rec : dataset)
    for (const auto& region : regions) {
      if (!rec.cdr_regions.count(region)) {
        ++cache.skipped;
        continue;
      }
      // energies are translation and rotation invariant, so the model frame
      // scale does not matter here
      RegionView v = extract_region(rec, region, 1.0);
      double e = energy(v.s0_global, v.context_global, model);
      RewardValue r = reward_transform(e, alpha);
      cache.records.push_back({rec.id, region, e, r.reward, alpha, cache.model_digest});
    }
  std::sort(cache.records.begin(), cache.records.end(), [](const RewardRecord& a, const RewardRecord& b) {
    return std::tie(a.id, a.region) < std::tie(b.id, b.region);
  });
  return cache;
}

inline std::string serialize_rewards(const RewardCache& c) {
  std::string out =
      json{{"schema", kRewardSchema}, {"alpha", c.alpha}, {"model_digest", c.model_digest}, {"skipped", c.skipped}}
          .dump() +
      "\n";
  for (const auto& r : c.records)
    out += json{{"id", r.id},         {"region", r.region}, {"energy", r.energy}, {"reward", r.reward},
                {"alpha", r.alpha}, {"model_digest", r.model_digest}}
               .dump() +
           "\n";
  return out;
}

inline RewardCache parse_rewards_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  RewardCache c;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (!header) {
        if (j.value("schema", "") != kRewardSchema) throw DataError("missing or unsupported reward cache header");
        c.alpha = j.at("alpha").get<double>();
        c.model_digest = j.at("model_digest").get<std::string>();
        c.skipped = j.value("skipped", 0);
        header = true;
        continue;
      }
      c.records.push_back({j.at("id").get<std::string>(), j.at("region").get<std::string>(),
                           j.at("energy").get<double>(), j.at("reward").get<double>(), j.at("alpha").get<double>(),
                           j.at("model_digest").get<std::string>()});
    } catch (const json::exception& e) {
      throw DataError("reward cache line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("reward cache line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) throw DataError("reward cache has no header line");
  return c;
}

/// Loads a cache and rejects it when it was built for another model or alpha.
inline RewardCache load_rewards(const std::filesystem::path& path, const EnergyModel& model, double alpha) {
  RewardCache c = parse_rewards_text(read_file(path));
  if (c.model_digest != model.digest())
    throw DataError("reward cache '" + path.string() + "' is stale: energy model digest " + c.model_digest +
                    " != " + model.digest());
  if (c.alpha != alpha)
    throw DataError("reward cache '" + path.string() + "' was built with alpha " + std::to_string(c.alpha));
  return c;
}

}  // namespace abflow
