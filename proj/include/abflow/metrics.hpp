#pragma once

// Evaluation metrics and the per-complex report.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/reward.hpp"

namespace abflow {

inline constexpr const char* kEvalSchema = "abflow.eval/1";

/// Fraction of positions with matching residue letters.
inline double aar(const std::string& generated, const std::string& reference) {
  if (generated.size() != reference.size()) throw std::invalid_argument("aar: sequence lengths differ");
  if (reference.empty()) throw std::invalid_argument("aar: empty sequences");
  std::size_t same = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) same += generated[i] == reference[i];
  return static_cast<double>(same) / static_cast<double>(reference.size());
}

/// Rotation R and translation c minimizing sum ||R a_i + c - b_i||^2 (Kabsch).
inline std::pair<Mat3, Vec3> kabsch(std::span<const Vec3> a, std::span<const Vec3> b) {
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca += a[i];
    cb += b[i];
  }
  ca /= static_cast<double>(a.size());
  cb /= static_cast<double>(b.size());
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += (a[i] - ca) * (b[i] - cb).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return {r, cb - r * ca};
}

/// Root-mean-square deviation in the shared frame, or after optimal rigid
/// superposition of `generated` onto `reference` when `align` is set.
inline double rmsd(std::span<const Vec3> generated, std::span<const Vec3> reference, bool align = false) {
  if (generated.size() != reference.size()) throw std::invalid_argument("rmsd: lengths differ");
  if (reference.empty()) throw std::invalid_argument("rmsd: empty structures");
  Mat3 r = Mat3::Identity();
  Vec3 c = Vec3::Zero();
  if (align) std::tie(r, c) = kabsch(generated, reference);
  double s = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) s += (r * generated[i] + c - reference[i]).squaredNorm();
  return std::sqrt(s / static_cast<double>(reference.size()));
}

/// Fraction of samples with strictly lower energy than the reference.
inline double imp(std::span<const double> energies, double reference) {
  if (energies.empty()) throw std::invalid_argument("imp: no samples");
  std::size_t better = 0;
  for (double e : energies) better += e < reference;
  return static_cast<double>(better) / static_cast<double>(energies.size());
}

struct Top1 {
  std::size_t index = 0;
  double e_total = 0.0;
  double dg = 0.0;
};

/// argmin of e_total + dg, ties to the lowest index.
inline Top1 top1(std::span<const double> e_total, std::span<const double> dg) {
  if (e_total.empty() || e_total.size() != dg.size()) throw std::invalid_argument("top1: need N >= 1 paired scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < e_total.size(); ++i)
    if (e_total[i] + dg[i] < e_total[best] + dg[best]) best = i;
  return {best, e_total[best], dg[best]};
}

struct ComplexEval {
  std::string id;
  std::string region;
  std::size_t n = 0;
  double aar = 0.0;   ///< mean over samples
  double rmsd = 0.0;  ///< mean over samples
  double ref_energy = 0.0;
  std::vector<double> energies;
  double mean_energy = 0.0;
  double imp = 0.0;
  Top1 top;
};

struct EvalReport {
  std::vector<ComplexEval> items;  ///< sorted by (id, region)
  std::vector<std::string> errors;
  // means over items
  double aar = 0.0;
  double rmsd = 0.0;
  double imp = 0.0;
  double mean_energy = 0.0;
  double top1_dg = 0.0;
};

inline void aggregate(EvalReport& rep) {
  rep.aar = rep.rmsd = rep.imp = rep.mean_energy = rep.top1_dg = 0.0;
  if (rep.items.empty()) return;
  for (const auto& it : rep.items) {
    rep.aar += it.aar;
    rep.rmsd += it.rmsd;
    rep.imp += it.imp;
    rep.mean_energy += it.mean_energy;
    rep.top1_dg += it.top.dg;
  }
  double n = static_cast<double>(rep.items.size());
  rep.aar /= n;
  rep.rmsd /= n;
  rep.imp /= n;
  rep.mean_energy /= n;
  rep.top1_dg /= n;
}

/// Scores samples against the dataset references. Samples whose complex or
/// region is missing are reported in `errors` and skipped.
inline EvalReport evaluate(const std::vector<SampleRecord>& samples, const std::vector<ComplexRecord>& dataset,
                           const EnergyModel& model, bool align = false) {
  std::map<std::string, const ComplexRecord*> by_id;
  for (const auto& r : dataset) by_id[r.id] = &r;
  std::map<std::pair<std::string, std::string>, std::vector<const SampleRecord*>> groups;
  EvalReport rep;
  for (const auto& s : samples) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) {
      rep.errors.push_back("sample for unknown complex '" + s.id + "'");
      continue;
    }
    if (!it->second->cdr_regions.count(s.region)) {
      rep.errors.push_back("complex '" + s.id + "' has no region " + s.region);
      continue;
    }
    groups[{s.id, s.region}].push_back(&s);
  }
  for (const auto& [key, group] : groups) {
    const ComplexRecord& rec = *by_id.at(key.first);
    RegionView v = extract_region(rec, key.second, 1.0);
    std::string ref_seq = sequence_of(v.s0_global);
    std::vector<Vec3> ref_pos;
    for (const auto& r : v.s0_global.residues) ref_pos.push_back(r.pos);
    ComplexEval ce;
    ce.id = key.first;
    ce.region = key.second;
    auto e = rec.ref_energy.find(key.second);
    ce.ref_energy = e != rec.ref_energy.end() ? e->second : energy(v.s0_global, v.context_global, model);
    std::vector<double> e_total;
    bool ok = true;
    for (const SampleRecord* s : group) {
      if (s->sequence.size() != ref_seq.size()) {
        rep.errors.push_back("sample for '" + ce.id + "' " + ce.region + " has the wrong length");
        ok = false;
        break;
      }
      ce.aar += aar(s->sequence, ref_seq);
      ce.rmsd += rmsd(s->positions, ref_pos, align);
      ce.energies.push_back(s->energy);
      e_total.push_back(s->e_total);
    }
    if (!ok) continue;
    ce.n = group.size();
    ce.aar /= static_cast<double>(ce.n);
    ce.rmsd /= static_cast<double>(ce.n);
    for (double x : ce.energies) ce.mean_energy += x;
    ce.mean_energy /= static_cast<double>(ce.n);
    ce.imp = imp(ce.energies, ce.ref_energy);
    ce.top = top1(e_total, ce.energies);
    rep.items.push_back(std::move(ce));
  }
  aggregate(rep);
  return rep;
}

inline std::string serialize_eval(const EvalReport& rep) {
  std::string out = json{{"schema", kEvalSchema},
                         {"complexes", rep.items.size()},
                         {"aar", rep.aar},
                         {"rmsd", rep.rmsd},
                         {"imp", rep.imp},
                         {"mean_energy", rep.mean_energy},
                         {"top1_dg", rep.top1_dg},
                         {"errors", rep.errors}}
                        .dump() +
                    "\n";
  for (const auto& it : rep.items)
    out += json{{"id", it.id},
                {"region", it.region},
                {"n", it.n},
                {"aar", it.aar},
                {"rmsd", it.rmsd},
                {"ref_energy", it.ref_energy},
                {"energies", it.energies},
                {"mean_energy", it.mean_energy},
                {"imp", it.imp},
                {"top1", {{"index", it.top.index}, {"e_total", it.top.e_total}, {"dg", it.top.dg}}}}
               .dump() +
           "\n";
  return out;
}

inline std::string summary_table(const EvalReport& rep) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %-6s %4s %7s %8s %9s %9s %6s\n", "complex", "region", "n", "aar", "rmsd",
                "mean_dG", "top1_dG", "imp");
  out += buf;
  for (const auto& it : rep.items) {
    std::snprintf(buf, sizeof buf, "%-16s %-6s %4zu %7.4f %8.3f %9.3f %9.3f %6.3f\n", it.id.c_str(), it.region.c_str(),
                  it.n, it.aar, it.rmsd, it.mean_energy, it.top.dg, it.imp);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %-6s %4zu %7.4f %8.3f %9.3f %9.3f %6.3f\n", "mean", "", rep.items.size(),
                rep.aar, rep.rmsd, rep.mean_energy, rep.top1_dg, rep.imp);
  out += buf;
  for (const auto& e : rep.errors) out += "error: " + e + "\n";
  return out;
}

}  // namespace abflow
