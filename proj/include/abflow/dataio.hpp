#pragma once

// Line-delimited JSON containers for complexes, samples and reward caches.
// Every file starts with one header object carrying a "schema" field; each
// following line is one record.

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/kernels.hpp"
#include "abflow/so3.hpp"

namespace abflow {

using json = nlohmann::json;

inline constexpr const char* kDatasetSchema = "abflow.dataset/1";
inline constexpr const char* kSampleSchema = "abflow.samples/1";

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ResidueRecord {
  std::string chain;
  char aa = 'A';
  Vec3 pos = Vec3::Zero();
  Quaternion quat;
};

/// CDR occupying 1-based residue indices l + 1 .. l + m.
struct CdrSpan {
  int l = 0;
  int m = 0;
  friend bool operator==(const CdrSpan&, const CdrSpan&) = default;
};

struct ComplexRecord {
  std::string id;
  std::vector<ResidueRecord> residues;
  std::map<std::string, CdrSpan> cdr_regions;
  std::map<std::string, double> ref_energy;  ///< optional, per region
};

inline bool operator==(const ResidueRecord& a, const ResidueRecord& b) {
  return a.chain == b.chain && a.aa == b.aa && a.pos == b.pos && a.quat.w == b.quat.w && a.quat.x == b.quat.x &&
         a.quat.y == b.quat.y && a.quat.z == b.quat.z;
}
inline bool operator==(const ComplexRecord& a, const ComplexRecord& b) {
  return a.id == b.id && a.residues == b.residues && a.cdr_regions == b.cdr_regions && a.ref_energy == b.ref_energy;
}

struct DatasetHeader {
  std::string schema = kDatasetSchema;
  std::string centering = "complex_centroid";  ///< or "none": parse re-centers
  std::string units = "angstrom";
  std::string prior_center = "anchor_midpoint";
};

inline const std::vector<std::string>& region_tags() {
  static const std::vector<std::string> tags{"H1", "H2", "H3", "L1", "L2", "L3"};
  return tags;
}

// ---- validation -------------------------------------------------------------

inline void validate_record(const ComplexRecord& r) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw DataError("record '" + r.id + "': field '" + field + "' " + why);
  };
  if (r.id.empty()) fail("id", "is empty");
  const int n = static_cast<int>(r.residues.size());
  for (int i = 0; i < n; ++i) {
    const auto& res = r.residues[static_cast<std::size_t>(i)];
    std::string base = "residues[" + std::to_string(i) + "]";
    if (kAlphabet.find(res.aa) == std::string_view::npos) fail(base + ".aa", "is not an amino-acid letter");
    if (!res.pos.allFinite()) fail(base + ".pos", "is not finite");
    if (std::abs(res.quat.norm() - 1.0) > 1e-6) fail(base + ".quat", "is not unit norm");
  }
  std::vector<std::pair<int, int>> spans;
  for (const auto& [tag, span] : r.cdr_regions) {
    std::string base = "cdr_regions." + tag;
    if (std::find(region_tags().begin(), region_tags().end(), tag) == region_tags().end())
      fail(base, "is not a known region tag");
    // both anchors (l and l + m + 1, 1-based) must exist
    if (span.m < 1 || span.l < 1 || span.l + span.m + 1 > n) fail(base, "is out of bounds");
    spans.emplace_back(span.l, span.l + span.m);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) fail("cdr_regions", "contains overlapping spans");
  for (const auto& [tag, e] : r.ref_energy) {
    if (!r.cdr_regions.count(tag)) fail("ref_energy." + tag, "names a missing region");
    if (!std::isfinite(e)) fail("ref_energy." + tag, "is not finite");
  }
}

// ---- (de)serialization ------------------------------------------------------

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
inline json to_json(const Quaternion& q) { return json::array({q.w, q.x, q.y, q.z}); }

inline Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}
inline Quaternion quat_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("expected a quaternion [w, x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json record_to_json(const ComplexRecord& r) {
  json res = json::array();
  for (const auto& x : r.residues)
    res.push_back({{"chain", x.chain}, {"aa", std::string(1, x.aa)}, {"pos", to_json(x.pos)}, {"quat", to_json(x.quat)}});
  json regions = json::object();
  for (const auto& [tag, s] : r.cdr_regions) regions[tag] = json::array({s.l, s.m});
  json j = {{"id", r.id}, {"residues", std::move(res)}, {"cdr_regions", std::move(regions)}};
  if (!r.ref_energy.empty()) j["ref_energy"] = r.ref_energy;
  return j;
}

inline ComplexRecord record_from_json(const json& j) {
  ComplexRecord r;
  r.id = j.at("id").get<std::string>();
  for (const auto& x : j.at("residues")) {
    ResidueRecord rr;
    rr.chain = x.at("chain").get<std::string>();
    auto aa = x.at("aa").get<std::string>();
    if (aa.size() != 1) throw DataError("record '" + r.id + "': field 'aa' must be one letter");
    rr.aa = aa[0];
    rr.pos = vec3_from_json(x.at("pos"));
    rr.quat = quat_from_json(x.at("quat"));
    r.residues.push_back(std::move(rr));
  }
  for (const auto& [tag, s] : j.at("cdr_regions").items()) r.cdr_regions[tag] = {s.at(0).get<int>(), s.at(1).get<int>()};
  if (j.contains("ref_energy"))
    for (const auto& [tag, e] : j["ref_energy"].items()) r.ref_energy[tag] = e.get<double>();
  return r;
}

inline json header_to_json(const DatasetHeader& h) {
  return {{"schema", h.schema}, {"centering", h.centering}, {"units", h.units}, {"prior_center", h.prior_center}};
}

/// Write to a temporary sibling and rename into place.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void recenter(ComplexRecord& r) {
  if (r.residues.empty()) return;
  Vec3 c = Vec3::Zero();
  for (const auto& x : r.residues) c += x.pos;
  c /= static_cast<double>(r.residues.size());
  for (auto& x : r.residues) x.pos -= c;
}

inline std::string serialize_dataset(const std::vector<ComplexRecord>& records, const DatasetHeader& header = {}) {
  std::string out = header_to_json(header).dump() + "\n";
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<ComplexRecord>& records,
                          const DatasetHeader& header = {}) {
  atomic_write(path, serialize_dataset(records, header));
}

/// Parses and validates; records are re-centered on the complex centroid
/// unless the header says they already are.
inline std::vector<ComplexRecord> parse_dataset_text(const std::string& text, DatasetHeader* header_out = nullptr) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  DatasetHeader header;
  bool have_header = false;
  std::vector<ComplexRecord> records;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    if (!have_header) {
      if (!j.is_object() || j.value("schema", "") != kDatasetSchema)
        throw DataError("line " + std::to_string(lineno) + ": missing or unsupported dataset header");
      header.centering = j.value("centering", "none");
      header.units = j.value("units", "angstrom");
      header.prior_center = j.value("prior_center", "anchor_midpoint");
      have_header = true;
      continue;
    }
    ComplexRecord r;
    try {
      r = record_from_json(j);
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    try {
      validate_record(r);
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (header.centering != "complex_centroid") recenter(r);
    records.push_back(std::move(r));
  }
  if (!have_header) throw DataError("dataset has no header line");
  header.centering = "complex_centroid";
  if (header_out) *header_out = header;
  return records;
}

inline std::vector<ComplexRecord> parse_dataset(const std::filesystem::path& path) {
  return parse_dataset_text(read_file(path));
}

// ---- sequence identity ------------------------------------------------------

inline std::string region_sequence(const ComplexRecord& r, const std::string& region) {
  const auto& s = r.cdr_regions.at(region);
  std::string seq;
  for (int i = 0; i < s.m; ++i) seq += r.residues[static_cast<std::size_t>(s.l + i)].aa;
  return seq;
}

/// Best ungapped sliding identity: matches over all offsets, divided by the
/// shorter sequence length.
inline double sequence_identity(const std::string& a, const std::string& b) {
  if (a.empty() || b.empty()) return 0.0;
  const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
  int best = 0;
  for (int off = -(nb - 1); off <= na - 1; ++off) {
    int matches = 0;
    for (int j = 0; j < nb; ++j) {
      int i = j + off;
      if (i >= 0 && i < na && a[static_cast<std::size_t>(i)] == b[static_cast<std::size_t>(j)]) ++matches;
    }
    best = std::max(best, matches);
  }
  return static_cast<double>(best) / static_cast<double>(std::min(na, nb));
}

/// Drops records whose `region` sequence reaches `threshold` identity with
/// any query. Records missing the region are kept.
inline std::vector<ComplexRecord> sequence_identity_filter(const std::vector<ComplexRecord>& records,
                                                           const std::vector<std::string>& queries,
                                                           const std::string& region, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("identity filter: threshold outside (0, 1]");
  std::vector<ComplexRecord> kept;
  for (const auto& r : records) {
    bool drop = false;
    if (r.cdr_regions.count(region)) {
      auto seq = region_sequence(r, region);
      for (const auto& q : queries)
        if (sequence_identity(seq, q) >= threshold) {
          drop = true;
          break;
        }
    }
    if (!drop) kept.push_back(r);
  }
  return kept;
}

// ---- model-frame views ------------------------------------------------------

/// Affine position frame of the diffusion: z = (x - center) / scale.
struct Frame {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;
  Vec3 to_model(const Vec3& x) const { return (x - center) / scale; }
  Vec3 to_global(const Vec3& z) const { return center + scale * z; }
};

inline ResidueState to_state(const ResidueRecord& r) {
  return {type_index(r.aa), r.pos, Rotation::from_quaternion(r.quat)};
}

/// One CDR region of a complex, in both the global (angstrom) and the
/// normalized model frame. The model frame is centered on the two anchors.
struct RegionView {
  std::string id;
  std::string region;
  CdrState s0_global;
  ComplexContext context_global;
  CdrState s0_model;
  ComplexContext context_model;
  Frame frame;
};

inline CdrState to_model(const CdrState& s, const Frame& f) {
  CdrState out = s;
  for (auto& r : out.residues) r.pos = f.to_model(r.pos);
  return out;
}
inline CdrState to_global(const CdrState& s, const Frame& f) {
  CdrState out = s;
  for (auto& r : out.residues) r.pos = f.to_global(r.pos);
  return out;
}

inline RegionView extract_region(const ComplexRecord& rec, const std::string& region, double pos_scale) {
  auto it = rec.cdr_regions.find(region);
  if (it == rec.cdr_regions.end()) throw DataError("record '" + rec.id + "' has no region " + region);
  if (!(pos_scale > 0.0)) throw std::invalid_argument("pos_scale must be positive");
  const CdrSpan s = it->second;
  RegionView v;
  v.id = rec.id;
  v.region = region;
  v.s0_global.t = 0;
  v.context_global.cdr_l = s.l;
  v.context_global.cdr_m = s.m;
  for (int i = 0; i < static_cast<int>(rec.residues.size()); ++i) {
    auto st = to_state(rec.residues[static_cast<std::size_t>(i)]);
    if (i >= s.l && i < s.l + s.m)
      v.s0_global.residues.push_back(st);
    else
      v.context_global.residues.push_back(st);
  }
  // anchors: 1-based l and l + m + 1, i.e. 0-based l - 1 and l + m
  const Vec3& a = rec.residues[static_cast<std::size_t>(s.l - 1)].pos;
  const Vec3& b = rec.residues[static_cast<std::size_t>(s.l + s.m)].pos;
  v.frame = {0.5 * (a + b), pos_scale};
  v.s0_model = to_model(v.s0_global, v.frame);
  v.context_model = v.context_global;
  for (auto& r : v.context_model.residues) r.pos = v.frame.to_model(r.pos);
  return v;
}

inline std::string sequence_of(const CdrState& s) {
  std::string seq;
  for (const auto& r : s.residues) seq += type_letter(r.dtype);
  return seq;
}

// ---- sample files -----------------------------------------------------------

struct SampleRecord {
  std::string id;
  std::string region;
  std::uint64_t seed = 0;
  std::string sequence;
  std::vector<Vec3> positions;
  std::vector<Quaternion> quats;
  double energy = 0.0;   ///< binding energy (dG) from the oracle
  double e_total = 0.0;  ///< CDR total energy from the oracle
  double reward = 0.0;
};

inline json sample_to_json(const SampleRecord& s) {
  json pos = json::array(), q = json::array();
  for (const auto& p : s.positions) pos.push_back(to_json(p));
  for (const auto& x : s.quats) q.push_back(to_json(x));
  return {{"id", s.id},       {"region", s.region}, {"seed", s.seed},       {"sequence", s.sequence},
          {"positions", pos}, {"quats", q},         {"energy", s.energy}, {"e_total", s.e_total},
          {"reward", s.reward}};
}

inline SampleRecord sample_from_json(const json& j) {
  SampleRecord s;
  s.id = j.at("id").get<std::string>();
  s.region = j.at("region").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.sequence = j.at("sequence").get<std::string>();
  for (const auto& p : j.at("positions")) s.positions.push_back(vec3_from_json(p));
  for (const auto& q : j.at("quats")) s.quats.push_back(quat_from_json(q));
  s.energy = j.at("energy").get<double>();
  s.e_total = j.at("e_total").get<double>();
  s.reward = j.at("reward").get<double>();
  if (s.positions.size() != s.sequence.size() || s.quats.size() != s.sequence.size())
    throw DataError("sample '" + s.id + "': inconsistent residue counts");
  return s;
}

inline std::string serialize_samples(const std::vector<SampleRecord>& samples) {
  std::string out = json{{"schema", kSampleSchema}, {"units", "angstrom"}}.dump() + "\n";
  for (const auto& s : samples) out += sample_to_json(s).dump() + "\n";
  return out;
}

inline std::vector<SampleRecord> parse_samples_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  std::vector<SampleRecord> out;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (!header) {
        if (j.value("schema", "") != kSampleSchema) throw DataError("missing or unsupported sample header");
        header = true;
        continue;
      }
      out.push_back(sample_from_json(j));
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed sample: " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) throw DataError("sample file has no header line");
  return out;
}

}  // namespace abflow
