#pragma once

// Binary checkpoints:
//   "ABFLCKPT" | u32 version | u64 n + JSON header | u64 n + params
//   | u64 n + Adam m | u64 n + Adam v | u64 FNV-1a of everything before it
// Integers and doubles are little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/denoiser.hpp"
#include "abflow/digest.hpp"
#include "abflow/optim.hpp"
#include "abflow/schedules.hpp"

namespace abflow {

inline constexpr char kCheckpointMagic[8] = {'A', 'B', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::string arch;  ///< ArchConfig::describe()
  int T = 0;
  std::string schedule_digest;  ///< type/pos/ori digests joined by ':'
  std::int64_t step = 0;
  std::string optimizer = "sgd";
  std::int64_t optimizer_step = 0;
  std::string config_digest;  ///< digest of the run config, informational
};

struct Checkpoint {
  CheckpointMeta meta;
  ParamVector params;
  OptimizerState opt;
};

inline std::string schedule_digest(const ScheduleSet& s) {
  return s.type.digest() + ":" + s.pos.digest() + ":" + s.ori.digest();
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_doubles(std::string& out, std::span<const double> xs) {
  put_u64(out, xs.size());
  for (double x : xs) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    put_u64(out, bits);
  }
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint is truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return x;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    std::uint64_t n = u64();
    if (n > (data_.size() - pos_) / 8) throw CheckpointError("checkpoint is truncated");
    std::vector<double> out(n);
    for (auto& x : out) {
      std::uint64_t bits = u64();
      std::memcpy(&x, &bits, sizeof x);
    }
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xff));
  std::string header = json{{"arch", c.meta.arch},
                            {"T", c.meta.T},
                            {"schedule_digest", c.meta.schedule_digest},
                            {"step", c.meta.step},
                            {"optimizer", c.meta.optimizer},
                            {"optimizer_step", c.meta.optimizer_step},
                            {"config_digest", c.meta.config_digest}}
                           .dump();
  detail::put_u64(out, header.size());
  out += header;
  detail::put_doubles(out, c.params.data());
  detail::put_doubles(out, c.opt.m);
  detail::put_doubles(out, c.opt.v);
  Fnv1a h;
  h.update(out);
  detail::put_u64(out, h.value());
  return out;
}

/// Parses and verifies a checkpoint. The parameter layout is rebuilt from
/// `arch`; a checkpoint written for another architecture is rejected.
inline Checkpoint parse_checkpoint(std::string_view data, const ArchConfig& arch) {
  if (data.size() < 12 || std::memcmp(data.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  if (data.size() < 20) throw CheckpointError("checkpoint is truncated");
  // integrity first, so truncation is reported as such and not as a misread
  detail::Reader tail(data.substr(data.size() - 8));
  Fnv1a h;
  h.update(data.data(), data.size() - 8);
  if (tail.u64() != h.value()) throw CheckpointError("checkpoint digest mismatch (file truncated or corrupt)");

  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[8 + i])) << (8 * i);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  detail::Reader r(data.substr(12, data.size() - 20));
  Checkpoint c;
  try {
    json j = json::parse(r.bytes(r.u64()));
    c.meta.arch = j.at("arch").get<std::string>();
    c.meta.T = j.at("T").get<int>();
    c.meta.schedule_digest = j.at("schedule_digest").get<std::string>();
    c.meta.step = j.at("step").get<std::int64_t>();
    c.meta.optimizer = j.at("optimizer").get<std::string>();
    c.meta.optimizer_step = j.at("optimizer_step").get<std::int64_t>();
    c.meta.config_digest = j.value("config_digest", "");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (c.meta.arch != arch.describe())
    throw CheckpointError("checkpoint architecture '" + c.meta.arch + "' does not match configured architecture '" +
                          arch.describe() + "'");
  c.params = make_param_vector(arch);
  auto values = r.doubles();
  if (values.size() != c.params.size()) throw CheckpointError("checkpoint parameter count does not match layout");
  std::copy(values.begin(), values.end(), c.params.data().begin());
  c.opt.m = r.doubles();
  c.opt.v = r.doubles();
  c.opt.step = c.meta.optimizer_step;
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  atomic_write(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& arch) {
  return parse_checkpoint(read_file(path), arch);
}

}  // namespace abflow
