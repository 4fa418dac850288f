#pragma once

// Binary checkpoints.
//
// Layout (all integers and floats little-endian):
//   "SMARTCKP" u32 version
//   str config (INI text)  str stage  u64 epoch
//   u32 section count, then per section: str name, u64 tensor count,
//     per tensor: str name, u32 rank, u64 dims[rank], f64 values[]
//   u8 has_adam, then u64 entries, per entry: str name, i64 step, u64 n, f64 first[n], f64 second[n]
// where str is u64 length followed by bytes. Files are written to a
// temporary path and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smart/config.hpp"
#include "smart/model.hpp"
#include "smart/optim.hpp"
#include "smart/training.hpp"

namespace smart {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'A', 'R', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ExperimentConfig config;
  std::string stage;
  std::size_t epoch = 0;
  MartModel model;
  std::optional<Backbone> teacher;
  std::optional<std::map<std::string, AdamMoments>> adam;
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 8);
  }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 4);
  }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> v) {
    for (double x : v) f64(x);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  std::uint64_t u64() {
    unsigned char b[8];
    read(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint8_t u8() {
    unsigned char b;
    read(&b, 1);
    return b;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u64();
    if (n > (1u << 30)) fail("string length out of range");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void doubles(std::span<double> v) {
    for (double& x : v) x = f64();
  }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(path_ + ": " + what); }

 private:
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated checkpoint");
  }

  std::istream& in_;
  std::string path_;
};

inline void write_section(Writer& w, const std::string& name, const ParameterList& params) {
  w.str(name);
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.dim()));
    for (auto e : p.tensor.shape()) w.u64(e);
    w.doubles(p.tensor.data());
  }
}

inline std::map<std::string, Tensor> read_section(Reader& r) {
  std::map<std::string, Tensor> out;
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.u32();
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    Tensor t(shape);
    r.doubles(t.data());
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

// Copies stored values into the parameters of a freshly built model.
inline void fill(ParameterList params, const std::map<std::string, Tensor>& stored, Reader& r,
                 const std::string& section) {
  if (stored.size() != params.size()) r.fail("section '" + section + "' has the wrong number of tensors");
  for (auto& p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) r.fail("section '" + section + "' lacks '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape()) {
      r.fail("'" + p.name + "' has shape " + to_string(it->second.shape()) + ", model expects " +
             to_string(p.tensor.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), p.tensor.data().begin());
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const MartModel& model, const ExperimentConfig& config,
                            const std::string& stage, std::size_t epoch, const Backbone* teacher = nullptr,
                            const Adam* optimizer = nullptr) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    detail::Writer w(out);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    ExperimentConfig echo = config;
    echo.model = model.config;
    w.str(to_ini(echo));
    w.str(stage);
    w.u64(epoch);
    w.u32(teacher ? 2 : 1);
    detail::write_section(w, "student", all_parameters(model));
    if (teacher) detail::write_section(w, "teacher", backbone_parameters(*teacher));
    w.u8(optimizer ? 1 : 0);
    if (optimizer) {
      const auto& st = optimizer->state();
      w.u64(st.size());
      for (const auto& [name, m] : st) {
        w.str(name);
        w.u64(static_cast<std::uint64_t>(m.step));
        w.u64(m.first.size());
        w.doubles(m.first);
        w.doubles(m.second);
      }
    }
    out.flush();
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  detail::Reader r(in, path.string());
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("not a checkpoint file");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));

  Checkpoint ck;
  try {
    ck.config = parse_ini(r.str());
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded config: ") + e.what());
  }
  ck.stage = r.str();
  ck.epoch = r.u64();
  ck.model = init_model(ck.config.model, 0);
  const auto sections = r.u32();
  for (std::uint32_t s = 0; s < sections; ++s) {
    const std::string name = r.str();
    const auto stored = detail::read_section(r);
    if (name == "student") {
      detail::fill(all_parameters(ck.model), stored, r, name);
    } else if (name == "teacher") {
      ck.teacher = clone(ck.model.backbone);
      detail::fill(backbone_parameters(*ck.teacher), stored, r, name);
    } else {
      r.fail("unknown section '" + name + "'");
    }
  }
  if (r.u8()) {
    std::map<std::string, AdamMoments> st;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      AdamMoments m;
      m.step = static_cast<long>(r.u64());
      const auto len = r.u64();
      m.first.resize(len);
      m.second.resize(len);
      r.doubles(m.first);
      r.doubles(m.second);
      st.emplace(std::move(name), std::move(m));
    }
    ck.adam = std::move(st);
  }
  if (ck.teacher) {
    auto tp = backbone_parameters(*ck.teacher);
    set_trainable(tp, false);
  }
  return ck;
}

/// Pre-training state saved alongside a "pretrain" checkpoint, ready to continue.
inline PretrainState resume_pretraining(const Checkpoint& ck) {
  if (!ck.teacher) throw CheckpointError("checkpoint has no teacher; cannot resume pre-training");
  PretrainState st{clone(*ck.teacher), Adam(detail::adam_options(ck.config.train)), ck.epoch};
  if (ck.adam) st.optimizer.state() = *ck.adam;
  auto tp = backbone_parameters(st.teacher);
  set_trainable(tp, false);
  return st;
}

}  // namespace smart
