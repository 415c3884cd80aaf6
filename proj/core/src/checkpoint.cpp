#include "n2n/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "n2n/error.hpp"

namespace n2n {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray& Checkpoint::array(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw ContractError("checkpoint has no array '" + std::string(name) + "'");
}

std::uint64_t Checkpoint::counter(std::string_view name) const {
  for (const auto& [k, v] : counters) {
    if (k == name) return v;
  }
  throw ContractError("checkpoint has no counter '" + std::string(name) + "'");
}

std::string Checkpoint::serialize() const {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.str(kind);
  w.str(config_json);
  w.u64(config_hash);
  w.u32(epoch);
  w.u64(step);
  w.u32(static_cast<std::uint32_t>(counters.size()));
  for (const auto& [k, v] : counters) {
    w.str(k);
    w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    std::size_t n = 1;
    for (auto d : a.shape) n *= d;
    if (n != a.data.size()) throw ShapeError("checkpoint array '" + a.name + "' shape does not match its data");
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u32(d);
    for (float v : a.data) w.f32(v);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.raw(sizeof(kCheckpointMagic)) != std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw UnsupportedError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  c.kind = r.str();
  c.config_json = r.str();
  c.config_hash = r.u64();
  c.epoch = r.u32();
  c.step = r.u64();
  const std::uint32_t nc = r.u32();
  for (std::uint32_t i = 0; i < nc; ++i) {
    std::string k = r.str();
    c.counters.emplace_back(std::move(k), r.u64());
  }
  const std::uint32_t na = r.u32();
  for (std::uint32_t i = 0; i < na; ++i) {
    NamedArray a;
    a.name = r.str();
    const std::uint32_t rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      a.shape.push_back(r.u32());
      n *= a.shape.back();
    }
    r.need(n * 4);
    a.data.resize(n);
    for (auto& v : a.data) v = r.f32();
    c.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return deserialize(os.str());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace n2n
