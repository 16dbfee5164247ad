#include "m3/backbone/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace m3::backbone {

namespace {

constexpr char kMagic[8] = {'M', '3', 'C', 'K', 'P', 'T', '\0', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

class Writer {
public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  float f32() { return pod<float>(); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

private:
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

void Checkpoint::add(std::string name, const numcore::Shape& shape, std::span<const Real> values) {
  tensors.push_back({std::move(name), shape, std::vector<Real>(values.begin(), values.end())});
}

const CheckpointTensor& Checkpoint::get(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
  if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor named '" + name + "'");
  return *it;
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
}

void Checkpoint::add_module(const std::string& prefix, const std::vector<NamedParam>& params) {
  for (const auto& p : params) add(prefix + p.name, p.tensor.shape(), p.tensor.data());
}

void Checkpoint::load_module(const std::string& prefix, const std::vector<NamedParam>& params) const {
  for (auto p : params) {
    const auto& entry = get(prefix + p.name);
    if (entry.shape != p.tensor.shape()) {
      throw CheckpointError("checkpoint tensor '" + prefix + p.name + "' has shape " + numcore::shape_str(entry.shape) +
                            ", model expects " + numcore::shape_str(p.tensor.shape()));
    }
    std::copy(entry.values.begin(), entry.values.end(), p.tensor.mutable_data().begin());
  }
}

void Checkpoint::add_optimizer(const std::string& prefix, const numcore::Adam& opt) {
  meta["optimizers"][prefix] = {{"step_count", opt.step_count()}};
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& shape = opt.params()[i].shape();
    add(prefix + ".m." + std::to_string(i), shape, opt.first_moments()[i]);
    add(prefix + ".v." + std::to_string(i), shape, opt.second_moments()[i]);
  }
}

void Checkpoint::load_optimizer(const std::string& prefix, numcore::Adam& opt) const {
  opt.set_step_count(meta.at("optimizers").at(prefix).at("step_count").get<std::int64_t>());
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& m = get(prefix + ".m." + std::to_string(i));
    const auto& v = get(prefix + ".v." + std::to_string(i));
    if (m.values.size() != opt.first_moments()[i].size()) {
      throw CheckpointError("optimizer state '" + prefix + "' does not match parameter " + std::to_string(i));
    }
    opt.first_moments()[i] = m.values;
    opt.second_moments()[i] = v.values;
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const auto meta = ckpt.meta.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) w.u64(static_cast<std::uint64_t>(e));
    for (Real v : t.values) w.f32(static_cast<float>(v));
  }
  w.u32(crc(w.buffer()));
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  Reader r(bytes);
  r.str(sizeof kMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("incompatible checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  {
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != crc(bytes.first(bytes.size() - 4))) throw CheckpointError("checkpoint checksum mismatch (file corrupt)");
  }
  Checkpoint ckpt;
  const auto meta_len = r.u32();
  try {
    ckpt.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = r.u32();
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str(r.u32());
    const auto rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::int64_t>(r.u64()));
    const auto n = static_cast<std::size_t>(numcore::shape_numel(t.shape));
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos() != bytes.size() - 4) throw CheckpointError("trailing bytes after checkpoint tensors");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace m3::backbone
