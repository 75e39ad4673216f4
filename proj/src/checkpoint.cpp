#include "dream/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "dream/errors.hpp"

namespace dream {

namespace {

constexpr char kMagic[4] = {'D', 'R', 'M', 'T'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_floating_point_v<T>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_floating_point_v<T>) {
      return std::bit_cast<T>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw ValidationError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  if (ckpt.size() > std::numeric_limits<std::uint32_t>::max()) throw ValidationError("too many entries");
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, e] : ckpt) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("entry name too long");
    if (e.shape.size() > 255) throw ValidationError("entry rank too large: " + name);
    if (shape_numel(e.shape) != e.data.size()) throw DimensionError("entry data/shape mismatch: " + name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto ext : e.shape) put_le<std::uint64_t>(out, ext);
    for (double d : e.data) put_le<double>(out, d);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("not a DRMT checkpoint (bad magic)");
  }
  Reader r(bytes);
  r.bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint8_t>();
    CheckpointEntry e;
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(e.shape);
    e.data.resize(n);
    for (std::size_t j = 0; j < n; ++j) e.data[j] = r.get<double>();
    if (!ckpt.emplace(std::move(name), std::move(e)).second) throw ValidationError("duplicate checkpoint entry");
  }
  if (!r.done()) throw ValidationError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

CheckpointEntry text_entry(const std::string& text) {
  CheckpointEntry e;
  e.shape = {text.size()};
  e.data.reserve(text.size());
  for (unsigned char c : text) e.data.push_back(static_cast<double>(c));
  return e;
}

std::string entry_text(const CheckpointEntry& e) {
  std::string s;
  s.reserve(e.data.size());
  for (double d : e.data) s.push_back(static_cast<char>(static_cast<unsigned char>(d)));
  return s;
}

}  // namespace dream
