#include "osfa/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace osfa {

namespace {

constexpr char kMagic[] = "OSFA1";
constexpr std::size_t kMagicLen = 5;

void put_u64(std::vector<char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

void put_f32(std::vector<char>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    }
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  float f32() {
    need(4, "values");
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return std::bit_cast<float>(bits);
  }

  std::string str(std::size_t n) {
    need(n, "name");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<char> out(kMagic, kMagic + kMagicLen);
  for (const auto& t : tensors) {
    if (numel(t.shape) != t.values.size()) {
      throw CheckpointError("tensor '" + t.name + "' has shape " + to_string(t.shape) + " but " +
                            std::to_string(t.values.size()) + " values");
    }
    put_u64(out, t.name.size());
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u64(out, t.shape.size());
    for (const auto d : t.shape) put_u64(out, d);
    for (const float v : t.values) put_f32(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < kMagicLen || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw CheckpointError("not an OSFA1 checkpoint");
  }
  std::vector<char> body(bytes.begin() + kMagicLen, bytes.end());
  Reader r(body);
  std::vector<NamedTensor> out;
  while (!r.done()) {
    NamedTensor t;
    const auto len = r.u64("name length");
    t.name = r.str(len);
    const auto rank = r.u64("rank");
    if (rank > 16) {
      throw CheckpointError("implausible rank " + std::to_string(rank) + " for '" + t.name + "'");
    }
    for (std::uint64_t i = 0; i < rank; ++i) t.shape.push_back(r.u64("extent"));
    const std::size_t n = numel(t.shape);
    r.need(n * 4, "values");
    t.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i) t.values.push_back(r.f32());
    out.push_back(std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw CheckpointError("cannot open " + path.string() + " for writing");
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    throw CheckpointError("write failed: " + path.string());
  }
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw CheckpointError("cannot open checkpoint " + path.string());
  }
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw CheckpointError("checkpoint has no tensor named '" + name + "'");
}

}  // namespace osfa
