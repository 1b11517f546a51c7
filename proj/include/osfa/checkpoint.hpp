#pragma once

// Flat binary container of named tensors.
//
// Layout (all integers 64-bit little-endian):
//   "OSFA1"
//   repeat { name_len, name bytes, rank, extents[rank], values[numel] as f32 LE }

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "osfa/tensor.hpp"

namespace osfa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

std::vector<char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

template <typename T>
NamedTensor to_named(std::string name, const Tensor<T>& t) {
  NamedTensor n{std::move(name), t.shape(), {}};
  n.values.assign(t.data().begin(), t.data().end());
  return n;
}

}  // namespace osfa
