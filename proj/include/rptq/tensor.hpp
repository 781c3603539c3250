#pragma once

// Dense row-major tensors and the binary tensor file format.
//
// Activations use (sample, token, channel) axes; weights use (out, in).
// The last axis is always the channel axis that reorder plans act on.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rptq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  // Throws ValidationError on zero axes, size mismatch or non-finite values.
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t size() const { return data_.size(); }
  // Number of rows when viewed as [size / last_dim, last_dim].
  std::size_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  std::span<const float> data() const { return data_; }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * last_dim(), last_dim());
  }
  float operator[](std::size_t i) const { return data_[i]; }

  // Only for builders that own a freshly constructed tensor.
  std::span<float> mutable_data() { return data_; }
  std::span<float> mutable_row(std::size_t r) {
    return std::span<float>(data_).subspan(r * last_dim(), last_dim());
  }

  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Signed integer codes of a k-bit quantizer stored in 32-bit containers.
class IntTensor {
 public:
  IntTensor() = default;
  // Throws ValidationError if any element falls outside [-2^(k-1), 2^(k-1)-1].
  IntTensor(Shape shape, std::vector<std::int32_t> data, int bits);

  const Shape& shape() const { return shape_; }
  std::size_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }
  int bits() const { return bits_; }
  std::span<const std::int32_t> data() const { return data_; }
  std::span<const std::int32_t> row(std::size_t r) const {
    return std::span<const std::int32_t>(data_).subspan(r * last_dim(), last_dim());
  }
  std::int32_t operator[](std::size_t i) const { return data_[i]; }

  friend bool operator==(const IntTensor&, const IntTensor&) = default;

 private:
  Shape shape_;
  std::vector<std::int32_t> data_;
  int bits_ = 32;
};

// Permutation helpers. A permutation s maps output position i to source s[i].
using Permutation = std::vector<std::size_t>;

bool is_permutation(std::span<const std::size_t> s);
Permutation identity_permutation(std::size_t n);
bool is_identity(std::span<const std::size_t> s);
Permutation inverse_permutation(std::span<const std::size_t> s);

// output[..., i] = x[..., s[i]]
Tensor permute_last_axis(const Tensor& x, std::span<const std::size_t> s);
IntTensor permute_last_axis(const IntTensor& x, std::span<const std::size_t> s);

// Binary format: "RPTQTNSR", u32 version=1, u32 dtype (0=f32, 1=i32), u32 ndim,
// ndim x u64 dims, raw little-endian payload.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
std::vector<std::uint8_t> encode_tensor(const IntTensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
// The file format does not carry the bit width; the caller states it.
IntTensor decode_int_tensor(std::span<const std::uint8_t> bytes, int bits);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
void save_tensor(const std::filesystem::path& path, const IntTensor& t);
Tensor load_tensor(const std::filesystem::path& path);
IntTensor load_int_tensor(const std::filesystem::path& path, int bits);

}  // namespace rptq
