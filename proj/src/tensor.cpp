#include "rptq/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "rptq/error.hpp"

namespace rptq {

namespace {

constexpr char kMagic[8] = {'R', 'P', 'T', 'Q', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;
constexpr std::uint32_t kDtypeI32 = 1;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ValidationError("tensor shape has no axes");
  for (auto d : shape) {
    if (d == 0) throw ValidationError("zero axis in tensor shape " + shape_to_string(shape));
  }
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  auto bits = std::bit_cast<std::make_unsigned_t<
      std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T)) throw ValidationError(std::string("truncated ") + what);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> take(std::size_t n) {
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Header {
  std::uint32_t dtype;
  Shape shape;
};

std::vector<std::uint8_t> encode_header(std::uint32_t dtype, const Shape& shape) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, dtype);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_le<std::uint64_t>(out, d);
  return out;
}

Header decode_header(Reader& r) {
  if (r.remaining() < sizeof(kMagic)) throw ValidationError("bad magic");
  auto magic = r.take(sizeof(kMagic));
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw ValidationError("bad magic");
  auto version = r.get<std::uint32_t>("header");
  if (version != kVersion) throw ValidationError("unsupported tensor file version " + std::to_string(version));
  Header h;
  h.dtype = r.get<std::uint32_t>("header");
  if (h.dtype != kDtypeF32 && h.dtype != kDtypeI32) {
    throw ValidationError("unknown dtype code " + std::to_string(h.dtype));
  }
  auto ndim = r.get<std::uint32_t>("header");
  if (ndim == 0) throw ValidationError("tensor file declares zero dimensions");
  for (std::uint32_t i = 0; i < ndim; ++i) h.shape.push_back(r.get<std::uint64_t>("header"));
  check_shape(h.shape);
  return h;
}

std::size_t checked_payload(Reader& r, const Shape& shape) {
  std::size_t n = shape_numel(shape);
  if (r.remaining() < n * 4) throw ValidationError("truncated payload");
  if (r.remaining() > n * 4) throw ValidationError("shape/payload length mismatch");
  return n;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeError("short write to " + path.string());
}

template <typename T>
T permute_impl(const T& x, std::span<const std::size_t> s) {
  const std::size_t c = x.last_dim();
  if (s.size() != c) {
    throw ValidationError("permutation length " + std::to_string(s.size()) + " does not match last axis " +
                          std::to_string(c));
  }
  if (!is_permutation(s)) throw ValidationError("reorder index is not a bijection");
  using Elem = std::remove_cvref_t<decltype(x[0])>;
  std::vector<Elem> out(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r);
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = src[s[i]];
  }
  if constexpr (std::is_same_v<T, Tensor>) {
    return Tensor(x.shape(), std::move(out));
  } else {
    return IntTensor(x.shape(), std::move(out), x.bits());
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ValidationError("shape " + shape_to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                          " values");
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw ValidationError("non-finite value in tensor");
  }
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

IntTensor::IntTensor(Shape shape, std::vector<std::int32_t> data, int bits)
    : shape_(std::move(shape)), data_(std::move(data)), bits_(bits) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ValidationError("shape " + shape_to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                          " values");
  }
  if (bits < 2 || bits > 32) throw ValidationError("integer tensor bit width out of range");
  const std::int64_t lo = -(std::int64_t{1} << (bits - 1));
  const std::int64_t hi = (std::int64_t{1} << (bits - 1)) - 1;
  for (auto v : data_) {
    if (v < lo || v > hi) {
      throw ValidationError("value " + std::to_string(v) + " exceeds " + std::to_string(bits) + "-bit range");
    }
  }
}

bool is_permutation(std::span<const std::size_t> s) {
  std::vector<bool> seen(s.size(), false);
  for (auto i : s) {
    if (i >= s.size() || seen[i]) return false;
    seen[i] = true;
  }
  return true;
}

Permutation identity_permutation(std::size_t n) {
  Permutation p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

bool is_identity(std::span<const std::size_t> s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != i) return false;
  }
  return true;
}

Permutation inverse_permutation(std::span<const std::size_t> s) {
  if (!is_permutation(s)) throw ValidationError("reorder index is not a bijection");
  Permutation inv(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) inv[s[i]] = i;
  return inv;
}

Tensor permute_last_axis(const Tensor& x, std::span<const std::size_t> s) { return permute_impl(x, s); }
IntTensor permute_last_axis(const IntTensor& x, std::span<const std::size_t> s) { return permute_impl(x, s); }

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  auto out = encode_header(kDtypeF32, t.shape());
  out.reserve(out.size() + t.size() * 4);
  for (float v : t.data()) put_le<float>(out, v);
  return out;
}

std::vector<std::uint8_t> encode_tensor(const IntTensor& t) {
  auto out = encode_header(kDtypeI32, t.shape());
  out.reserve(out.size() + t.size() * 4);
  for (auto v : t.data()) put_le<std::int32_t>(out, v);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto h = decode_header(r);
  if (h.dtype != kDtypeF32) throw ValidationError("expected f32 tensor file");
  auto n = checked_payload(r, h.shape);
  std::vector<float> data(n);
  for (auto& v : data) v = r.get<float>("payload");
  return Tensor(std::move(h.shape), std::move(data));
}

IntTensor decode_int_tensor(std::span<const std::uint8_t> bytes, int bits) {
  Reader r(bytes);
  auto h = decode_header(r);
  if (h.dtype != kDtypeI32) throw ValidationError("expected i32 tensor file");
  auto n = checked_payload(r, h.shape);
  std::vector<std::int32_t> data(n);
  for (auto& v : data) v = r.get<std::int32_t>("payload");
  return IntTensor(std::move(h.shape), std::move(data), bits);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }
void save_tensor(const std::filesystem::path& path, const IntTensor& t) { write_file(path, encode_tensor(t)); }

Tensor load_tensor(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return decode_tensor(bytes);
}

IntTensor load_int_tensor(const std::filesystem::path& path, int bits) {
  auto bytes = read_file(path);
  return decode_int_tensor(bytes, bits);
}

}  // namespace rptq
