#include "rptq/fusion.hpp"

#include <cmath>
#include <string>

#include "rptq/error.hpp"

namespace rptq {

Tensor layernorm_forward(const LayerNormOp& ln, const Tensor& x) {
  const std::size_t c = x.last_dim();
  if (ln.gamma.size() != c || ln.beta.size() != c) {
    throw ValidationError("layer norm width " + std::to_string(ln.gamma.size()) + " does not match input channels " +
                          std::to_string(c));
  }
  if (ln.out_plan && ln.out_plan->num_channels() != c) throw ValidationError("layer norm plan width mismatch");
  std::vector<float> out(x.size());
  std::vector<float> normed(c);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(ln.eps));
    for (std::size_t i = 0; i < c; ++i) {
      normed[i] = static_cast<float>((row[i] - mean) * inv) * ln.gamma[i] + ln.beta[i];
    }
    float* dst = out.data() + r * c;
    if (ln.out_plan) {
      const auto& perm = ln.out_plan->perm;
      for (std::size_t i = 0; i < c; ++i) dst[i] = normed[perm[i]];
    } else {
      std::copy(normed.begin(), normed.end(), dst);
    }
  }
  return Tensor(x.shape(), std::move(out));
}

LinearWeights LinearWeights::unfused(Tensor w, std::vector<float> bias) {
  if (w.ndim() != 2) throw ValidationError("linear weight must be 2-D");
  if (bias.size() != w.dim(0)) throw ValidationError("bias length does not match output features");
  LinearWeights lin{std::move(w), std::move(bias), {}, {}};
  lin.in_perm = identity_permutation(lin.in_features());
  lin.out_perm = identity_permutation(lin.out_features());
  return lin;
}

Tensor matmul_transposed(const Tensor& x, const Tensor& w, std::span<const float> bias) {
  const std::size_t c1 = w.dim(1), c2 = w.dim(0);
  if (x.last_dim() != c1) {
    throw ValidationError("input channels " + std::to_string(x.last_dim()) + " do not match weight columns " +
                          std::to_string(c1));
  }
  Shape shape = x.shape();
  shape.back() = c2;
  std::vector<float> out(x.rows() * c2);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t o = 0; o < c2; ++o) {
      auto wr = w.row(o);
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < c1; ++i) acc += static_cast<double>(xr[i]) * wr[i];
      out[r * c2 + o] = static_cast<float>(acc);
    }
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor linear_forward(const LinearWeights& lin, const Tensor& x) { return matmul_transposed(x, lin.w, lin.bias); }

LinearWeights fuse_linear(const LinearWeights& lin, std::span<const std::size_t> in_perm,
                          std::span<const std::size_t> out_perm) {
  const std::size_t c2 = lin.out_features(), c1 = lin.in_features();
  if (in_perm.size() != c1 || out_perm.size() != c2) {
    throw ValidationError("plan lengths (" + std::to_string(in_perm.size()) + ", " + std::to_string(out_perm.size()) +
                          ") do not match weight " + shape_to_string(lin.w.shape()));
  }
  if (!is_permutation(in_perm) || !is_permutation(out_perm)) throw ValidationError("reorder index is not a bijection");
  std::vector<float> w(c2 * c1);
  std::vector<float> bias(c2);
  LinearWeights out;
  out.in_perm.resize(c1);
  out.out_perm.resize(c2);
  for (std::size_t r = 0; r < c2; ++r) {
    auto src = lin.w.row(out_perm[r]);
    for (std::size_t c = 0; c < c1; ++c) w[r * c1 + c] = src[in_perm[c]];
    bias[r] = lin.bias[out_perm[r]];
    out.out_perm[r] = lin.out_perm[out_perm[r]];
  }
  for (std::size_t c = 0; c < c1; ++c) out.in_perm[c] = lin.in_perm[in_perm[c]];
  out.w = Tensor({c2, c1}, std::move(w));
  out.bias = std::move(bias);
  return out;
}

std::vector<AlignmentViolation> check_alignment(const LayerWiring& wiring) {
  std::vector<AlignmentViolation> out;
  for (const auto& e : wiring.edges) {
    if (e.lhs != e.rhs) out.push_back({e.name, e.lhs, e.rhs});
  }
  return out;
}

nlohmann::json to_json(const AlignmentViolation& v) {
  return {{"edge", v.edge}, {"lhs", v.lhs}, {"rhs", v.rhs}};
}

}  // namespace rptq
