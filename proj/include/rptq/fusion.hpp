#pragma once

// Folding reorder plans into layer norm outputs and linear weights, and the
// channel-alignment check for a wired decoder layer.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rptq/cluster.hpp"
#include "rptq/tensor.hpp"

namespace rptq {

struct LayerNormOp {
  std::vector<float> gamma;
  std::vector<float> beta;
  float eps = 1e-5f;
  // Output channel i holds normalized original channel out_plan->perm[i].
  std::optional<ReorderPlan> out_plan;
};

Tensor layernorm_forward(const LayerNormOp& ln, const Tensor& x);

struct LinearWeights {
  Tensor w;  // [C2, C1]
  std::vector<float> bias;
  // Orders the layer consumes and produces; identity when unfused.
  Permutation in_perm;
  Permutation out_perm;

  static LinearWeights unfused(Tensor w, std::vector<float> bias);
  std::size_t out_features() const { return w.dim(0); }
  std::size_t in_features() const { return w.dim(1); }
};

// Y = X W^T + bias over the last axis, accumulated in double.
Tensor linear_forward(const LinearWeights& lin, const Tensor& x);
Tensor matmul_transposed(const Tensor& x, const Tensor& w, std::span<const float> bias);

// w~[r, c] = w[out_perm[r], in_perm[c]], bias~[r] = bias[out_perm[r]].
// Permutations compose with whatever the layer already carries.
LinearWeights fuse_linear(const LinearWeights& lin, std::span<const std::size_t> in_perm,
                          std::span<const std::size_t> out_perm);

// One place where two channel orders must agree: a residual add, a matmul
// contracting over channels, or a producer feeding a consumer.
struct AlignmentEdge {
  std::string name;
  Permutation lhs;
  Permutation rhs;
};

struct LayerWiring {
  std::vector<AlignmentEdge> edges;
};

struct AlignmentViolation {
  std::string edge;
  Permutation lhs;
  Permutation rhs;
};

std::vector<AlignmentViolation> check_alignment(const LayerWiring& wiring);

nlohmann::json to_json(const AlignmentViolation& v);

}  // namespace rptq
