#pragma once

// K-means over channel range signatures and the reorder index built from it.
//
// A ReorderPlan lists the channels of cluster 1, then cluster 2, ... so that
// every cluster occupies a contiguous block [offset_i, offset_i + size_i) of
// the reordered channel axis.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "rptq/tensor.hpp"

namespace rptq {

using Point = std::vector<double>;

struct ReorderPlan {
  std::size_t g = 0;
  Permutation perm;
  std::vector<std::size_t> cluster_sizes;
  std::vector<Point> centroids;

  static ReorderPlan identity(std::size_t channels);

  std::size_t num_channels() const { return perm.size(); }
  // Start of each cluster block in the reordered axis, plus a final entry == C.
  std::vector<std::size_t> cluster_offsets() const;
  // Cluster index of every reordered position.
  std::vector<std::size_t> cluster_of_position() const;
  bool is_identity_order() const { return rptq::is_identity(perm); }
  // Throws ValidationError if the plan invariants do not hold.
  void validate() const;

  friend bool operator==(const ReorderPlan&, const ReorderPlan&) = default;
};

nlohmann::json to_json(const ReorderPlan& plan);
ReorderPlan reorder_plan_from_json(const nlohmann::json& j);

struct KMeansOptions {
  std::uint64_t seed = 0;
  int max_iter = 100;
  // Independent k-means++ restarts; the lowest-inertia run wins.
  int restarts = 10;
};

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<Point> centroids;
  double inertia = 0.0;
  // Within-cluster SSE after every centroid update.
  std::vector<double> inertia_history;
  int iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding on squared Euclidean distance.
// Every returned cluster is non-empty. Throws ValidationError unless 1 <= g <= n.
KMeansResult kmeans(std::span<const Point> points, std::size_t g, const KMeansOptions& opts = {});

double within_cluster_sse(std::span<const Point> points, std::span<const std::size_t> assignments, std::size_t g);

// Clusters ordered by ascending smallest centroid coordinate (ties: smallest
// member index); channels ascending within a cluster. Unused cluster ids are dropped.
ReorderPlan build_reorder(std::span<const std::size_t> assignments, std::span<const Point> signatures);

// Baseline: sort channels by signature midpoint and cut into g contiguous groups
// of near-equal size (the first n % g groups take one extra channel).
ReorderPlan plan_uniform_groups(std::span<const Point> signatures, std::size_t g);

// Convenience: kmeans + build_reorder.
ReorderPlan plan_kmeans(std::span<const Point> signatures, std::size_t g, const KMeansOptions& opts = {});

// Block-diagonal composition: plan i acts on channels [sum_{j<i} C_j, ... + C_i).
ReorderPlan concat_plans(std::span<const ReorderPlan> plans);

}  // namespace rptq
