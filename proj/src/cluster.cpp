#include "rptq/cluster.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "rptq/error.hpp"

namespace rptq {

namespace {

double sq_dist(const Point& a, const Point& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

std::vector<Point> cluster_means(std::span<const Point> points, std::span<const std::size_t> assign, std::size_t g,
                                 const std::vector<Point>& previous) {
  const std::size_t dim = points.front().size();
  std::vector<Point> sums(g, Point(dim, 0.0));
  std::vector<std::size_t> counts(g, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t d = 0; d < dim; ++d) sums[assign[i]][d] += points[i][d];
    ++counts[assign[i]];
  }
  for (std::size_t c = 0; c < g; ++c) {
    if (counts[c] == 0) {
      sums[c] = previous[c];
      continue;
    }
    for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
  }
  return sums;
}

std::vector<Point> kmeanspp_init(std::span<const Point> points, std::size_t g, std::mt19937_64& rng) {
  const std::size_t n = points.size();
  std::vector<Point> centers;
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  centers.push_back(points[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], centers[0]);
  while (centers.size() < g) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t next = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        next = i;
        target -= d2[i];
        if (target < 0.0) break;
      }
    } else {
      // All remaining points coincide with a center; take any unused index.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) free.push_back(i);
      }
      std::uniform_int_distribution<std::size_t> pf(0, free.size() - 1);
      next = free[pf(rng)];
    }
    chosen[next] = true;
    centers.push_back(points[next]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
  }
  return centers;
}

// Moves the point farthest from its own centroid into each empty cluster.
void repair_empty(std::span<const Point> points, std::vector<std::size_t>& assign, std::vector<Point>& centroids) {
  const std::size_t g = centroids.size();
  std::vector<std::size_t> counts(g, 0);
  for (auto a : assign) ++counts[a];
  for (std::size_t c = 0; c < g; ++c) {
    if (counts[c] != 0) continue;
    std::size_t worst = points.size();
    double worst_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (counts[assign[i]] < 2) continue;
      const double d = sq_dist(points[i], centroids[assign[i]]);
      if (d > worst_d) {
        worst_d = d;
        worst = i;
      }
    }
    --counts[assign[worst]];
    assign[worst] = c;
    counts[c] = 1;
    centroids[c] = points[worst];
  }
}

std::size_t nearest(const Point& p, const std::vector<Point>& centroids, std::size_t current) {
  std::size_t best = current;
  double best_d = current < centroids.size() ? sq_dist(p, centroids[current]) : std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

KMeansResult lloyd(std::span<const Point> points, std::size_t g, std::uint64_t seed, int max_iter) {
  std::mt19937_64 rng(seed);
  KMeansResult res;
  std::vector<Point> centroids = kmeanspp_init(points, g, rng);
  std::vector<std::size_t> assign(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) assign[i] = nearest(points[i], centroids, g);
  repair_empty(points, assign, centroids);

  for (int it = 0; it < max_iter; ++it) {
    centroids = cluster_means(points, assign, g, centroids);
    res.inertia_history.push_back(within_cluster_sse(points, assign, g));
    res.iterations = it + 1;
    std::vector<std::size_t> next(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) next[i] = nearest(points[i], centroids, assign[i]);
    repair_empty(points, next, centroids);
    if (next == assign) break;
    assign = std::move(next);
  }
  if (res.iterations == 0) res.inertia_history.push_back(within_cluster_sse(points, assign, g));
  res.centroids = cluster_means(points, assign, g, centroids);
  res.assignments = std::move(assign);
  res.inertia = within_cluster_sse(points, res.assignments, g);
  return res;
}

void check_points(std::span<const Point> points) {
  if (points.empty()) throw ValidationError("no points to cluster");
  const std::size_t dim = points.front().size();
  if (dim == 0) throw ValidationError("zero-dimensional points");
  for (const auto& p : points) {
    if (p.size() != dim) throw ValidationError("points have inconsistent dimension");
  }
}

}  // namespace

ReorderPlan ReorderPlan::identity(std::size_t channels) {
  ReorderPlan p;
  p.g = 1;
  p.perm = identity_permutation(channels);
  p.cluster_sizes = {channels};
  return p;
}

std::vector<std::size_t> ReorderPlan::cluster_offsets() const {
  std::vector<std::size_t> off(cluster_sizes.size() + 1, 0);
  for (std::size_t i = 0; i < cluster_sizes.size(); ++i) off[i + 1] = off[i] + cluster_sizes[i];
  return off;
}

std::vector<std::size_t> ReorderPlan::cluster_of_position() const {
  std::vector<std::size_t> out;
  out.reserve(perm.size());
  for (std::size_t c = 0; c < cluster_sizes.size(); ++c) out.insert(out.end(), cluster_sizes[c], c);
  return out;
}

void ReorderPlan::validate() const {
  if (!is_permutation(perm)) throw ValidationError("reorder plan perm is not a bijection");
  if (g == 0 || cluster_sizes.size() != g) throw ValidationError("reorder plan cluster count mismatch");
  std::size_t total = 0;
  for (auto s : cluster_sizes) {
    if (s == 0) throw ValidationError("reorder plan has an empty cluster");
    total += s;
  }
  if (total != perm.size()) throw ValidationError("reorder plan cluster sizes do not sum to channel count");
  if (!centroids.empty() && centroids.size() != g) throw ValidationError("reorder plan centroid count mismatch");
}

nlohmann::json to_json(const ReorderPlan& plan) {
  return {{"g", plan.g}, {"perm", plan.perm}, {"cluster_sizes", plan.cluster_sizes}, {"centroids", plan.centroids}};
}

ReorderPlan reorder_plan_from_json(const nlohmann::json& j) {
  ReorderPlan p;
  try {
    p.g = j.at("g").get<std::size_t>();
    p.perm = j.at("perm").get<Permutation>();
    p.cluster_sizes = j.at("cluster_sizes").get<std::vector<std::size_t>>();
    p.centroids = j.value("centroids", std::vector<Point>{});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed reorder plan: ") + e.what());
  }
  p.validate();
  return p;
}

double within_cluster_sse(std::span<const Point> points, std::span<const std::size_t> assignments, std::size_t g) {
  const std::size_t dim = points.front().size();
  std::vector<Point> sums(g, Point(dim, 0.0));
  std::vector<std::size_t> counts(g, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t d = 0; d < dim; ++d) sums[assignments[i]][d] += points[i][d];
    ++counts[assignments[i]];
  }
  for (std::size_t c = 0; c < g; ++c) {
    if (counts[c] == 0) continue;
    for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
  }
  double sse = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) sse += sq_dist(points[i], sums[assignments[i]]);
  return sse;
}

KMeansResult kmeans(std::span<const Point> points, std::size_t g, const KMeansOptions& opts) {
  check_points(points);
  if (g < 1) throw ValidationError("cluster count must be at least 1");
  if (g > points.size()) {
    throw ValidationError("cluster count " + std::to_string(g) + " exceeds number of points " +
                          std::to_string(points.size()));
  }
  const int restarts = std::max(opts.restarts, 1);
  KMeansResult best;
  for (int r = 0; r < restarts; ++r) {
    auto res = lloyd(points, g, opts.seed + static_cast<std::uint64_t>(r) * 0x9E3779B97F4A7C15ull, opts.max_iter);
    if (r == 0 || res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

ReorderPlan build_reorder(std::span<const std::size_t> assignments, std::span<const Point> signatures) {
  if (assignments.size() != signatures.size()) throw ValidationError("assignments/signatures length mismatch");
  if (assignments.empty()) throw ValidationError("no channels to reorder");
  const std::size_t ids = *std::max_element(assignments.begin(), assignments.end()) + 1;
  std::vector<std::vector<std::size_t>> members(ids);
  for (std::size_t i = 0; i < assignments.size(); ++i) members[assignments[i]].push_back(i);
  std::erase_if(members, [](const auto& m) { return m.empty(); });

  const std::size_t dim = signatures.front().size();
  std::vector<Point> centroids;
  for (const auto& m : members) {
    Point c(dim, 0.0);
    for (auto i : m) {
      for (std::size_t d = 0; d < dim; ++d) c[d] += signatures[i][d];
    }
    for (auto& v : c) v /= static_cast<double>(m.size());
    centroids.push_back(std::move(c));
  }
  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = *std::min_element(centroids[a].begin(), centroids[a].end());
    const double mb = *std::min_element(centroids[b].begin(), centroids[b].end());
    if (ma != mb) return ma < mb;
    return members[a].front() < members[b].front();
  });

  ReorderPlan plan;
  plan.g = members.size();
  for (auto c : order) {
    plan.perm.insert(plan.perm.end(), members[c].begin(), members[c].end());
    plan.cluster_sizes.push_back(members[c].size());
    plan.centroids.push_back(centroids[c]);
  }
  return plan;
}

ReorderPlan plan_uniform_groups(std::span<const Point> signatures, std::size_t g) {
  check_points(signatures);
  const std::size_t n = signatures.size();
  if (g < 1 || g > n) throw ValidationError("group count " + std::to_string(g) + " invalid for " + std::to_string(n) + " channels");
  std::vector<double> mid(n);
  for (std::size_t i = 0; i < n; ++i) {
    mid[i] = std::accumulate(signatures[i].begin(), signatures[i].end(), 0.0) / static_cast<double>(signatures[i].size());
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mid[a] < mid[b]; });

  std::size_t pos = 0;
  ReorderPlan plan;
  plan.g = g;
  plan.perm = order;
  const std::size_t dim = signatures.front().size();
  for (std::size_t c = 0; c < g; ++c) {
    const std::size_t size = n / g + (c < n % g ? 1 : 0);
    plan.cluster_sizes.push_back(size);
    Point centroid(dim, 0.0);
    for (std::size_t k = 0; k < size; ++k, ++pos) {
      for (std::size_t d = 0; d < dim; ++d) centroid[d] += signatures[order[pos]][d];
    }
    for (auto& v : centroid) v /= static_cast<double>(size);
    plan.centroids.push_back(std::move(centroid));
  }
  return plan;
}

ReorderPlan plan_kmeans(std::span<const Point> signatures, std::size_t g, const KMeansOptions& opts) {
  auto res = kmeans(signatures, g, opts);
  return build_reorder(res.assignments, signatures);
}

ReorderPlan concat_plans(std::span<const ReorderPlan> plans) {
  ReorderPlan out;
  std::size_t offset = 0;
  for (const auto& p : plans) {
    for (auto i : p.perm) out.perm.push_back(i + offset);
    out.cluster_sizes.insert(out.cluster_sizes.end(), p.cluster_sizes.begin(), p.cluster_sizes.end());
    out.centroids.insert(out.centroids.end(), p.centroids.begin(), p.centroids.end());
    out.g += p.g;
    offset += p.num_channels();
  }
  if (out.centroids.size() != out.g) out.centroids.clear();
  return out;
}

}  // namespace rptq
