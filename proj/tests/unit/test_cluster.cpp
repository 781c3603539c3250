#include <gtest/gtest.h>

#include <random>

#include "rptq/cluster.hpp"
#include "rptq/error.hpp"
#include "rptq/testkit.hpp"

using namespace rptq;

namespace {

std::vector<Point> random_points(std::size_t n, std::size_t dim, std::mt19937_64& rng, double scale = 10.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<Point> pts(n, Point(dim));
  for (auto& p : pts) {
    for (auto& v : p) v = nd(rng);
  }
  return pts;
}

}  // namespace

TEST(KMeans, SingleClusterTakesEverything) {
  std::mt19937_64 rng(1);
  auto pts = random_points(12, 2, rng);
  auto r = kmeans(pts, 1);
  for (auto a : r.assignments) EXPECT_EQ(a, 0u);
}

TEST(KMeans, SeparatesTwoScales) {
  std::vector<Point> pts = {{-1, 1}, {-1.2, 0.9}, {-100, 100}, {-90, 110}};
  auto r = kmeans(pts, 2);
  EXPECT_EQ(r.assignments[0], r.assignments[1]);
  EXPECT_EQ(r.assignments[2], r.assignments[3]);
  EXPECT_NE(r.assignments[0], r.assignments[2]);
  EXPECT_NEAR(r.inertia, brute_force_partition(pts, 2).inertia, 1e-9);
}

TEST(KMeans, OnePointPerCluster) {
  std::mt19937_64 rng(2);
  auto pts = random_points(7, 3, rng);
  auto r = kmeans(pts, 7);
  EXPECT_EQ(r.inertia, 0.0);
  std::vector<std::size_t> sorted = r.assignments;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(KMeans, RejectsBadClusterCounts) {
  std::vector<Point> pts = {{0, 1}, {1, 2}};
  EXPECT_THROW(kmeans(pts, 3), ValidationError);
  EXPECT_THROW(kmeans(pts, 0), ValidationError);
}

TEST(KMeans, DeterministicNonEmptyAndMonotone) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    auto pts = random_points(5 + rng() % 60, 2 + 2 * (t % 2), rng);
    const std::size_t g = 1 + rng() % std::min<std::size_t>(pts.size(), 8);
    KMeansOptions o;
    o.seed = t;
    auto a = kmeans(pts, g, o), b = kmeans(pts, g, o);
    EXPECT_EQ(a.assignments, b.assignments);
    std::vector<std::size_t> counts(g, 0);
    for (auto x : a.assignments) ++counts[x];
    for (auto c : counts) EXPECT_GT(c, 0u);
    for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
      EXPECT_LE(a.inertia_history[i], a.inertia_history[i - 1] * (1 + 1e-12));
    }
  }
}

TEST(KMeans, DuplicatePointsStillGiveNonEmptyClusters) {
  std::vector<Point> pts(6, Point{1.0, 1.0});
  pts.push_back({5, 5});
  auto r = kmeans(pts, 3);
  std::vector<std::size_t> counts(3, 0);
  for (auto x : r.assignments) ++counts[x];
  for (auto c : counts) EXPECT_GT(c, 0u);
}

TEST(BuildReorder, HandExample) {
  std::vector<Point> sig = {{5, 6}, {-3, 1}, {5, 7}, {-2, 2}};
  auto p = build_reorder(std::vector<std::size_t>{1, 0, 1, 0}, sig);
  EXPECT_EQ(p.perm, (Permutation{1, 3, 0, 2}));
  EXPECT_EQ(p.cluster_sizes, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(p.g, 2u);
}

TEST(BuildReorder, SingleClusterIsIdentity) {
  std::vector<Point> sig = {{3, 4}, {1, 2}, {3, 4}};
  auto p = build_reorder(std::vector<std::size_t>{0, 0, 0}, sig);
  EXPECT_TRUE(p.is_identity_order());
  EXPECT_EQ(p.cluster_sizes, std::vector<std::size_t>{3});
}

TEST(BuildReorder, RandomAssignmentsSatisfyInvariants) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 50, g = 1 + rng() % 10;
    auto sig = random_points(n, 2, rng);
    std::vector<std::size_t> a(n);
    for (auto& x : a) x = rng() % g;
    auto p = build_reorder(a, sig);
    EXPECT_NO_THROW(p.validate());
    auto pos = p.cluster_of_position();
    // Channels of one cluster stay together and ascend.
    for (std::size_t i = 1; i < n; ++i) {
      if (pos[i] == pos[i - 1]) {
        EXPECT_LT(p.perm[i - 1], p.perm[i]);
        EXPECT_EQ(a[p.perm[i]], a[p.perm[i - 1]]);
      }
    }
  }
}

TEST(UniformGroups, SplitsSortedMidpoints) {
  std::vector<Point> sig = {{10, 12}, {0, 1}, {5, 6}, {-4, -3}};
  auto p = plan_uniform_groups(sig, 2);
  EXPECT_EQ(p.perm, (Permutation{3, 1, 2, 0}));
  EXPECT_EQ(p.cluster_sizes, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(plan_uniform_groups(sig, 1).cluster_sizes, std::vector<std::size_t>{4});
  EXPECT_EQ(plan_uniform_groups(sig, 4).cluster_sizes, (std::vector<std::size_t>{1, 1, 1, 1}));
  std::mt19937_64 rng(1);
  EXPECT_EQ(plan_uniform_groups(random_points(7, 2, rng), 3).cluster_sizes, (std::vector<std::size_t>{3, 2, 2}));
  EXPECT_THROW(plan_uniform_groups(sig, 5), ValidationError);
}

TEST(ConcatPlans, BlockDiagonal) {
  auto a = build_reorder(std::vector<std::size_t>{1, 0}, std::vector<Point>{{1, 2}, {0, 1}});
  auto b = ReorderPlan::identity(3);
  std::vector<ReorderPlan> v = {a, b};
  auto c = concat_plans(v);
  EXPECT_EQ(c.perm, (Permutation{1, 0, 2, 3, 4}));
  EXPECT_EQ(c.g, 3u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ReorderPlanJson, RoundTrips) {
  std::mt19937_64 rng(5);
  auto sig = random_points(20, 2, rng);
  auto p = plan_kmeans(sig, 4);
  EXPECT_EQ(reorder_plan_from_json(to_json(p)), p);
  auto bad = to_json(p);
  bad["perm"][0] = bad["perm"][1];
  EXPECT_THROW(reorder_plan_from_json(bad), ValidationError);
}
