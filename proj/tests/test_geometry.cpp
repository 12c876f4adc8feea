#include <gtest/gtest.h>

#include <set>

#include "fconv/geometry.hpp"
#include "fconv/random.hpp"
#include "fconv/synthetic.hpp"
#include "oracles.hpp"

using namespace fconv;

namespace {

CameraCalib calib() { return synthetic_calib(SyntheticConfig{}); }

RegionProposal2D centered(double u, double v, double half = 20) { return {u - half, v - half, u + half, v + half, 0, 1}; }

}  // namespace

TEST(FrustumFrame, PrincipalPointGivesIdentity) {
  const CameraCalib c = calib();
  const FrustumFrame f = frustum_frame(centered(c.projection(0, 2), c.projection(1, 2)), c);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(f.rotation(r, k), r == k ? 1.0 : 0.0, 1e-12);
}

TEST(FrustumFrame, CenterRayMapsToPlusZ) {
  const CameraCalib c = calib();
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double u = uniform(rng, 0, 1242), v = uniform(rng, 0, 375);
    const FrustumFrame f = frustum_frame(centered(u, v), c);
    EXPECT_LT(orthonormality_error(f.rotation), 1e-9);
    const Vec3 r = pixel_ray(c, u, v);
    const Vec3 q = f.rotation * r;
    EXPECT_NEAR(q.x, 0.0, 1e-9);
    EXPECT_NEAR(q.y, 0.0, 1e-9);
    EXPECT_NEAR(q.z, 1.0, 1e-9);
    const Vec3 p = f.to_frame(10.0 * r);
    EXPECT_NEAR(p.z, 10.0, 1e-9);
    // Round trip through the frame.
    const Vec3 back = f.from_frame(p);
    EXPECT_NEAR(back.x, 10.0 * r.x, 1e-9);
  }
}

TEST(FrustumFrame, BoxYawCarriesFrameYaw) {
  const FrustumFrame f = FrustumFrame::from_angles(0.4, 0.0);
  const OrientedBox3D b({2, 1, 15}, 4, 1.7, 1.5, 0.3);
  const OrientedBox3D in = f.box_to_frame(b);
  EXPECT_NEAR(in.yaw, 0.7, 1e-12);
  // Corners transform with the box when the frame has no pitch.
  const auto cb = corners(b), ci = corners(in);
  for (std::size_t i = 0; i < 8; ++i) {
    const Vec3 t = f.to_frame(cb[i]);
    EXPECT_NEAR(t.x, ci[i].x, 1e-9);
    EXPECT_NEAR(t.y, ci[i].y, 1e-9);
    EXPECT_NEAR(t.z, ci[i].z, 1e-9);
  }
  const OrientedBox3D back = f.box_from_frame(in);
  EXPECT_NEAR(back.center.x, b.center.x, 1e-12);
  EXPECT_NEAR(back.yaw, b.yaw, 1e-12);
}

TEST(Slabs, PointAtTenPointOneInSlabs39And40) {
  const std::vector<Vec3> pts{{0, 0, 10.1}};
  const auto seq = build_sequence_in_frame(pts, FrustumFrame{}, {0.25, 0.5}, {0, 70});
  std::set<std::size_t> member;
  for (std::size_t t = 0; t < seq.length; ++t)
    if (!seq.groups[t].empty()) member.insert(t);
  EXPECT_EQ(member, (std::set<std::size_t>{39, 40}));
}

TEST(Slabs, SlabCounts) {
  EXPECT_EQ(slab_count({0.25, 0.5}, {0, 70}), 280u);
  EXPECT_EQ(slab_count({0.1, 0.2}, {0, 70}), 700u);
  EXPECT_EQ(slab_count({0.1, 0.2}, {0, 8}), 80u);
}

TEST(Slabs, EqualStrideAndHeightPartitions) {
  Rng rng(2);
  std::vector<Vec3> pts;
  for (int i = 0; i < 1000; ++i) pts.push_back({0, 0, uniform(rng, -5, 80)});
  const auto seq = build_sequence_in_frame(pts, FrustumFrame{}, {0.5, 0.5}, {0, 70});
  std::vector<int> count(pts.size(), 0);
  for (const auto& g : seq.groups)
    for (auto i : g) ++count[i];
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(count[i], pts[i].z >= 0 && pts[i].z < 70 ? 1 : 0);
}

TEST(Slabs, DoubleHeightCoversTwiceExceptFirstSlab) {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 1000; ++i) pts.push_back({0, 0, uniform(rng, 0, 70)});
  pts.push_back({0, 0, 5.0});  // exactly on a slab boundary
  const auto seq = build_sequence_in_frame(pts, FrustumFrame{}, {0.25, 0.5}, {0, 70});
  std::vector<int> count(pts.size(), 0);
  for (const auto& g : seq.groups)
    for (auto i : g) ++count[i];
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(count[i], pts[i].z < 0.25 ? 1 : 2) << pts[i].z;
}

TEST(Slabs, MatchesBruteForceOracle) {
  Rng rng(4);
  for (int scene = 0; scene < 50; ++scene) {
    const double s = uniform(rng, 0.05, 1.0), u = s * (1 + std::floor(uniform(rng, 0, 4)));
    const DepthRange range{uniform(rng, -2, 2), uniform(rng, 5, 40)};
    std::vector<Vec3> pts;
    for (int i = 0; i < 400; ++i) pts.push_back({uniform(rng, -3, 3), uniform(rng, -2, 2), uniform(rng, -5, 45)});
    const auto seq = build_sequence_in_frame(pts, FrustumFrame{}, {s, u}, range);
    EXPECT_EQ(seq.groups, oracle::slab_members(pts, range.min, range.max, s, u, seq.length));
  }
}

TEST(Slabs, CentroidsAreAxisMidpointsWithStrideStep) {
  const auto seq = build_sequence_in_frame({}, FrustumFrame{}, {0.25, 0.5}, {0, 70});
  ASSERT_EQ(seq.centroids.size(), 280u);
  EXPECT_DOUBLE_EQ(seq.centroids[0].z, 0.25);
  for (std::size_t t = 1; t < seq.length; ++t) {
    EXPECT_NEAR(seq.centroids[t].z - seq.centroids[t - 1].z, 0.25, 1e-12);
    EXPECT_EQ(seq.centroids[t].x, 0.0);
  }
}

TEST(Slabs, InvalidResolutionIsConfigError) {
  EXPECT_THROW(build_sequence_in_frame({}, FrustumFrame{}, {0.0, 0.5}, {0, 70}), ConfigError);
  EXPECT_THROW(build_sequence_in_frame({}, FrustumFrame{}, {0.25, -1}, {0, 70}), ConfigError);
  EXPECT_THROW(build_sequence_in_frame({}, FrustumFrame{}, {0.25, 0.5}, {10, 10}), ConfigError);
}

TEST(Slabs, RotationAboutCameraMovingTheRayKeepsMembership) {
  const CameraCalib c = calib();
  Rng rng(5);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({uniform(rng, -2, 2), uniform(rng, -1, 1), uniform(rng, 5, 30)});
  const RegionProposal2D p = centered(700, 200);
  const FrustumFrame f = frustum_frame(p, c);
  const auto a = build_sequence(pts, f, {0.25, 0.5}, {0, 40});
  // Rotate the world about the camera center by a yaw; the same frame composed with the
  // inverse rotation sees identical frame coordinates.
  const Mat3 r = rot_y(0.1);
  std::vector<Vec3> moved;
  for (const Vec3& q : pts) moved.push_back(r * q);
  FrustumFrame g = f;
  g.rotation = f.rotation * r.transposed();
  const auto b = build_sequence(moved, g, {0.25, 0.5}, {0, 40});
  EXPECT_EQ(a.groups, b.groups);
}

TEST(MultiResolution, KittiLadderLengths) {
  const std::vector<SlabResolution> ladder{{0.25, 0.5}, {0.5, 1}, {1, 2}, {2, 4}};
  const auto seqs = multi_resolution_sequences_in_frame({}, FrustumFrame{}, ladder, {0, 70});
  ASSERT_EQ(seqs.size(), 4u);
  EXPECT_EQ(seqs[0].length, 280u);
  EXPECT_EQ(seqs[1].length, 140u);
  EXPECT_EQ(seqs[2].length, 70u);
  EXPECT_EQ(seqs[3].length, 35u);
}

TEST(MultiResolution, SingleLevelEqualsBuildSequence) {
  Rng rng(6);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i) pts.push_back({0, 0, uniform(rng, 0, 70)});
  const std::vector<SlabResolution> one{{0.25, 0.5}};
  const auto seqs = multi_resolution_sequences_in_frame(pts, FrustumFrame{}, one, {0, 70});
  ASSERT_EQ(seqs.size(), 1u);
  EXPECT_EQ(seqs[0].groups, build_sequence_in_frame(pts, FrustumFrame{}, one[0], {0, 70}).groups);
}

TEST(MultiResolution, EveryLevelCoversTheSameInRangePoints) {
  Rng rng(7);
  std::vector<Vec3> pts;
  for (int i = 0; i < 500; ++i) pts.push_back({0, 0, uniform(rng, -10, 80)});
  const std::vector<SlabResolution> ladder{{0.25, 0.5}, {0.5, 1}, {1, 2}, {2, 4}};
  const auto seqs = multi_resolution_sequences_in_frame(pts, FrustumFrame{}, ladder, {0, 70});
  std::set<std::uint32_t> base;
  for (const auto& g : seqs[0].groups) base.insert(g.begin(), g.end());
  for (const auto& s : seqs) {
    std::set<std::uint32_t> u;
    for (const auto& g : s.groups) u.insert(g.begin(), g.end());
    EXPECT_EQ(u, base);
  }
}

TEST(MultiResolution, NonDoublingLadderIsConfigError) {
  const std::vector<SlabResolution> bad{{0.25, 0.5}, {0.75, 1.5}};
  EXPECT_THROW(multi_resolution_sequences_in_frame({}, FrustumFrame{}, bad, {0, 70}), ConfigError);
  const std::vector<SlabResolution> indivisible{{1, 2}, {2, 4}};
  EXPECT_THROW(multi_resolution_sequences_in_frame({}, FrustumFrame{}, indivisible, {0, 7}), ConfigError);
}

TEST(OutputCentroids, UpsampledGridMidpoints) {
  // 280 input slabs predicted at 140 positions: stride 0.5, height 1.0.
  const auto c = output_centroids({0.25, 0.5}, {0, 70}, 280, 140);
  ASSERT_EQ(c.size(), 140u);
  EXPECT_DOUBLE_EQ(c[0].z, 0.5);
  EXPECT_DOUBLE_EQ(c[139].z, 139 * 0.5 + 0.5);
}

TEST(Anchors, SingleBinAtZeroYaw) {
  const auto seq = build_sequence_in_frame({}, FrustumFrame{}, {1, 2}, {0, 4});
  const AnchorSet a = build_anchors(seq, {{3.9, 1.6, 1.56}}, 1);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_EQ(a.anchor(p, 0, 0).yaw, 0.0);
    EXPECT_DOUBLE_EQ(a.anchor(p, 0, 0).center.z, seq.centroids[p].z);
  }
}

TEST(Anchors, TwelveBinCenters) {
  EXPECT_NEAR(yaw_bin_center(0, 12), -kPi + kPi / 12, 1e-15);
  for (std::size_t i = 1; i < 12; ++i) EXPECT_NEAR(yaw_bin_center(i, 12) - yaw_bin_center(i - 1, 12), kPi / 6, 1e-12);
}

TEST(Anchors, CountAndLayout) {
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const std::size_t L = 1 + rng() % 50, K = 1 + rng() % 4, N = 1 + rng() % 12;
    std::vector<Vec3> centers(L);
    std::vector<MeanSize> sizes(K, MeanSize{1, 1, 1});
    const AnchorSet a(centers, sizes, N);
    EXPECT_EQ(a.size(), L * K * N);
    EXPECT_EQ(a.flat_index(L - 1, K - 1, N - 1), L * K * N - 1);
  }
  EXPECT_THROW(AnchorSet({}, {{1, 1, 1}}, 0), ConfigError);
  EXPECT_THROW(AnchorSet({}, {{1, -1, 1}}, 2), ConfigError);
}
