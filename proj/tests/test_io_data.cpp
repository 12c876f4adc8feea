#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include "fconv/kitti_io.hpp"
#include "fconv/sampling.hpp"
#include "fconv/synthetic.hpp"
#include "oracles.hpp"

using namespace fconv;

namespace {

std::vector<unsigned char> float_bytes(std::initializer_list<float> vals) {
  std::vector<unsigned char> out;
  for (float f : vals) {
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    out.insert(out.end(), b, b + 4);
  }
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fconv_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

const char* kCalib =
    "P0: 7.215377e+02 0 6.095593e+02 0 0 7.215377e+02 1.728540e+02 0 0 0 1 0\n"
    "P1: 7.215377e+02 0 6.095593e+02 -3.875744e+02 0 7.215377e+02 1.728540e+02 0 0 0 1 0\n"
    "P2: 7.215377e+02 0 6.095593e+02 4.485728e+01 0 7.215377e+02 1.728540e+02 2.163791e-01 0 0 1 2.745884e-03\n"
    "P3: 7.215377e+02 0 6.095593e+02 -3.395242e+02 0 7.215377e+02 1.728540e+02 2.199936e+00 0 0 1 2.729905e-03\n"
    "R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 "
    "7.402527e-03 4.351614e-03 9.999631e-01\n"
    "Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 "
    "-9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01\n"
    "Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0\n";

}  // namespace

TEST(KittiCloud, DecodesTwoPoints) {
  const auto bytes = float_bytes({1, 2, 3, 0.5f, 4, 5, 6, 0.1f});
  ASSERT_EQ(bytes.size(), 32u);
  const PointCloud c = decode_kitti_cloud(bytes);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[0].x, 1.0);
  EXPECT_EQ(c.points[0].y, 2.0);
  EXPECT_EQ(c.points[0].z, 3.0);
  EXPECT_FLOAT_EQ(c.intensities[1], 0.1f);
  EXPECT_EQ(c.frame, CloudFrame::sensor);
}

TEST(KittiCloud, EmptyFileIsEmptyCloud) {
  const auto dir = temp_dir("empty_cloud");
  detail::write_text(dir / "e.bin", "");
  EXPECT_EQ(load_kitti_cloud(dir / "e.bin").size(), 0u);
}

TEST(KittiCloud, SizeNotMultipleOf16IsMalformed) {
  const std::vector<unsigned char> bytes(17, 0);
  EXPECT_THROW(decode_kitti_cloud(bytes), MalformedFileError);
}

TEST(KittiCloud, NanIsMalformed) {
  const auto bytes = float_bytes({1, std::nanf(""), 3, 0});
  EXPECT_THROW(decode_kitti_cloud(bytes), MalformedFileError);
}

TEST(KittiCloud, MissingFile) { EXPECT_THROW(load_kitti_cloud("/nonexistent/x.bin"), MissingFileError); }

TEST(KittiCloud, EncodeDecodeRoundTrip) {
  PointCloud c;
  c.points = {{1.5, -2.25, 3.0}, {0, 0, 0}};
  c.intensities = {0.25f, 1.0f};
  const std::string s = encode_kitti_cloud(c);
  const PointCloud d = decode_kitti_cloud({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.points[0].y, -2.25);
  EXPECT_EQ(d.intensities[0], 0.25f);
}

TEST(KittiLabel, CarLineUsesVolumetricCenter) {
  const Label l = parse_kitti_label_line("Car 0.00 0 0.00 100 100 200 180 1.56 1.6 3.9 0 0.9 10 0");
  EXPECT_EQ(l.category, category_id("Car"));
  EXPECT_DOUBLE_EQ(l.box.l, 3.9);
  EXPECT_DOUBLE_EQ(l.box.w, 1.6);
  EXPECT_DOUBLE_EQ(l.box.h, 1.56);
  EXPECT_DOUBLE_EQ(l.box.center.y, 0.9 - 1.56 / 2);
  EXPECT_DOUBLE_EQ(l.box.center.z, 10.0);
  EXPECT_EQ(l.difficulty, Difficulty::easy);  // 80 px tall, unoccluded
}

TEST(KittiLabel, DontCareIsIgnored) {
  const Label l = parse_kitti_label_line("DontCare -1 -1 -10 503 169 590 190 -1 -1 -1 -1000 -1000 -1000 -10");
  EXPECT_EQ(l.category, -1);
  EXPECT_EQ(l.difficulty, Difficulty::ignore);
}

TEST(KittiLabel, UnknownTypeIsIgnored) {
  const Label l = parse_kitti_label_line("Tram 0 0 0 0 0 10 50 3 2.5 15 1 1 20 0");
  EXPECT_EQ(l.category, -1);
  EXPECT_EQ(l.difficulty, Difficulty::ignore);
}

TEST(KittiLabel, ShortLineIsMalformed) {
  EXPECT_THROW(parse_kitti_label_line("Car 0 0 0 1 2 3"), MalformedFileError);
}

TEST(KittiLabel, DifficultyThresholds) {
  EXPECT_EQ(kitti_difficulty(40, 0, 0.15), Difficulty::easy);
  EXPECT_EQ(kitti_difficulty(39.9, 0, 0.0), Difficulty::moderate);
  EXPECT_EQ(kitti_difficulty(25, 1, 0.30), Difficulty::moderate);
  EXPECT_EQ(kitti_difficulty(25, 2, 0.50), Difficulty::hard);
  EXPECT_EQ(kitti_difficulty(24.9, 0, 0.0), Difficulty::ignore);
  EXPECT_EQ(kitti_difficulty(100, 3, 0.0), Difficulty::ignore);
  EXPECT_EQ(kitti_difficulty(100, 0, 0.51), Difficulty::ignore);
}

TEST(KittiLabel, SerializeRoundTrip) {
  const auto labels = parse_kitti_labels(
      "Car 0.10 1 -1.5 10.5 20.25 300 180.75 1.5 1.7 4.1 -3.2 1.7 25.3 -1.2\n"
      "Pedestrian 0 0 0.3 600 150 640 230 1.8 0.6 0.8 2.0 1.6 12.0 2.9\n");
  const auto again = parse_kitti_labels(serialize_kitti_labels(labels));
  ASSERT_EQ(again.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(again[i].box.center.x, labels[i].box.center.x, 1e-9);
    EXPECT_NEAR(again[i].box.center.y, labels[i].box.center.y, 1e-9);
    EXPECT_NEAR(again[i].box.center.z, labels[i].box.center.z, 1e-9);
    EXPECT_NEAR(again[i].box.yaw, labels[i].box.yaw, 1e-9);
    EXPECT_NEAR(again[i].box.l, labels[i].box.l, 1e-9);
    EXPECT_EQ(again[i].difficulty, labels[i].difficulty);
    EXPECT_NEAR(again[i].truncation, labels[i].truncation, 1e-9);
    EXPECT_NEAR(again[i].image_box[3], labels[i].image_box[3], 1e-9);
  }
}

TEST(KittiCalib, ParseAndRoundTrip) {
  const CameraCalib c = parse_kitti_calib(kCalib);
  EXPECT_DOUBLE_EQ(c.projection(0, 0), 721.5377);
  EXPECT_DOUBLE_EQ(c.projection(0, 3), 44.85728);
  EXPECT_DOUBLE_EQ(c.rect_rotation(0, 1), 9.837760e-03);
  EXPECT_DOUBLE_EQ(c.sensor_to_camera(2, 3), -2.717806e-01);
  const CameraCalib d = parse_kitti_calib(serialize_kitti_calib(c));
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 4; ++k) {
      EXPECT_NEAR(d.projection(r, k), c.projection(r, k), 1e-9);
      EXPECT_NEAR(d.sensor_to_camera(r, k), c.sensor_to_camera(r, k), 1e-9);
      if (k < 3) {
        EXPECT_NEAR(d.rect_rotation(r, k), c.rect_rotation(r, k), 1e-9);
      }
    }
}

TEST(KittiCalib, MissingKeyIsMalformed) {
  EXPECT_THROW(parse_kitti_calib("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n"), MalformedFileError);
}

TEST(KittiCalib, NonOrthonormalRotationIsMalformed) {
  const std::string bad =
      "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 2 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  EXPECT_THROW(parse_kitti_calib(bad), MalformedFileError);
}

TEST(SensorToRect, IdentityTranslationAndInverse) {
  PointCloud c;
  c.points = {{1, 2, 3}, {-4, 0.5, 7}};
  CameraCalib id;
  EXPECT_EQ(sensor_to_rect(c, id).points[1].x, -4.0);
  CameraCalib shift;
  shift.sensor_to_camera(2, 3) = 1.0;
  const PointCloud s = sensor_to_rect(c, shift);
  EXPECT_DOUBLE_EQ(s.points[0].z, 4.0);
  EXPECT_DOUBLE_EQ(s.points[1].z, 8.0);
  EXPECT_EQ(s.frame, CloudFrame::camera_rect);

  const CameraCalib k = parse_kitti_calib(kCalib);
  const PointCloud r = sensor_to_rect(c, k);
  const Mat34 inv = rigid_inverse(k.sensor_to_camera);
  for (std::size_t i = 0; i < c.size(); ++i) {
    // The published matrices are orthonormal to about 1e-7, so the transpose inverse is that close.
    const Vec3 back = inv.apply(inverse(k.rect_rotation) * r.points[i]);
    EXPECT_NEAR(back.x, c.points[i].x, 1e-5);
    EXPECT_NEAR(back.y, c.points[i].y, 1e-5);
    EXPECT_NEAR(back.z, c.points[i].z, 1e-5);
  }
}

TEST(PointsInProposal, CenterAndBehindCamera) {
  const CameraCalib c = synthetic_calib(SyntheticConfig{});
  PointCloud cloud;
  cloud.frame = CloudFrame::camera_rect;
  cloud.points = {{0, 0, 10}, {0, 0, -5}};
  const auto uv = project(c, {0, 0, 10});
  ASSERT_TRUE(uv.has_value());
  RegionProposal2D p{uv->first - 5, uv->second - 5, uv->first + 5, uv->second + 5, 0, 1.0};
  const auto idx = points_in_proposal(cloud, c, p);
  ASSERT_EQ(idx.size(), 1u);
  EXPECT_EQ(idx[0], 0u);
  // The point behind the camera is excluded even for a proposal covering the whole image.
  RegionProposal2D all{-1e6, -1e6, 1e6, 1e6, 0, 1.0};
  EXPECT_EQ(points_in_proposal(cloud, c, all).size(), 1u);
}

TEST(PointsInProposal, MatchesBruteForceOnRandomScenes) {
  Rng rng(11);
  const CameraCalib c = parse_kitti_calib(kCalib);
  for (int scene = 0; scene < 100; ++scene) {
    PointCloud cloud;
    cloud.frame = CloudFrame::camera_rect;
    for (int i = 0; i < 300; ++i)
      cloud.points.push_back({uniform(rng, -20, 20), uniform(rng, -3, 3), uniform(rng, -10, 60)});
    const double u0 = uniform(rng, 0, 1100), v0 = uniform(rng, 0, 300);
    RegionProposal2D p{u0, v0, u0 + uniform(rng, 5, 300), v0 + uniform(rng, 5, 150), 0, 0.9};
    EXPECT_EQ(points_in_proposal(cloud, c, p), oracle::proposal_members(cloud.points, c.projection, p));
  }
}

TEST(Proposals, ParseSerializeAndErrors) {
  const auto props = parse_proposals("000001 Car 10 20 110 90 0.95\n# comment\n000002 Pedestrian 1 2 3 4 0.5\n");
  ASSERT_EQ(props.size(), 2u);
  EXPECT_EQ(props[0].frame_id, "000001");
  EXPECT_DOUBLE_EQ(props[0].proposal.u_max, 110.0);
  EXPECT_EQ(props[1].proposal.category, category_id("Pedestrian"));
  const auto again = parse_proposals(serialize_proposals(props));
  EXPECT_DOUBLE_EQ(again[1].proposal.score_2d, 0.5);
  EXPECT_THROW(parse_proposals("000001 Car 10 20 5 90 0.9\n"), MalformedFileError);
  EXPECT_THROW(parse_proposals("000001 Car 10 20 50\n"), MalformedFileError);
  EXPECT_THROW(parse_proposals("000001 Truck 10 20 50 60 0.1\n"), MalformedFileError);
}

TEST(SampleFixed, WithoutReplacement) {
  std::vector<std::size_t> idx(2000);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(3);
  const auto s = sample_fixed(idx, 1024, rng);
  EXPECT_EQ(s.size(), 1024u);
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 1024u);
}

TEST(SampleFixed, WithReplacementAndEmpty) {
  std::vector<std::size_t> idx{5, 9, 13, 17, 21, 25, 29, 33, 37, 41};
  Rng rng(4);
  const auto s = sample_fixed(idx, 512, rng);
  EXPECT_EQ(s.size(), 512u);
  for (auto i : s) EXPECT_NE(std::find(idx.begin(), idx.end(), i), idx.end());
  EXPECT_TRUE(sample_fixed({}, 16, rng).empty());
  EXPECT_THROW(sample_fixed(idx, 0, rng), ConfigError);
}

TEST(SampleFixed, DeterministicAndOrderInvariant) {
  std::vector<std::size_t> idx{8, 3, 99, 42, 7, 1, 55};
  std::vector<std::size_t> shuffled{1, 99, 7, 42, 8, 55, 3};
  Rng a(5), b(5), c(5);
  const auto x = sample_fixed(idx, 5, a);
  EXPECT_EQ(x, sample_fixed(idx, 5, b));
  EXPECT_EQ(x, sample_fixed(shuffled, 5, c));
}

TEST(Augment, ZeroMagnitudesAreIdentity) {
  const AugmentConfig zero{0, 0, 0, 0};
  Rng rng(6);
  const RegionProposal2D p{10, 20, 110, 80, 0, 0.7};
  const RegionProposal2D q = augment_proposal(p, rng, zero);
  EXPECT_EQ(q.u_min, p.u_min);
  EXPECT_EQ(q.v_max, p.v_max);
  std::vector<Vec3> pts{{1, 2, 3}, {-1, 0, 9}};
  const auto before = pts;
  const PointAugmentation a = augment_points(pts, rng, zero);
  EXPECT_FALSE(a.flip);
  EXPECT_EQ(pts[1].x, before[1].x);
  EXPECT_EQ(pts[1].z, before[1].z);
  const OrientedBox3D anchor({0, 0, 10}, 3.9, 1.6, 1.56, 0.3);
  const OrientedBox3D gt({0.4, 0.1, 11}, 4.1, 1.7, 1.5, 0.6);
  const auto t0 = encode(gt, anchor), t1 = encode(a.apply(gt), anchor);
  for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(t0[j], t1[j]);
}

TEST(Augment, ProposalJitterWithinBounds) {
  const AugmentConfig cfg{0.1, 0.1, 0.5, 1.0};
  Rng rng(7);
  const RegionProposal2D p{100, 50, 200, 150, 0, 1.0};
  for (int i = 0; i < 200; ++i) {
    const RegionProposal2D q = augment_proposal(p, rng, cfg);
    EXPECT_LE(std::abs(q.center_u() - p.center_u()), 0.1 * p.width() + 1e-9);
    EXPECT_LE(std::abs(q.center_v() - p.center_v()), 0.1 * p.height() + 1e-9);
    EXPECT_GE(q.width(), 0.9 * p.width() - 1e-9);
    EXPECT_LE(q.width(), 1.1 * p.width() + 1e-9);
    EXPECT_NEAR(q.width() / p.width(), q.height() / p.height(), 1e-9);
  }
}

TEST(Augment, FlipIsInvolution) {
  PointAugmentation f;
  f.flip = true;
  std::vector<Vec3> pts{{1, 2, 3}, {-0.5, 1, 7}};
  const auto orig = pts;
  f.apply_in_place(pts);
  f.apply_in_place(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(pts[i].x, orig[i].x);
  const OrientedBox3D b({1, 0, 5}, 4, 1.6, 1.5, 0.7);
  const OrientedBox3D bb = f.apply(f.apply(b));
  EXPECT_NEAR(bb.yaw, b.yaw, 1e-12);
  // A flipped box contains the flipped points of the original.
  for (const Vec3& c : corners(b)) EXPECT_TRUE(point_in_box(f.apply(c), f.apply(b), 1.0 + 1e-9));
}

TEST(Augment, ShiftMovesTargetsByExactlyD) {
  PointAugmentation s;
  s.shift = 0.75;
  const OrientedBox3D anchor({0, 0, 10}, 3.9, 1.6, 1.56, 0.0);
  const OrientedBox3D gt({0.5, 0.0, 10.25}, 4.29, 1.6, 1.56, 0.1);
  const auto t0 = encode(gt, anchor), t1 = encode(s.apply(gt), anchor);
  EXPECT_DOUBLE_EQ(t1[2] - t0[2], 0.75);
  for (std::size_t j : {0u, 1u, 3u, 4u, 5u, 6u}) EXPECT_EQ(t0[j], t1[j]);
}

TEST(Synthetic, SingleBoxNoClutterPointsInsideBox) {
  SyntheticConfig cfg;
  cfg.boxes_per_scene = 1;
  cfg.clutter_points = 0;
  Rng rng(8);
  const SceneSample s = make_synthetic_scene(cfg, rng);
  ASSERT_TRUE(s.labels);
  ASSERT_EQ(s.labels->size(), 1u);
  const PointCloud rect = sensor_to_rect(s.cloud, s.calib);
  ASSERT_EQ(rect.size(), cfg.points_per_box);
  const OrientedBox3D inflated = scaled((*s.labels)[0].box, 1.1);
  for (const Vec3& p : rect.points) EXPECT_TRUE(point_in_box(p, inflated));
  EXPECT_NEAR(iou_3d((*s.labels)[0].box, (*s.labels)[0].box), 1.0, 1e-12);
}

TEST(Synthetic, ProposalIsProjectionBound) {
  SyntheticConfig cfg;
  Rng rng(9);
  const SceneSample s = make_synthetic_scene(cfg, rng);
  ASSERT_EQ(s.proposals.size(), s.labels->size());
  for (std::size_t i = 0; i < s.proposals.size(); ++i) {
    double u0 = 1e9, u1 = -1e9, v0 = 1e9, v1 = -1e9;
    for (const Vec3& c : corners((*s.labels)[i].box)) {
      const auto uv = project(s.calib, c);
      ASSERT_TRUE(uv);
      u0 = std::min(u0, uv->first);
      u1 = std::max(u1, uv->first);
      v0 = std::min(v0, uv->second);
      v1 = std::max(v1, uv->second);
    }
    EXPECT_NEAR(s.proposals[i].u_min, u0, 1e-9);
    EXPECT_NEAR(s.proposals[i].u_max, u1, 1e-9);
    EXPECT_NEAR(s.proposals[i].v_min, v0, 1e-9);
    EXPECT_NEAR(s.proposals[i].v_max, v1, 1e-9);
    EXPECT_GE(s.proposals[i].score_2d, cfg.score_2d_min);
  }
}

TEST(Synthetic, BoxesDoNotOverlapAndSitOnGround) {
  SyntheticConfig cfg;
  cfg.boxes_per_scene = 4;
  Rng rng(10);
  for (int k = 0; k < 20; ++k) {
    const SceneSample s = make_synthetic_scene(cfg, rng);
    const auto& L = *s.labels;
    for (std::size_t i = 0; i < L.size(); ++i) {
      EXPECT_NEAR(L[i].box.center.y + 0.5 * L[i].box.h, cfg.camera_height, 1e-12);
      for (std::size_t j = i + 1; j < L.size(); ++j) EXPECT_EQ(iou_bev(L[i].box, L[j].box), 0.0);
    }
  }
}

TEST(Synthetic, ImpossiblePlacementIsGenerationError) {
  SyntheticConfig cfg;
  cfg.boxes_per_scene = 200;
  cfg.max_retries = 20;
  Rng rng(12);
  EXPECT_THROW(make_synthetic_scene(cfg, rng), GenerationError);
}

TEST(Synthetic, DeterministicUnderSeed) {
  SyntheticConfig cfg;
  Rng a(13), b(13);
  const SceneSample x = make_synthetic_scene(cfg, a), y = make_synthetic_scene(cfg, b);
  EXPECT_EQ(encode_kitti_cloud(x.cloud), encode_kitti_cloud(y.cloud));
  EXPECT_EQ(serialize_kitti_labels(*x.labels), serialize_kitti_labels(*y.labels));
}

TEST(Dataset, LoadSceneFromDisk) {
  const auto dir = temp_dir("dataset");
  SyntheticConfig cfg;
  Rng rng(14);
  const SceneSample s = make_synthetic_scene(cfg, rng, "000003");
  const DatasetPaths ds{dir};
  save_kitti_cloud(ds.cloud("000003"), s.cloud);
  detail::write_text(ds.calib("000003"), serialize_kitti_calib(s.calib));
  detail::write_text(ds.label("000003"), serialize_kitti_labels(*s.labels));
  std::vector<FrameProposal> props;
  for (const auto& p : s.proposals) props.push_back({"000003", p});
  detail::write_text(ds.proposals(), serialize_proposals(props));

  EXPECT_EQ(list_frames(ds), std::vector<std::string>{"000003"});
  const auto loaded_props = load_proposals(ds.proposals());
  const SceneSample t = load_scene(ds, "000003", loaded_props, true);
  EXPECT_EQ(t.cloud.size(), s.cloud.size());
  // Generated points are already float-valued, so the file reproduces them exactly.
  std::size_t differ = 0;
  for (std::size_t i = 0; i < s.cloud.size(); ++i)
    differ += t.cloud.points[i].x != s.cloud.points[i].x || t.cloud.points[i].y != s.cloud.points[i].y ||
              t.cloud.points[i].z != s.cloud.points[i].z;
  EXPECT_EQ(differ, 0u);
  ASSERT_TRUE(t.labels);
  EXPECT_EQ(t.labels->size(), s.labels->size());
  EXPECT_EQ(t.proposals.size(), s.proposals.size());
}
