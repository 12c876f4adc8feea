#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fconv/cli.hpp"

using namespace fconv;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fconv");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fconv_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = detail::read_text(e.path());
  return out;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST_F(Cli, SynthIsByteIdenticalForSameSeed) {
  ASSERT_EQ(cli({"synth", "--out", path("a"), "--count", "10", "--seed", "7"}).code, 0);
  ASSERT_EQ(cli({"synth", "--out", path("b"), "--count", "10", "--seed", "7"}).code, 0);
  ASSERT_EQ(cli({"synth", "--out", path("c"), "--count", "10", "--seed", "8"}).code, 0);
  const auto a = read_tree(path("a")), b = read_tree(path("b")), c = read_tree(path("c"));
  EXPECT_EQ(a.size(), 3u * 10u + 1u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST_F(Cli, PrepareRecoversTemplateSizes) {
  const std::string tpl = "synth.templates=Car:3.9,1.6,1.56;Pedestrian:0.8,0.6,1.73";
  ASSERT_EQ(cli({"synth", "--out", path("d"), "--count", "30", tpl, "synth.boxes_per_scene=2"}).code, 0);
  const Result r = cli({"prepare", "--data", path("d"), "--out", path("prepared.cfg")});
  ASSERT_EQ(r.code, 0) << r.err;
  Config cfg;
  cfg.load_file(path("prepared.cfg"));
  const auto sizes = parse_mean_sizes(cfg.get("anchors.mean_sizes"));
  const std::map<std::string, MeanSize> want{{"Car", {3.9, 1.6, 1.56}}, {"Pedestrian", {0.8, 0.6, 1.73}}};
  std::size_t seen = 0;
  for (const auto& [name, m] : sizes) {
    ASSERT_TRUE(want.count(name)) << name;
    const MeanSize& t = want.at(name);
    // Per-box sizes are uniform within 5%: the mean of about 30 lies well inside 2%.
    EXPECT_NEAR(m.l, t.l, 0.02 * t.l) << name;
    EXPECT_NEAR(m.w, t.w, 0.02 * t.w) << name;
    EXPECT_NEAR(m.h, t.h, 0.02 * t.h) << name;
    ++seen;
  }
  EXPECT_EQ(seen, 2u);
}

TEST_F(Cli, EvalOfLabelsAsDetectionsIsPerfect) {
  ASSERT_EQ(cli({"synth", "--out", path("d"), "--count", "8",
                 "synth.templates=Car:3.9,1.6,1.56;Pedestrian:0.8,0.6,1.73;Cyclist:1.76,0.6,1.73"})
                .code,
            0);
  std::vector<DetectionResult> dets;
  for (const auto& [id, labels] : cli_detail::load_label_map(path("d")))
    for (const auto& l : labels) {
      DetectionResult d;
      d.frame_id = id;
      d.category = l.category;
      d.box = l.box;
      d.score_3d = d.score_fused = 1.0;
      dets.push_back(d);
    }
  save_detections(path("dets.txt"), dets);
  const Result r = cli({"eval", "--data", path("d"), "--detections", path("dets.txt"), "--out", path("ap.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream kv(detail::read_text(path("ap.txt")));
  std::string line;
  std::size_t present = 0;
  while (std::getline(kv, line)) {
    const std::string v = line.substr(line.find('=') + 1);
    if (v == "absent") continue;
    EXPECT_EQ(v, "1.000000") << line;
    ++present;
  }
  EXPECT_GE(present, 6u);
}

TEST_F(Cli, ResolvedConfigIsEchoedAndPure) {
  detail::write_text(path("x.cfg"), "# comment\ntrain.lr = 0.002\nseed = 3\n");
  const std::vector<std::string> args{"synth", "--out", path("d"), "--count", "1", "--config", path("x.cfg"),
                                      "train.lr=0.005"};
  const Result a = cli(args), b = cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(first_line(a.out), "# resolved config");
  EXPECT_NE(a.out.find("\ntrain.lr = 0.005\n"), std::string::npos);
  EXPECT_NE(a.out.find("\nseed = 3\n"), std::string::npos);
  EXPECT_NE(a.out.find("\nsynth.count = 1\n"), std::string::npos);
}

TEST_F(Cli, UnknownKeyListsValidKeys) {
  const Result r = cli({"synth", "--out", path("d"), "train.learning_rate=1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.find("error: code=config msg="), 0u);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos);
  EXPECT_NE(r.err.find("valid keys:"), std::string::npos);
  for (const auto& k : config_registry()) EXPECT_NE(r.err.find(k.key), std::string::npos) << k.key;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, ErrorsHaveDistinctCodes) {
  ASSERT_EQ(cli({"synth", "--out", path("d"), "--count", "1"}).code, 0);
  detail::write_text(path("bad_dets.txt"), "000000 Car 1 2 3\n");
  detail::write_text(path("bad.cfg"), "this line has no equals sign\n");
  struct Case {
    std::vector<std::string> args;
    int code;
    std::string kind;
  };
  const std::vector<Case> cases{
      {{"frobnicate"}, 2, "config"},
      {{"synth", "--out", path("e"), "loss.focal_gamma=abc"}, 2, "config"},
      {{"synth", "--out", path("e"), "--config", path("bad.cfg")}, 2, "config"},
      {{"synth", "--out", path("e"), "--config", path("nope.cfg")}, 3, "missing_file"},
      {{"eval", "--data", path("d"), "--detections", path("nope.txt")}, 3, "missing_file"},
      {{"eval", "--data", path("d"), "--detections", path("bad_dets.txt")}, 4, "malformed_file"},
      {{"infer", "--data", path("d"), "--checkpoint", path("bad_dets.txt"), "--out", path("o.txt")}, 4, "malformed_file"},
  };
  for (const auto& c : cases) {
    const Result r = cli(c.args);
    EXPECT_EQ(r.code, c.code) << c.args[0] << " " << r.err;
    EXPECT_EQ(r.err.find("error: code=" + c.kind + " msg="), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  }
}

TEST_F(Cli, TrainInferRefineExportRoundTrip) {
  ASSERT_EQ(cli({"synth", "--out", path("d"), "--count", "2", "synth.boxes_per_scene=1"}).code, 0);
  const std::vector<std::string> small{"--preset", "desk", "train.max_steps=2", "train.batch_size=2",
                                       "data.points_per_proposal=64", "refine.points=64", "refine.length=8",
                                       "refine.widths=8,8", "refine.pointnet_hidden=8,8", "refine.deconv_filters=8"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), small.begin(), small.end());
    return a;
  };
  Result r = cli(with({"train", "--data", path("d"), "--out", path("det.ckpt")}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("trained 2 steps"), std::string::npos);
  r = cli(with({"train", "--stage", "refine", "--data", path("d"), "--out", path("ref.ckpt")}));
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli(with({"infer", "--data", path("d"), "--checkpoint", path("det.ckpt"), "--out", path("dets.txt"),
                "infer.fg_threshold=0"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(load_detections(path("dets.txt")).empty());
  r = cli(with({"refine", "--data", path("d"), "--checkpoint", path("ref.ckpt"), "--detections", path("dets.txt"),
                "--out", path("refined.txt")}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(load_detections(path("refined.txt")).empty());
  // A detector checkpoint is refused where a refiner is expected.
  r = cli({"refine", "--data", path("d"), "--checkpoint", path("det.ckpt"), "--detections", path("dets.txt"), "--out",
           path("x.txt")});
  EXPECT_EQ(r.code, 2);
  r = cli({"export", "--data", path("d"), "--frame", "000000", "--detections", path("refined.txt"), "--out",
           path("scene.obj")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string obj = detail::read_text(path("scene.obj"));
  EXPECT_NE(obj.find("o label_Car_0"), std::string::npos);
  EXPECT_NE(obj.find("o det_Car_1"), std::string::npos);
}
