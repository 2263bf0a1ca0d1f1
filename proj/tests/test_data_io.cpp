#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <opencv2/imgcodecs.hpp>

#include "metavo/data_io.hpp"
#include "metavo/geometry.hpp"
#include "test_support.hpp"

using namespace metavo;
namespace fs = std::filesystem;

namespace {

SyntheticSceneConfig smooth_config(int h = 32, int w = 64) {
  SyntheticSceneConfig cfg;
  cfg.height = h;
  cfg.width = w;
  cfg.texture = TextureKind::kPerlin;
  cfg.texture_scale = 45.0;
  cfg.texture_octaves = 1;
  cfg.contrast = 0.7;
  cfg.depth_base = 5.0;
  cfg.seed = 7;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("metavo_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_dummy_png(const fs::path& p, int w = 64, int h = 32, int shade = 100) {
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(shade, shade / 2 + 40, 255 - shade));
  REQUIRE(cv::imwrite(p.string(), img));
}

}  // namespace

TEST_CASE("identity motion script yields identical frames") {
  SyntheticSceneConfig cfg = smooth_config();
  cfg.motion = {PoseSE3::identity(), PoseSE3::identity()};
  const SequenceDataset d = generate_synthetic(cfg);
  REQUIRE(d.frames.size() == 3);
  for (int k = 1; k < 3; ++k)
    for (std::int64_t i = 0; i < d.frames[0].pixels.size(); ++i)
      CHECK(d.frames[k].pixels[i] == d.frames[0].pixels[i]);
}

TEST_CASE("pure x-translation shifts content by fx*tx/d pixels") {
  SyntheticSceneConfig cfg = smooth_config();
  const double fx = 0.62 * cfg.width;
  const int shift = 2;
  const double tx = shift * cfg.depth_base / fx;
  PoseSE3 rel;
  rel.translation << tx, 0, 0;
  cfg.motion = {rel};
  const SequenceDataset d = generate_synthetic(cfg);

  // frame1(y,x) sees the world point frame0 saw at (y, x+shift)
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x + shift < cfg.width; ++x)
        CHECK(d.frames[1].pixels.at(c, y, x) ==
              doctest::Approx(d.frames[0].pixels.at(c, y, x + shift)).epsilon(1e-9));
}

TEST_CASE("generation is bit-deterministic in the seed") {
  SyntheticSceneConfig cfg = smooth_config();
  Rng rng(3);
  cfg.motion = make_motion_script("mixed", 3, 0.05, 0.002, rng);
  const SequenceDataset a = generate_synthetic(cfg);
  const SequenceDataset b = generate_synthetic(cfg);
  for (std::size_t k = 0; k < a.frames.size(); ++k) {
    for (std::int64_t i = 0; i < a.frames[k].pixels.size(); ++i)
      CHECK(a.frames[k].pixels[i] == b.frames[k].pixels[i]);
    for (std::int64_t i = 0; i < a.gt_depths[k].values.size(); ++i)
      CHECK(a.gt_depths[k].values[i] == b.gt_depths[k].values[i]);
  }
}

TEST_CASE("master oracle: warping ground truth reconstructs every frame") {
  // ties generator, warp and sampling together; both depth models
  for (const DepthModel dm : {DepthModel::kPlane, DepthModel::kHeightField}) {
    SyntheticSceneConfig cfg = smooth_config();
    cfg.depth_model = dm;
    cfg.depth_amplitude = 0.35;
    cfg.seed = dm == DepthModel::kPlane ? 11 : 12;
    Rng rng(cfg.seed);
    cfg.motion = make_motion_script("mixed", 4, 0.06, 0.004, rng);
    const SequenceDataset d = generate_synthetic(cfg);

    for (std::size_t k = 1; k < d.frames.size(); ++k) {
      auto [recon, mask] =
          synthesize_view(d.frames[k - 1], d.gt_depths[k], d.gt_relatives[k - 1], d.intrinsics);
      double worst = 0;
      int valid = 0;
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x)
          if (mask.at(y, x) > 0.5) {
            ++valid;
            for (int c = 0; c < 3; ++c)
              worst = std::max(worst, std::fabs(recon.pixels.at(c, y, x) -
                                                d.frames[k].pixels.at(c, y, x)));
          }
      INFO("depth model ", static_cast<int>(dm), " frame ", k);
      CHECK(valid > cfg.height * cfg.width / 2);
      CHECK(worst < 1e-3);
    }
  }
}

TEST_CASE("constant texture is rejected by the gradient-energy floor") {
  SyntheticSceneConfig cfg = smooth_config();
  cfg.contrast = 0.0;
  cfg.motion = {PoseSE3::identity()};
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
}

TEST_CASE("motion into the scene raises a generation error") {
  SyntheticSceneConfig cfg = smooth_config();
  PoseSE3 fwd;
  fwd.translation << 0, 0, 3.0;
  cfg.motion = {fwd, fwd};  // 6 units forward, plane at 5
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
}

TEST_CASE("occluder variant renders a nearer moving patch") {
  SyntheticSceneConfig cfg = smooth_config();
  cfg.occluder = true;
  cfg.motion = {PoseSE3::identity(), PoseSE3::identity()};
  const SequenceDataset d = generate_synthetic(cfg);
  int near_px = 0;
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      if (d.gt_depths[0].at(y, x) < cfg.depth_base - 1.0) ++near_px;
  CHECK(near_px > 20);  // occluder visible
  // it moves: depth maps of consecutive frames differ
  bool moved = false;
  for (int y = 0; y < cfg.height && !moved; ++y)
    for (int x = 0; x < cfg.width && !moved; ++x)
      moved = std::fabs(d.gt_depths[1].at(y, x) - d.gt_depths[0].at(y, x)) > 0.5;
  CHECK(moved);
}

TEST_CASE("export / load round trip through the KITTI layout") {
  SyntheticSceneConfig cfg = smooth_config(kWorkingHeight, kWorkingWidth);
  cfg.texture_scale = 60.0;
  PoseSE3 rel = pose_from_euler(0.003, -0.002, 0.001, {0.05, 0.02, 0.08});
  cfg.motion = {rel};
  const SequenceDataset d = generate_synthetic(cfg);

  TempDir tmp("roundtrip");
  export_kitti_layout(d, tmp.path.string(), "00");
  const SequenceDataset back = load_kitti_layout(tmp.path.string(), "00");

  REQUIRE(back.frames.size() == d.frames.size());
  CHECK(back.intrinsics.fx == doctest::Approx(d.intrinsics.fx).epsilon(1e-9));
  double worst = 0;
  for (std::int64_t i = 0; i < d.frames[0].pixels.size(); ++i)
    worst = std::max(worst, std::fabs(back.frames[0].pixels[i] - d.frames[0].pixels[i]));
  CHECK(worst <= 0.5 / 255.0 + 1e-12);  // 8-bit quantization only

  REQUIRE(back.gt_poses.size() == 2);
  CHECK((back.gt_poses[1].translation - d.gt_poses[1].translation).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((back.gt_poses[1].rotation - d.gt_poses[1].rotation).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("intrinsics rescaling arithmetic") {
  const Intrinsics raw{718.856, 718.856, 607.1928, 185.2157, 1241, 376};
  const Intrinsics k = raw.rescaled(416, 128);
  CHECK(k.fx == doctest::Approx(718.856 * 416.0 / 1241.0).epsilon(1e-12));
  CHECK(k.fx == doctest::Approx(240.98).epsilon(1e-4));
  CHECK(k.fy == doctest::Approx(718.856 * 128.0 / 376.0).epsilon(1e-12));
}

TEST_CASE("loader rejects gaps, missing intrinsics and bad pose counts") {
  TempDir tmp("kitti_errors");
  const fs::path dir = tmp.path / "seq";
  fs::create_directories(dir);
  write_dummy_png(dir / "000000.png");
  write_dummy_png(dir / "000001.png");
  write_dummy_png(dir / "000003.png");  // gap at 2

  // no intrinsics yet
  CHECK_THROWS_AS(load_kitti_layout(tmp.path.string(), "seq"), DataError);

  std::ofstream(dir / "intrinsics.txt") << "40 40 31.5 15.5\n";
  try {
    load_kitti_layout(tmp.path.string(), "seq");
    FAIL("expected gap error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }

  write_dummy_png(dir / "000002.png");
  const SequenceDataset ok = load_kitti_layout(tmp.path.string(), "seq");
  CHECK(ok.frames.size() == 4);
  CHECK(ok.frames[0].height() == kWorkingHeight);
  CHECK(ok.frames[0].width() == kWorkingWidth);
  CHECK(ok.gt_poses.empty());

  std::ofstream(dir / "poses.txt") << "1 0 0 0 0 1 0 0 0 0 1 0\n";  // 1 pose for 4 frames
  CHECK_THROWS_AS(load_kitti_layout(tmp.path.string(), "seq"), DataError);
}

TEST_CASE("TUM loader associates ground truth by nearest timestamp") {
  TempDir tmp("tum");
  const int n = 10;
  {
    std::ofstream rgb(tmp.path / "rgb.txt");
    rgb << "# color images\n";
    for (int i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "rgb/%04d.png", i);
      fs::create_directories(tmp.path / "rgb");
      write_dummy_png(tmp.path / name, 32, 16, 30 + i * 10);
      rgb << (100.0 + i * 0.1) << " " << name << "\n";
    }
    std::ofstream(tmp.path / "intrinsics.txt") << "30 30 15.5 7.5\n";
  }

  auto write_gt = [&](double offset, int stride) {
    std::ofstream gt(tmp.path / "groundtruth.txt");
    gt << "# ground truth\n";
    for (int i = 0; i < n; i += stride)
      gt << (100.0 + i * 0.1 + offset) << " " << 0.1 * i << " 0 0 0 0 0 1\n";
  };

  write_gt(0.005, 1);  // aligned within tolerance
  SequenceDataset all = load_tum_layout(tmp.path.string());
  CHECK(all.gt_poses.size() == static_cast<std::size_t>(n));
  CHECK(all.gt_unmatched == 0);

  write_gt(0.05, 1);  // beyond the 0.02 s tolerance
  SequenceDataset none = load_tum_layout(tmp.path.string());
  CHECK(none.gt_poses.empty());
  CHECK(none.gt_unmatched == n);

  write_gt(0.0, 2);  // every other frame has ground truth
  SequenceDataset half = load_tum_layout(tmp.path.string());
  CHECK(half.gt_poses.size() == static_cast<std::size_t>(n / 2));
  CHECK(half.gt_unmatched == n / 2);
  CHECK(half.gt_frame_indices[1] == 2);
}
