#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "metavo/data_io.hpp"
#include "metavo/evaluation.hpp"
#include "metavo/rng.hpp"

using namespace metavo;

namespace {

TrajectoryEstimate straight_line(int n, double step, double heading = 0.0) {
  std::vector<PoseSE3> rel(static_cast<std::size_t>(n),
                           pose_from_euler(0, heading, 0, {step * std::sin(heading), 0,
                                                           step * std::cos(heading)}));
  // constant small heading change per step makes a gentle arc
  return accumulate(rel);
}

TrajectoryEstimate random_trajectory(int n, Rng& rng) {
  std::vector<PoseSE3> rel;
  for (int k = 0; k < n; ++k)
    rel.push_back(pose_from_euler(rng.uniform(-0.02, 0.02), rng.uniform(-0.05, 0.05),
                                  rng.uniform(-0.02, 0.02),
                                  {rng.uniform(-0.05, 0.05), rng.uniform(-0.02, 0.02),
                                   rng.uniform(0.05, 0.2)}));
  return accumulate(rel);
}

}  // namespace

TEST_CASE("accumulate basics") {
  const TrajectoryEstimate idle = accumulate(std::vector<PoseSE3>(5));
  for (const PoseSE3& p : idle.poses) {
    CHECK(p.translation.norm() == 0.0);
    CHECK((p.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
  }

  PoseSE3 fwd;
  fwd.translation << 0, 0, 1;
  const TrajectoryEstimate line = accumulate(std::vector<PoseSE3>(10, fwd));
  CHECK(line.poses.size() == 11);
  CHECK((line.poses.back().translation - Eigen::Vector3d(0, 0, 10)).cwiseAbs().maxCoeff() <
        1e-12);

  PoseSE3 bad;
  bad.rotation(0, 0) = 2.0;
  CHECK_THROWS_AS(accumulate({bad}), DomainError);
}

TEST_CASE("accumulating generator relatives reproduces its absolute poses") {
  SyntheticSceneConfig cfg;
  cfg.height = 16;
  cfg.width = 32;
  cfg.texture_scale = 8.0;
  cfg.seed = 31;
  Rng rng(32);
  cfg.motion = make_motion_script("mixed", 12, 0.08, 0.01, rng);
  const SequenceDataset d = generate_synthetic(cfg);

  const TrajectoryEstimate traj = accumulate(d.gt_relatives);
  REQUIRE(traj.poses.size() == d.gt_poses.size());
  for (std::size_t k = 0; k < traj.poses.size(); ++k) {
    CHECK((traj.poses[k].rotation - d.gt_poses[k].rotation).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((traj.poses[k].translation - d.gt_poses[k].translation).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("scale alignment recovers exact and optimal scales") {
  Rng rng(33);
  const TrajectoryEstimate gt = random_trajectory(40, rng);

  // est = gt -> s = 1 exactly
  CHECK(scale_align(gt, gt).scale == 1.0);

  // half-scale translations -> s = 2 exactly
  TrajectoryEstimate half = gt;
  for (PoseSE3& p : half.poses) p.translation *= 0.5;
  const TrajectoryEstimate aligned = scale_align(half, gt);
  CHECK(aligned.scale == 2.0);
  for (std::size_t k = 0; k < gt.size(); ++k)
    CHECK((aligned.poses[k].translation - gt.poses[k].translation).cwiseAbs().maxCoeff() < 1e-12);

  // grid-scan oracle on a noisy pair
  TrajectoryEstimate noisy = gt;
  Rng rng2(34);
  for (PoseSE3& p : noisy.poses) {
    p.translation *= 0.37;
    p.translation += Eigen::Vector3d(rng2.uniform(-0.01, 0.01), rng2.uniform(-0.01, 0.01),
                                     rng2.uniform(-0.01, 0.01));
  }
  const double s_fit = scale_align(noisy, gt).scale;
  auto residual = [&](double s) {
    double acc = 0;
    for (std::size_t k = 0; k < gt.size(); ++k)
      acc += (s * noisy.poses[k].translation - gt.poses[k].translation).squaredNorm();
    return acc;
  };
  double best_s = 1e-3, best_r = 1e300;
  for (int i = 0; i <= 60000; ++i) {
    const double s = 1e-3 * std::pow(1e6, i / 60000.0);  // log grid over [1e-3, 1e3]
    const double r = residual(s);
    if (r < best_r) {
      best_r = r;
      best_s = s;
    }
  }
  CHECK(std::fabs(s_fit - best_s) / best_s < 1e-3);

  // local-minimum property
  CHECK(residual(s_fit) <= residual(s_fit * 1.01));
  CHECK(residual(s_fit) <= residual(s_fit * 0.99));

  // all-zero estimate: scale 1 with a warning flag
  TrajectoryEstimate zero = gt;
  for (PoseSE3& p : zero.poses) p.translation.setZero();
  bool degenerate = false;
  CHECK(scale_align(zero, gt, &degenerate).scale == 1.0);
  CHECK(degenerate);
}

TEST_CASE("kitti drift oracle fixtures") {
  // straight 120-step path, 0.12 units per step: desk-scale segments apply
  PoseSE3 fwd;
  fwd.translation << 0, 0, 0.12;
  const std::vector<PoseSE3> rel(120, fwd);
  const TrajectoryEstimate gt = accumulate(rel);

  auto [t0, r0] = kitti_drift(gt, gt, kDeskSegmentLengths);
  REQUIRE(t0.has_value());
  CHECK(*t0 == 0.0);
  CHECK(*r0 == 0.0);

  // every relative translation stretched by 5%, alignment deliberately off
  std::vector<PoseSE3> stretched = rel;
  for (PoseSE3& p : stretched) p.translation *= 1.05;
  const TrajectoryEstimate est = accumulate(stretched);
  auto [t5, r5] = kitti_drift(est, gt, kDeskSegmentLengths);
  REQUIRE(t5.has_value());
  CHECK(std::fabs(*t5 - 5.0) < 0.1);
  CHECK(*r5 == 0.0);

  // rotational drift is invariant to pre-alignment scaling of translations
  Rng rng(35);
  const TrajectoryEstimate gtr = random_trajectory(80, rng);
  TrajectoryEstimate noisy = gtr;
  Rng rng2(36);
  std::vector<PoseSE3> noisy_rel;
  for (int k = 0; k < 80; ++k)
    noisy_rel.push_back(pose_from_euler(rng2.uniform(-0.01, 0.01), rng2.uniform(-0.03, 0.03),
                                        rng2.uniform(-0.01, 0.01),
                                        {rng2.uniform(-0.03, 0.03), rng2.uniform(-0.01, 0.01),
                                         rng2.uniform(0.08, 0.2)}));
  TrajectoryEstimate est2 = accumulate(noisy_rel);
  auto [ta, ra] = kitti_drift(est2, gtr, kDeskSegmentLengths);
  TrajectoryEstimate est3 = est2;
  for (PoseSE3& p : est3.poses) p.translation *= 3.0;
  auto [tb, rb] = kitti_drift(est3, gtr, kDeskSegmentLengths);
  REQUIRE(ra.has_value());
  REQUIRE(rb.has_value());
  CHECK(*ra == doctest::Approx(*rb).epsilon(1e-12));

  // shorter than the smallest segment -> empty metric
  const TrajectoryEstimate tiny = accumulate(std::vector<PoseSE3>(3, fwd));
  auto [tn, rn] = kitti_drift(tiny, tiny, kDeskSegmentLengths);
  CHECK_FALSE(tn.has_value());
  CHECK_FALSE(rn.has_value());
}

TEST_CASE("rpe oracle fixtures") {
  PoseSE3 fwd;
  fwd.translation << 0, 0, 0.1;
  const TrajectoryEstimate gt = accumulate(std::vector<PoseSE3>(60, fwd));
  CHECK(rpe(gt, gt, 10) == 0.0);

  // constant 0.1-unit extra drift per 1-second (10-frame) span
  std::vector<PoseSE3> drifted(60, fwd);
  for (PoseSE3& p : drifted) p.translation.x() += 0.01;  // 0.1 per 10 frames
  const TrajectoryEstimate est = accumulate(drifted);
  CHECK(std::fabs(rpe(est, gt, 10) - 0.1) < 1e-6);

  // invariant to a global rigid transform applied to both trajectories
  const PoseSE3 rigid = pose_from_euler(0.3, -0.2, 0.5, {4.0, -2.0, 1.0});
  TrajectoryEstimate est_t = est, gt_t = gt;
  for (PoseSE3& p : est_t.poses) p = pose_compose(rigid, p);
  for (PoseSE3& p : gt_t.poses) p = pose_compose(rigid, p);
  CHECK(std::fabs(rpe(est_t, gt_t, 10) - rpe(est, gt, 10)) < 1e-12);

  CHECK_THROWS_AS(rpe(accumulate(std::vector<PoseSE3>(5, fwd)),
                      accumulate(std::vector<PoseSE3>(5, fwd)), 10),
                  DomainError);
}

TEST_CASE("ate is zero for identical trajectories") {
  Rng rng(37);
  const TrajectoryEstimate gt = random_trajectory(25, rng);
  CHECK(ate(gt, gt) == 0.0);
}

TEST_CASE("plot writes a deterministic svg with coinciding curves") {
  Rng rng(38);
  const TrajectoryEstimate a = random_trajectory(30, rng);
  const auto path = std::filesystem::temp_directory_path() / "metavo_plot_test.svg";

  plot_trajectory({{"estimate", a}, {"ground truth", a}}, path.string());
  REQUIRE(std::filesystem::exists(path));
  CHECK(std::filesystem::file_size(path) > 200);

  std::ifstream in(path);
  std::string svg((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // identical trajectories produce identical polyline point strings
  const std::string needle = "points=\"";
  const auto p1 = svg.find(needle);
  REQUIRE(p1 != std::string::npos);
  const auto e1 = svg.find('"', p1 + needle.size());
  const auto p2 = svg.find(needle, e1);
  REQUIRE(p2 != std::string::npos);
  const auto e2 = svg.find('"', p2 + needle.size());
  CHECK(svg.substr(p1 + needle.size(), e1 - p1 - needle.size()) ==
        svg.substr(p2 + needle.size(), e2 - p2 - needle.size()));
  CHECK(svg.find("ground truth") != std::string::npos);  // legend present

  // every plotted coordinate stays inside the canvas
  std::istringstream points(svg.substr(p1 + needle.size(), e1 - p1 - needle.size()));
  std::string pair;
  while (points >> pair) {
    const auto comma = pair.find(',');
    const double px = std::stod(pair.substr(0, comma));
    const double py = std::stod(pair.substr(comma + 1));
    CHECK(px >= 0.0);
    CHECK(px <= 640.0);
    CHECK(py >= 0.0);
    CHECK(py <= 520.0);
  }
  std::filesystem::remove(path);

  CHECK_THROWS_AS(plot_trajectory({{"x", a}}, "/nonexistent_dir_zz/plot.svg"), DataError);
}

TEST_CASE("trajectory file round trips") {
  Rng rng(39);
  const TrajectoryEstimate traj = random_trajectory(12, rng);
  const auto dir = std::filesystem::temp_directory_path();

  const std::string kitti_path = (dir / "metavo_eval_kitti.txt").string();
  write_kitti_pose_file(kitti_path, traj.poses);
  const std::vector<PoseSE3> back = read_kitti_pose_file(kitti_path);
  REQUIRE(back.size() == traj.poses.size());
  for (std::size_t k = 0; k < back.size(); ++k) {
    CHECK((back[k].rotation - traj.poses[k].rotation).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((back[k].translation - traj.poses[k].translation).cwiseAbs().maxCoeff() < 1e-15);
  }

  // TUM format with quaternions
  const std::string tum_path = (dir / "metavo_eval_tum.txt").string();
  {
    std::ofstream out(tum_path);
    out << "# ts tx ty tz qx qy qz qw\n";
    for (std::size_t k = 0; k < traj.poses.size(); ++k) {
      const Eigen::Quaterniond q(traj.poses[k].rotation);
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%.6f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                    0.1 * k, traj.poses[k].translation.x(), traj.poses[k].translation.y(),
                    traj.poses[k].translation.z(), q.x(), q.y(), q.z(), q.w());
      out << buf;
    }
  }
  const auto [ts, poses] = read_tum_trajectory_file(tum_path);
  REQUIRE(poses.size() == traj.poses.size());
  CHECK(ts[3] == doctest::Approx(0.3).epsilon(1e-9));
  for (std::size_t k = 0; k < poses.size(); ++k)
    CHECK((poses[k].rotation - traj.poses[k].rotation).cwiseAbs().maxCoeff() < 1e-12);

  // relative pose stream
  std::vector<PoseSE3> rel;
  std::vector<double> rel_ts;
  for (int k = 0; k < 6; ++k) {
    rel.push_back(pose_from_euler(0.01 * k, -0.02, 0.005, {0.1, 0.0, 0.3}));
    rel_ts.push_back(0.1 * (k + 1));
  }
  const std::string stream_path = (dir / "metavo_eval_stream.txt").string();
  write_pose_stream_file(stream_path, rel_ts, rel);
  const auto [sts, srel] = read_pose_stream_file(stream_path);
  REQUIRE(srel.size() == rel.size());
  for (std::size_t k = 0; k < rel.size(); ++k)
    CHECK((srel[k].rotation - rel[k].rotation).cwiseAbs().maxCoeff() < 1e-15);

  std::filesystem::remove(kitti_path);
  std::filesystem::remove(tum_path);
  std::filesystem::remove(stream_path);
}
