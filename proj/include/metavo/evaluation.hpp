#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metavo/geometry.hpp"

namespace metavo {

/// Absolute camera-to-world trajectory plus the applied alignment scale.
struct TrajectoryEstimate {
  std::vector<PoseSE3> poses;
  std::vector<double> timestamps;
  double scale = 1.0;

  std::size_t size() const { return poses.size(); }
};

struct MetricReport {
  std::optional<double> t_err;      // translational drift, percent
  std::optional<double> r_err;      // rotational drift, degrees per 100 units
  std::optional<double> rpe_trans;  // translational RMSE per second
  std::optional<double> ate;        // translational RMSE after scale alignment
};

/// Chains relative poses T^{t-1}_t into camera-to-world absolutes with
/// poses[0] = identity.
TrajectoryEstimate accumulate(const std::vector<PoseSE3>& relatives,
                              const std::vector<double>* timestamps = nullptr);

/// Single global least-squares scale applied to the estimated translations:
/// s = sum(<t_est, t_gt>) / sum(|t_est|^2). Rotations untouched.
TrajectoryEstimate scale_align(const TrajectoryEstimate& est, const TrajectoryEstimate& gt,
                               bool* degenerate = nullptr);

extern const std::vector<double> kKittiSegmentLengths;  // {100, ..., 800} m
extern const std::vector<double> kDeskSegmentLengths;   // {1, ..., 8} units

/// KITTI-style drift over fixed path-length segments, every start index.
/// Returns (t_err %, r_err deg/100 units); empty when the trajectory is
/// shorter than the smallest segment.
std::pair<std::optional<double>, std::optional<double>> kitti_drift(
    const TrajectoryEstimate& est, const TrajectoryEstimate& gt,
    const std::vector<double>& segment_lengths = kKittiSegmentLengths);

/// Relative pose error over spans of `delta_frames`, reported as
/// translational RMSE divided by `span_seconds`.
double rpe(const TrajectoryEstimate& est, const TrajectoryEstimate& gt, int delta_frames,
           double span_seconds = 1.0);

/// Translational RMSE between aligned trajectories.
double ate(const TrajectoryEstimate& est, const TrajectoryEstimate& gt);

MetricReport evaluate_trajectories(const TrajectoryEstimate& est_raw, const TrajectoryEstimate& gt,
                                   const std::vector<double>& segment_lengths, int rpe_delta_frames,
                                   double rpe_span_seconds);

/// Deterministic top-down x-z SVG plot with a legend.
void plot_trajectory(const std::vector<std::pair<std::string, TrajectoryEstimate>>& trajectories,
                     const std::string& output_path);

// ---- trajectory file ingestion ----

/// KITTI pose file: 12 whitespace-separated numbers per line, row-major 3x4.
std::vector<PoseSE3> read_kitti_pose_file(const std::string& path);

/// TUM trajectory file: "timestamp tx ty tz qx qy qz qw" per line.
std::pair<std::vector<double>, std::vector<PoseSE3>> read_tum_trajectory_file(
    const std::string& path);

/// Pose stream emitted by online adaptation: "timestamp r11 r12 r13 tx r21
/// r22 r23 ty r31 r32 r33 tz" per line, relative poses.
std::pair<std::vector<double>, std::vector<PoseSE3>> read_pose_stream_file(
    const std::string& path);

void write_pose_stream_file(const std::string& path, const std::vector<double>& timestamps,
                            const std::vector<PoseSE3>& relatives);
void write_kitti_pose_file(const std::string& path, const std::vector<PoseSE3>& absolutes);

}  // namespace metavo
