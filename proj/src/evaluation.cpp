#include "metavo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "metavo/errors.hpp"

namespace metavo {

const std::vector<double> kKittiSegmentLengths = {100, 200, 300, 400, 500, 600, 700, 800};
const std::vector<double> kDeskSegmentLengths = {1, 2, 3, 4, 5, 6, 7, 8};

TrajectoryEstimate accumulate(const std::vector<PoseSE3>& relatives,
                              const std::vector<double>* timestamps) {
  if (timestamps && timestamps->size() != relatives.size())
    throw DomainError("accumulate: timestamp count must match relative count");
  TrajectoryEstimate out;
  out.poses.push_back(PoseSE3::identity());
  out.timestamps.push_back(timestamps && !timestamps->empty() ? timestamps->front() - 1.0 : 0.0);
  for (std::size_t k = 0; k < relatives.size(); ++k) {
    relatives[k].validate(1e-6);
    out.poses.push_back(pose_compose(out.poses.back(), relatives[k]));
    out.timestamps.push_back(timestamps ? (*timestamps)[k] : static_cast<double>(k + 1));
  }
  return out;
}

TrajectoryEstimate scale_align(const TrajectoryEstimate& est, const TrajectoryEstimate& gt,
                               bool* degenerate) {
  if (est.size() != gt.size()) throw DomainError("scale_align: trajectory length mismatch");
  double num = 0, den = 0;
  for (std::size_t k = 0; k < est.size(); ++k) {
    num += est.poses[k].translation.dot(gt.poses[k].translation);
    den += est.poses[k].translation.squaredNorm();
  }
  TrajectoryEstimate out = est;
  if (den == 0.0) {
    out.scale = 1.0;
    if (degenerate) *degenerate = true;
    std::fprintf(stderr, "warning: scale_align on all-zero estimated translations; scale = 1\n");
    return out;
  }
  if (degenerate) *degenerate = false;
  out.scale = num / den;
  for (PoseSE3& p : out.poses) p.translation *= out.scale;
  return out;
}

std::pair<std::optional<double>, std::optional<double>> kitti_drift(
    const TrajectoryEstimate& est, const TrajectoryEstimate& gt,
    const std::vector<double>& segment_lengths) {
  if (est.size() != gt.size()) throw DomainError("kitti_drift: trajectory length mismatch");
  const std::size_t n = gt.size();
  if (n < 2) throw DomainError("kitti_drift: trajectory too short");

  std::vector<double> dist(n, 0.0);
  for (std::size_t k = 1; k < n; ++k)
    dist[k] = dist[k - 1] + (gt.poses[k].translation - gt.poses[k - 1].translation).norm();

  double t_acc = 0, r_acc = 0;
  std::int64_t samples = 0;
  for (std::size_t s = 0; s < n; ++s) {
    for (const double len : segment_lengths) {
      // first index reaching the nominal path length
      const auto it = std::lower_bound(dist.begin() + static_cast<std::ptrdiff_t>(s), dist.end(),
                                       dist[s] + len);
      if (it == dist.end()) break;
      const std::size_t e = static_cast<std::size_t>(it - dist.begin());
      const double actual = dist[e] - dist[s];
      if (actual <= 0) continue;

      const PoseSE3 gt_rel = pose_compose(pose_inverse(gt.poses[s]), gt.poses[e]);
      const PoseSE3 est_rel = pose_compose(pose_inverse(est.poses[s]), est.poses[e]);
      const PoseSE3 err = pose_compose(pose_inverse(gt_rel), est_rel);

      t_acc += err.translation.norm() / actual * 100.0;
      r_acc += rotation_angle(err.rotation) * 180.0 / M_PI / actual * 100.0;
      ++samples;
    }
  }
  if (samples == 0) {
    std::fprintf(stderr, "warning: trajectory shorter than the smallest drift segment\n");
    return {std::nullopt, std::nullopt};
  }
  return {t_acc / samples, r_acc / samples};
}

double rpe(const TrajectoryEstimate& est, const TrajectoryEstimate& gt, int delta_frames,
           double span_seconds) {
  if (est.size() != gt.size()) throw DomainError("rpe: trajectory length mismatch");
  if (delta_frames < 1) throw DomainError("rpe: delta must be >= 1");
  if (est.size() < static_cast<std::size_t>(delta_frames) + 1)
    throw DomainError("rpe: trajectory shorter than the evaluation span");
  if (!(span_seconds > 0)) throw DomainError("rpe: span must be positive");

  double acc = 0;
  std::int64_t samples = 0;
  for (std::size_t k = 0; k + static_cast<std::size_t>(delta_frames) < est.size(); ++k) {
    const std::size_t j = k + static_cast<std::size_t>(delta_frames);
    const PoseSE3 gt_rel = pose_compose(pose_inverse(gt.poses[k]), gt.poses[j]);
    const PoseSE3 est_rel = pose_compose(pose_inverse(est.poses[k]), est.poses[j]);
    const PoseSE3 err = pose_compose(pose_inverse(gt_rel), est_rel);
    acc += err.translation.squaredNorm();
    ++samples;
  }
  return std::sqrt(acc / samples) / span_seconds;
}

double ate(const TrajectoryEstimate& est, const TrajectoryEstimate& gt) {
  if (est.size() != gt.size()) throw DomainError("ate: trajectory length mismatch");
  double acc = 0;
  for (std::size_t k = 0; k < est.size(); ++k)
    acc += (est.poses[k].translation - gt.poses[k].translation).squaredNorm();
  return std::sqrt(acc / est.size());
}

MetricReport evaluate_trajectories(const TrajectoryEstimate& est_raw, const TrajectoryEstimate& gt,
                                   const std::vector<double>& segment_lengths, int rpe_delta_frames,
                                   double rpe_span_seconds) {
  const TrajectoryEstimate est = scale_align(est_raw, gt);
  MetricReport report;
  auto [t_err, r_err] = kitti_drift(est, gt, segment_lengths);
  report.t_err = t_err;
  report.r_err = r_err;
  if (est.size() > static_cast<std::size_t>(rpe_delta_frames))
    report.rpe_trans = rpe(est, gt, rpe_delta_frames, rpe_span_seconds);
  report.ate = ate(est, gt);
  return report;
}

// ---- plotting ----

void plot_trajectory(const std::vector<std::pair<std::string, TrajectoryEstimate>>& trajectories,
                     const std::string& output_path) {
  if (trajectories.empty()) throw DomainError("plot_trajectory: nothing to plot");

  double min_x = 1e300, max_x = -1e300, min_z = 1e300, max_z = -1e300;
  for (const auto& [name, traj] : trajectories)
    for (const PoseSE3& p : traj.poses) {
      min_x = std::min(min_x, p.translation.x());
      max_x = std::max(max_x, p.translation.x());
      min_z = std::min(min_z, p.translation.z());
      max_z = std::max(max_z, p.translation.z());
    }
  const double span = std::max({max_x - min_x, max_z - min_z, 1e-9});
  const double margin = 0.08 * span;
  min_x -= margin;
  min_z -= margin;
  const double range_x = (max_x + margin) - min_x;
  const double range_z = (max_z + margin) - min_z;
  const double scale = std::min(560.0 / range_x, 440.0 / range_z);

  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"520\" "
         "viewBox=\"0 0 640 520\">\n";
  svg << "<rect width=\"640\" height=\"520\" fill=\"white\"/>\n";
  svg << "<rect x=\"40\" y=\"40\" width=\"560\" height=\"440\" fill=\"none\" "
         "stroke=\"#888\"/>\n";
  svg << "<text x=\"320\" y=\"510\" font-size=\"14\" text-anchor=\"middle\">x</text>\n";
  svg << "<text x=\"15\" y=\"260\" font-size=\"14\" text-anchor=\"middle\" "
         "transform=\"rotate(-90 15 260)\">z</text>\n";

  char buf[64];
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& [name, traj] = trajectories[i];
    svg << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 7]
        << "\" stroke-width=\"1.5\" points=\"";
    for (const PoseSE3& p : traj.poses) {
      const double px = 40.0 + (p.translation.x() - min_x) * scale;
      const double pz = 480.0 - (p.translation.z() - min_z) * scale;
      std::snprintf(buf, sizeof(buf), "%.3f,%.3f ", px, pz);
      svg << buf;
    }
    svg << "\"/>\n";
    const double ly = 56.0 + 18.0 * static_cast<double>(i);
    svg << "<line x1=\"452\" y1=\"" << ly - 4 << "\" x2=\"478\" y2=\"" << ly - 4 << "\" stroke=\""
        << kPalette[i % 7] << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"484\" y=\"" << ly << "\" font-size=\"13\">" << name << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(output_path);
  if (!out) throw DataError("plot_trajectory: cannot write " + output_path);
  out << svg.str();
  if (!out) throw DataError("plot_trajectory: write failed for " + output_path);
}

// ---- file ingestion ----

std::vector<PoseSE3> read_kitti_pose_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pose file: " + path);
  std::vector<PoseSE3> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double m[12];
    for (double& v : m)
      if (!(ls >> v))
        throw DataError("pose file line " + std::to_string(poses.size() + 1) +
                        " has fewer than 12 numbers: " + path);
    PoseSE3 p;
    p.rotation << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
    p.translation << m[3], m[7], m[11];
    poses.push_back(p);
  }
  if (poses.empty()) throw DataError("empty pose file: " + path);
  return poses;
}

std::pair<std::vector<double>, std::vector<PoseSE3>> read_tum_trajectory_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read trajectory file: " + path);
  std::vector<double> timestamps;
  std::vector<PoseSE3> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      throw DataError("bad TUM trajectory line: " + line);
    PoseSE3 p;
    p.rotation = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
    p.translation << tx, ty, tz;
    timestamps.push_back(ts);
    poses.push_back(p);
  }
  if (poses.empty()) throw DataError("empty trajectory file: " + path);
  return {std::move(timestamps), std::move(poses)};
}

std::pair<std::vector<double>, std::vector<PoseSE3>> read_pose_stream_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pose stream: " + path);
  std::vector<double> timestamps;
  std::vector<PoseSE3> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double ts;
    double m[12];
    if (!(ls >> ts)) throw DataError("bad pose stream line: " + line);
    for (double& v : m)
      if (!(ls >> v)) throw DataError("pose stream line has fewer than 13 numbers: " + line);
    PoseSE3 p;
    p.rotation << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
    p.translation << m[3], m[7], m[11];
    timestamps.push_back(ts);
    poses.push_back(p);
  }
  return {std::move(timestamps), std::move(poses)};
}

void write_pose_stream_file(const std::string& path, const std::vector<double>& timestamps,
                            const std::vector<PoseSE3>& relatives) {
  if (timestamps.size() != relatives.size())
    throw DomainError("write_pose_stream_file: length mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pose stream: " + path);
  char buf[640];
  for (std::size_t k = 0; k < relatives.size(); ++k) {
    const PoseSE3& p = relatives[k];
    std::snprintf(buf, sizeof(buf),
                  "%.9f %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  timestamps[k], p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2),
                  p.translation(0), p.rotation(1, 0), p.rotation(1, 1), p.rotation(1, 2),
                  p.translation(1), p.rotation(2, 0), p.rotation(2, 1), p.rotation(2, 2),
                  p.translation(2));
    out << buf;
  }
}

void write_kitti_pose_file(const std::string& path, const std::vector<PoseSE3>& absolutes) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pose file: " + path);
  char buf[640];
  for (const PoseSE3& p : absolutes) {
    std::snprintf(buf, sizeof(buf),
                  "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2), p.translation(0),
                  p.rotation(1, 0), p.rotation(1, 1), p.rotation(1, 2), p.translation(1),
                  p.rotation(2, 0), p.rotation(2, 1), p.rotation(2, 2), p.translation(2));
    out << buf;
  }
}

}  // namespace metavo
