#pragma once

#include <optional>
#include <string>
#include <vector>

#include "metavo/geometry.hpp"
#include "metavo/rng.hpp"

namespace metavo {

// KITTI/TUM ingestion resizes to this fixed working resolution.
constexpr int kWorkingHeight = 128;
constexpr int kWorkingWidth = 416;

struct SequenceDataset {
  std::string id;
  std::vector<Frame> frames;
  std::vector<double> timestamps;
  Intrinsics intrinsics;

  // optional ground truth: gt_poses[j] is the absolute (camera-to-world)
  // pose of frames[gt_frame_indices[j]]
  std::vector<int> gt_frame_indices;
  std::vector<PoseSE3> gt_poses;

  // synthetic sequences additionally carry exact per-frame depth and the
  // relative motion script
  std::vector<DepthMap> gt_depths;
  std::vector<PoseSE3> gt_relatives;  // gt_relatives[k] maps frame k+1 coords to frame k

  double fps = 10.0;
  int gt_unmatched = 0;  // TUM frames with no ground-truth pose within tolerance

  bool has_full_ground_truth() const {
    return gt_poses.size() == frames.size() && !frames.empty();
  }
};

enum class TextureKind { kChecker, kPerlin, kImagePatch };
enum class DepthModel { kPlane, kHeightField };

struct SyntheticSceneConfig {
  int height = 32;
  int width = 96;
  double focal = 0.0;  // pixels; 0 = 0.62 * width

  TextureKind texture = TextureKind::kPerlin;
  std::string texture_image;   // kImagePatch source
  double texture_scale = 8.0;  // feature wavelength in pixels at depth_base
  int texture_octaves = 2;
  double contrast = 1.0;       // in (0, 1], scales amplitude around brightness
  double brightness = 0.5;

  DepthModel depth_model = DepthModel::kPlane;
  double depth_base = 5.0;
  double depth_amplitude = 0.4;  // height-field amplitude, world units

  std::vector<PoseSE3> motion;  // relative pose per step; frame count = motion.size() + 1

  bool occluder = false;
  double occluder_depth = 2.5;
  double occluder_size = 1.2;          // world units, square side
  double occluder_vx = 0.12, occluder_vy = 0.0;  // world units per frame

  std::uint64_t seed = 1;
};

/// Renders a deterministic sequence from a continuous textured surface under
/// the motion script, with exact per-frame depth and relative poses.
SequenceDataset generate_synthetic(const SyntheticSceneConfig& config);

/// Convenience motion scripts for experiments. kind: "forward", "lateral",
/// "mixed" (translation + small rotations).
std::vector<PoseSE3> make_motion_script(const std::string& kind, int steps, double step_size,
                                        double jitter, Rng& rng);

/// Directory of numbered images + intrinsics.txt (fx fy cx cy at the raw
/// resolution) + optional poses.txt in KITTI 3x4 row-major format.
SequenceDataset load_kitti_layout(const std::string& root, const std::string& sequence_id);

/// TUM-style directory: rgb.txt index, intrinsics.txt, optional
/// groundtruth.txt (timestamp tx ty tz qx qy qz qw). Ground truth associated
/// by nearest timestamp within 0.02 s.
SequenceDataset load_tum_layout(const std::string& root);

/// Writes frames as PNG plus intrinsics.txt / poses.txt so synthetic data is
/// consumable through load_kitti_layout.
void export_kitti_layout(const SequenceDataset& dataset, const std::string& root,
                         const std::string& sequence_id);

}  // namespace metavo
