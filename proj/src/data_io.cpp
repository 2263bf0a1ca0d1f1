#include "metavo/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

namespace metavo {

namespace fs = std::filesystem;

namespace {

// ---- deterministic value noise ----

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(ix) * 0x100000001B3ull ^
                                       static_cast<std::uint64_t>(iy)));
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;  // [-1, 1)
}

// quintic smootherstep: C2-continuous across lattice cells
inline double quintic(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const std::int64_t ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  const double tx = quintic(x - fx), ty = quintic(y - fy);
  const double v00 = lattice(seed, ix, iy), v01 = lattice(seed, ix + 1, iy);
  const double v10 = lattice(seed, ix, iy + 1), v11 = lattice(seed, ix + 1, iy + 1);
  const double a = v00 + (v01 - v00) * tx;
  const double b = v10 + (v11 - v10) * tx;
  return a + (b - a) * ty;  // in (-1, 1)
}

double octave_noise(std::uint64_t seed, double x, double y, double wavelength, int octaves) {
  double amp = 1.0, norm = 0.0, acc = 0.0, freq = 1.0 / wavelength;
  for (int o = 0; o < octaves; ++o) {
    acc += amp * value_noise(seed + static_cast<std::uint64_t>(o) * 0x51ED2701ull, x * freq, y * freq);
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return acc / norm;
}

// ---- continuous scene model ----

struct SceneModel {
  const SyntheticSceneConfig* cfg;
  Intrinsics K;
  double world_scale;  // world units per texture_scale pixels at depth_base

  double texture_channel(std::uint64_t seed, int channel, double x, double y) const {
    const double detail = octave_noise(seed ^ (0xC0FFEEull + channel), x, y, world_scale, 2);
    // seeded-direction sinusoidal carrier: guarantees gradient energy even
    // when the noise lattice is coarser than the image
    const double theta = static_cast<double>(mix64(seed ^ 0x51Cull) >> 11) * 0x1.0p-53 * M_PI;
    const double phase =
        static_cast<double>(mix64(seed ^ (0xFADEull + channel)) >> 11) * 0x1.0p-53 * 2.0 * M_PI;
    const double carrier = std::sin(
        2.0 * M_PI * (std::cos(theta) * x + std::sin(theta) * y) / (1.5 * world_scale) + phase);
    double base;
    switch (cfg->texture) {
      case TextureKind::kChecker: {
        const double p = M_PI / world_scale;
        base = std::tanh(std::sin(p * x) * std::sin(p * y) / 0.25);
        return cfg->brightness + cfg->contrast * (0.30 * base + 0.08 * detail);
      }
      case TextureKind::kPerlin:
        base = octave_noise(seed, x, y, world_scale * 1.5, cfg->texture_octaves);
        return cfg->brightness + cfg->contrast * (0.22 * base + 0.10 * detail + 0.12 * carrier);
      case TextureKind::kImagePatch:
        return patch_value(channel, x, y);
    }
    return cfg->brightness;
  }

  // mirrored-tiling bilinear lookup into the patch image
  cv::Mat patch;  // CV_64FC3, RGB
  double patch_value(int channel, double x, double y) const {
    const double ppw = 1.0 / (cfg->depth_base / K.fx);  // pixels per world unit
    auto mirror = [](double p, int n) {
      const double period = 2.0 * (n - 1);
      double t = std::fabs(std::fmod(p, period));
      return t > n - 1 ? period - t : t;
    };
    const double px = mirror(x * ppw, patch.cols);
    const double py = mirror(y * ppw, patch.rows);
    const int x0 = std::min(static_cast<int>(px), patch.cols - 2);
    const int y0 = std::min(static_cast<int>(py), patch.rows - 2);
    const double wx = px - x0, wy = py - y0;
    auto v = [&](int yy, int xx) { return patch.at<cv::Vec3d>(yy, xx)[channel]; };
    return (1 - wy) * ((1 - wx) * v(y0, x0) + wx * v(y0, x0 + 1)) +
           wy * ((1 - wx) * v(y0 + 1, x0) + wx * v(y0 + 1, x0 + 1));
  }

  double height_field(double x, double y) const {
    if (cfg->depth_model == DepthModel::kPlane) return cfg->depth_base;
    const double hf =
        octave_noise(cfg->seed ^ 0xD1CEull, x, y, world_scale * 5.0, 2);
    return cfg->depth_base + cfg->depth_amplitude * hf;
  }

  // distance s along (origin + s*dir) to the surface z = height_field(x,y)
  double intersect(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const {
    if (d.z() <= 1e-4) throw DataError("synthetic: ray parallel to or away from surface");
    double s = (cfg->depth_base - o.z()) / d.z();
    if (cfg->depth_model == DepthModel::kPlane) return s;
    auto f = [&](double t) {
      const Eigen::Vector3d p = o + t * d;
      return p.z() - height_field(p.x(), p.y());
    };
    double s0 = s * 0.9, s1 = s * 1.1;
    double f0 = f(s0), f1 = f(s1);
    for (int it = 0; it < 80; ++it) {
      if (std::fabs(f1) < 1e-12 * cfg->depth_base) return s1;
      const double denom = f1 - f0;
      if (denom == 0.0) break;
      const double s2 = s1 - f1 * (s1 - s0) / denom;
      s0 = s1;
      f0 = f1;
      s1 = s2;
      f1 = f(s1);
    }
    if (std::fabs(f1) > 1e-9 * cfg->depth_base)
      throw DataError("synthetic: height-field intersection did not converge");
    return s1;
  }
};

}  // namespace

std::vector<PoseSE3> make_motion_script(const std::string& kind, int steps, double step_size,
                                        double jitter, Rng& rng) {
  std::vector<PoseSE3> script;
  script.reserve(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    double rx = 0, ry = 0, rz = 0;
    if (kind == "forward") {
      t.z() = step_size;
    } else if (kind == "lateral") {
      t.x() = step_size;
    } else if (kind == "mixed") {
      t.x() = step_size * std::sin(0.37 * i);
      t.y() = 0.4 * step_size * std::sin(0.23 * i + 1.1);
      t.z() = 0.6 * step_size;
      ry = 0.25 * step_size * std::sin(0.19 * i);
    } else {
      throw DomainError("make_motion_script: unknown kind '" + kind + "'");
    }
    t.x() += jitter * rng.uniform(-1.0, 1.0);
    t.y() += jitter * rng.uniform(-1.0, 1.0);
    t.z() += jitter * rng.uniform(-1.0, 1.0);
    rx += 0.02 * jitter * rng.uniform(-1.0, 1.0);
    ry += 0.02 * jitter * rng.uniform(-1.0, 1.0);
    rz += 0.02 * jitter * rng.uniform(-1.0, 1.0);
    script.push_back(pose_from_euler(rx, ry, rz, t));
  }
  return script;
}

SequenceDataset generate_synthetic(const SyntheticSceneConfig& config) {
  if (config.height < 8 || config.width < 8) throw DomainError("synthetic: resolution too small");
  if (config.depth_base <= 0) throw DomainError("synthetic: depth_base must be positive");
  if (config.depth_model == DepthModel::kHeightField &&
      config.depth_base - config.depth_amplitude < 0.2)
    throw DomainError("synthetic: height field may reach the camera");

  SceneModel scene;
  scene.cfg = &config;
  const double focal = config.focal > 0 ? config.focal : 0.62 * config.width;
  scene.K = {focal, focal, (config.width - 1) / 2.0, (config.height - 1) / 2.0, config.width,
             config.height};
  scene.world_scale = config.texture_scale * config.depth_base / focal;
  if (config.texture == TextureKind::kImagePatch) {
    cv::Mat img = cv::imread(config.texture_image, cv::IMREAD_COLOR);
    if (img.empty()) throw DataError("synthetic: cannot read texture image " + config.texture_image);
    cv::Mat rgb;
    cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
    rgb.convertTo(scene.patch, CV_64FC3, 1.0 / 255.0);
  }

  SequenceDataset out;
  out.id = "synthetic";
  out.intrinsics = scene.K;
  out.gt_relatives = config.motion;

  const int n_frames = static_cast<int>(config.motion.size()) + 1;
  PoseSE3 world = PoseSE3::identity();
  const std::uint64_t tex_seed = mix64(config.seed);
  const std::uint64_t occ_seed = mix64(config.seed ^ 0xFACEull);

  for (int k = 0; k < n_frames; ++k) {
    if (k > 0) world = pose_compose(world, config.motion[static_cast<std::size_t>(k - 1)]);
    const double surface_min =
        config.depth_model == DepthModel::kPlane ? config.depth_base
                                                 : config.depth_base - config.depth_amplitude;
    if (world.translation.z() > surface_min - 0.2)
      throw DataError("synthetic: motion pushes the camera into the scene");

    Frame frame(config.height, config.width);
    frame.timestamp = k;
    DepthMap depth(config.height, config.width);
    const double occ_cx = 0.5 + config.occluder_vx * k;
    const double occ_cy = 0.1 + config.occluder_vy * k;

    for (int y = 0; y < config.height; ++y) {
      for (int x = 0; x < config.width; ++x) {
        Eigen::Vector3d dir_cam((x - scene.K.cx) / scene.K.fx, (y - scene.K.cy) / scene.K.fy, 1.0);
        const Eigen::Vector3d dir = world.rotation * dir_cam;
        const Eigen::Vector3d& origin = world.translation;

        bool on_occluder = false;
        double s = 0.0;
        Eigen::Vector3d hit;
        if (config.occluder && dir.z() > 1e-4) {
          const double s_occ = (config.occluder_depth - origin.z()) / dir.z();
          if (s_occ > 0.05) {
            const Eigen::Vector3d p = origin + s_occ * dir;
            if (std::fabs(p.x() - occ_cx) <= config.occluder_size * 0.5 &&
                std::fabs(p.y() - occ_cy) <= config.occluder_size * 0.5) {
              on_occluder = true;
              s = s_occ;
              hit = p;
            }
          }
        }
        if (!on_occluder) {
          s = scene.intersect(origin, dir);
          if (s <= 0.05) throw DataError("synthetic: surface behind or too close to the camera");
          hit = origin + s * dir;
        }

        depth.at(y, x) = s;  // camera-frame z of the hit point equals s (unit-z ray)
        for (int c = 0; c < 3; ++c) {
          double v = on_occluder
                         ? scene.texture_channel(occ_seed, c, hit.x() - occ_cx, hit.y() - occ_cy)
                         : scene.texture_channel(tex_seed, c, hit.x(), hit.y());
          frame.pixels.at(c, y, x) = std::min(0.995, std::max(0.005, v));
        }
      }
    }

    out.frames.push_back(std::move(frame));
    out.gt_depths.push_back(std::move(depth));
    out.gt_poses.push_back(world);
    out.gt_frame_indices.push_back(k);
    out.timestamps.push_back(k / out.fps);
  }

  // reject textures that give the photometric losses nothing to work with
  const Frame& f0 = out.frames.front();
  double energy = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y + 1 < f0.height(); ++y)
      for (int x = 0; x + 1 < f0.width(); ++x)
        energy += std::fabs(f0.pixels.at(c, y, x + 1) - f0.pixels.at(c, y, x)) +
                  std::fabs(f0.pixels.at(c, y + 1, x) - f0.pixels.at(c, y, x));
  energy /= 3.0 * (f0.height() - 1) * (f0.width() - 1);
  if (energy < 0.003) throw DataError("synthetic: texture below the gradient-energy floor");

  return out;
}

// ---- directory loaders ----

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm" || ext == ".bmp";
}

Intrinsics read_intrinsics_file(const fs::path& path, int raw_w, int raw_h) {
  std::ifstream in(path);
  if (!in) throw DataError("missing intrinsics file: " + path.string());
  double fx, fy, cx, cy;
  if (!(in >> fx >> fy >> cx >> cy))
    throw DataError("intrinsics file must contain 'fx fy cx cy': " + path.string());
  Intrinsics k{fx, fy, cx, cy, raw_w, raw_h};
  k.validate();
  return k;
}

Frame load_frame(const fs::path& path, int* raw_w, int* raw_h) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot read image: " + path.string());
  if (*raw_w == 0) {
    *raw_w = img.cols;
    *raw_h = img.rows;
  } else if (img.cols != *raw_w || img.rows != *raw_h) {
    throw DataError("inconsistent image sizes in sequence: " + path.string());
  }
  if (img.cols != kWorkingWidth || img.rows != kWorkingHeight)
    cv::resize(img, img, cv::Size(kWorkingWidth, kWorkingHeight), 0, 0, cv::INTER_LINEAR);
  Frame f(kWorkingHeight, kWorkingWidth);
  for (int y = 0; y < kWorkingHeight; ++y)
    for (int x = 0; x < kWorkingWidth; ++x) {
      const cv::Vec3b& px = img.at<cv::Vec3b>(y, x);
      f.pixels.at(0, y, x) = px[2] / 255.0;  // BGR -> RGB
      f.pixels.at(1, y, x) = px[1] / 255.0;
      f.pixels.at(2, y, x) = px[0] / 255.0;
    }
  return f;
}

Eigen::Matrix3d orthonormalized(const Eigen::Matrix3d& r) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1;
    out = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return out;
}

std::vector<PoseSE3> read_kitti_poses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pose file: " + path.string());
  std::vector<PoseSE3> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double m[12];
    for (double& v : m)
      if (!(ls >> v)) throw DataError("pose file line with fewer than 12 numbers: " + path.string());
    PoseSE3 p;
    p.rotation << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
    p.rotation = orthonormalized(p.rotation);
    p.translation << m[3], m[7], m[11];
    poses.push_back(p);
  }
  return poses;
}

}  // namespace

SequenceDataset load_kitti_layout(const std::string& root, const std::string& sequence_id) {
  const fs::path dir = sequence_id.empty() ? fs::path(root) : fs::path(root) / sequence_id;
  if (!fs::is_directory(dir)) throw DataError("sequence directory not found: " + dir.string());

  std::map<long, fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(),
                                     [](unsigned char c) { return std::isdigit(c); }))
      continue;
    images[std::stol(stem)] = entry.path();
  }
  if (images.size() < 2) throw DataError("sequence needs at least 2 numbered images: " + dir.string());

  // reject gaps in the numbering
  std::vector<long> missing;
  for (long k = images.begin()->first; k <= images.rbegin()->first; ++k)
    if (!images.count(k)) missing.push_back(k);
  if (!missing.empty()) {
    std::ostringstream msg;
    msg << "gaps in image numbering in " << dir.string() << "; missing indices:";
    for (std::size_t i = 0; i < missing.size() && i < 16; ++i) msg << " " << missing[i];
    if (missing.size() > 16) msg << " ...";
    throw DataError(msg.str());
  }

  SequenceDataset out;
  out.id = sequence_id.empty() ? dir.filename().string() : sequence_id;
  int raw_w = 0, raw_h = 0;
  for (const auto& [idx, path] : images) out.frames.push_back(load_frame(path, &raw_w, &raw_h));
  for (std::size_t k = 0; k < out.frames.size(); ++k) {
    out.frames[k].timestamp = static_cast<int>(k);
    out.timestamps.push_back(static_cast<double>(k) / out.fps);
  }

  out.intrinsics =
      read_intrinsics_file(dir / "intrinsics.txt", raw_w, raw_h).rescaled(kWorkingWidth, kWorkingHeight);

  const fs::path pose_file = dir / "poses.txt";
  if (fs::exists(pose_file)) {
    out.gt_poses = read_kitti_poses(pose_file);
    if (out.gt_poses.size() != out.frames.size())
      throw DataError("pose file length " + std::to_string(out.gt_poses.size()) +
                      " does not match frame count " + std::to_string(out.frames.size()));
    for (std::size_t k = 0; k < out.frames.size(); ++k)
      out.gt_frame_indices.push_back(static_cast<int>(k));
  }
  return out;
}

SequenceDataset load_tum_layout(const std::string& root) {
  const fs::path dir(root);
  std::ifstream index(dir / "rgb.txt");
  if (!index) throw DataError("missing rgb.txt in " + root);

  SequenceDataset out;
  out.id = dir.filename().string();
  out.fps = 30.0;
  int raw_w = 0, raw_h = 0;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double ts;
    std::string rel;
    if (!(ls >> ts >> rel)) throw DataError("bad rgb.txt line: " + line);
    out.frames.push_back(load_frame(dir / rel, &raw_w, &raw_h));
    out.frames.back().timestamp = static_cast<int>(out.frames.size()) - 1;
    out.timestamps.push_back(ts);
  }
  if (out.frames.size() < 2) throw DataError("TUM sequence needs at least 2 frames: " + root);

  out.intrinsics =
      read_intrinsics_file(dir / "intrinsics.txt", raw_w, raw_h).rescaled(kWorkingWidth, kWorkingHeight);

  const fs::path gt_file = dir / "groundtruth.txt";
  if (fs::exists(gt_file)) {
    std::ifstream gt(gt_file);
    std::vector<std::pair<double, PoseSE3>> entries;
    while (std::getline(gt, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      double ts, tx, ty, tz, qx, qy, qz, qw;
      if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
        throw DataError("bad groundtruth.txt line: " + line);
      PoseSE3 p;
      p.rotation = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
      p.translation << tx, ty, tz;
      entries.emplace_back(ts, p);
    }
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    constexpr double kTol = 0.02;
    for (std::size_t k = 0; k < out.frames.size(); ++k) {
      const double ts = out.timestamps[k];
      double best = kTol + 1.0;
      const PoseSE3* best_pose = nullptr;
      auto it = std::lower_bound(entries.begin(), entries.end(), ts,
                                 [](const auto& e, double t) { return e.first < t; });
      for (auto probe : {it, it == entries.begin() ? entries.end() : std::prev(it)}) {
        if (probe == entries.end()) continue;
        const double dt = std::fabs(probe->first - ts);
        if (dt < best) {
          best = dt;
          best_pose = &probe->second;
        }
      }
      if (best_pose && best <= kTol) {
        out.gt_frame_indices.push_back(static_cast<int>(k));
        out.gt_poses.push_back(*best_pose);
      } else {
        ++out.gt_unmatched;
      }
    }
    if (out.gt_unmatched > 0)
      std::fprintf(stderr, "warning: %d of %zu frames have no ground truth within %.3fs\n",
                   out.gt_unmatched, out.frames.size(), kTol);
  }
  return out;
}

void export_kitti_layout(const SequenceDataset& dataset, const std::string& root,
                         const std::string& sequence_id) {
  const fs::path dir = fs::path(root) / sequence_id;
  fs::create_directories(dir);

  for (std::size_t k = 0; k < dataset.frames.size(); ++k) {
    const Frame& f = dataset.frames[k];
    cv::Mat img(f.height(), f.width(), CV_8UC3);
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        auto q = [&](int c) {
          return static_cast<std::uint8_t>(
              std::lround(std::min(1.0, std::max(0.0, f.pixels.at(c, y, x))) * 255.0));
        };
        img.at<cv::Vec3b>(y, x) = cv::Vec3b(q(2), q(1), q(0));  // RGB -> BGR
      }
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", k);
    if (!cv::imwrite((dir / name).string(), img))
      throw DataError("cannot write image: " + (dir / name).string());
  }

  {
    std::ofstream out(dir / "intrinsics.txt");
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.10g %.10g %.10g %.10g\n", dataset.intrinsics.fx,
                  dataset.intrinsics.fy, dataset.intrinsics.cx, dataset.intrinsics.cy);
    out << buf;
  }

  if (dataset.has_full_ground_truth()) {
    std::ofstream out(dir / "poses.txt");
    for (const PoseSE3& p : dataset.gt_poses) {
      char buf[512];
      std::snprintf(buf, sizeof(buf),
                    "%.12g %.12g %.12g %.12g %.12g %.12g %.12g %.12g %.12g %.12g %.12g %.12g\n",
                    p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2), p.translation(0),
                    p.rotation(1, 0), p.rotation(1, 1), p.rotation(1, 2), p.translation(1),
                    p.rotation(2, 0), p.rotation(2, 1), p.rotation(2, 2), p.translation(2));
      out << buf;
    }
  }
}

}  // namespace metavo
