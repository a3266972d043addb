#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "latseg/cloud_io.hpp"

namespace latseg {

// Seeded synthetic dataset generation for the three tasks. All scenes are
// 3-dimensional.
//
// dataset.txt layout (one entry per line):
//   task <semantic-parts|instances|motion>
//   classes <K>
//   window <T>
//   cloud <file>        (non-temporal tasks)
//   sequence <manifest> (motion)

struct DatasetIndex {
  std::string task;
  int classes = 0;
  int window = 1;
  std::vector<std::string> clouds;     // resolved paths
  std::vector<std::string> sequences;  // resolved manifest paths
};

inline void save_dataset_index(const std::string& dir, const DatasetIndex& index,
                               const std::vector<std::string>& rel_entries, bool temporal) {
  std::ofstream out(dir + "/dataset.txt");
  if (!out) throw parse_error("cannot write dataset index in " + dir);
  out << "task " << index.task << '\n';
  out << "classes " << index.classes << '\n';
  out << "window " << index.window << '\n';
  for (const auto& e : rel_entries) out << (temporal ? "sequence " : "cloud ") << e << '\n';
}

inline DatasetIndex load_dataset_index(const std::string& dir) {
  std::string path = dir + "/dataset.txt";
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  DatasetIndex index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string word, rest;
    ls >> word >> rest;
    if (word == "task")
      index.task = rest;
    else if (word == "classes")
      index.classes = std::stoi(rest);
    else if (word == "window")
      index.window = std::stoi(rest);
    else if (word == "cloud")
      index.clouds.push_back(dir + "/" + rest);
    else if (word == "sequence")
      index.sequences.push_back(dir + "/" + rest);
    else
      throw parse_error(path + ":" + std::to_string(line_no) + ": unknown entry " + word);
  }
  if (index.task.empty()) throw parse_error(path + ": missing task");
  return index;
}

// ---------------------------------------------------------------------------
// semantic-parts: points sampled on three disjoint surfaces (plane patch,
// sphere, cylinder side), labeled by surface. The surfaces are separated by
// at least 0.2, so the nearest-surface predicate recovers labels exactly.

namespace synthetic_detail {

constexpr double kPlaneHalf = 1.5;
constexpr std::array<double, 3> kSphereCenter = {0.0, 0.0, 1.0};
constexpr double kSphereRadius = 0.5;
constexpr std::array<double, 2> kCylinderAxis = {1.5, 0.0};
constexpr double kCylinderRadius = 0.3;
constexpr double kCylinderZ0 = 0.2;
constexpr double kCylinderZ1 = 1.2;

inline double plane_distance(const double* p) {
  double dx = std::max(0.0, std::fabs(p[0]) - kPlaneHalf);
  double dy = std::max(0.0, std::fabs(p[1]) - kPlaneHalf);
  return std::sqrt(dx * dx + dy * dy + p[2] * p[2]);
}

inline double sphere_distance(const double* p) {
  double dx = p[0] - kSphereCenter[0], dy = p[1] - kSphereCenter[1], dz = p[2] - kSphereCenter[2];
  return std::fabs(std::sqrt(dx * dx + dy * dy + dz * dz) - kSphereRadius);
}

inline double cylinder_distance(const double* p) {
  double dx = p[0] - kCylinderAxis[0], dy = p[1] - kCylinderAxis[1];
  double dr = std::fabs(std::sqrt(dx * dx + dy * dy) - kCylinderRadius);
  double dz = std::max({0.0, kCylinderZ0 - p[2], p[2] - kCylinderZ1});
  return std::sqrt(dr * dr + dz * dz);
}

}  // namespace synthetic_detail

// Analytic region predicate: index of the nearest of the three surfaces.
inline int semantic_parts_label(const double* p) {
  double dist[3] = {synthetic_detail::plane_distance(p), synthetic_detail::sphere_distance(p),
                    synthetic_detail::cylinder_distance(p)};
  int best = 0;
  for (int c = 1; c < 3; ++c)
    if (dist[c] < dist[best]) best = c;
  return best;
}

inline PointCloud gen_semantic_parts_cloud(uint64_t seed, int points) {
  if (points < 4) throw config_error("semantic-parts: need at least 4 points");
  using namespace synthetic_detail;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud cloud;
  cloud.positions = Tensor({points, 3});
  cloud.features = Tensor({points, 0});
  cloud.semantic.resize(static_cast<size_t>(points));
  for (int i = 0; i < points; ++i) {
    double pick = unit(rng);
    double* p = &cloud.positions.data[static_cast<size_t>(i) * 3];
    int label;
    if (pick < 0.5) {
      label = 0;
      p[0] = (2 * unit(rng) - 1) * kPlaneHalf;
      p[1] = (2 * unit(rng) - 1) * kPlaneHalf;
      p[2] = 0.0;
    } else if (pick < 0.75) {
      label = 1;
      // uniform direction on the sphere
      double z = 2 * unit(rng) - 1;
      double phi = 2 * M_PI * unit(rng);
      double r = std::sqrt(std::max(0.0, 1 - z * z));
      p[0] = kSphereCenter[0] + kSphereRadius * r * std::cos(phi);
      p[1] = kSphereCenter[1] + kSphereRadius * r * std::sin(phi);
      p[2] = kSphereCenter[2] + kSphereRadius * z;
    } else {
      label = 2;
      double phi = 2 * M_PI * unit(rng);
      p[0] = kCylinderAxis[0] + kCylinderRadius * std::cos(phi);
      p[1] = kCylinderAxis[1] + kCylinderRadius * std::sin(phi);
      p[2] = kCylinderZ0 + (kCylinderZ1 - kCylinderZ0) * unit(rng);
    }
    cloud.semantic[static_cast<size_t>(i)] = label;
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// instances: k Gaussian blobs with well-separated centers; every point
// carries semantic class 0 and its blob id.

inline PointCloud gen_instances_cloud(uint64_t seed, int blobs, int per_blob,
                                      double blob_sigma = 0.12, double min_separation = 1.6) {
  if (blobs < 1 || per_blob < 1) throw config_error("instances: need blobs >= 1, points >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-2.0, 2.0);
  std::normal_distribution<double> noise(0.0, blob_sigma);
  std::vector<std::array<double, 3>> centers;
  int guard = 0;
  while (static_cast<int>(centers.size()) < blobs) {
    if (++guard > 100000) throw config_error("instances: cannot place separated blobs");
    std::array<double, 3> c = {pos(rng), pos(rng), pos(rng)};
    bool ok = true;
    for (const auto& o : centers) {
      double d2 = 0;
      for (int j = 0; j < 3; ++j) d2 += (c[static_cast<size_t>(j)] - o[static_cast<size_t>(j)]) * (c[static_cast<size_t>(j)] - o[static_cast<size_t>(j)]);
      if (d2 < min_separation * min_separation) ok = false;
    }
    if (ok) centers.push_back(c);
  }
  PointCloud cloud;
  int m = blobs * per_blob;
  cloud.positions = Tensor({m, 3});
  cloud.features = Tensor({m, 0});
  cloud.semantic.assign(static_cast<size_t>(m), 0);
  cloud.instance.resize(static_cast<size_t>(m));
  int row = 0;
  for (int b = 0; b < blobs; ++b)
    for (int i = 0; i < per_blob; ++i, ++row) {
      for (int j = 0; j < 3; ++j) cloud.positions(row, j) = centers[static_cast<size_t>(b)][static_cast<size_t>(j)] + noise(rng);
      cloud.instance[static_cast<size_t>(row)] = b;
    }
  return cloud;
}

// ---------------------------------------------------------------------------
// motion: sequences with one moving and one static blob of the same base
// category. Class 0 = static, class 1 = moving; labels ride on every step's
// cloud (training reads the last one). Blob point offsets are drawn once per
// scene and translated rigidly, so the moving blob's displacement per step
// equals the velocity exactly.
//
// Scenes come in role-swapped pairs sharing the same two final locations and
// the same point offsets: in one scene the moving blob ends exactly where the
// other scene's static blob sits. The two last frames are identical point
// sets with opposite labels, so a single-frame model cannot exceed 50%
// accuracy on the moving class while the temporal model can use the lattice
// history to separate them.

struct MotionScene {
  std::vector<PointCloud> steps;
  std::array<double, 3> velocity = {0, 0, 0};
};

inline std::array<MotionScene, 2> gen_motion_pair(uint64_t seed, int per_blob, int window,
                                                  double blob_sigma = 0.10, double speed = 0.6) {
  if (window < 1) throw config_error("motion: window must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, blob_sigma);

  // The pair's two anchor locations, jittered around +-x.
  std::array<std::array<double, 3>, 2> anchor{};
  for (int a = 0; a < 2; ++a) {
    anchor[static_cast<size_t>(a)] = {(a == 0 ? -1.2 : 1.2) + 0.3 * (2 * unit(rng) - 1),
                                      0.6 * (2 * unit(rng) - 1), 0.4 * (2 * unit(rng) - 1)};
  }
  // y-dominant velocities keep the trajectories away from the other anchor.
  std::array<std::array<double, 3>, 2> vel{};
  for (int a = 0; a < 2; ++a) {
    double phi = (M_PI / 2) * (unit(rng) < 0.5 ? 1 : -1) + (M_PI / 6) * (2 * unit(rng) - 1);
    vel[static_cast<size_t>(a)] = {speed * std::cos(phi), speed * std::sin(phi), 0.0};
  }
  // Shared per-anchor point offsets (identical final frames across the pair).
  std::vector<std::array<double, 3>> off(static_cast<size_t>(2 * per_blob));
  for (auto& o : off)
    for (int j = 0; j < 3; ++j) o[static_cast<size_t>(j)] = noise(rng);

  auto blob_at = [&](PointCloud& cloud, int first_row, int anchor_idx,
                     const std::array<double, 3>& center, int label) {
    for (int i = 0; i < per_blob; ++i) {
      int row = first_row + i;
      const auto& o = off[static_cast<size_t>(anchor_idx * per_blob + i)];
      for (int j = 0; j < 3; ++j)
        cloud.positions(row, j) = center[static_cast<size_t>(j)] + o[static_cast<size_t>(j)];
      cloud.semantic[static_cast<size_t>(row)] = label;
    }
  };

  std::array<MotionScene, 2> pair;
  for (int scene_idx = 0; scene_idx < 2; ++scene_idx) {
    // Anchor `scene_idx` hosts the moving blob (arriving at step window-1),
    // the other anchor hosts the static blob.
    int mov = scene_idx, sta = 1 - scene_idx;
    MotionScene scene;
    scene.velocity = vel[static_cast<size_t>(mov)];
    for (int s = 0; s < window; ++s) {
      PointCloud cloud;
      int m = 2 * per_blob;
      cloud.positions = Tensor({m, 3});
      cloud.features = Tensor({m, 0});
      cloud.semantic.resize(static_cast<size_t>(m));
      std::array<double, 3> moving_center = anchor[static_cast<size_t>(mov)];
      for (int j = 0; j < 3; ++j)
        moving_center[static_cast<size_t>(j)] -=
            (window - 1 - s) * vel[static_cast<size_t>(mov)][static_cast<size_t>(j)];
      // Static blob first (anchor order fixed so final frames match exactly).
      blob_at(cloud, 0, sta, anchor[static_cast<size_t>(sta)], 0);
      blob_at(cloud, per_blob, mov, moving_center, 1);
      scene.steps.push_back(std::move(cloud));
    }
    pair[static_cast<size_t>(scene_idx)] = std::move(scene);
  }
  return pair;
}

// ---------------------------------------------------------------------------
// On-disk generation.

struct GenParams {
  std::string task;  // semantic-parts | instances | motion
  uint64_t seed = 0;
  int points = 2000;     // semantic-parts cloud size
  int blobs = 4;         // instances
  int per_blob = 100;    // instances / motion blob size
  int scenes = 1;        // scene count (motion defaults to 8)
  int window = 3;        // motion timesteps
};

inline DatasetIndex gen_synthetic(const std::string& dir, const GenParams& params) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  DatasetIndex index;
  index.task = params.task;
  std::vector<std::string> rel;
  if (params.task == "semantic-parts") {
    index.classes = 3;
    for (int s = 0; s < params.scenes; ++s) {
      auto cloud = gen_semantic_parts_cloud(params.seed + static_cast<uint64_t>(s), params.points);
      std::string name = "scene_" + std::to_string(s) + ".cloud";
      save_cloud(dir + "/" + name, cloud);
      rel.push_back(name);
      index.clouds.push_back(dir + "/" + name);
    }
    save_dataset_index(dir, index, rel, false);
  } else if (params.task == "instances") {
    index.classes = 1;
    for (int s = 0; s < params.scenes; ++s) {
      auto cloud = gen_instances_cloud(params.seed + static_cast<uint64_t>(s), params.blobs, params.per_blob);
      std::string name = "scene_" + std::to_string(s) + ".cloud";
      save_cloud(dir + "/" + name, cloud);
      rel.push_back(name);
      index.clouds.push_back(dir + "/" + name);
    }
    save_dataset_index(dir, index, rel, false);
  } else if (params.task == "motion") {
    index.classes = 2;
    index.window = params.window;
    int pairs = std::max(1, params.scenes / 2);
    int s = 0;
    for (int k = 0; k < pairs; ++k) {
      auto pair = gen_motion_pair(params.seed + static_cast<uint64_t>(k), params.per_blob, params.window);
      for (const auto& scene : pair) {
        std::string seq_dir = dir + "/seq_" + std::to_string(s);
        fs::create_directories(seq_dir);
        std::vector<std::string> steps_rel;
        for (size_t t = 0; t < scene.steps.size(); ++t) {
          std::string name = "t" + std::to_string(t) + ".cloud";
          save_cloud(seq_dir + "/" + name, scene.steps[t]);
          steps_rel.push_back(name);
        }
        save_manifest(seq_dir + "/manifest.txt", steps_rel);
        rel.push_back("seq_" + std::to_string(s) + "/manifest.txt");
        index.sequences.push_back(seq_dir + "/manifest.txt");
        ++s;
      }
    }
    save_dataset_index(dir, index, rel, true);
  } else {
    throw config_error("unknown task: " + params.task);
  }
  return index;
}

}  // namespace latseg
