#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "latseg/tensor.hpp"
#include "latseg/util.hpp"

namespace latseg {

// Point cloud file format ("cloud file"):
//   line 1: d f_d has_semantic has_instance
//   then one point per line: d positions, f_d features, then the optional
//   integer semantic and instance labels. Reals are written with 17
//   significant digits so save/load round-trips bit-exactly. Labels >= -1,
//   -1 meaning "ignore"/unlabeled.

struct PointCloud {
  Tensor positions;            // m x d
  Tensor features;             // m x f_d
  std::vector<int> semantic;   // empty or length m
  std::vector<int> instance;   // empty or length m

  int size() const { return positions.rank() == 2 ? positions.rows() : 0; }
  int dim() const { return positions.rank() == 2 ? positions.cols() : 0; }
  int feature_dim() const { return features.rank() == 2 ? features.cols() : 0; }
};

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void save_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open for writing: " + path);
  int m = cloud.size(), d = cloud.dim(), f_d = cloud.feature_dim();
  bool has_sem = !cloud.semantic.empty(), has_inst = !cloud.instance.empty();
  out << d << ' ' << f_d << ' ' << (has_sem ? 1 : 0) << ' ' << (has_inst ? 1 : 0) << '\n';
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < d; ++j) out << (j ? " " : "") << format_real(cloud.positions(i, j));
    for (int j = 0; j < f_d; ++j) out << ' ' << format_real(cloud.features(i, j));
    if (has_sem) out << ' ' << cloud.semantic[static_cast<size_t>(i)];
    if (has_inst) out << ' ' << cloud.instance[static_cast<size_t>(i)];
    out << '\n';
  }
  if (!out) throw parse_error("write failed: " + path);
}

inline PointCloud load_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw parse_error(path + ": missing header");
  int d = 0, f_d = 0, has_sem = 0, has_inst = 0;
  {
    std::istringstream hs(line);
    if (!(hs >> d >> f_d >> has_sem >> has_inst) || d < 1 || f_d < 0)
      throw parse_error(path + ": malformed header");
    std::string extra;
    if (hs >> extra) throw parse_error(path + ": malformed header");
  }
  std::vector<double> pos, feats;
  std::vector<int> sem, inst;
  int line_no = 1, m = 0;
  int arity = d + f_d + has_sem + has_inst;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof()) throw parse_error(path + ":" + std::to_string(line_no) + ": malformed row");
    if (static_cast<int>(row.size()) != arity)
      throw parse_error(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(arity) + " fields, got " + std::to_string(row.size()));
    for (int j = 0; j < d; ++j) pos.push_back(row[static_cast<size_t>(j)]);
    for (int j = 0; j < f_d; ++j) feats.push_back(row[static_cast<size_t>(d + j)]);
    int at = d + f_d;
    if (has_sem) {
      int label = static_cast<int>(row[static_cast<size_t>(at++)]);
      if (label < -1) throw parse_error(path + ":" + std::to_string(line_no) + ": label < -1");
      sem.push_back(label);
    }
    if (has_inst) {
      int label = static_cast<int>(row[static_cast<size_t>(at)]);
      if (label < -1) throw parse_error(path + ":" + std::to_string(line_no) + ": label < -1");
      inst.push_back(label);
    }
    ++m;
  }
  PointCloud cloud;
  cloud.positions = Tensor::from({m, d}, std::move(pos));
  cloud.features = Tensor::from({m, f_d}, std::move(feats));
  cloud.semantic = std::move(sem);
  cloud.instance = std::move(inst);
  return cloud;
}

inline void save_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open for writing: " + path);
  for (int v : labels) out << v << '\n';
}

inline std::vector<int> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  std::vector<int> labels;
  int v;
  while (in >> v) labels.push_back(v);
  return labels;
}

// Sequence manifest: cloud files of consecutive timesteps (oldest first) in
// a common coordinate frame. Format:
//   frame common
//   cloud <relative path>   (one per timestep)
struct SequenceManifest {
  std::vector<std::string> cloud_paths;  // resolved relative to the manifest
};

inline std::string dir_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

inline SequenceManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  SequenceManifest manifest;
  std::string word;
  bool frame_ok = false;
  std::string base = dir_of(path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ls >> word;
    if (word == "frame") {
      std::string frame;
      ls >> frame;
      if (frame != "common")
        throw parse_error(path + ":" + std::to_string(line_no) + ": sequence frames must be common");
      frame_ok = true;
    } else if (word == "cloud") {
      std::string rel;
      ls >> rel;
      if (rel.empty()) throw parse_error(path + ":" + std::to_string(line_no) + ": missing path");
      manifest.cloud_paths.push_back(base + "/" + rel);
    } else {
      throw parse_error(path + ":" + std::to_string(line_no) + ": unknown entry " + word);
    }
  }
  if (!frame_ok) throw parse_error(path + ": missing 'frame common' assertion");
  if (manifest.cloud_paths.empty()) throw parse_error(path + ": no clouds listed");
  return manifest;
}

inline void save_manifest(const std::string& path, const std::vector<std::string>& rel_paths) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open for writing: " + path);
  out << "frame common\n";
  for (const auto& p : rel_paths) out << "cloud " << p << '\n';
}

}  // namespace latseg
