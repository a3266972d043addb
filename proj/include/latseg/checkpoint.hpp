#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "latseg/cloud_io.hpp"
#include "latseg/model.hpp"

namespace latseg {

// Versioned plain-text checkpoint: a config block (enough to rebuild the
// model), a checksum over that block, then one record per parameter with its
// shape and 17-significant-digit values. Diff-able and portable.

namespace checkpoint_detail {

inline std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "cfg dim " << cfg.dim << '\n';
  out << "cfg levels " << cfg.levels << '\n';
  out << "cfg widths";
  for (int w : cfg.widths) out << ' ' << w;
  out << '\n';
  out << "cfg head " << head_name(cfg.head) << '\n';
  out << "cfg classes " << cfg.classes << '\n';
  out << "cfg embed_dim " << cfg.embed_dim << '\n';
  out << "cfg window " << cfg.temporal_window << '\n';
  out << "cfg sigma";
  for (double s : cfg.sigma) out << ' ' << format_real(s);
  out << '\n';
  out << "cfg points_per_vertex " << format_real(cfg.points_per_vertex) << '\n';
  out << "cfg feature_dim " << cfg.feature_dim << '\n';
  out << "cfg gn_groups " << cfg.gn_groups << '\n';
  out << "cfg gn_eps " << format_real(cfg.gn_eps) << '\n';
  out << "cfg offset_reg " << (cfg.use_offset_reg ? 1 : 0) << '\n';
  out << "cfg offset_reg_weight " << format_real(cfg.offset_reg_weight) << '\n';
  out << "cfg seed " << cfg.seed << '\n';
  return out.str();
}

inline ModelConfig parse_config(std::istream& in, std::string& pending_line) {
  ModelConfig cfg;
  cfg.widths.clear();
  cfg.sigma.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("cfg ", 0) != 0) {
      pending_line = line;
      break;
    }
    std::istringstream ls(line.substr(4));
    std::string key;
    ls >> key;
    if (key == "dim")
      ls >> cfg.dim;
    else if (key == "levels")
      ls >> cfg.levels;
    else if (key == "widths") {
      int w;
      while (ls >> w) cfg.widths.push_back(w);
    } else if (key == "head") {
      std::string h;
      ls >> h;
      if (h == "semantic")
        cfg.head = HeadKind::Semantic;
      else if (h == "instance")
        cfg.head = HeadKind::Instance;
      else if (h == "motion")
        cfg.head = HeadKind::Motion;
      else
        throw parse_error("checkpoint: unknown head " + h);
    } else if (key == "classes")
      ls >> cfg.classes;
    else if (key == "embed_dim")
      ls >> cfg.embed_dim;
    else if (key == "window")
      ls >> cfg.temporal_window;
    else if (key == "sigma") {
      double s;
      while (ls >> s) cfg.sigma.push_back(s);
    } else if (key == "points_per_vertex")
      ls >> cfg.points_per_vertex;
    else if (key == "feature_dim")
      ls >> cfg.feature_dim;
    else if (key == "gn_groups")
      ls >> cfg.gn_groups;
    else if (key == "gn_eps")
      ls >> cfg.gn_eps;
    else if (key == "offset_reg") {
      int v;
      ls >> v;
      cfg.use_offset_reg = v != 0;
    } else if (key == "offset_reg_weight")
      ls >> cfg.offset_reg_weight;
    else if (key == "seed")
      ls >> cfg.seed;
    else
      throw parse_error("checkpoint: unknown config key " + key);
  }
  return cfg;
}

}  // namespace checkpoint_detail

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open for writing: " + path);
  std::string cfg_block = checkpoint_detail::serialize_config(model.config());
  out << "latseg-checkpoint 1\n";
  char checksum[20];
  std::snprintf(checksum, sizeof(checksum), "%016llx",
                static_cast<unsigned long long>(fnv1a_str(cfg_block)));
  out << "config-checksum " << checksum << '\n';
  out << cfg_block;
  for (int i = 0; i < model.parameter_count(); ++i) {
    const Tensor& p = model.parameter(i);
    out << "param " << model.parameter_name(i) << ' ' << p.rank();
    for (int dim : p.shape) out << ' ' << dim;
    out << '\n';
    for (size_t j = 0; j < p.data.size(); ++j) out << (j ? " " : "") << format_real(p.data[j]);
    out << '\n';
  }
  out << "end\n";
  if (!out) throw parse_error("write failed: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "latseg-checkpoint 1")
    throw parse_error(path + ": not a version-1 checkpoint");
  if (!std::getline(in, line) || line.rfind("config-checksum ", 0) != 0)
    throw parse_error(path + ": missing config checksum");
  std::string stored_checksum = line.substr(16);

  std::string pending;
  ModelConfig cfg = checkpoint_detail::parse_config(in, pending);
  std::string cfg_block = checkpoint_detail::serialize_config(cfg);
  char checksum[20];
  std::snprintf(checksum, sizeof(checksum), "%016llx",
                static_cast<unsigned long long>(fnv1a_str(cfg_block)));
  if (stored_checksum != checksum) throw parse_error(path + ": config checksum mismatch");

  Model model(cfg);
  // pending holds the first param line.
  line = pending;
  while (true) {
    if (line == "end") break;
    std::istringstream ls(line);
    std::string word, name;
    int rank;
    ls >> word >> name >> rank;
    if (word != "param" || !ls) throw parse_error(path + ": malformed param record");
    std::vector<int> shape(static_cast<size_t>(rank));
    for (int j = 0; j < rank; ++j) ls >> shape[static_cast<size_t>(j)];
    int idx = model.parameter_index(name);
    if (idx < 0) throw parse_error(path + ": unknown parameter " + name);
    Tensor& p = model.parameter(idx);
    if (p.shape != shape) throw parse_error(path + ": shape mismatch for " + name);
    if (!std::getline(in, line)) throw parse_error(path + ": missing values for " + name);
    std::istringstream vs(line);
    for (size_t j = 0; j < p.data.size(); ++j)
      if (!(vs >> p.data[j])) throw parse_error(path + ": short value row for " + name);
    if (!std::getline(in, line)) throw parse_error(path + ": truncated checkpoint");
  }
  return model;
}

// --------------------------------------------------------------------------
// Flat key=value config files, mirrored 1:1 by CLI flags (CLI wins).

inline std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw parse_error(path + ":" + std::to_string(line_no) + ": expected key = value");
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t");
      size_t e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw parse_error(path + ":" + std::to_string(line_no) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

}  // namespace latseg
