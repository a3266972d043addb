// latseg: sparse permutohedral-lattice segmentation engine.
//
// Subcommands: selftest, gen, train, eval, infer, bench. Metrics are written
// as tab-separated key/value lines; all randomness is controlled by --seed.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "latseg/runner.hpp"
#include "latseg/selftest.hpp"

using namespace latseg;

namespace {

struct CommonFlags {
  int dim = 3;
  uint64_t seed = 0;
  int threads = 1;
  std::string config_path;
  std::vector<double> sigma;
  double points_per_vertex = 30.0;
  std::vector<double> margins;  // delta_v delta_d
  int window = 0;
  int steps = 200;
  std::string checkpoint;
  std::string out;
  std::string model = "shallow";
  bool offset_reg = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--dim", flags.dim, "lattice dimension d");
  cmd->add_option("--seed", flags.seed, "random seed");
  cmd->add_option("--threads", flags.threads, "intra-op threads (0 = all cores)");
  cmd->add_option("--config", flags.config_path, "key = value config file (flags win)");
  cmd->add_option("--sigma", flags.sigma, "lattice scale per axis")->expected(-1);
  cmd->add_option("--points-per-vertex", flags.points_per_vertex,
                  "auto-sigma target when --sigma is not given");
  cmd->add_option("--margins", flags.margins, "discriminative margins: delta_v delta_d")
      ->expected(2);
  cmd->add_option("--window", flags.window, "temporal window T");
  cmd->add_option("--steps", flags.steps, "training steps");
  cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
  cmd->add_option("--out", flags.out, "output path");
  cmd->add_option("--model", flags.model, "shallow | deep");
  cmd->add_flag("--offset-reg", flags.offset_reg, "add the offset-sum regularizer (weight 1)");
}

// Config file keys mirror the flags 1:1; explicitly passed flags win.
void merge_config_file(const CLI::App* cmd, CommonFlags& flags) {
  if (flags.config_path.empty()) return;
  auto kv = load_config_file(flags.config_path);
  auto unset = [&](const std::string& flag) { return cmd->count(flag) == 0; };
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto* v = get("dim"); v && unset("--dim")) flags.dim = std::stoi(*v);
  if (auto* v = get("seed"); v && unset("--seed")) flags.seed = std::stoull(*v);
  if (auto* v = get("threads"); v && unset("--threads")) flags.threads = std::stoi(*v);
  if (auto* v = get("points-per-vertex"); v && unset("--points-per-vertex"))
    flags.points_per_vertex = std::stod(*v);
  if (auto* v = get("window"); v && unset("--window")) flags.window = std::stoi(*v);
  if (auto* v = get("steps"); v && unset("--steps")) flags.steps = std::stoi(*v);
  if (auto* v = get("checkpoint"); v && unset("--checkpoint")) flags.checkpoint = *v;
  if (auto* v = get("out"); v && unset("--out")) flags.out = *v;
  if (auto* v = get("model"); v && unset("--model")) flags.model = *v;
  if (auto* v = get("sigma"); v && unset("--sigma")) {
    flags.sigma.clear();
    std::istringstream ss(*v);
    double x;
    while (ss >> x) flags.sigma.push_back(x);
  }
  if (auto* v = get("margins"); v && unset("--margins")) {
    flags.margins.clear();
    std::istringstream ss(*v);
    double x;
    while (ss >> x) flags.margins.push_back(x);
  }
}

RunOptions to_options(const CommonFlags& flags) {
  RunOptions opts;
  opts.dim = flags.dim;
  opts.seed = flags.seed;
  opts.steps = flags.steps;
  opts.window = flags.window;
  opts.sigma = flags.sigma;
  if (opts.sigma.size() == 1 && flags.dim > 1)  // scalar sigma: same scale per axis
    opts.sigma.assign(static_cast<size_t>(flags.dim), opts.sigma[0]);
  opts.points_per_vertex = flags.points_per_vertex;
  opts.offset_reg = flags.offset_reg;
  if (!flags.margins.empty()) {
    opts.margins.delta_v = flags.margins[0];
    opts.margins.delta_d = flags.margins[1];
  }
  if (flags.model == "deep") {
    opts.levels = 3;
    opts.widths = {64, 128, 256};
  } else if (flags.model != "shallow") {
    throw config_error("unknown model: " + flags.model + " (expected shallow or deep)");
  }
  return opts;
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
  if (path.empty()) return std::cout;
  file.open(path);
  if (!file) throw parse_error("cannot open for writing: " + path);
  return file;
}

int cmd_selftest(const CommonFlags& flags) {
  auto suites = run_selftest(flags.dim);
  std::ofstream file;
  std::ostream& out = open_out(file, flags.out);
  bool all = true;
  for (const auto& suite : suites) {
    out << suite.name << '\t' << (suite.pass ? "pass" : "fail") << '\n';
    if (!suite.pass) {
      std::cerr << "selftest: " << suite.name << ": " << suite.detail << '\n';
      all = false;
    }
  }
  return all ? 0 : 1;
}

int cmd_gen(const CommonFlags& flags, const GenParams& params) {
  if (flags.out.empty()) throw invalid_input("gen: --out directory required");
  gen_synthetic(flags.out, params);
  std::cout << "dataset written to " << flags.out << '\n';
  return 0;
}

// Datasets come either from a generated directory (--data) or are produced
// in memory from --task with the run's seed; both are deterministic.
LoadedDataset resolve_dataset(const CommonFlags& flags, const std::string& data_dir,
                              const GenParams& gen_params) {
  if (!data_dir.empty()) return load_dataset(load_dataset_index(data_dir));
  if (gen_params.task.empty())
    throw invalid_input("need --data <dir> or --task <name>");
  GenParams params = gen_params;
  params.seed = flags.seed;
  if (params.task == "motion" && flags.window > 0) params.window = flags.window;
  return make_dataset(params);
}

int cmd_train(const CommonFlags& flags, const std::string& data_dir, const GenParams& gen_params) {
  LoadedDataset data = resolve_dataset(flags, data_dir, gen_params);
  RunOptions opts = to_options(flags);
  Model model = train_on_dataset(data, opts, std::cout);
  if (!flags.checkpoint.empty()) {
    save_checkpoint(flags.checkpoint, model);
    std::cout << "checkpoint written to " << flags.checkpoint << '\n';
  }
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& data_dir, const GenParams& gen_params) {
  if (flags.checkpoint.empty()) throw invalid_input("eval: no checkpoint given");
  Model model = load_checkpoint(flags.checkpoint);
  LoadedDataset data = resolve_dataset(flags, data_dir, gen_params);
  RunOptions opts = to_options(flags);
  if (flags.window > 0) model.mutable_config().temporal_window = flags.window;
  Report report = evaluate(model, data, opts);
  std::ofstream file;
  write_report(open_out(file, flags.out), report);
  return 0;
}

int cmd_infer(const CommonFlags& flags, const std::string& input) {
  if (flags.checkpoint.empty() || !std::filesystem::exists(flags.checkpoint))
    throw invalid_input("infer: no checkpoint at '" + flags.checkpoint + "'");
  Model model = load_checkpoint(flags.checkpoint);
  std::vector<Tensor> positions, features;
  if (input.size() > 4 && input.substr(input.size() - 4) == ".txt") {
    auto manifest = load_manifest(input);
    for (const auto& path : manifest.cloud_paths) {
      auto cloud = load_cloud(path);
      positions.push_back(cloud.positions);
      features.push_back(cloud.features);
    }
  } else {
    auto cloud = load_cloud(input);
    positions.push_back(cloud.positions);
    features.push_back(cloud.features);
  }
  RunOptions opts = to_options(flags);
  auto labels = infer_labels(model, positions, features, opts.margins);
  if (flags.out.empty()) throw invalid_input("infer: --out path required");
  save_labels(flags.out, labels);
  std::cout << "labels written to " << flags.out << '\n';
  return 0;
}

int cmd_bench(const CommonFlags& flags) {
  using clock = std::chrono::steady_clock;
  int m = 100000, c = 64, d = flags.dim;
  std::mt19937_64 rng(flags.seed);
  Tensor pos({m, d});
  for (auto& v : pos.data) v = std::uniform_real_distribution<double>(0, 10)(rng);
  auto sigma = auto_sigma(pos, flags.points_per_vertex);
  auto built = build_lattice(scale_cloud(pos, sigma));
  int n = built.lattice.size();
  Tensor f = random_normal({m, c}, rng);
  ConvKernel kernel;
  kernel.weights = random_normal({kernel_taps(d), c, c}, rng, 0.1);
  auto adj = same_level_adjacency(built.lattice);

  Report report;
  report.emplace_back("points", std::to_string(m));
  report.emplace_back("vertices", std::to_string(n));
  report.emplace_back("channels", std::to_string(c));
  auto time_it = [&](const char* name, auto&& fn) {
    auto t0 = clock::now();
    fn();
    double secs = std::chrono::duration<double>(clock::now() - t0).count();
    append_metric(report, name, secs);
    return secs;
  };
  Tensor x;
  double total = 0;
  total += time_it("splat_seconds", [&] { x = splat(f, built.footprint, n); });
  total += time_it("convolve_seconds", [&] { x = neighborhood_conv(x, adj, kernel); });
  total += time_it("slice_seconds", [&] { f = slice(x, built.footprint); });
  append_metric(report, "fused_forward_seconds", total);
  std::ofstream file;
  write_report(open_out(file, flags.out), report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse permutohedral-lattice segmentation engine"};
  app.require_subcommand(1);

  CommonFlags flags;
  GenParams gen_params;
  std::string data_dir, infer_input;

  auto* selftest = app.add_subcommand("selftest", "run geometry/adjointness/gradient suites");
  add_common(selftest, flags);

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, flags);
  gen->add_option("--task", gen_params.task, "semantic-parts | instances | motion")->required();
  gen->add_option("--points", gen_params.points, "points per semantic-parts scene");
  gen->add_option("--blobs", gen_params.blobs, "instance blob count");
  gen->add_option("--per-blob", gen_params.per_blob, "points per blob");
  gen->add_option("--scenes", gen_params.scenes, "scene count");

  auto* train = app.add_subcommand("train", "train a model on a dataset (--data or --task)");
  add_common(train, flags);
  train->add_option("--data", data_dir, "dataset directory");
  train->add_option("--task", gen_params.task, "generate the dataset in memory instead");
  train->add_option("--points", gen_params.points, "points per semantic-parts scene");
  train->add_option("--blobs", gen_params.blobs, "instance blob count");
  train->add_option("--per-blob", gen_params.per_blob, "points per blob");
  train->add_option("--scenes", gen_params.scenes, "scene count");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (--data or --task)");
  add_common(eval, flags);
  eval->add_option("--data", data_dir, "dataset directory");
  eval->add_option("--task", gen_params.task, "generate the dataset in memory instead");
  eval->add_option("--points", gen_params.points, "points per semantic-parts scene");
  eval->add_option("--blobs", gen_params.blobs, "instance blob count");
  eval->add_option("--per-blob", gen_params.per_blob, "points per blob");
  eval->add_option("--scenes", gen_params.scenes, "scene count");

  auto* infer = app.add_subcommand("infer", "label a cloud file or sequence manifest");
  add_common(infer, flags);
  infer->add_option("--input", infer_input, "cloud file or sequence manifest")->required();

  auto* bench = app.add_subcommand("bench", "operator throughput report (informational)");
  add_common(bench, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors -> exit 2
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    merge_config_file(cmd, flags);
    set_threads(flags.threads);
    if (gen_params.task == "motion" && cmd->count("--scenes") == 0) gen_params.scenes = 8;
    if (cmd == selftest) return cmd_selftest(flags);
    if (cmd == gen) {
      gen_params.seed = flags.seed;
      if (flags.window > 0) gen_params.window = flags.window;
      return cmd_gen(flags, gen_params);
    }
    if (cmd == train) return cmd_train(flags, data_dir, gen_params);
    if (cmd == eval) return cmd_eval(flags, data_dir, gen_params);
    if (cmd == infer) return cmd_infer(flags, infer_input);
    if (cmd == bench) return cmd_bench(flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
