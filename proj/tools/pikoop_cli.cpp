// pikoop command line: generate, fit, evaluate, sweep, report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "pikoop/harness.hpp"

namespace fs = std::filesystem;
using namespace pikoop;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
};

void add_common(CLI::App* app, Common& c, bool need_config = true) {
  auto* opt = app->add_option("--config", c.config, "experiment config (INI)")->check(CLI::ExistingFile);
  if (need_config) opt->required();
  app->add_option("--seed", c.seed, "override [run] seed");
  app->add_option("--out-dir", c.out_dir, "output directory")->capture_default_str();
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void note(const std::string& s) { std::cerr << "[pikoop] " << s << "\n"; }

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

struct Datasets {
  TrajectoryDataset d1, test;
  PhaseDataset d2;
};

/// Replicate-0 datasets: read from `dir` when present, generated otherwise.
Datasets datasets_for(const ExperimentConfig& cfg, const SplitSystem& sys, const std::string& dir, bool need_d2) {
  const auto s = replicate_seeds(cfg.seed, 0);
  Datasets d;
  if (fs::exists(path_in(dir, "d1.bin"))) {
    d.d1 = io::load_dataset(path_in(dir, "d1.bin"));
  } else {
    note("generating D1");
    d.d1 = make_master_d1(cfg, sys, s.d1);
  }
  if (need_d2) {
    if (fs::exists(path_in(dir, "d2.bin"))) {
      d.d2 = io::load_phase(path_in(dir, "d2.bin"));
    } else {
      note("generating D2");
      d.d2 = make_master_d2(cfg, sys, s.d2, s.pilot);
    }
  }
  if (fs::exists(path_in(dir, "test.bin"))) {
    d.test = io::load_dataset(path_in(dir, "test.bin"));
  } else {
    note("generating test trajectories");
    d.test = make_test_set(cfg, sys, s.test);
  }
  return d;
}

int cmd_generate(const Common& c) {
  const auto cfg = load(c);
  const auto sys = make_system(cfg);
  const auto s = replicate_seeds(cfg.seed, 0);
  fs::create_directories(c.out_dir);
  note("generating D1 (" + std::to_string(cfg.d1_records()) + " records)");
  const auto d1 = make_master_d1(cfg, sys, s.d1);
  io::save_dataset(d1, path_in(c.out_dir, "d1.bin"));
  io::save_dataset_csv(d1, path_in(c.out_dir, "d1.csv"));
  note("generating D2 (" + std::to_string(cfg.d2_size) + " samples)");
  const auto d2 = make_master_d2(cfg, sys, s.d2, s.pilot);
  io::save_phase(d2, path_in(c.out_dir, "d2.bin"));
  io::detail::write_text(path_in(c.out_dir, "d2.csv"), io::phase_csv(d2));
  note("generating test trajectories");
  const auto test = make_test_set(cfg, sys, s.test);
  io::save_dataset(test, path_in(c.out_dir, "test.bin"));
  io::detail::write_text(path_in(c.out_dir, "config.ini"), config_ini(cfg));
  std::printf("wrote d1.bin d1.csv d2.bin d2.csv test.bin config.ini to %s\n", c.out_dir.c_str());
  return 0;
}

int cmd_fit(const Common& c, const std::string& method_name, int d1_size, int d2_size) {
  const auto cfg = load(c);
  const auto sys = make_system(cfg);
  const Method method = io::method_from_string(method_name);
  fs::create_directories(c.out_dir);
  auto data = datasets_for(cfg, sys, c.out_dir, method == Method::PI);
  if (d1_size > 0) data.d1 = data.d1.prefix(d1_size);
  if (d2_size > 0 && method == Method::PI) data.d2 = data.d2.prefix(d2_size);
  const auto model = fit_method(cfg, sys, method, data.d1, data.d2);
  const std::string tag = to_string(method);
  io::save_model(model, path_in(c.out_dir, "model." + tag + ".bin"));
  io::save_model_json(model, path_in(c.out_dir, "model." + tag + ".json"));
  std::printf("method %s  |D1| %d  |D2| %d  lifted dim %d  spectral radius %.6g%s%s\n", tag.c_str(),
              data.d1.size(), method == Method::PI ? data.d2.size() : 0, model.spec.lifted_dim(),
              model.report.spectral_radius, model.report.unstable ? "  UNSTABLE" : "",
              model.report.lasso_converged ? "" : "  (lasso hit max_iter)");
  for (const auto& n : model.report.notes) std::printf("  note: %s\n", n.c_str());
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_path, const std::string& test_path) {
  const auto cfg = load(c);
  const auto sys = make_system(cfg);
  const auto model = model_path.size() > 5 && model_path.substr(model_path.size() - 5) == ".json"
                         ? io::load_model_json(model_path)
                         : io::load_model(model_path);
  TrajectoryDataset test;
  if (!test_path.empty()) {
    test = io::load_dataset(test_path);
  } else if (fs::exists(path_in(c.out_dir, "test.bin"))) {
    test = io::load_dataset(path_in(c.out_dir, "test.bin"));
  } else {
    note("generating test trajectories");
    test = make_test_set(cfg, sys, replicate_seeds(cfg.seed, 0).test);
  }
  int diverged = 0;
  const auto rows = evaluate_model(model, sys, test, &diverged);
  fs::create_directories(c.out_dir);
  const auto out = path_in(c.out_dir, "eval." + to_string(model.method) + ".csv");
  io::detail::write_text(out, report_csv(rows));
  std::fputs(summary_table(aggregate(rows)).c_str(), stdout);
  std::printf("diverged trajectories: %d of %zu\nwrote %s\n", diverged, test.segments().size(), out.c_str());
  return 0;
}

int cmd_sweep(const Common& c, int jobs, const std::vector<std::string>& methods) {
  auto cfg = load(c);
  if (!methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : methods) cfg.methods.push_back(io::method_from_string(m));
  }
  SweepOptions so;
  so.jobs = jobs;
  so.log = note;
  const auto rep = run_sweep(cfg, so);
  write_report(rep, cfg, c.out_dir);
  std::fputs(summary_table(rep.aggregates()).c_str(), stdout);
  int failed = 0;
  for (const auto& cell : rep.cells) failed += cell.ok ? 0 : 1;
  std::printf("%zu cells, %d failed fits\nwrote report.csv report.json to %s\n", rep.cells.size(), failed,
              c.out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& in, const std::string& out_dir) {
  const std::string csv = fs::is_directory(in) ? path_in(in, "report.csv") : in;
  const auto rows = parse_report_csv(io::detail::read_text(csv), csv);
  const auto aggs = aggregate(rows);
  const auto json_path = (fs::path(csv).parent_path() / "report.json").string();
  if (fs::exists(json_path)) {
    const auto j = nlohmann::json::parse(io::detail::read_text(json_path));
    if (j.at("aggregates") != aggregates_json(aggs)) {
      note("warning: aggregates in report.json differ from those recomputed from report.csv");
    }
  }
  fs::create_directories(out_dir);
  const auto table = summary_table(aggs);
  io::detail::write_text(path_in(out_dir, "summary.txt"), table);
  io::detail::write_text(path_in(out_dir, "shape_error.svg"), svg_plot(aggs, false, "median shape error vs |D1|"));
  io::detail::write_text(path_in(out_dir, "velocity_error.svg"),
                         svg_plot(aggs, true, "median distal velocity error vs |D1|"));
  std::fputs(table.c_str(), stdout);
  std::printf("wrote summary.txt shape_error.svg velocity_error.svg to %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pikoop: Koopman identification with physics-informed operator splitting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(PIKOOP_BUILD_STAMP));

  Common gen_c, fit_c, eval_c, sweep_c;
  auto* gen = app.add_subcommand("generate", "simulate D1, D2 and test trajectories");
  add_common(gen, gen_c);

  auto* fit = app.add_subcommand("fit", "fit one model and write model.<method>.bin/.json");
  add_common(fit, fit_c);
  std::string fit_method_name = "pi";
  int d1_size = 0, d2_size = 0;
  fit->add_option("--method", fit_method_name, "l, b or pi")
      ->check(CLI::IsMember({"l", "b", "pi"}))
      ->capture_default_str();
  fit->add_option("--d1-size", d1_size, "use the first N records of D1 (0 = all)");
  fit->add_option("--d2-size", d2_size, "use the first N samples of D2 (0 = all)");

  auto* eval = app.add_subcommand("evaluate", "roll a model out on test trajectories");
  add_common(eval, eval_c);
  std::string model_path, test_path;
  eval->add_option("--model", model_path, "model file (.bin or .json)")->required()->check(CLI::ExistingFile);
  eval->add_option("--test", test_path, "test dataset (.bin); default <out-dir>/test.bin or generated")
      ->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "full |D1| x |D2| study, writes report.csv and report.json");
  add_common(sweep, sweep_c);
  int jobs = 1;
  std::vector<std::string> methods;
  sweep->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  sweep->add_option("--method", methods, "restrict to these methods (repeatable)")
      ->check(CLI::IsMember({"l", "b", "pi"}));

  auto* report = app.add_subcommand("report", "summary table and SVG plots from report.csv");
  std::string report_in = "out", report_out;
  report->add_option("--in", report_in, "report.csv or the directory holding it")->capture_default_str();
  report->add_option("--out-dir", report_out, "output directory (default: next to report.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(gen_c);
    if (*fit) return cmd_fit(fit_c, fit_method_name, d1_size, d2_size);
    if (*eval) return cmd_evaluate(eval_c, model_path, test_path);
    if (*sweep) return cmd_sweep(sweep_c, jobs, methods);
    if (*report) {
      if (report_out.empty()) {
        report_out = fs::is_directory(report_in) ? report_in : fs::path(report_in).parent_path().string();
        if (report_out.empty()) report_out = ".";
      }
      return cmd_report(report_in, report_out);
    }
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
