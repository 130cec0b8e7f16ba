// SPDX-License-Identifier: Apache-2.0
// Command-line entry point. Exit codes: 0 success, 1 validation error,
// 2 runtime failure.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "moemarket/analysis.hpp"
#include "moemarket/config.hpp"
#include "moemarket/errors.hpp"
#include "moemarket/experiment.hpp"
#include "moemarket/report.hpp"

using namespace moemarket;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct RunArgs {
  std::string preset;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

RunConfig resolve_config(const RunArgs& a) {
  RunConfig base = a.preset.empty() ? load_config(a.config) : preset(a.preset);
  if (a.seed) base.seed = *a.seed;
  if (a.overrides.empty()) return base;
  nlohmann::json doc = config_to_json(base);
  for (const std::string& o : a.overrides) apply_override(doc, o);
  return config_from_json(doc);
}

int cmd_run(const RunArgs& a) {
  const RunConfig cfg = resolve_config(a);
  cfg.validate();
  const std::string out = a.out.empty() ? "runs/" + cfg.name : a.out;
  RunHooks hooks;
  if (!a.quiet) {
    hooks.on_step = [&](long step, double loss) {
      if ((step + 1) % 250 == 0) std::fprintf(stderr, "[%s] step %ld/%ld loss %.4f\n", cfg.name.c_str(), step + 1,
                                             cfg.total_steps, loss);
    };
  }
  const RunArtifacts art = run_experiment(cfg, hooks);
  write_artifacts(art, out);
  int replaced = 0;
  for (const MarketEvent& e : art.events) replaced += e.kind == EventKind::ExpertReplaced;
  if (!art.valid) {
    std::fprintf(stderr, "error: run aborted at step %ld: %s\n", art.failed_step, art.failure.c_str());
    return kRuntime;
  }
  const double train = art.loss.empty() ? 0.0 : art.loss.back().train_loss;
  const double eval = art.loss.empty() ? 0.0 : art.loss.back().eval_loss;
  std::printf("%s seed %llu: %d replacements, final train loss %.4f, final eval loss %.4f -> %s\n", cfg.name.c_str(),
              static_cast<unsigned long long>(cfg.seed), replaced, train, eval, out.c_str());
  return kOk;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

int cmd_presets() {
  for (const std::string& n : preset_names()) {
    const RunConfig c = preset(n);
    std::printf("%-4s mode %s  grace %ld  steps %ld  shifts", n.c_str(), to_string(c.market.fitness_mode).c_str(),
                c.market.grace_steps, c.total_steps);
    if (c.schedule.shifts().empty()) std::printf(" none");
    for (const DomainShift& s : c.schedule.shifts()) std::printf(" %ld:%s", s.step, s.domain.c_str());
    std::printf("\n");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees the same large buffers every step; keep them
  // in the heap instead of returning them to the kernel.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  CLI::App app{"Expert-market MoE simulator"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Train a preset or config and write artifacts");
  auto* p_opt = run->add_option("--preset", run_args.preset, "Preset name");
  auto* c_opt = run->add_option("--config", run_args.config, "Config JSON file");
  p_opt->excludes(c_opt);
  run->add_option("--seed", run_args.seed, "Override the seed");
  run->add_option("--out", run_args.out, "Output directory (default runs/<name>)");
  run->add_option("--set", run_args.overrides, "Override a config key, e.g. --set model.d_model=64");
  run->add_flag("--quiet", run_args.quiet, "No progress output");

  std::string report_dir, report_format = "text", report_out;
  auto* report = app.add_subcommand("report", "Render a report from a run directory");
  report->add_option("dir", report_dir, "Run directory")->required();
  report->add_option("--format", report_format, "text, csv or svg");
  report->add_option("--out", report_out, "Write to file instead of stdout");

  std::vector<std::string> compare_dirs;
  std::string compare_format = "text", compare_out;
  auto* compare = app.add_subcommand("compare", "Side-by-side summary of runs");
  compare->add_option("dirs", compare_dirs, "Run directories")->required();
  compare->add_option("--format", compare_format, "text or csv");
  compare->add_option("--out", compare_out, "Write to file instead of stdout");

  std::string gen_kind, gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_length = 200000;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus");
  gen->add_option("--kind", gen_kind, "prose_like or code_like")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--length", gen_length, "Characters to generate");
  gen->add_option("--out", gen_out, "Output file")->required();

  auto* presets = app.add_subcommand("presets", "List presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  }

  try {
    if (*run) {
      if (run_args.preset.empty() == run_args.config.empty()) {
        throw ConfigError("run needs exactly one of --preset or --config");
      }
      return cmd_run(run_args);
    }
    if (*report) {
      const ReportFormat f = parse_report_format(report_format);
      emit(render_report(read_artifacts(report_dir), f), report_out);
      return kOk;
    }
    if (*compare) {
      const ReportFormat f = parse_report_format(compare_format);
      if (compare_dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
      std::vector<RunSummary> rows;
      for (const std::string& d : compare_dirs) rows.push_back(summarize(read_artifacts(d)));
      const Comparison cmp = compare_runs(std::move(rows));
      if (!cmp.schedules_match) std::fprintf(stderr, "warning: shift schedules differ; recovery columns blanked\n");
      emit(render_comparison(cmp, f), compare_out);
      return kOk;
    }
    if (*gen) {
      const Domain d = generate_synthetic_domain(parse_synthetic_kind(gen_kind), gen_seed, gen_length);
      emit(d.corpus, gen_out);
      return kOk;
    }
    if (*presets) return cmd_presets();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kValidation;
}
