// Command-line front end: source training, transfer cells, action ablations,
// evaluation, the Table-1 style matrix and frame dumps.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "actxfer/harness.hpp"
#include "actxfer/seeding.hpp"

using namespace actxfer;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  std::optional<int> reps;
  std::optional<int> jobs;
  std::optional<std::string> output;
  bool quiet = false;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config_file, "flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.overrides, "override one config key, key=value (repeatable)");
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--steps", o.steps, "agent-step budget per run");
  app->add_option("--reps", o.reps, "repetitions");
  app->add_option("--jobs", o.jobs, "worker threads");
  app->add_option("--output", o.output, "output directory");
  app->add_flag("--quiet", o.quiet, "no progress lines");
}

ExperimentConfig finish_config(ExperimentConfig cfg, const CommonOptions& o) {
  if (!o.config_file.empty()) cfg = load_config(o.config_file, std::move(cfg));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.steps = *o.steps;
  if (o.reps) cfg.repetitions = *o.reps;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.output) cfg.output = *o.output;
  cfg.validate();
  return cfg;
}

ProgressFn printer(const CommonOptions& o) {
  if (o.quiet) return {};
  return [](const std::string& line) {
    std::fprintf(stderr, "%s\n", line.c_str());
    std::fflush(stderr);
  };
}

std::string cell(const RunSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%5.1f +- %4.1f%s", s.mean_success(), s.std_success(),
                s.mean_success() >= 90.0 ? " *" : "  ");
  return buf;
}

void print_summary(const RunSummary& s) {
  std::printf("%-20s %-14s %s   (%zu runs, config %s)\n", to_string(s.config.method).c_str(),
              s.config.source_label.empty() ? "-" : s.config.source_label.c_str(), cell(s).c_str(), s.runs.size(),
              s.config.hash().c_str());
}

void save_final_checkpoints(const RunSummary& s, const fs::path& dir) {
  const HeadKind head = s.config.algorithm == Algorithm::dqn ? HeadKind::dueling_q : HeadKind::actor_critic;
  NetworkSpec spec{head, s.config.action_space(), s.config.obs};
  if (s.config.method == TransferMethod::adapter) {
    spec.adapter_from = load_checkpoint(s.config.source).spec.actions;
  }
  for (const auto& r : s.runs) {
    if (!r.final_params) continue;
    save_checkpoint(dir / (r.run_id + ".ckpt"),
                    Checkpoint{s.config.algorithm, spec, s.config.steps, r.seed, *r.final_params});
  }
}

void write_ppm(const fs::path& path, const Observation& o) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << o.width << " " << o.height << "\n255\n";
  for (std::uint8_t v : o.pixels) {
    const char px[3] = {static_cast<char>(v), static_cast<char>(v), static_cast<char>(v)};
    out.write(px, 3);
  }
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual navigation agents with action-space transfer"};
  app.require_subcommand(1);

  // train-source ------------------------------------------------------------
  CommonOptions src_opt;
  std::string src_algo = "dqn";
  std::optional<int> src_rep;
  auto* src = app.add_subcommand("train-source", "train source models on the source environment");
  add_common(src, src_opt);
  src->add_option("--algorithm", src_algo, "dqn or ppo")->check(CLI::IsMember({"dqn", "ppo"}));
  src->add_option("--rep", src_rep, "train only this 0-based repetition");

  // transfer ----------------------------------------------------------------
  CommonOptions tr_opt;
  std::string tr_algo = "dqn";
  std::string tr_source, tr_method, tr_env, tr_actions, tr_label;
  bool tr_save = false;
  auto* tr = app.add_subcommand("transfer", "transfer a source checkpoint to a new action space");
  add_common(tr, tr_opt);
  tr->add_option("--algorithm", tr_algo, "dqn or ppo")->check(CLI::IsMember({"dqn", "ppo"}));
  tr->add_option("--source", tr_source, "source checkpoint");
  tr->add_option("--method", tr_method, "fine_tune, replace, replace_with_value, adapter or scratch");
  tr->add_option("--env", tr_env, "source, sim2sim_target or robot_like");
  tr->add_option("--actions", tr_actions, "discrete24, continuous2, discrete4 or subset:KEYS");
  tr->add_option("--label", tr_label, "source model label in results.csv");
  tr->add_flag("--save-checkpoints", tr_save, "write each run's final parameters");

  // ablate-actions ----------------------------------------------------------
  CommonOptions ab_opt;
  std::string ab_source, ab_env = "sim2sim_target";
  std::vector<std::string> ab_subsets = {"WSD", "WSA", "WAD", "SAD", "WD"};
  auto* ab = app.add_subcommand("ablate-actions", "replace-transfer onto subsets of W/S/A/D");
  add_common(ab, ab_opt);
  ab->add_option("--source", ab_source, "DQN source checkpoint")->required();
  ab->add_option("--subsets", ab_subsets, "remaining keys per run, e.g. WAD SAD");
  ab->add_option("--env", ab_env, "environment variant");

  // evaluate ----------------------------------------------------------------
  std::string ev_ckpt, ev_env = "source";
  int ev_episodes = 100;
  std::uint64_t ev_seed = 12345;
  bool ev_oracle = false;
  double ev_epsilon = 0.05;
  auto* ev = app.add_subcommand("evaluate", "greedy evaluation of a checkpoint or the scripted oracle");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file");
  ev->add_option("--env", ev_env, "environment variant");
  ev->add_option("--episodes", ev_episodes, "episodes");
  ev->add_option("--seed", ev_seed, "environment seed");
  ev->add_flag("--oracle", ev_oracle, "evaluate the pixel-based scripted oracle instead");
  ev->add_option("--epsilon", ev_epsilon, "DQN test-time exploration rate");

  // replicate-table1 --------------------------------------------------------
  CommonOptions tb_opt;
  std::string tb_algo = "dqn";
  std::vector<std::string> tb_sources;
  std::vector<std::string> tb_methods = {"fine_tune", "replace", "replace_with_value", "adapter"};
  double tb_scale = 1.0;
  long tb_scratch_steps = 50000;
  auto* tb = app.add_subcommand("replicate-table1", "source models x methods x repetitions matrix");
  add_common(tb, tb_opt);
  tb->add_option("--algorithm", tb_algo, "dqn or ppo")->check(CLI::IsMember({"dqn", "ppo"}));
  tb->add_option("--sources", tb_sources, "source checkpoints, one column each")->required();
  tb->add_option("--methods", tb_methods, "transfer methods (rows); scratch is always added");
  tb->add_option("--budget-scale", tb_scale, "multiplies every step budget");
  tb->add_option("--scratch-steps", tb_scratch_steps, "scratch budget before scaling");

  // dump-frames -------------------------------------------------------------
  std::string df_env = "source", df_out = "frames", df_policy = "oracle";
  int df_frames = 20;
  std::uint64_t df_seed = 1;
  auto* df = app.add_subcommand("dump-frames", "write observations as binary PPM files");
  df->add_option("--env", df_env, "environment variant");
  df->add_option("--frames", df_frames, "number of frames");
  df->add_option("--seed", df_seed, "environment seed");
  df->add_option("--output", df_out, "output directory");
  df->add_option("--policy", df_policy, "oracle or random")->check(CLI::IsMember({"oracle", "random"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*src) {
      auto cfg = finish_config(ExperimentConfig::source_defaults(parse_algorithm(src_algo)), src_opt);
      std::vector<int> reps;
      if (src_rep) {
        reps.push_back(*src_rep);
      } else {
        for (int r = 0; r < cfg.repetitions; ++r) reps.push_back(r);
      }
      std::vector<RunResult> results(reps.size());
      parallel_for(static_cast<int>(reps.size()), cfg.jobs,
                   [&](int i) { results[static_cast<std::size_t>(i)] = train_source(cfg, reps[static_cast<std::size_t>(i)], printer(src_opt)); });
      for (const auto& r : results) {
        const auto& e = r.evals.empty() ? EvalPoint{} : r.evals.back();
        std::printf("%s  final eval %.1f%% (mean length %.1f)  checkpoint %s\n", r.run_id.c_str(), e.success_pct,
                    e.mean_length, (fs::path(cfg.output) / r.run_id / "final.ckpt").string().c_str());
      }
    } else if (*tr) {
      auto base = ExperimentConfig::transfer_defaults(parse_algorithm(tr_algo));
      if (!tr_env.empty()) base.set("env", tr_env);
      if (!tr_method.empty()) base.method = parse_transfer_method(tr_method);
      if (!tr_actions.empty()) base.set("actions", tr_actions);
      if (!tr_source.empty()) base.source = tr_source;
      if (!tr_label.empty()) base.source_label = tr_label;
      auto cfg = finish_config(base, tr_opt);
      auto summary = run_transfer(cfg, printer(tr_opt));
      export_results(cfg.output, {summary});
      if (tr_save) save_final_checkpoints(summary, cfg.output);
      print_summary(summary);
    } else if (*ab) {
      auto base = ExperimentConfig::transfer_defaults(Algorithm::dqn);
      base.set("env", ab_env);
      base.method = TransferMethod::replace;
      base.source = ab_source;
      base.steps = 20000;
      base = finish_config(base, ab_opt);
      std::vector<RunSummary> all;
      for (const auto& keys : ab_subsets) {
        auto cfg = base;
        cfg.actions = ActionSpace::subset(keys).name();
        all.push_back(run_transfer(cfg, printer(ab_opt)));
        std::printf("%-6s %s\n", keys.c_str(), cell(all.back()).c_str());
        std::fflush(stdout);
      }
      export_results(base.output, all);
    } else if (*ev) {
      auto world = WorldConfig::for_variant(parse_env_variant(ev_env));
      EvalResult r;
      if (ev_oracle) {
        RayGymEnv env(world, ActionSpace::discrete4(), ev_seed);
        ScriptedOracle oracle;
        r = evaluate(env, ev_episodes, [&](RayGymEnv& e, const Observation& o) {
          if (e.state().agent_step == 0) oracle.reset();
          return e.step(oracle.act(o));
        });
      } else {
        if (ev_ckpt.empty()) throw ConfigError("evaluate needs --checkpoint or --oracle");
        r = evaluate_checkpoint(load_checkpoint(ev_ckpt), world, ev_episodes, ev_seed, ev_epsilon);
      }
      std::printf("success %.1f%% over %d episodes, mean length %.2f agent steps\n", r.success_pct(), r.episodes,
                  r.mean_length);
    } else if (*tb) {
      const Algorithm algo = parse_algorithm(tb_algo);
      auto base = finish_config(ExperimentConfig::transfer_defaults(algo), tb_opt);
      const long transfer_steps = static_cast<long>(std::lround(base.steps * tb_scale));
      std::vector<RunSummary> all;
      std::vector<std::vector<std::string>> grid;
      for (const auto& m : tb_methods) {
        std::vector<std::string> row;
        for (std::size_t s = 0; s < tb_sources.size(); ++s) {
          auto cfg = base;
          cfg.method = parse_transfer_method(m);
          cfg.source = tb_sources[s];
          cfg.source_label = std::to_string(s + 1);
          cfg.steps = transfer_steps;
          all.push_back(run_transfer(cfg, printer(tb_opt)));
          row.push_back(cell(all.back()));
        }
        grid.push_back(row);
      }
      auto scratch = base;
      scratch.method = TransferMethod::scratch;
      scratch.source.clear();
      scratch.source_label = "none";
      scratch.steps = static_cast<long>(std::lround(tb_scratch_steps * tb_scale));
      all.push_back(run_transfer(scratch, printer(tb_opt)));
      export_results(base.output, all);

      std::printf("\n%-20s", "method");
      for (std::size_t s = 0; s < tb_sources.size(); ++s) std::printf("  %-15s", (to_string(algo) + " " + std::to_string(s + 1)).c_str());
      std::printf("\n");
      for (std::size_t i = 0; i < grid.size(); ++i) {
        std::printf("%-20s", tb_methods[i].c_str());
        for (const auto& c : grid[i]) std::printf("  %-15s", c.c_str());
        std::printf("\n");
      }
      std::printf("%-20s  %-15s\n", "scratch", cell(all.back()).c_str());
      std::printf("\nlast-10%% training success, mean +- std over %d repetitions; * marks >= 90%%\n",
                  base.repetitions);
    } else if (*df) {
      auto world = WorldConfig::for_variant(parse_env_variant(df_env));
      RayGymEnv env(world, ActionSpace::discrete4(), df_seed);
      fs::create_directories(df_out);
      ScriptedOracle oracle;
      std::mt19937_64 rng(derive_seed(df_seed, 7));
      std::uniform_int_distribution<int> pick(0, 3);
      Observation o = env.reset();
      for (int i = 0; i < df_frames; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04d.ppm", i);
        write_ppm(fs::path(df_out) / name, o);
        const int a = df_policy == "oracle" ? oracle.act(o) : pick(rng);
        StepResult r = env.step(a);
        if (r.done) {
          o = env.reset();
          oracle.reset();
        } else {
          o = std::move(r.obs);
        }
      }
      std::printf("wrote %d frames to %s\n", df_frames, df_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
