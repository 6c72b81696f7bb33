#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "actxfer/agents.hpp"
#include "actxfer/transfer.hpp"

namespace actxfer {

enum class Algorithm { dqn, ppo };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

// ---------------------------------------------------------------------------
// Checkpoints: "ACTXCKPT", u64 manifest length, JSON manifest, then the
// float32 payload in little-endian order, tensors in manifest order.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Algorithm algorithm = Algorithm::dqn;
  NetworkSpec spec;
  long train_steps = 0;
  std::uint64_t seed = 0;
  ParamStore params;

  Network network() const { return Network(spec, params); }
  static Checkpoint of(Algorithm algorithm, const Network& net, long train_steps, std::uint64_t seed);
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics

struct EpisodeRecord {
  std::string run_id;
  long episode = 0;
  int agent_steps = 0;
  int env_steps = 0;
  bool success = false;
  float reward = 0.0f;
  double wall_time = 0.0;       ///< seconds since run start; not exported
  long total_agent_steps = 0;   ///< cumulative at episode end
  long total_env_steps = 0;
};

/// Percentage of successes among the last ceil(fraction * N) episodes.
double success_rate_last_fraction(const std::vector<EpisodeRecord>& records, double fraction = 0.1);

/// Mean agent steps over the same last ceil(fraction * N) episodes.
double mean_length_last_fraction(const std::vector<EpisodeRecord>& records, double fraction = 0.1);

/// Trailing mean; the first window-1 points average the available prefix.
std::vector<double> rolling_average(const std::vector<double>& series, int window = 50);

/// Cumulative agent steps at the first episode where the success rate over the
/// trailing `window` episodes reaches `threshold`; needs a full window.
std::optional<long> steps_to_threshold(const std::vector<EpisodeRecord>& records, double threshold = 0.9,
                                       int window = 100);

// ---------------------------------------------------------------------------
// Configuration: a flat key = value file; '#' starts a comment.

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::dqn;
  EnvVariant env = EnvVariant::sim2sim_target;
  TransferMethod method = TransferMethod::replace;
  std::string source;        ///< checkpoint path (transfer)
  std::string source_label;  ///< results.csv source_model column
  std::string actions = "discrete24";
  long steps = 25000;
  int repetitions = 5;
  std::uint64_t seed = 1;
  int eval_episodes = 100;
  double eval_epsilon = 0.05;  ///< DQN test-time exploration; PPO evals are deterministic
  long eval_interval = 10000;  ///< agent steps between source evals; 0 = end only
  ObsDims obs{};
  WorldConfig world = WorldConfig::for_variant(EnvVariant::sim2sim_target);
  DqnConfig dqn{};
  PpoConfig ppo{};
  int jobs = 1;             ///< worker threads; not part of the hash
  std::string output = "runs";  ///< not part of the hash

  /// Source training defaults: source env, discrete4, source epsilon schedule.
  static ExperimentConfig source_defaults(Algorithm a);
  /// Transfer defaults: sim-to-sim target with the algorithm's target space.
  static ExperimentConfig transfer_defaults(Algorithm a);

  void set(const std::string& key, const std::string& value);
  /// Canonical key -> value map of every hashed setting.
  std::map<std::string, std::string> to_map() const;
  /// 16 hex digits, FNV-1a over the canonical "key=value\n" text.
  std::string hash() const;
  std::string to_text() const;
  void validate() const;
  ActionSpace action_space() const { return ActionSpace::parse(actions); }
  /// World config with the obs dims applied.
  WorldConfig world_config() const;
};

/// Applies "key = value" lines on top of `base`.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base);
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base);

std::uint64_t rep_seed(std::uint64_t master, int rep);

// ---------------------------------------------------------------------------
// Runs

struct EvalPoint {
  long agent_steps = 0;
  double success_pct = 0.0;
  double mean_length = 0.0;
};

struct RunResult {
  std::string run_id;
  int rep = 0;
  std::uint64_t seed = 0;
  std::vector<EpisodeRecord> episodes;
  std::vector<EvalPoint> evals;
  double final_success_pct = 0.0;  ///< last-10% training success
  double mean_ep_len = 0.0;        ///< over the same episodes
  std::optional<long> steps_to_90pct;
  std::optional<ParamStore> final_params;
};

struct RunSummary {
  ExperimentConfig config;
  TransferPlan plan;
  std::vector<RunResult> runs;

  double mean_success() const;
  /// Population standard deviation across repetitions.
  double std_success() const;
};

using ProgressFn = std::function<void(const std::string& line)>;

/// Trains a source model for repetition `rep`; writes final.ckpt, best.ckpt,
/// episodes and evals under `<output>/<run_id>/`.
RunResult train_source(const ExperimentConfig& cfg, int rep, const ProgressFn& progress = {});

/// All repetitions of one transfer cell, in a worker pool of cfg.jobs threads.
RunSummary run_transfer(const ExperimentConfig& cfg, const ProgressFn& progress = {});

/// Test-policy evaluation on fresh seeds; `dqn_epsilon` only applies to DQN checkpoints.
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const WorldConfig& world, int episodes, std::uint64_t seed,
                               double dqn_epsilon = 0.05);

/// Runs jobs 0..n-1 on `threads` workers; rethrows the first failure.
void parallel_for(int n, int threads, const std::function<void(int)>& job);

// ---------------------------------------------------------------------------
// Export

void write_results_csv(const std::filesystem::path& path, const std::vector<RunSummary>& summaries);
void write_curves_csv(const std::filesystem::path& path, const std::vector<RunSummary>& summaries);
void write_manifest(const std::filesystem::path& path, const std::vector<RunSummary>& summaries);
/// results.csv, curves.csv and manifest.json into `dir`.
void export_results(const std::filesystem::path& dir, const std::vector<RunSummary>& summaries);
/// Reads back what export_results wrote (episodes and per-run metrics; no parameters).
std::vector<RunSummary> load_results(const std::filesystem::path& dir);

}  // namespace actxfer
