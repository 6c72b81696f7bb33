// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Long experiments are cached under --cache,
// keyed by config hash, so a second run only re-reads them.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "actxfer/gradcheck.hpp"
#include "actxfer/harness.hpp"
#include "actxfer/seeding.hpp"

using namespace actxfer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path cache = "acceptance-cache";
  std::string cli;
  std::vector<int> only;
  bool long_ppo = false;
  int jobs = 1;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& line) {
  std::fprintf(stderr, "  .. %s\n", line.c_str());
  std::fflush(stderr);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

// ---------------------------------------------------------------------------
// Cached experiments

struct SourceModel {
  std::string label;
  fs::path best;
  fs::path final;
  double best_success = 0.0;
  double best_length = 0.0;
  double minutes = 0.0;
};

/// Trains (or re-reads) DQN source repetition `rep`.
SourceModel dqn_source(const Options& opt, int rep) {
  ExperimentConfig cfg = ExperimentConfig::source_defaults(Algorithm::dqn);
  const fs::path dir = opt.cache / ("source-" + cfg.hash());
  cfg.output = dir.string();
  const std::string run_id = "dqn-source-" + std::to_string(rep + 1);
  const fs::path run = dir / run_id;
  if (!fs::exists(run / "done")) {
    fs::create_directories(dir);
    const auto t0 = Clock::now();
    train_source(cfg, rep, log);
    write_text(run / "seconds", fmt("%.1f\n", seconds_since(t0)));
    write_text(run / "done", "");
  }
  SourceModel m{run_id, run / "best.ckpt", run / "final.ckpt"};
  m.minutes = std::stod(slurp(run / "seconds")) / 60.0;
  std::istringstream evals(slurp(run / "evals.csv"));
  std::string line;
  std::getline(evals, line);
  double best_score = -1.0;
  while (std::getline(evals, line)) {
    long step = 0;
    double pct = 0.0, len = 0.0;
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf", &step, &pct, &len) != 3) continue;
    // Same rule train_source uses to pick best.ckpt.
    if (pct - 1e-3 * len > best_score) {
      best_score = pct - 1e-3 * len;
      m.best_success = pct;
      m.best_length = len;
    }
  }
  return m;
}

/// One transfer cell, run once and then re-read from its export.
RunSummary transfer_cell(const Options& opt, ExperimentConfig cfg) {
  const fs::path dir = opt.cache / ("cell-" + cfg.hash());
  cfg.output = dir.string();
  cfg.jobs = opt.jobs;
  if (!fs::exists(dir / "done")) {
    log("cell " + to_string(cfg.method) + " " + cfg.actions + " " + cfg.source_label + " (" +
        std::to_string(cfg.repetitions) + " x " + std::to_string(cfg.steps) + " steps)");
    const auto t0 = Clock::now();
    const RunSummary s = run_transfer(cfg, log);
    export_results(dir, {s});
    write_text(dir / "seconds", fmt("%.1f\n", seconds_since(t0)));
    write_text(dir / "done", "");
  }
  return load_results(dir).at(0);
}

ExperimentConfig dqn_cell(TransferMethod method, const SourceModel* src, int reps, long steps) {
  ExperimentConfig c = ExperimentConfig::transfer_defaults(Algorithm::dqn);
  c.method = method;
  c.repetitions = reps;
  c.steps = steps;
  if (src) {
    c.source = src->best.string();
    c.source_label = src->label;
  }
  return c;
}

std::vector<SourceModel> all_sources(const Options& opt) {
  std::vector<SourceModel> v;
  for (int rep = 0; rep < 3; ++rep) v.push_back(dqn_source(opt, rep));
  return v;
}

/// Source used where a single model is needed: the best-scoring one.
SourceModel lead_source(const Options& opt) {
  auto v = all_sources(opt);
  return *std::max_element(v.begin(), v.end(), [](const SourceModel& a, const SourceModel& b) {
    return a.best_success - 1e-3 * a.best_length < b.best_success - 1e-3 * b.best_length;
  });
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

using DStore = BasicParamStore<double>;
using DTape = BasicTape<double>;
using DTensor = BasicTensor<double>;

DTensor gaussian(Shape shape, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  using Case = std::function<GradCheckResult(std::mt19937_64&)>;
  const std::vector<std::pair<std::string, Case>> cases = {
      {"linear+relu",
       [](std::mt19937_64& rng) {
         DStore s;
         s.add("w1", gaussian({6, 8}, rng, 0.5));
         s.add("b1", gaussian({8}, rng, 0.1));
         s.add("w2", gaussian({8, 3}, rng, 0.5));
         const auto x = gaussian({5, 6}, rng, 1.0), y = gaussian({5, 3}, rng, 1.0);
         return gradient_check(s, [&](DTape& t, DStore& p) {
           auto h = relu(add_bias(matmul(t.constant(x), t.param(p, "w1")), t.param(p, "b1")));
           return mse(matmul(h, t.param(p, "w2")), t.constant(y));
         });
       }},
      {"conv2d",
       [](std::mt19937_64& rng) {
         DStore s;
         s.add("x", gaussian({2, 2, 9, 9}, rng, 1.0));
         s.add("k1", gaussian({4, 2, 3, 3}, rng, 0.4));
         s.add("c1", gaussian({4}, rng, 0.1));
         s.add("k2", gaussian({3, 4, 2, 2}, rng, 0.4));
         const auto y = gaussian({2, 3, 3, 3}, rng, 1.0);
         return gradient_check(s, [&](DTape& t, DStore& p) {
           auto h = relu(add_bias(conv2d(t.param(p, "x"), t.param(p, "k1"), 2), t.param(p, "c1")));
           return mse(conv2d(h, t.param(p, "k2"), 1), t.constant(y));
         });
       }},
      {"dueling+huber",
       [](std::mt19937_64& rng) {
         DStore s;
         s.add("wv", gaussian({6, 1}, rng, 1.0));
         s.add("wa", gaussian({6, 5}, rng, 1.0));
         const auto x = gaussian({7, 6}, rng, 1.0), y = gaussian({7}, rng, 2.0);
         const std::vector<int> a = {0, 4, 1, 2, 3, 3, 0};
         return gradient_check(s, [&](DTape& t, DStore& p) {
           auto xin = t.constant(x);
           auto q = dueling_combine(matmul(xin, t.param(p, "wv")), matmul(xin, t.param(p, "wa")));
           return huber(gather(q, a), t.constant(y));
         });
       }},
      {"softmax/entropy",
       [](std::mt19937_64& rng) {
         DStore s;
         s.add("w", gaussian({4, 6}, rng, 1.0));
         const auto x = gaussian({3, 4}, rng, 1.0), y = gaussian({3, 6}, rng, 1.0);
         return gradient_check(s, [&](DTape& t, DStore& p) {
           auto z = matmul(t.constant(x), t.param(p, "w"));
           return add(add(mse(softmax(z), t.constant(y)), mean(mul(log_softmax(z), t.constant(y)))),
                      mean(categorical_entropy(z)));
         });
       }},
      {"gaussian policy",
       [](std::mt19937_64& rng) {
         DStore s;
         s.add("w", gaussian({3, 2}, rng, 1.0));
         s.add("log_std", gaussian({2}, rng, 0.3));
         const auto x = gaussian({5, 3}, rng, 1.0), act = gaussian({5, 2}, rng, 1.0);
         return gradient_check(s, [&](DTape& t, DStore& p) {
           auto mu = matmul(t.constant(x), t.param(p, "w"));
           return mean(gaussian_log_prob(mu, clamp(t.param(p, "log_std"), -5.0, 2.0), act));
         });
       }},
      {"full q network",
       [](std::mt19937_64& rng) {
         const NetworkSpec spec{HeadKind::dueling_q, ActionSpace::discrete4(), ObsDims{18, 18}};
         DStore s;
         init_params(s, spec, rng);
         const auto x = gaussian({2, 1, 18, 18}, rng, 1.0), y = gaussian({2}, rng, 1.0);
         return gradient_check(
             s,
             [&](DTape& t, DStore& p) {
               auto q = build_q_head(t, p, spec, build_trunk(t, p, spec, t.constant(x))).q;
               return huber(gather(q, std::vector<int>{1, 3}), t.constant(y));
             },
             1e-5, 150);
       }},
  };
  double worst = 0.0;
  std::string where;
  for (const auto& [name, fn] : cases) {
    for (int k = 0; k < 5; ++k) {
      std::mt19937_64 rng(derive_seed(77, static_cast<std::uint64_t>(k)));
      const GradCheckResult r = fn(rng);
      if (r.max_relative_error > worst) {
        worst = r.max_relative_error;
        where = name + " " + r.worst_param;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("max rel. error %.2e (%s) over %zu layer types x 5 nets, %.1f s", worst, where.c_str(), cases.size(), secs)};
}

// ---------------------------------------------------------------------------
// 2. Environment solvability

Outcome solvability() {
  const auto t0 = Clock::now();
  RayGymEnv env(WorldConfig::for_variant(EnvVariant::source), ActionSpace::discrete4(), 20240);
  ScriptedOracle oracle;
  const EvalResult r = evaluate(env, 500, [&](RayGymEnv& e, const Observation& o) {
    if (e.state().agent_step == 0) oracle.reset();
    return e.step(oracle.act(o));
  });
  const double secs = seconds_since(t0);
  return {r.success_pct() >= 95.0 && secs < 60.0,
          fmt("oracle %.1f%% over 500 randomized episodes, mean length %.1f, %.1f s", r.success_pct(), r.mean_length,
              secs)};
}

// ---------------------------------------------------------------------------
// 3. Source DQN

Outcome source_dqn(const Options& opt) {
  const auto sources = all_sources(opt);
  int good = 0;
  bool lengths_ok = true, time_ok = true;
  std::string detail;
  for (const auto& s : sources) {
    const bool ok = s.best_success >= 90.0;
    good += ok;
    if (ok && s.best_length > 35.0) lengths_ok = false;
    if (s.minutes > 30.0) time_ok = false;
    detail += fmt("%s %.0f%% len %.1f %.1f min; ", s.label.c_str(), s.best_success, s.best_length, s.minutes);
  }
  return {good >= 2 && lengths_ok && time_ok, detail + fmt("%d/3 at >=90%%", good)};
}

// ---------------------------------------------------------------------------
// 4. Transfer ordering and 5. speedup

struct Matrix {
  std::vector<double> replace, fine_tune;
  std::vector<double> replace_steps;  ///< steps_to_90pct; +inf when never reached
  int replace_runs_below_90 = 0;
  int fine_tune_runs_below_70 = 0;
};

Matrix transfer_matrix(const Options& opt) {
  Matrix m;
  for (const auto& src : all_sources(opt)) {
    for (auto method : {TransferMethod::replace, TransferMethod::fine_tune}) {
      const RunSummary s = transfer_cell(opt, dqn_cell(method, &src, 3, 25000));
      for (const auto& r : s.runs) {
        if (method == TransferMethod::replace) {
          m.replace.push_back(r.final_success_pct);
          m.replace_runs_below_90 += r.final_success_pct < 90.0;
          m.replace_steps.push_back(r.steps_to_90pct ? static_cast<double>(*r.steps_to_90pct)
                                                     : std::numeric_limits<double>::infinity());
        } else {
          m.fine_tune.push_back(r.final_success_pct);
          m.fine_tune_runs_below_70 += r.final_success_pct < 70.0;
        }
      }
    }
  }
  return m;
}

Outcome transfer_ordering(const Options& opt) {
  const Matrix m = transfer_matrix(opt);
  const bool strict = m.replace_runs_below_90 == 0 && m.fine_tune_runs_below_70 >= 1;
  const bool tolerant = mean_of(m.replace) > mean_of(m.fine_tune) && pop_std(m.replace) < pop_std(m.fine_tune);
  return {strict || tolerant,
          fmt("replace %.1f +- %.1f (%d/9 runs < 90), fine-tune %.1f +- %.1f (%d/9 runs < 70); strict %s, tolerant %s",
              mean_of(m.replace), pop_std(m.replace), m.replace_runs_below_90, mean_of(m.fine_tune),
              pop_std(m.fine_tune), m.fine_tune_runs_below_70, strict ? "yes" : "no", tolerant ? "yes" : "no")};
}

Outcome speedup(const Options& opt) {
  const Matrix m = transfer_matrix(opt);
  const RunSummary scratch = transfer_cell(opt, dqn_cell(TransferMethod::scratch, nullptr, 3, 50000));
  std::vector<double> s;
  for (const auto& r : scratch.runs) {
    s.push_back(r.steps_to_90pct ? static_cast<double>(*r.steps_to_90pct) : std::numeric_limits<double>::infinity());
  }
  const double rep = median(m.replace_steps), scr = median(s);
  return {std::isfinite(rep) && rep <= 0.7 * scr,
          fmt("median steps to 90%%: replace %.0f, scratch %.0f (ratio %.2f, scratch last-10%% %.1f%%)", rep, scr,
              rep / scr, scratch.mean_success())};
}

// ---------------------------------------------------------------------------
// 6. Removed actions

Outcome removed_actions(const Options& opt) {
  const SourceModel src = lead_source(opt);
  struct Sub {
    const char* keys;
    bool must_learn;
  };
  const Sub subs[] = {{"WSD", true}, {"WSA", true}, {"WAD", true}, {"SAD", false}};
  bool ok = true;
  std::string detail = src.label + ": ";
  for (const Sub& sub : subs) {
    ExperimentConfig c = dqn_cell(TransferMethod::replace, &src, 1, 20000);
    c.actions = "subset:" + std::string(sub.keys);
    const RunSummary s = transfer_cell(opt, c);
    const double pct = s.mean_success();
    ok = ok && (sub.must_learn ? pct >= 85.0 : pct <= 20.0);
    detail += fmt("%s %.1f%% ", sub.keys, pct);
  }
  return {ok, detail + "(last-10% success; SAD must stay <= 20)"};
}

// ---------------------------------------------------------------------------
// 7. Freezing contract

Outcome freezing(const Options& opt) {
  const SourceModel src = lead_source(opt);
  const Checkpoint source = load_checkpoint(src.best);
  bool ok = true;
  std::string detail;
  for (auto method : {TransferMethod::replace, TransferMethod::replace_with_value, TransferMethod::adapter}) {
    ExperimentConfig c = dqn_cell(method, &src, 1, 3000);
    c.output = (opt.cache / "freezing").string();
    const RunSummary s = run_transfer(c);
    TransferResult fresh = apply_transfer(method, source.network(), c.action_space(), 0);
    std::size_t frozen = 0, mismatched = 0, moved = 0;
    fresh.net.params().for_each([&](const std::string& name, const Parameter<float>& p) {
      const Tensor& after = s.runs[0].final_params->at(name).value;
      if (p.frozen) {
        ++frozen;
        if (!after.bit_equal(source.params.at(name).value)) ++mismatched;
      } else if (!after.bit_equal(p.value)) {
        ++moved;
      }
    });
    const std::size_t trainable = trainable_count(fresh.net.params());
    ok = ok && frozen > 0 && mismatched == 0 && moved > 0;
    if (method == TransferMethod::adapter) ok = ok && trainable == 4u * 24 + 24;
    detail += fmt("%s: %zu frozen tensors, %zu changed, %zu trainable params; ", to_string(method).c_str(), frozen,
                  mismatched, trainable);
  }
  return {ok, detail + "adapter expects 120"};
}

// ---------------------------------------------------------------------------
// 8. Determinism through the CLI

Outcome determinism(const Options& opt) {
  if (opt.cli.empty()) return {false, "no --cli given"};
  const SourceModel src = lead_source(opt);
  const fs::path base = opt.cache / "determinism";
  fs::remove_all(base);
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = base / ("run" + std::to_string(i));
    const std::string cmd = "\"" + opt.cli + "\" transfer --quiet --method replace --source \"" + src.best.string() +
                            "\" --steps 1500 --reps 2 --jobs 2 --seed 5 --output \"" + out.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "cli failed: " + cmd};
    bytes[i] = slurp(out / "results.csv");
  }
  const bool same = !bytes[0].empty() && bytes[0] == bytes[1];
  return {same, fmt("results.csv %zu bytes, identical: %s", bytes[0].size(), same ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 9. PPO properties

Outcome ppo_properties(const Options& opt) {
  bool ok = true;
  std::string detail;
  {
    Tape tape;
    ParamStore store;
    store.add("logp", Tensor(Shape{2}, {std::log(1.5f), std::log(0.5f)}));
    auto l = clipped_surrogate(tape.param(store, "logp"), std::vector<float>{0.0f, 0.0f},
                               std::vector<float>{1.0f, -1.0f}, 0.2f);
    // mean(-1.2, +0.8)
    const bool c = std::abs(l.value().item() - (-0.2f)) < 1e-6f;
    ok = ok && c;
    detail += fmt("clip example %s; ", c ? "ok" : "wrong");
  }
  {
    const float r[] = {1.0f}, v[] = {0.5f};
    const std::uint8_t d[] = {1};
    const bool g1 = std::abs(gae(r, v, d, 0.0f, 0.99, 0.95).advantages[0] - 0.5f) < 1e-6f;
    const std::vector<float> rr = {0.0f, 0.0f, 1.0f}, vv = {0.2f, 0.4f, 0.6f};
    const std::vector<std::uint8_t> dd = {0, 0, 1};
    const auto mc = gae(rr, vv, dd, 0.0f, 1.0, 1.0);
    const bool g2 = std::abs(mc.advantages[0] - 0.8f) < 1e-6f && std::abs(mc.returns[0] - 1.0f) < 1e-6f;
    ok = ok && g1 && g2;
    detail += fmt("GAE examples %s; ", g1 && g2 ? "ok" : "wrong");
  }
  {
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n(2.0f, 3.0f);
    std::vector<float> a(2048);
    for (auto& x : a) x = n(rng);
    normalize_advantages(a);
    std::vector<double> d(a.begin(), a.end());
    const bool norm = std::abs(mean_of(d)) < 1e-6 && std::abs(pop_std(d) - 1.0) < 1e-4;
    ok = ok && norm;
    detail += fmt("normalization %s", norm ? "ok" : "wrong");
  }
  if (!opt.long_ppo) return {ok, detail + "; 40x30 replace run not requested (--long-ppo)"};

  ExperimentConfig src_cfg = ExperimentConfig::source_defaults(Algorithm::ppo);
  const fs::path dir = opt.cache / ("source-" + src_cfg.hash());
  src_cfg.output = dir.string();
  const fs::path run = dir / "ppo-source-1";
  if (!fs::exists(run / "done")) {
    train_source(src_cfg, 0, log);
    write_text(run / "done", "");
  }
  ExperimentConfig c = ExperimentConfig::transfer_defaults(Algorithm::ppo);
  c.source = (run / "best.ckpt").string();
  c.source_label = "ppo-source-1";
  c.repetitions = 1;
  c.steps = 300000 / c.world.frameskip;  // budget is in env steps
  const RunSummary s = transfer_cell(opt, c);
  const bool long_ok = s.mean_success() >= 80.0;
  return {ok && long_ok, detail + fmt("; 40x30 replace %.1f%% after %ld agent steps", s.mean_success(), c.steps)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  Options opt;
  std::string cache = opt.cache.string();
  app.add_option("--cache", cache, "directory for cached experiment results");
  app.add_option("--cli", opt.cli, "path to the actxfer executable");
  app.add_option("--only", opt.only, "run only these criteria");
  app.add_option("--jobs", opt.jobs, "worker threads for repetitions");
  app.add_flag("--long-ppo", opt.long_ppo, "also run the multi-hour PPO transfer");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cache);
  // Source paths feed the cell hashes, so the cache root must not depend on the cwd.
  opt.cache = fs::canonical(cache);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", [] { return gradient_correctness(); }},
      {"environment solvability", [] { return solvability(); }},
      {"source DQN", [&] { return source_dqn(opt); }},
      {"transfer ordering", [&] { return transfer_ordering(opt); }},
      {"replace speedup", [&] { return speedup(opt); }},
      {"removed actions", [&] { return removed_actions(opt); }},
      {"freezing contract", [&] { return freezing(opt); }},
      {"determinism", [&] { return determinism(opt); }},
      {"PPO properties", [&] { return ppo_properties(opt); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), id) == opt.only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %-24s %s  %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
