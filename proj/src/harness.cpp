#include "actxfer/harness.hpp"

#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>
#include <variant>

#include "actxfer/seeding.hpp"

namespace actxfer {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Algorithm a) { return a == Algorithm::dqn ? "dqn" : "ppo"; }

Algorithm parse_algorithm(const std::string& s) {
  if (s == "dqn") return Algorithm::dqn;
  if (s == "ppo") return Algorithm::ppo;
  throw ConfigError("unknown algorithm '" + s + "'");
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw ConfigError("cannot format number");
  return std::string(buf, end);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
  return out;
}

long parse_long(const std::string& key, const std::string& v) {
  long out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an unsigned integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'A', 'C', 'T', 'X', 'C', 'K', 'P', 'T'};

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

float get_f32_le(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace

Checkpoint Checkpoint::of(Algorithm algorithm, const Network& net, long train_steps, std::uint64_t seed) {
  return {algorithm, net.spec(), train_steps, seed, net.params()};
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json tensors = json::array();
  std::size_t offset = 0;
  ckpt.params.for_each([&](const std::string& name, const Parameter<float>& p) {
    tensors.push_back({{"name", name}, {"shape", p.value.shape()}, {"offset", offset}, {"frozen", p.frozen}});
    offset += p.value.size();
  });
  json m = {
      {"format_version", kCheckpointVersion},
      {"algorithm", to_string(ckpt.algorithm)},
      {"head_kind", to_string(ckpt.spec.head)},
      {"action_space", ckpt.spec.actions.name()},
      {"adapter_from", ckpt.spec.adapter_from ? json(ckpt.spec.adapter_from->name()) : json(nullptr)},
      {"obs", {ckpt.spec.obs.height, ckpt.spec.obs.width}},
      {"train_steps", ckpt.train_steps},
      {"seed", ckpt.seed},
      {"payload_floats", offset},
      {"tensors", tensors},
  };
  const std::string manifest = m.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u64_le(out, manifest.size());
  out += manifest;
  out.reserve(out.size() + offset * 4);
  ckpt.params.for_each([&](const std::string&, const Parameter<float>& p) {
    for (float f : p.value.data()) put_f32_le(out, f);
  });
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ConfigError("not a checkpoint (bad magic)");
  }
  const std::uint64_t mlen = get_u64_le(bytes, 8);
  if (mlen > bytes.size() - 16) throw ConfigError("checkpoint manifest length exceeds file size");
  json m;
  try {
    m = json::parse(bytes.substr(16, mlen));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  try {
    if (m.at("format_version").get<int>() != kCheckpointVersion) {
      throw ConfigError("unsupported checkpoint version " + m.at("format_version").dump());
    }
    Checkpoint ck;
    ck.algorithm = parse_algorithm(m.at("algorithm").get<std::string>());
    ck.spec.head = parse_head_kind(m.at("head_kind").get<std::string>());
    ck.spec.actions = ActionSpace::parse(m.at("action_space").get<std::string>());
    if (!m.at("adapter_from").is_null()) ck.spec.adapter_from = ActionSpace::parse(m.at("adapter_from").get<std::string>());
    ck.spec.obs = {m.at("obs").at(0).get<int>(), m.at("obs").at(1).get<int>()};
    ck.train_steps = m.at("train_steps").get<long>();
    ck.seed = m.at("seed").get<std::uint64_t>();
    const std::size_t floats = m.at("payload_floats").get<std::size_t>();
    const std::size_t base = 16 + mlen;
    if (bytes.size() - base != floats * 4) {
      throw ConfigError("checkpoint payload has " + std::to_string(bytes.size() - base) + " bytes, manifest says " +
                        std::to_string(floats * 4));
    }
    for (const auto& t : m.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_numel(shape);
      if (off + n > floats) throw ConfigError("tensor '" + t.at("name").get<std::string>() + "' overruns payload");
      Tensor v(shape);
      const char* p = bytes.data() + base + off * 4;
      for (std::size_t i = 0; i < n; ++i) v[i] = get_f32_le(p + 4 * i);
      const std::string name = t.at("name").get<std::string>();
      ck.params.add(name, std::move(v));
      ck.params.set_frozen(name, t.at("frozen").get<bool>());
    }
    if (ck.params.numel() != floats) throw ConfigError("checkpoint manifest shapes do not cover the payload");
    Network(ck.spec, ck.params);  // validates names and shapes
    return ck;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) { write_file(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::size_t tail_count(std::size_t n, double fraction) {
  if (n == 0) throw ConfigError("metric over an empty episode list");
  if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("fraction must lie in (0, 1]");
  // The epsilon keeps e.g. 0.1 * 30 from rounding up to 4.
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace

double success_rate_last_fraction(const std::vector<EpisodeRecord>& records, double fraction) {
  const std::size_t k = tail_count(records.size(), fraction);
  std::size_t wins = 0;
  for (std::size_t i = records.size() - k; i < records.size(); ++i) wins += records[i].success ? 1 : 0;
  return 100.0 * static_cast<double>(wins) / static_cast<double>(k);
}

double mean_length_last_fraction(const std::vector<EpisodeRecord>& records, double fraction) {
  const std::size_t k = tail_count(records.size(), fraction);
  double total = 0.0;
  for (std::size_t i = records.size() - k; i < records.size(); ++i) total += records[i].agent_steps;
  return total / static_cast<double>(k);
}

std::vector<double> rolling_average(const std::vector<double>& series, int window) {
  if (window < 1) throw ConfigError("rolling window must be >= 1");
  std::vector<double> out(series.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    acc += series[i];
    if (i >= static_cast<std::size_t>(window)) acc -= series[i - static_cast<std::size_t>(window)];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

std::optional<long> steps_to_threshold(const std::vector<EpisodeRecord>& records, double threshold, int window) {
  if (window < 1) throw ConfigError("window must be >= 1");
  int wins = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    wins += records[i].success ? 1 : 0;
    if (i >= static_cast<std::size_t>(window)) wins -= records[i - static_cast<std::size_t>(window)].success ? 1 : 0;
    if (i + 1 >= static_cast<std::size_t>(window) &&
        wins >= static_cast<int>(std::ceil(threshold * window - 1e-9))) {
      return records[i].total_agent_steps;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
};

template <typename Get, typename Set>
Field field(Get g, Set s) {
  return {g, s};
}

template <typename Ref>
Field real(Ref ref) {
  return {[ref](const ExperimentConfig& c) { return format_double(ref(c)); },
          [ref](ExperimentConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_double(k, v); }};
}

template <typename Ref>
Field integer(Ref ref) {
  return {[ref](const ExperimentConfig& c) { return std::to_string(ref(c)); },
          [ref](ExperimentConfig& c, const std::string& k, const std::string& v) {
            using T = std::remove_reference_t<decltype(ref(c))>;
            ref(c) = static_cast<T>(parse_long(k, v));
          }};
}

template <typename Ref>
Field boolean(Ref ref) {
  return {[ref](const ExperimentConfig& c) { return std::string(ref(c) ? "true" : "false"); },
          [ref](ExperimentConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["algorithm"] = field([](const ExperimentConfig& c) { return to_string(c.algorithm); },
                           [](ExperimentConfig& c, const std::string&, const std::string& v) { c.algorithm = parse_algorithm(v); });
    t["env"] = field([](const ExperimentConfig& c) { return to_string(c.env); },
                     [](ExperimentConfig& c, const std::string&, const std::string& v) {
                       c.env = parse_env_variant(v);
                       c.world = WorldConfig::for_variant(c.env);
                     });
    t["method"] = field([](const ExperimentConfig& c) { return to_string(c.method); },
                        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.method = parse_transfer_method(v); });
    t["source"] = field([](const ExperimentConfig& c) { return c.source; },
                        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.source = v; });
    t["source_label"] = field([](const ExperimentConfig& c) { return c.source_label; },
                              [](ExperimentConfig& c, const std::string&, const std::string& v) { c.source_label = v; });
    t["actions"] = field([](const ExperimentConfig& c) { return c.actions; },
                         [](ExperimentConfig& c, const std::string&, const std::string& v) { c.actions = ActionSpace::parse(v).name(); });
    t["steps"] = integer([](auto& c) -> auto& { return c.steps; });
    t["repetitions"] = integer([](auto& c) -> auto& { return c.repetitions; });
    t["seed"] = field([](const ExperimentConfig& c) { return std::to_string(c.seed); },
                      [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); });
    t["eval.episodes"] = integer([](auto& c) -> auto& { return c.eval_episodes; });
    t["eval.epsilon"] = real([](auto& c) -> auto& { return c.eval_epsilon; });
    t["eval.interval"] = integer([](auto& c) -> auto& { return c.eval_interval; });
    t["obs.height"] = integer([](auto& c) -> auto& { return c.obs.height; });
    t["obs.width"] = integer([](auto& c) -> auto& { return c.obs.width; });

    t["world.room_size"] = real([](auto& c) -> auto& { return c.world.room_size; });
    t["world.goal_radius"] = real([](auto& c) -> auto& { return c.world.goal_radius; });
    t["world.agent_radius"] = real([](auto& c) -> auto& { return c.world.agent_radius; });
    t["world.forward_speed"] = real([](auto& c) -> auto& { return c.world.forward_speed; });
    t["world.turn_rate_deg"] = real([](auto& c) -> auto& { return c.world.turn_rate_deg; });
    t["world.max_env_steps"] = integer([](auto& c) -> auto& { return c.world.max_env_steps; });
    t["world.frameskip"] = integer([](auto& c) -> auto& { return c.world.frameskip; });
    t["world.ceiling"] = boolean([](auto& c) -> auto& { return c.world.ceiling_rendered; });
    t["world.randomize"] = boolean([](auto& c) -> auto& { return c.world.randomize; });
    t["world.textures"] = field(
        [](const ExperimentConfig& c) { return std::string(c.world.textures == TextureBank::source ? "source" : "holdout"); },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v == "source") c.world.textures = TextureBank::source;
          else if (v == "holdout") c.world.textures = TextureBank::holdout;
          else throw ConfigError("config key '" + k + "': expected source or holdout");
        });
    t["world.fov_min_deg"] = real([](auto& c) -> auto& { return c.world.ranges.fov_min_deg; });
    t["world.fov_max_deg"] = real([](auto& c) -> auto& { return c.world.ranges.fov_max_deg; });
    t["world.camera_height_min"] = real([](auto& c) -> auto& { return c.world.ranges.camera_height_min; });
    t["world.camera_height_max"] = real([](auto& c) -> auto& { return c.world.ranges.camera_height_max; });
    t["world.headbob_max"] = real([](auto& c) -> auto& { return c.world.ranges.headbob_max; });
    t["world.white_noise_max"] = real([](auto& c) -> auto& { return c.world.ranges.white_noise_max; });
    t["world.gaussian_sigma_max"] = real([](auto& c) -> auto& { return c.world.ranges.gaussian_sigma_max; });
    t["world.gamma_min"] = real([](auto& c) -> auto& { return c.world.ranges.gamma_min; });
    t["world.gamma_max"] = real([](auto& c) -> auto& { return c.world.ranges.gamma_max; });

    t["dqn.gamma"] = real([](auto& c) -> auto& { return c.dqn.gamma; });
    t["dqn.batch_size"] = integer([](auto& c) -> auto& { return c.dqn.batch_size; });
    t["dqn.target_sync"] = integer([](auto& c) -> auto& { return c.dqn.target_sync_interval; });
    t["dqn.train_every"] = integer([](auto& c) -> auto& { return c.dqn.train_every; });
    t["dqn.replay_capacity"] = integer([](auto& c) -> auto& { return c.dqn.replay_capacity; });
    t["dqn.warmup"] = integer([](auto& c) -> auto& { return c.dqn.warmup; });
    t["dqn.max_grad_norm"] = real([](auto& c) -> auto& { return c.dqn.max_grad_norm; });
    t["dqn.target_bound"] = real([](auto& c) -> auto& { return c.dqn.target_bound; });
    t["dqn.lr"] = real([](auto& c) -> auto& { return c.dqn.adam.learning_rate; });
    t["dqn.adam_eps"] = real([](auto& c) -> auto& { return c.dqn.adam.epsilon; });
    t["dqn.eps_start"] = real([](auto& c) -> auto& { return c.dqn.epsilon.start; });
    t["dqn.eps_end"] = real([](auto& c) -> auto& { return c.dqn.epsilon.end; });
    t["dqn.eps_anneal"] = integer([](auto& c) -> auto& { return c.dqn.epsilon.anneal_steps; });

    t["ppo.horizon"] = integer([](auto& c) -> auto& { return c.ppo.horizon; });
    t["ppo.epochs"] = integer([](auto& c) -> auto& { return c.ppo.epochs; });
    t["ppo.minibatch"] = integer([](auto& c) -> auto& { return c.ppo.minibatch; });
    t["ppo.clip"] = real([](auto& c) -> auto& { return c.ppo.clip; });
    t["ppo.lambda"] = real([](auto& c) -> auto& { return c.ppo.lambda; });
    t["ppo.gamma"] = real([](auto& c) -> auto& { return c.ppo.gamma; });
    t["ppo.entropy_coef"] = real([](auto& c) -> auto& { return c.ppo.entropy_coef; });
    t["ppo.value_coef"] = real([](auto& c) -> auto& { return c.ppo.value_coef; });
    t["ppo.max_grad_norm"] = real([](auto& c) -> auto& { return c.ppo.max_grad_norm; });
    t["ppo.lr"] = real([](auto& c) -> auto& { return c.ppo.adam.learning_rate; });
    return t;
  }();
  return table;
}

}  // namespace

ExperimentConfig ExperimentConfig::source_defaults(Algorithm a) {
  ExperimentConfig c;
  c.algorithm = a;
  c.env = EnvVariant::source;
  c.world = WorldConfig::for_variant(EnvVariant::source);
  c.method = TransferMethod::scratch;
  c.actions = ActionSpace::discrete4().name();
  c.dqn.epsilon = EpsilonSchedule::source();
  c.repetitions = 3;
  if (a == Algorithm::dqn) {
    c.steps = 60000;
  } else {
    c.steps = 300000;
    c.obs = {30, 40};
  }
  return c;
}

ExperimentConfig ExperimentConfig::transfer_defaults(Algorithm a) {
  ExperimentConfig c;
  c.algorithm = a;
  c.env = EnvVariant::sim2sim_target;
  c.world = WorldConfig::for_variant(EnvVariant::sim2sim_target);
  c.method = TransferMethod::replace;
  c.dqn.epsilon = EpsilonSchedule::transfer();
  if (a == Algorithm::dqn) {
    c.actions = ActionSpace::discrete24().name();
    c.steps = 25000;
  } else {
    c.actions = ActionSpace::continuous2().name();
    c.steps = 300000;
    c.obs = {30, 40};
  }
  return c;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "jobs") {
    jobs = static_cast<int>(parse_long(key, value));
    return;
  }
  if (key == "output") {
    output = value;
    return;
  }
  const auto& t = fields();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

std::map<std::string, std::string> ExperimentConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fields()) out[k] = f.get(*this);
  return out;
}

std::string ExperimentConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : to_map()) s += k + " = " + v + "\n";
  return s;
}

std::string ExperimentConfig::hash() const {
  std::string canon;
  for (const auto& [k, v] : to_map()) canon += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canon)));
  return buf;
}

WorldConfig ExperimentConfig::world_config() const {
  WorldConfig w = world;
  w.obs_height = obs.height;
  w.obs_width = obs.width;
  return w;
}

void ExperimentConfig::validate() const {
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (eval_episodes < 0 || eval_interval < 0) throw ConfigError("eval settings must be >= 0");
  if (eval_epsilon < 0.0 || eval_epsilon > 1.0) throw ConfigError("eval.epsilon must lie in [0, 1]");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  const ActionSpace space = action_space();
  if (algorithm == Algorithm::dqn && !space.is_discrete()) throw ConfigError("DQN needs a discrete action space");
  world_config().validate();
  trunk_layout(obs);
  dqn.validate();
  ppo.validate();
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  // The env variant resets world defaults, so it goes first.
  for (const auto& [k, v] : entries)
    if (k == "env") base.set(k, v);
  for (const auto& [k, v] : entries)
    if (k != "env") base.set(k, v);
  return base;
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) { return parse_config(read_file(path), std::move(base)); }

std::uint64_t rep_seed(std::uint64_t master, int rep) { return derive_seed(master, static_cast<std::uint64_t>(rep)); }

// ---------------------------------------------------------------------------
// Runs

double RunSummary::mean_success() const {
  if (runs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : runs) s += r.final_success_pct;
  return s / static_cast<double>(runs.size());
}

double RunSummary::std_success() const {
  if (runs.empty()) return 0.0;
  const double m = mean_success();
  double s = 0.0;
  for (const auto& r : runs) s += (r.final_success_pct - m) * (r.final_success_pct - m);
  return std::sqrt(s / static_cast<double>(runs.size()));
}

void parallel_for(int n, int threads, const std::function<void(int)>& job) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

using AnyTrainer = std::variant<DqnTrainer, PpoTrainer>;

AnyTrainer make_trainer(const ExperimentConfig& cfg, Network net, std::uint64_t seed) {
  RayGymEnv env(cfg.world_config(), net.spec().actions, derive_seed(seed, 1));
  if (cfg.algorithm == Algorithm::dqn) {
    return DqnTrainer(DqnLearner(std::move(net), cfg.dqn), std::move(env), derive_seed(seed, 3));
  }
  return PpoTrainer(PpoLearner(std::move(net), cfg.ppo), std::move(env), derive_seed(seed, 3));
}

const Network& trainer_net(AnyTrainer& t) {
  return std::visit(
      [](auto& tr) -> const Network& {
        if constexpr (std::is_same_v<std::decay_t<decltype(tr)>, DqnTrainer>) {
          return tr.learner().online();
        } else {
          return tr.learner().net();
        }
      },
      t);
}

EvalResult trainer_eval(AnyTrainer& t, const WorldConfig& world, int episodes, std::uint64_t seed, double epsilon) {
  return std::visit(
      [&](auto& tr) {
        RayGymEnv env(world, trainer_net(t).spec().actions, seed);
        if constexpr (std::is_same_v<std::decay_t<decltype(tr)>, DqnTrainer>) {
          return evaluate_learner(tr.learner(), env, episodes, epsilon, derive_seed(seed, 7));
        } else {
          return evaluate_learner(tr.learner(), env, episodes);
        }
      },
      t);
}

/// Trains for `steps` agent steps, appending episode records.
void train_steps(AnyTrainer& t, long steps, const std::string& run_id, int frameskip,
                 std::chrono::steady_clock::time_point t0, std::vector<EpisodeRecord>& out) {
  auto on_episode = [&](const EpisodeEvent& e) {
    EpisodeRecord r;
    r.run_id = run_id;
    r.episode = e.episode;
    r.agent_steps = e.agent_steps;
    r.env_steps = e.env_steps;
    r.success = e.success;
    r.reward = e.reward;
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.total_agent_steps = e.total_agent_steps;
    r.total_env_steps = e.total_agent_steps * frameskip;
    out.push_back(r);
  };
  std::visit([&](auto& tr) { tr.train(steps, on_episode); }, t);
}

void finish_metrics(RunResult& r) {
  if (!r.episodes.empty()) {
    r.final_success_pct = success_rate_last_fraction(r.episodes);
    r.mean_ep_len = mean_length_last_fraction(r.episodes);
  }
  r.steps_to_90pct = steps_to_threshold(r.episodes);
}

std::string curves_header() { return "run_id,episode,steps,env_steps,success,rolling_len\n"; }

std::string curves_rows(const RunResult& r) {
  std::vector<double> lens;
  lens.reserve(r.episodes.size());
  for (const auto& e : r.episodes) lens.push_back(e.agent_steps);
  const auto roll = rolling_average(lens, 50);
  std::string s;
  for (std::size_t i = 0; i < r.episodes.size(); ++i) {
    const auto& e = r.episodes[i];
    s += r.run_id + "," + std::to_string(e.episode) + "," + std::to_string(e.total_agent_steps) + "," +
         std::to_string(e.total_env_steps) + "," + (e.success ? "1" : "0") + "," + fixed(roll[i], 3) + "\n";
  }
  return s;
}

void dump_diagnostic(const fs::path& dir, const std::string& run_id, long step, const std::string& what,
                     const std::vector<EpisodeRecord>& episodes) {
  json recent = json::array();
  for (std::size_t i = episodes.size() > 20 ? episodes.size() - 20 : 0; i < episodes.size(); ++i) {
    recent.push_back({{"episode", episodes[i].episode}, {"agent_steps", episodes[i].agent_steps},
                      {"success", episodes[i].success}});
  }
  json d = {{"run_id", run_id}, {"agent_steps", step}, {"error", what}, {"recent_episodes", recent}};
  write_file(dir / "diagnostic.json", d.dump(2) + "\n");
}

long trainer_steps(AnyTrainer& t) {
  return std::visit([](auto& tr) { return tr.agent_steps(); }, t);
}

}  // namespace

RunResult train_source(const ExperimentConfig& cfg, int rep, const ProgressFn& progress) {
  cfg.validate();
  RunResult res;
  res.rep = rep;
  res.seed = rep_seed(cfg.seed, rep);
  res.run_id = to_string(cfg.algorithm) + "-source-" + std::to_string(rep + 1);
  const fs::path dir = fs::path(cfg.output) / res.run_id;
  fs::create_directories(dir);

  const HeadKind head = cfg.algorithm == Algorithm::dqn ? HeadKind::dueling_q : HeadKind::actor_critic;
  Network net({head, cfg.action_space(), cfg.obs}, derive_seed(res.seed, 2));
  AnyTrainer trainer = make_trainer(cfg, std::move(net), res.seed);
  const WorldConfig world = cfg.world_config();
  const auto t0 = std::chrono::steady_clock::now();

  std::optional<Checkpoint> best;
  double best_score = -1.0;
  auto eval_now = [&](int k) {
    const EvalResult ev = trainer_eval(trainer, world, cfg.eval_episodes, derive_seed(res.seed, 1000 + k), cfg.eval_epsilon);
    const long at = trainer_steps(trainer);
    res.evals.push_back({at, ev.success_pct(), ev.mean_length});
    // Ties on success go to the shorter mean episode.
    const double score = ev.success_pct() - 1e-3 * ev.mean_length;
    if (score > best_score) {
      best_score = score;
      best = Checkpoint::of(cfg.algorithm, trainer_net(trainer), at, res.seed);
    }
    if (progress) {
      progress(res.run_id + " step " + std::to_string(at) + " eval " + fixed(ev.success_pct(), 1) + "% len " +
               fixed(ev.mean_length, 1));
    }
  };

  const long chunk = cfg.eval_interval > 0 ? cfg.eval_interval : std::max(1L, cfg.steps);
  int k = 0;
  try {
    for (long done = 0; done < cfg.steps; done += chunk) {
      train_steps(trainer, std::min(chunk, cfg.steps - done), res.run_id, world.frameskip, t0, res.episodes);
      if (cfg.eval_episodes > 0) eval_now(k++);
    }
  } catch (const NumericError& e) {
    dump_diagnostic(dir, res.run_id, trainer_steps(trainer), e.what(), res.episodes);
    throw;
  }
  const Checkpoint final_ckpt = Checkpoint::of(cfg.algorithm, trainer_net(trainer), trainer_steps(trainer), res.seed);
  save_checkpoint(dir / "final.ckpt", final_ckpt);
  save_checkpoint(dir / "best.ckpt", best ? *best : final_ckpt);
  res.final_params = final_ckpt.params;
  finish_metrics(res);

  std::string evals = "agent_steps,success_pct,mean_len\n";
  for (const auto& e : res.evals) {
    evals += std::to_string(e.agent_steps) + "," + fixed(e.success_pct, 1) + "," + fixed(e.mean_length, 2) + "\n";
  }
  write_file(dir / "evals.csv", evals);
  write_file(dir / "curves.csv", curves_header() + curves_rows(res));
  write_file(dir / "config.txt", cfg.to_text());
  return res;
}

RunSummary run_transfer(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const ActionSpace target = cfg.action_space();
  std::optional<Checkpoint> src;
  if (!cfg.source.empty()) {
    src = load_checkpoint(cfg.source);
    if (src->algorithm != cfg.algorithm) {
      throw ConfigError("source checkpoint was trained with " + to_string(src->algorithm) + ", config asks for " +
                        to_string(cfg.algorithm));
    }
    if (!(src->spec.obs == cfg.obs)) throw ConfigError("source checkpoint input size differs from obs.* settings");
  } else if (cfg.method != TransferMethod::scratch) {
    throw ConfigError("method " + to_string(cfg.method) + " needs a source checkpoint");
  }

  RunSummary summary;
  summary.config = cfg;
  summary.runs.resize(static_cast<std::size_t>(cfg.repetitions));
  const std::string label = !cfg.source_label.empty() ? cfg.source_label
                            : src                   ? fs::path(cfg.source).parent_path().filename().string()
                                                    : std::string("none");
  std::mutex mu;

  parallel_for(cfg.repetitions, cfg.jobs, [&](int rep) {
    RunResult res;
    res.rep = rep;
    res.seed = rep_seed(cfg.seed, rep);
    res.run_id = to_string(cfg.algorithm) + "-" + to_string(cfg.method) + "-" + label + "-r" + std::to_string(rep + 1);
    TransferResult tr = [&] {
      if (src) return apply_transfer(cfg.method, src->network(), target, derive_seed(res.seed, 2));
      const HeadKind head = cfg.algorithm == Algorithm::dqn ? HeadKind::dueling_q : HeadKind::actor_critic;
      return apply_scratch({head, target, cfg.obs}, target, derive_seed(res.seed, 2));
    }();
    tr.plan.source_ref = cfg.source;
    AnyTrainer trainer = make_trainer(cfg, std::move(tr.net), res.seed);
    const auto t0 = std::chrono::steady_clock::now();
    train_steps(trainer, cfg.steps, res.run_id, cfg.world_config().frameskip, t0, res.episodes);
    res.final_params = trainer_net(trainer).params();
    finish_metrics(res);
    std::lock_guard lock(mu);
    if (rep == 0) summary.plan = tr.plan;
    if (progress) {
      progress(res.run_id + " last-10% success " + fixed(res.final_success_pct, 1) + "% over " +
               std::to_string(res.episodes.size()) + " episodes");
    }
    summary.runs[static_cast<std::size_t>(rep)] = std::move(res);
  });
  return summary;
}

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const WorldConfig& world, int episodes, std::uint64_t seed,
                               double dqn_epsilon) {
  WorldConfig w = world;
  w.obs_height = ckpt.spec.obs.height;
  w.obs_width = ckpt.spec.obs.width;
  RayGymEnv env(w, ckpt.spec.actions, seed);
  if (ckpt.algorithm == Algorithm::dqn) {
    DqnLearner learner(ckpt.network(), DqnConfig{});
    return evaluate_learner(learner, env, episodes, dqn_epsilon, derive_seed(seed, 7));
  }
  PpoLearner learner(ckpt.network(), PpoConfig{});
  return evaluate_learner(learner, env, episodes);
}

// ---------------------------------------------------------------------------
// Export

void write_results_csv(const fs::path& path, const std::vector<RunSummary>& summaries) {
  std::string s = "algorithm,method,source_model,rep,seed,final_success_pct,mean_ep_len,steps_to_90pct\n";
  for (const auto& sum : summaries) {
    const auto& c = sum.config;
    const std::string label = !c.source_label.empty() ? c.source_label
                              : c.source.empty()       ? std::string("none")
                                                       : fs::path(c.source).parent_path().filename().string();
    for (const auto& r : sum.runs) {
      s += to_string(c.algorithm) + "," + to_string(c.method) + "," + label + "," + std::to_string(r.rep + 1) + "," +
           std::to_string(r.seed) + "," + fixed(r.final_success_pct, 1) + "," + fixed(r.mean_ep_len, 2) + "," +
           (r.steps_to_90pct ? std::to_string(*r.steps_to_90pct) : std::string()) + "\n";
    }
  }
  write_file(path, s);
}

void write_curves_csv(const fs::path& path, const std::vector<RunSummary>& summaries) {
  std::string s = curves_header();
  for (const auto& sum : summaries)
    for (const auto& r : sum.runs) s += curves_rows(r);
  write_file(path, s);
}

namespace {

json plan_json(const TransferPlan& p) {
  json groups = json::object();
  for (const auto& [g, gp] : p.groups) groups[to_string(g)] = {{"loaded", gp.loaded}, {"trainable", gp.trainable}};
  return {{"method", to_string(p.method)}, {"source", p.source_ref}, {"target", p.target.name()}, {"groups", groups}};
}

TransferPlan plan_from_json(const json& j) {
  TransferPlan p;
  p.method = parse_transfer_method(j.at("method").get<std::string>());
  p.source_ref = j.at("source").get<std::string>();
  p.target = ActionSpace::parse(j.at("target").get<std::string>());
  for (auto g : {ParamGroup::trunk, ParamGroup::value_hidden, ParamGroup::value_out, ParamGroup::adv_hidden,
                 ParamGroup::adv_out, ParamGroup::policy_out, ParamGroup::adapter}) {
    const auto& gs = j.at("groups");
    if (gs.contains(to_string(g))) {
      p.groups[g] = {gs.at(to_string(g)).at("loaded").get<bool>(), gs.at(to_string(g)).at("trainable").get<bool>()};
    }
  }
  return p;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_manifest(const fs::path& path, const std::vector<RunSummary>& summaries) {
  json cells = json::array();
  for (const auto& sum : summaries) {
    json runs = json::array();
    for (const auto& r : sum.runs) {
      json evals = json::array();
      for (const auto& e : r.evals) evals.push_back({e.agent_steps, e.success_pct, e.mean_length});
      runs.push_back({{"run_id", r.run_id}, {"rep", r.rep + 1}, {"seed", r.seed}, {"episodes", r.episodes.size()},
                      {"evals", evals}});
    }
    cells.push_back({{"config_hash", sum.config.hash()},
                     {"config", sum.config.to_map()},
                     {"plan", plan_json(sum.plan)},
                     {"mean_success_pct", std::round(sum.mean_success() * 100.0) / 100.0},
                     {"std_success_pct", std::round(sum.std_success() * 100.0) / 100.0},
                     {"runs", runs}});
  }
  json m = {{"format", "actxfer-results"}, {"version", 1}, {"cells", cells}};
  write_file(path, m.dump(2) + "\n");
}

void export_results(const fs::path& dir, const std::vector<RunSummary>& summaries) {
  fs::create_directories(dir);
  write_results_csv(dir / "results.csv", summaries);
  write_curves_csv(dir / "curves.csv", summaries);
  write_manifest(dir / "manifest.json", summaries);
}

std::vector<RunSummary> load_results(const fs::path& dir) {
  const json m = json::parse(read_file(dir / "manifest.json"));
  std::vector<RunSummary> out;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_run;  // run_id -> (cell, run)
  for (const auto& cell : m.at("cells")) {
    RunSummary s;
    s.config = parse_config([&] {
      std::string text;
      for (const auto& [k, v] : cell.at("config").items()) text += k + " = " + v.get<std::string>() + "\n";
      return text;
    }(), ExperimentConfig{});
    if (s.config.hash() != cell.at("config_hash").get<std::string>()) {
      throw ConfigError("manifest config does not reproduce its hash " + cell.at("config_hash").get<std::string>());
    }
    s.plan = plan_from_json(cell.at("plan"));
    for (const auto& r : cell.at("runs")) {
      RunResult rr;
      rr.run_id = r.at("run_id").get<std::string>();
      rr.rep = r.at("rep").get<int>() - 1;
      rr.seed = r.at("seed").get<std::uint64_t>();
      for (const auto& e : r.at("evals")) rr.evals.push_back({e.at(0).get<long>(), e.at(1).get<double>(), e.at(2).get<double>()});
      by_run[rr.run_id] = {out.size(), s.runs.size()};
      s.runs.push_back(std::move(rr));
    }
    out.push_back(std::move(s));
  }

  std::istringstream curves(read_file(dir / "curves.csv"));
  std::string line;
  std::getline(curves, line);
  std::map<std::string, long> last_steps;
  while (std::getline(curves, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw ConfigError("curves.csv: malformed line '" + line + "'");
    auto it = by_run.find(f[0]);
    if (it == by_run.end()) throw ConfigError("curves.csv: run '" + f[0] + "' missing from manifest");
    auto& run = out[it->second.first].runs[it->second.second];
    EpisodeRecord e;
    e.run_id = f[0];
    e.episode = parse_long("episode", f[1]);
    e.total_agent_steps = parse_long("steps", f[2]);
    e.total_env_steps = parse_long("env_steps", f[3]);
    e.success = f[4] == "1";
    e.reward = e.success ? 1.0f : -1.0f;
    e.agent_steps = static_cast<int>(e.total_agent_steps - last_steps[f[0]]);
    last_steps[f[0]] = e.total_agent_steps;
    run.episodes.push_back(e);
  }
  // Episode lengths are not exported directly; per-run metrics come from results.csv.
  std::istringstream results(read_file(dir / "results.csv"));
  std::getline(results, line);
  for (auto& s : out)
    for (auto& r : s.runs) {
      if (!std::getline(results, line)) throw ConfigError("results.csv has fewer rows than the manifest");
      const auto f = split(line, ',');
      if (f.size() != 8) throw ConfigError("results.csv: malformed line '" + line + "'");
      r.final_success_pct = parse_double("final_success_pct", f[5]);
      r.mean_ep_len = parse_double("mean_ep_len", f[6]);
      if (!f[7].empty()) r.steps_to_90pct = parse_long("steps_to_90pct", f[7]);
    }
  return out;
}

}  // namespace actxfer
