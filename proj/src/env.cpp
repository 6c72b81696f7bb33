#include "actxfer/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "actxfer/seeding.hpp"

namespace actxfer {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

// Surfaces map texels to [kSurfaceFloor, kSurfaceFloor + kSurfaceGain].
constexpr float kSurfaceFloor = 0.05f;
constexpr float kSurfaceGain = 0.5f;
constexpr float kSkyTop = 0.30f;
constexpr float kSkyHorizon = 0.42f;
constexpr float kVerticalSideShade = 0.85f;

double frac(double v) { return v - std::floor(v); }

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double wrap_degrees(double d) {
  d = std::fmod(d, 360.0);
  return d < 0.0 ? d + 360.0 : d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Textures

float Texture::sample(double u, double v) const {
  int tx = static_cast<int>(frac(u) * size);
  int ty = static_cast<int>(frac(v) * size);
  tx = std::clamp(tx, 0, size - 1);
  ty = std::clamp(ty, 0, size - 1);
  return texels[static_cast<std::size_t>(ty) * size + tx];
}

double Texture::mean() const {
  double s = 0.0;
  for (float t : texels) s += t;
  return texels.empty() ? 0.0 : s / static_cast<double>(texels.size());
}

Texture procedural_texture(int id, TextureBank bank) {
  if (id < 0 || id >= kTextureCount) {
    throw ConfigError("texture id " + std::to_string(id) + " out of range [0, " + std::to_string(kTextureCount) + ")");
  }
  const std::uint64_t salt = bank == TextureBank::source ? 0x5EEDull : 0xB0A7ull;
  std::mt19937_64 rng(derive_seed(salt, static_cast<std::uint64_t>(id)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = 0.05 + 0.4 * unit(rng);
  const double hi = std::min(1.0, lo + 0.25 + 0.3 * unit(rng));
  const int n = kTextureSize;

  Texture tex;
  tex.texels.resize(static_cast<std::size_t>(n) * n);
  auto put = [&](int x, int y, double v) { tex.texels[static_cast<std::size_t>(y) * n + x] = static_cast<float>(v); };

  // Families rotate with the id; the holdout bank shifts the rotation so the
  // same id never shares a family across banks.
  const int family = (id + (bank == TextureBank::holdout ? 2 : 0)) % 4;
  const int scale_pick = static_cast<int>(unit(rng) * 3.0);  // 0..2
  switch (family) {
    case 0: {  // checker
      const int cell = 2 << scale_pick;  // 2, 4, 8
      const double jitter = 0.1 * unit(rng);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) put(x, y, ((x / cell + y / cell) % 2) ? hi : lo + jitter);
      break;
    }
    case 1: {  // stripes, horizontal / vertical / diagonal
      const int period = 4 << scale_pick;  // 4, 8, 16
      const int orient = static_cast<int>(unit(rng) * 3.0);
      const double duty = 0.3 + 0.4 * unit(rng);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const int c = orient == 0 ? y : orient == 1 ? x : (x + y);
          const double phase = static_cast<double>(c % period) / period;
          put(x, y, phase < duty ? hi : lo);
        }
      break;
    }
    case 2: {  // gradient ramp, repeated 1, 2 or 4 times along a random axis
      const int reps = 1 << scale_pick;
      const double angle = unit(rng) * 2.0 * std::numbers::pi;
      const double cx = std::cos(angle), cy = std::sin(angle);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const double t = frac(reps * (cx * x + cy * y) / n);
          put(x, y, lo + (hi - lo) * t);
        }
      break;
    }
    default: {  // tiled value noise on a 4, 8 or 16 lattice
      const int grid = 4 << scale_pick;
      const int cells = n / grid;
      std::vector<double> lattice(static_cast<std::size_t>(cells) * cells);
      for (auto& v : lattice) v = lo + (hi - lo) * unit(rng);
      auto at = [&](int i, int j) {
        return lattice[static_cast<std::size_t>((j % cells) * cells + (i % cells))];
      };
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const int i = x / grid, j = y / grid;
          const double fx = smoothstep(static_cast<double>(x % grid) / grid);
          const double fy = smoothstep(static_cast<double>(y % grid) / grid);
          const double top = at(i, j) * (1 - fx) + at(i + 1, j) * fx;
          const double bot = at(i, j + 1) * (1 - fx) + at(i + 1, j + 1) * fx;
          put(x, y, top * (1 - fy) + bot * fy);
        }
      break;
    }
  }

  // Keep the mean inside [0.15, 0.85] by shifting, preserving contrast.
  const double m = tex.mean();
  const double shift = m < 0.15 ? 0.15 - m : (m > 0.85 ? 0.85 - m : 0.0);
  if (shift != 0.0)
    for (auto& t : tex.texels) t = static_cast<float>(std::clamp(t + shift, 0.0, 1.0));
  return tex;
}

const std::vector<Texture>& texture_bank(TextureBank bank) {
  static const auto make = [](TextureBank b) {
    std::vector<Texture> out;
    out.reserve(kTextureCount);
    for (int i = 0; i < kTextureCount; ++i) out.push_back(procedural_texture(i, b));
    return out;
  };
  static const std::vector<Texture> source = make(TextureBank::source);
  static const std::vector<Texture> holdout = make(TextureBank::holdout);
  return bank == TextureBank::source ? source : holdout;
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(EnvVariant v) {
  switch (v) {
    case EnvVariant::source: return "source";
    case EnvVariant::sim2sim_target: return "sim2sim_target";
    case EnvVariant::robot_like: return "robot_like";
  }
  return {};
}

EnvVariant parse_env_variant(const std::string& s) {
  if (s == "source") return EnvVariant::source;
  if (s == "sim2sim_target") return EnvVariant::sim2sim_target;
  if (s == "robot_like") return EnvVariant::robot_like;
  throw ConfigError("unknown env variant '" + s + "'");
}

WorldConfig WorldConfig::for_variant(EnvVariant v) {
  WorldConfig c;
  switch (v) {
    case EnvVariant::source: break;
    case EnvVariant::sim2sim_target: c.textures = TextureBank::holdout; break;
    case EnvVariant::robot_like:
      c.textures = TextureBank::holdout;
      c.frameskip = 15;
      c.ceiling_rendered = false;
      break;
  }
  return c;
}

void WorldConfig::validate() const {
  if (frameskip < 1) throw ConfigError("frameskip must be >= 1");
  if (max_env_steps < frameskip) throw ConfigError("max_env_steps must be >= frameskip");
  if (room_size < 4.0 || std::floor(room_size) != room_size) throw ConfigError("room_size must be an integer >= 4");
  if (2.0 * min_goal_wall_clearance >= room_size) throw ConfigError("goal wall clearance leaves no room for the goal");
  if (obs_height < 8 || obs_width < 8) throw ConfigError("observation must be at least 8x8");
  if (ranges.fov_min_deg <= 0.0 || ranges.fov_max_deg >= 180.0 || ranges.fov_min_deg > ranges.fov_max_deg)
    throw ConfigError("field of view range must lie in (0, 180)");
  if (ranges.gamma_min <= 0.0 || ranges.gamma_min > ranges.gamma_max) throw ConfigError("gamma range must be positive");
}

// ---------------------------------------------------------------------------
// Rendering

void Observation::write(std::span<float> out) const {
  if (out.size() != pixels.size()) throw ConfigError("observation write: size mismatch");
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = pixels[i] / 255.0f;
}

Tensor Observation::tensor() const {
  Tensor t(Shape{1, 1, height, width});
  write(t.data());
  return t;
}

RayHit cast_ray(const WorldConfig& cfg, double x, double y, double angle_deg) {
  const int cells = static_cast<int>(cfg.room_size);
  const double a = angle_deg * kDegToRad;
  const double dx = std::cos(a), dy = std::sin(a);
  int map_x = static_cast<int>(std::floor(x));
  int map_y = static_cast<int>(std::floor(y));
  const double delta_x = dx == 0.0 ? 1e30 : std::abs(1.0 / dx);
  const double delta_y = dy == 0.0 ? 1e30 : std::abs(1.0 / dy);
  const int step_x = dx < 0 ? -1 : 1;
  const int step_y = dy < 0 ? -1 : 1;
  double side_x = dx < 0 ? (x - map_x) * delta_x : (map_x + 1.0 - x) * delta_x;
  double side_y = dy < 0 ? (y - map_y) * delta_y : (map_y + 1.0 - y) * delta_y;
  bool vertical = false;
  for (;;) {
    if (side_x < side_y) {
      side_x += delta_x;
      map_x += step_x;
      vertical = true;
    } else {
      side_y += delta_y;
      map_y += step_y;
      vertical = false;
    }
    if (map_x < 0 || map_x >= cells || map_y < 0 || map_y >= cells) break;
  }
  RayHit hit;
  hit.distance = vertical ? side_x - delta_x : side_y - delta_y;
  hit.vertical_side = vertical;
  hit.hit_x = x + dx * hit.distance;
  hit.hit_y = y + dy * hit.distance;
  hit.wall_u = frac(vertical ? hit.hit_y : hit.hit_x);
  return hit;
}

std::vector<float> render_clean(const WorldConfig& cfg, const WorldState& state, const RandomizationSpec& rnd) {
  const int h = cfg.obs_height, w = cfg.obs_width;
  const auto& bank = texture_bank(cfg.textures);
  const Texture& wall_tex = bank.at(static_cast<std::size_t>(rnd.wall_texture));
  const Texture& floor_tex = bank.at(static_cast<std::size_t>(rnd.floor_texture));
  const Texture& ceil_tex = bank.at(static_cast<std::size_t>(rnd.ceiling_texture));
  const double focal = (w / 2.0) / std::tan(rnd.fov_deg * kDegToRad / 2.0);
  const double horizon = h / 2.0;
  const double bob = rnd.headbob * std::sin(2.0 * std::numbers::pi * state.distance_walked / 0.8);
  const double cam_z = std::clamp(rnd.camera_height * cfg.wall_height + bob, 0.05, cfg.wall_height - 0.05);
  const double px = state.agent.x, py = state.agent.y;
  auto surface = [](float texel) { return kSurfaceFloor + kSurfaceGain * texel; };

  std::vector<float> img(static_cast<std::size_t>(h) * w);
  for (int c = 0; c < w; ++c) {
    const double offset_deg = std::atan((w / 2.0 - (c + 0.5)) / focal) / kDegToRad;
    const double ray_deg = state.agent.heading_deg + offset_deg;
    const double cos_off = std::cos(offset_deg * kDegToRad);
    const double rdx = std::cos(ray_deg * kDegToRad), rdy = std::sin(ray_deg * kDegToRad);
    const RayHit hit = cast_ray(cfg, px, py, ray_deg);
    const double wall_perp = hit.distance * cos_off;

    // Ray against the pillar cylinder.
    double pillar_perp = -1.0, pillar_u = 0.0;
    {
      const double ox = px - state.goal_x, oy = py - state.goal_y;
      const double b = ox * rdx + oy * rdy;
      const double cc = ox * ox + oy * oy - cfg.pillar_radius * cfg.pillar_radius;
      const double disc = b * b - cc;
      if (disc >= 0.0) {
        double t = -b - std::sqrt(disc);
        if (t <= 0.0) t = -b + std::sqrt(disc);
        if (t > 0.0 && t * cos_off < wall_perp) {
          pillar_perp = t * cos_off;
          const double hx = px + rdx * t - state.goal_x, hy = py + rdy * t - state.goal_y;
          pillar_u = std::atan2(hy, hx);
        }
      }
    }

    for (int r = 0; r < h; ++r) {
      const double dy_pix = (r + 0.5) - horizon;  // > 0 below the horizon
      float v;
      const double z_wall = cam_z - dy_pix * wall_perp / focal;
      if (pillar_perp > 0.0) {
        const double z_p = cam_z - dy_pix * pillar_perp / focal;
        if (z_p >= 0.0 && z_p <= cfg.pillar_height) {
          v = kPillarMin + (1.0f - kPillarMin) * static_cast<float>(0.5 + 0.5 * std::cos(6.0 * pillar_u));
          img[static_cast<std::size_t>(r) * w + c] = v;
          continue;
        }
      }
      if (z_wall >= 0.0 && z_wall <= cfg.wall_height) {
        v = surface(wall_tex.sample(hit.wall_u, 1.0 - z_wall / cfg.wall_height));
        if (hit.vertical_side) v *= kVerticalSideShade;
      } else if (dy_pix > 0.0) {
        const double row_dist = cam_z * focal / dy_pix / cos_off;
        v = surface(floor_tex.sample(px + rdx * row_dist, py + rdy * row_dist));
      } else if (cfg.ceiling_rendered) {
        const double row_dist = (cfg.wall_height - cam_z) * focal / (-dy_pix) / cos_off;
        v = surface(ceil_tex.sample(px + rdx * row_dist, py + rdy * row_dist));
      } else {
        const double t = std::clamp((r + 0.5) / horizon, 0.0, 1.0);
        v = static_cast<float>(kSkyTop + (kSkyHorizon - kSkyTop) * t);
      }
      img[static_cast<std::size_t>(r) * w + c] = v;
    }
  }
  return img;
}

Observation post_process(const WorldConfig& cfg, std::span<const float> clean, const RandomizationSpec& rnd,
                         std::uint64_t noise_seed) {
  Observation obs{cfg.obs_height, cfg.obs_width, {}};
  obs.pixels.resize(clean.size());
  std::mt19937_64 rng(noise_seed);
  std::uniform_real_distribution<double> white(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double inv_gamma = 1.0 / rnd.gamma;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    double v = clean[i] + rnd.white_noise * white(rng) + rnd.gaussian_sigma * gauss(rng);
    v = std::pow(std::clamp(v, 0.0, 1.0), inv_gamma);
    obs.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return obs;
}

Observation render(const WorldConfig& cfg, const WorldState& state, const RandomizationSpec& rnd,
                   std::uint64_t noise_seed) {
  return post_process(cfg, render_clean(cfg, state, rnd), rnd, noise_seed);
}

// ---------------------------------------------------------------------------
// Environment

RayGymEnv::RayGymEnv(WorldConfig cfg, ActionSpace actions, std::uint64_t seed)
    : cfg_(std::move(cfg)), actions_(std::move(actions)), rng_(seed) {
  cfg_.validate();
}

Observation RayGymEnv::reset(std::uint64_t seed) {
  rng_.seed(seed);
  return reset();
}

Observation RayGymEnv::reset() {
  draw_episode();
  started_ = true;
  return observe();
}

void RayGymEnv::draw_episode() {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng_); };
  state_ = WorldState{};
  const double centre = cfg_.room_size / 2.0;
  state_.agent = {centre, centre, uniform(0.0, 360.0)};
  if (state_.agent.heading_deg >= 360.0) state_.agent.heading_deg = 0.0;
  const double lo = cfg_.min_goal_wall_clearance, hi = cfg_.room_size - cfg_.min_goal_wall_clearance;
  do {
    state_.goal_x = uniform(lo, hi);
    state_.goal_y = uniform(lo, hi);
  } while (std::hypot(state_.goal_x - centre, state_.goal_y - centre) < cfg_.min_goal_spawn_distance);

  std::uniform_int_distribution<int> tex(0, kTextureCount - 1);
  const auto& r = cfg_.ranges;
  rnd_.wall_texture = tex(rng_);
  rnd_.floor_texture = tex(rng_);
  rnd_.ceiling_texture = tex(rng_);
  rnd_.fov_deg = uniform(r.fov_min_deg, r.fov_max_deg);
  rnd_.camera_height = uniform(r.camera_height_min, r.camera_height_max);
  rnd_.headbob = uniform(r.headbob_min, r.headbob_max);
  rnd_.white_noise = uniform(r.white_noise_min, r.white_noise_max);
  rnd_.gaussian_sigma = uniform(r.gaussian_sigma_min, r.gaussian_sigma_max);
  rnd_.gamma = uniform(r.gamma_min, r.gamma_max);
  if (!cfg_.randomize) {
    rnd_ = RandomizationSpec{};
    rnd_.fov_deg = (r.fov_min_deg + r.fov_max_deg) / 2.0;
  }
}

Observation RayGymEnv::observe() {
  return render(cfg_, state_, rnd_, rng_());
}

StepResult RayGymEnv::step(int action) { return step(actions_.command(action)); }

StepResult RayGymEnv::step(std::span<const float> action) { return step(actions_.command(action)); }

StepResult RayGymEnv::step(Command cmd) {
  if (!started_) throw ConfigError("step() before reset()");
  if (state_.done) throw ConfigError("step() after the episode is done; call reset()");
  const double lin = std::clamp(cmd.linear, -1.0, 1.0);
  const double ang = std::clamp(cmd.angular, -1.0, 1.0);
  const double lo = cfg_.agent_radius, hi = cfg_.room_size - cfg_.agent_radius;
  auto& a = state_.agent;
  for (int tick = 0; tick < cfg_.frameskip; ++tick) {
    if (!state_.success) {
      const double hr = a.heading_deg * kDegToRad;
      const double nx = std::clamp(a.x + lin * cfg_.forward_speed * std::cos(hr), lo, hi);
      const double ny = std::clamp(a.y + lin * cfg_.forward_speed * std::sin(hr), lo, hi);
      state_.distance_walked += std::hypot(nx - a.x, ny - a.y);
      a.x = nx;
      a.y = ny;
      a.heading_deg = wrap_degrees(a.heading_deg + ang * cfg_.turn_rate_deg);
      if (std::hypot(a.x - state_.goal_x, a.y - state_.goal_y) < cfg_.goal_radius) state_.success = true;
    }
    ++state_.env_step;
  }
  ++state_.agent_step;

  StepResult out;
  if (state_.success) {
    out.reward = 1.0f;
    state_.done = true;
  } else if (state_.env_step >= cfg_.max_env_steps) {
    out.reward = -1.0f;
    state_.done = true;
  }
  out.done = state_.done;
  out.info = {state_.env_step, state_.agent_step, state_.success};
  out.obs = observe();
  return out;
}

// ---------------------------------------------------------------------------

PillarSighting find_pillar(const Observation& obs) {
  // Pillar pixels survive any noise/gamma draw above this level; surfaces do not.
  constexpr int kBrightLevel = static_cast<int>(0.76 * 255);
  double col_sum = 0.0;
  int cols = 0;
  for (int c = 0; c < obs.width; ++c) {
    int run = 0, best = 0;
    for (int r = 0; r < obs.height; ++r) {
      run = obs.pixels[static_cast<std::size_t>(r) * obs.width + c] >= kBrightLevel ? run + 1 : 0;
      best = std::max(best, run);
    }
    if (best >= 2) {
      col_sum += c + 0.5;
      ++cols;
    }
  }
  if (cols == 0) return {};
  return {true, col_sum / cols - obs.width / 2.0};
}

int ScriptedOracle::act(const Observation& obs) {
  constexpr int kW = 0, kA = 2, kD = 3;
  const PillarSighting p = find_pillar(obs);
  if (!p.visible) {
    last_turn_ = 1;
    return kA;
  }
  const int side = p.offset < 0.0 ? 1 : -1;  // +1: pillar left of centre
  const bool crossed = last_turn_ != 0 && side != last_turn_;
  if (std::abs(p.offset) <= 0.1 * obs.width || crossed) {
    last_turn_ = 0;
    return kW;
  }
  last_turn_ = side;
  return side > 0 ? kA : kD;
}

}  // namespace actxfer
