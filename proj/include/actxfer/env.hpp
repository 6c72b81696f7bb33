#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "actxfer/action_space.hpp"
#include "actxfer/tensor.hpp"

namespace actxfer {

// ---------------------------------------------------------------------------
// Textures

inline constexpr int kTextureCount = 68;
inline constexpr int kTextureSize = 32;

/// Two disjoint procedural families: the training bank and a held-out bank
/// used by the transfer targets ("unseen textures").
enum class TextureBank { source, holdout };

struct Texture {
  int size = kTextureSize;
  std::vector<float> texels;  ///< size*size, row-major, values in [0, 1]

  float sample(double u, double v) const;  ///< u, v wrap at 1
  double mean() const;
};

/// Deterministic bitmap for `id` in [0, 68). Families cycle through checker,
/// stripe, gradient and value noise with per-id scale and contrast.
Texture procedural_texture(int id, TextureBank bank = TextureBank::source);

/// Cached set of all 68 textures of a bank.
const std::vector<Texture>& texture_bank(TextureBank bank);

// ---------------------------------------------------------------------------
// World

enum class EnvVariant { source, sim2sim_target, robot_like };

std::string to_string(EnvVariant v);
EnvVariant parse_env_variant(const std::string& s);

struct RandomizationRanges {
  double fov_min_deg = 50.0, fov_max_deg = 120.0;
  double camera_height_min = 0.35, camera_height_max = 0.55;  ///< fraction of wall height
  double headbob_min = 0.0, headbob_max = 0.05;
  double white_noise_min = 0.0, white_noise_max = 0.02;
  double gaussian_sigma_min = 0.0, gaussian_sigma_max = 0.02;
  double gamma_min = 0.6, gamma_max = 1.5;
};

struct WorldConfig {
  double room_size = 10.0;
  double goal_radius = 0.6;
  double agent_radius = 0.25;
  double forward_speed = 0.12;   ///< units per env step at |linear| = 1
  double turn_rate_deg = 4.0;    ///< degrees per env step at |angular| = 1
  int max_env_steps = 1000;
  int frameskip = 10;
  bool ceiling_rendered = true;
  double wall_height = 2.0;
  double pillar_radius = 0.3;
  double pillar_height = 1.6;
  double min_goal_wall_clearance = 1.0;
  double min_goal_spawn_distance = 2.0;
  int obs_height = 60;
  int obs_width = 80;
  TextureBank textures = TextureBank::source;
  bool randomize = true;  ///< false: fixed mid-range draws, no noise
  RandomizationRanges ranges{};

  static WorldConfig for_variant(EnvVariant v);
  /// Every action is held for a whole frameskip window, so the timeout lands on
  /// the first window that reaches max_env_steps.
  int max_agent_steps() const { return (max_env_steps + frameskip - 1) / frameskip; }
  void validate() const;
};

struct RandomizationSpec {
  int wall_texture = 0;
  int floor_texture = 0;
  int ceiling_texture = 0;
  double fov_deg = 90.0;
  double camera_height = 0.45;  ///< fraction of wall height
  double headbob = 0.0;
  double white_noise = 0.0;
  double gaussian_sigma = 0.0;
  double gamma = 1.0;
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading_deg = 0.0;  ///< 0 = +x, counter-clockwise positive, [0, 360)
};

struct WorldState {
  Pose agent{};
  double goal_x = 0.0;
  double goal_y = 0.0;
  int env_step = 0;
  int agent_step = 0;
  double distance_walked = 0.0;
  bool done = false;
  bool success = false;
};

/// Single-channel 8-bit frame; value() maps levels to [0, 1].
struct Observation {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  float value(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col] / 255.0f; }
  /// Writes height*width floats in [0, 1].
  void write(std::span<float> out) const;
  /// [1, 1, H, W]
  Tensor tensor() const;
};

struct RayHit {
  double distance = 0.0;       ///< euclidean distance along the ray
  double hit_x = 0.0, hit_y = 0.0;
  bool vertical_side = false;  ///< true when an x = const wall was hit
  double wall_u = 0.0;         ///< texture coordinate along the wall
};

/// DDA grid traversal from (x, y) along `angle_deg` until an exterior cell.
RayHit cast_ray(const WorldConfig& cfg, double x, double y, double angle_deg);

/// Noise-free, pre-gamma intensities (H*W, row-major). Walls, floor and
/// ceiling are attenuated so that the goal pillar is the brightest surface.
std::vector<float> render_clean(const WorldConfig& cfg, const WorldState& state, const RandomizationSpec& rnd);

/// Adds uniform and Gaussian noise, applies gamma, quantizes to 8 bits.
Observation post_process(const WorldConfig& cfg, std::span<const float> clean, const RandomizationSpec& rnd,
                         std::uint64_t noise_seed);

Observation render(const WorldConfig& cfg, const WorldState& state, const RandomizationSpec& rnd,
                   std::uint64_t noise_seed);

/// Intensity of the pillar surface before noise; every wall/floor/ceiling
/// texel renders strictly below kSurfaceCeiling.
inline constexpr float kPillarMin = 0.94f;
inline constexpr float kSurfaceCeiling = 0.56f;

// ---------------------------------------------------------------------------

struct StepInfo {
  int env_steps = 0;
  int agent_steps = 0;
  bool success = false;
};

struct StepResult {
  Observation obs;
  float reward = 0.0f;
  bool done = false;
  StepInfo info{};
};

/// Raycast navigation task: reach the goal pillar from the room centre.
class RayGymEnv {
 public:
  RayGymEnv(WorldConfig cfg, ActionSpace actions, std::uint64_t seed);

  Observation reset();
  Observation reset(std::uint64_t seed);

  StepResult step(int action);
  StepResult step(std::span<const float> action);
  StepResult step(Command cmd);

  const WorldConfig& config() const noexcept { return cfg_; }
  const ActionSpace& actions() const noexcept { return actions_; }
  const WorldState& state() const noexcept { return state_; }
  const RandomizationSpec& randomization() const noexcept { return rnd_; }

  /// Test hook: overrides the pose/goal of the current episode.
  void set_state(const WorldState& s) { state_ = s; }

  Observation observe();

 private:
  void draw_episode();

  WorldConfig cfg_;
  ActionSpace actions_;
  std::mt19937_64 rng_;
  WorldState state_{};
  RandomizationSpec rnd_{};
  bool started_ = false;
};

/// Horizontal position of the goal pillar in a frame, from pixels alone.
struct PillarSighting {
  bool visible = false;
  double offset = 0.0;  ///< pillar centre minus image centre, in columns
};

PillarSighting find_pillar(const Observation& obs);

/// Pixel-only scripted policy over W/S/A/D indices: turn towards the bright
/// pillar (keep turning left while none is visible) and walk once it is near
/// the image centre, or once a turn has carried it across the centre.
class ScriptedOracle {
 public:
  int act(const Observation& obs);
  void reset() { last_turn_ = 0; }

 private:
  int last_turn_ = 0;  ///< -1 right, +1 left, 0 none
};

}  // namespace actxfer
