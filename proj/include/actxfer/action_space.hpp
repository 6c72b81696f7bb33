#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

namespace actxfer {

/// Velocity command applied on every simulation tick of an action window.
/// linear: +1 full forward, -1 full backward. angular: +1 full left (CCW).
struct Command {
  double linear = 0.0;
  double angular = 0.0;

  friend bool operator==(const Command&, const Command&) = default;
};

enum class ActionKind { discrete4_source, discrete_subset, discrete24, continuous2 };

/// Discrete or continuous action set with its mapping to velocity commands.
///
/// The source set is ordered W (forward), S (backward), A (turn left),
/// D (turn right). Subsets keep that order and re-index densely.
class ActionSpace {
 public:
  static ActionSpace discrete4();
  /// `keys` is any non-empty combination of the letters W, A, S, D.
  static ActionSpace subset(const std::string& keys);
  static ActionSpace discrete24();
  static ActionSpace continuous2();
  /// Inverse of name().
  static ActionSpace parse(const std::string& name);

  ActionKind kind() const noexcept { return kind_; }
  bool is_discrete() const noexcept { return kind_ != ActionKind::continuous2; }
  /// Number of discrete actions, or the continuous dimension.
  int size() const noexcept;

  Command command(int index) const;
  /// Continuous command; values are clamped to [-1, 1].
  Command command(std::span<const float> values) const;

  /// "discrete4", "subset:WAD", "discrete24", "continuous2".
  std::string name() const;
  /// Key letters for discrete4/subset spaces, e.g. "WAD".
  std::string keys() const;

  friend bool operator==(const ActionSpace& a, const ActionSpace& b) { return a.name() == b.name(); }

 private:
  ActionKind kind_ = ActionKind::discrete4_source;
  std::vector<Command> commands_;
  std::string keys_;
};

}  // namespace actxfer
