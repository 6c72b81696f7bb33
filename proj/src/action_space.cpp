#include "actxfer/action_space.hpp"

#include <algorithm>

#include "actxfer/tensor.hpp"

namespace actxfer {

namespace {

constexpr char kSourceKeys[] = "WSAD";

Command key_command(char key) {
  switch (key) {
    case 'W': return {1.0, 0.0};
    case 'S': return {-1.0, 0.0};
    case 'A': return {0.0, 1.0};
    case 'D': return {0.0, -1.0};
    default: throw ConfigError(std::string("unknown action key '") + key + "'");
  }
}

}  // namespace

ActionSpace ActionSpace::discrete4() {
  ActionSpace s;
  s.kind_ = ActionKind::discrete4_source;
  s.keys_ = kSourceKeys;
  for (char k : s.keys_) s.commands_.push_back(key_command(k));
  return s;
}

ActionSpace ActionSpace::subset(const std::string& keys) {
  std::string canonical;
  for (char k : std::string(kSourceKeys)) {
    if (keys.find(k) != std::string::npos) canonical += k;
  }
  for (char k : keys) {
    if (std::string(kSourceKeys).find(k) == std::string::npos) {
      throw ConfigError(std::string("unknown action key '") + k + "' in subset \"" + keys + "\"");
    }
  }
  if (canonical.empty()) throw ConfigError("action subset must keep at least one action");
  ActionSpace s;
  s.kind_ = ActionKind::discrete_subset;
  s.keys_ = canonical;
  for (char k : canonical) s.commands_.push_back(key_command(k));
  return s;
}

ActionSpace ActionSpace::discrete24() {
  ActionSpace s;
  s.kind_ = ActionKind::discrete24;
  for (double lin : {-1.0, -0.5, 0.5, 1.0})
    for (double ang : {-1.0, -0.6, -0.2, 0.2, 0.6, 1.0}) s.commands_.push_back({lin, ang});
  return s;
}

ActionSpace ActionSpace::continuous2() {
  ActionSpace s;
  s.kind_ = ActionKind::continuous2;
  return s;
}

ActionSpace ActionSpace::parse(const std::string& name) {
  if (name == "discrete4") return discrete4();
  if (name == "discrete24") return discrete24();
  if (name == "continuous2") return continuous2();
  if (name.rfind("subset:", 0) == 0) return subset(name.substr(7));
  throw ConfigError("unknown action space '" + name + "'");
}

int ActionSpace::size() const noexcept {
  return kind_ == ActionKind::continuous2 ? 2 : static_cast<int>(commands_.size());
}

Command ActionSpace::command(int index) const {
  if (!is_discrete()) throw ConfigError("discrete action given to continuous action space");
  if (index < 0 || index >= static_cast<int>(commands_.size())) {
    throw ConfigError("action index " + std::to_string(index) + " out of range for " + name());
  }
  return commands_[static_cast<std::size_t>(index)];
}

Command ActionSpace::command(std::span<const float> values) const {
  if (is_discrete()) throw ConfigError("continuous action given to discrete action space " + name());
  if (values.size() != 2) throw ConfigError("continuous2 expects 2 values, got " + std::to_string(values.size()));
  return {std::clamp(static_cast<double>(values[0]), -1.0, 1.0), std::clamp(static_cast<double>(values[1]), -1.0, 1.0)};
}

std::string ActionSpace::name() const {
  switch (kind_) {
    case ActionKind::discrete4_source: return "discrete4";
    case ActionKind::discrete_subset: return "subset:" + keys_;
    case ActionKind::discrete24: return "discrete24";
    case ActionKind::continuous2: return "continuous2";
  }
  return {};
}

std::string ActionSpace::keys() const { return keys_; }

}  // namespace actxfer
