#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "actxfer/nn.hpp"

namespace actxfer {

enum class TransferMethod { fine_tune, replace, replace_with_value, adapter, scratch };

std::string to_string(TransferMethod m);
TransferMethod parse_transfer_method(const std::string& s);

/// What a surgery did: per group, whether it was loaded from the source and
/// whether it trains.
struct GroupPlan {
  bool loaded = false;
  bool trainable = true;

  friend bool operator==(const GroupPlan&, const GroupPlan&) = default;
};

struct TransferPlan {
  TransferMethod method = TransferMethod::scratch;
  std::string source_ref;  ///< checkpoint path or label; empty for scratch
  ActionSpace target = ActionSpace::discrete4();
  std::map<ParamGroup, GroupPlan> groups;

  friend bool operator==(const TransferPlan&, const TransferPlan&) = default;
};

struct TransferResult {
  Network net;
  TransferPlan plan;
};

/// Everything loaded except the action-sized output layer, which is fresh.
/// Nothing frozen.
TransferResult apply_fine_tune(const Network& src, const ActionSpace& target, std::uint64_t seed);

/// Trunk and head hidden layers loaded and frozen; the action output layer is
/// fresh. The value output layer is fresh (with_value = false) or loaded; both
/// stay trainable.
TransferResult apply_replace(const Network& src, const ActionSpace& target, bool with_value, std::uint64_t seed);

/// Whole source network frozen; a trainable linear adapter maps its
/// Q-values / logits to the target space.
TransferResult apply_adapter(const Network& src, const ActionSpace& target, std::uint64_t seed);

/// Fresh network for the target space with the source's head kind and input size.
TransferResult apply_scratch(const NetworkSpec& src_spec, const ActionSpace& target, std::uint64_t seed);

/// Replace surgery onto the subset of W/S/A/D listed in `keep` (e.g. "WAD").
TransferResult restrict_actions(const Network& src, const std::string& keep, std::uint64_t seed);

TransferResult apply_transfer(TransferMethod method, const Network& src, const ActionSpace& target,
                              std::uint64_t seed);

std::size_t trainable_count(const ParamStore& store);

}  // namespace actxfer
