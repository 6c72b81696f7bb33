#include "actxfer/transfer.hpp"

#include <functional>

namespace actxfer {

std::string to_string(TransferMethod m) {
  switch (m) {
    case TransferMethod::fine_tune: return "fine_tune";
    case TransferMethod::replace: return "replace";
    case TransferMethod::replace_with_value: return "replace_with_value";
    case TransferMethod::adapter: return "adapter";
    case TransferMethod::scratch: return "scratch";
  }
  return {};
}

TransferMethod parse_transfer_method(const std::string& s) {
  for (auto m : {TransferMethod::fine_tune, TransferMethod::replace, TransferMethod::replace_with_value,
                 TransferMethod::adapter, TransferMethod::scratch}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown transfer method '" + s + "'");
}

namespace {

bool action_output(ParamGroup g) { return g == ParamGroup::adv_out || g == ParamGroup::policy_out; }

/// Builds a fresh target network, then loads/freezes group by group.
TransferResult surgery(TransferMethod method, const Network& src, NetworkSpec spec, std::uint64_t seed,
                       const std::function<GroupPlan(ParamGroup)>& rule) {
  if (src.spec().adapter_from) throw ConfigError("transfer source must not itself carry an adapter");
  if (!src.params().contains("head.value.out.w")) throw ConfigError("transfer source has no value head");
  if (spec.head == HeadKind::dueling_q && !spec.actions.is_discrete()) {
    throw ConfigError("a dueling Q network cannot drive continuous action space " + spec.actions.name());
  }
  Network net(spec, seed);
  TransferPlan plan{method, {}, spec.actions, {}};
  net.params().for_each([&](const std::string& name, Parameter<float>& p) {
    const ParamGroup g = param_group(name);
    const GroupPlan gp = rule(g);
    plan.groups[g] = gp;
    if (gp.loaded) {
      if (!src.params().contains(name)) throw ConfigError("source checkpoint lacks parameter '" + name + "'");
      const Tensor& from = src.params().at(name).value;
      if (from.shape() != p.value.shape()) {
        throw ConfigError("incompatible shapes for '" + name + "': source " + shape_str(from.shape()) + ", target " +
                          shape_str(p.value.shape()));
      }
      p.value = from;
    }
    p.frozen = !gp.trainable;
    p.grad.fill(0.0f);
  });
  return {std::move(net), std::move(plan)};
}

NetworkSpec retarget(const Network& src, const ActionSpace& target) {
  NetworkSpec spec = src.spec();
  spec.actions = target;
  spec.adapter_from.reset();
  return spec;
}

}  // namespace

TransferResult apply_fine_tune(const Network& src, const ActionSpace& target, std::uint64_t seed) {
  return surgery(TransferMethod::fine_tune, src, retarget(src, target), seed,
                 [](ParamGroup g) { return GroupPlan{!action_output(g), true}; });
}

TransferResult apply_replace(const Network& src, const ActionSpace& target, bool with_value, std::uint64_t seed) {
  const auto method = with_value ? TransferMethod::replace_with_value : TransferMethod::replace;
  return surgery(method, src, retarget(src, target), seed, [with_value](ParamGroup g) {
    if (action_output(g)) return GroupPlan{false, true};
    if (g == ParamGroup::value_out) return GroupPlan{with_value, true};
    return GroupPlan{true, false};
  });
}

TransferResult apply_adapter(const Network& src, const ActionSpace& target, std::uint64_t seed) {
  NetworkSpec spec = retarget(src, target);
  spec.adapter_from = src.spec().actions;
  return surgery(TransferMethod::adapter, src, spec, seed, [](ParamGroup g) {
    return g == ParamGroup::adapter ? GroupPlan{false, true} : GroupPlan{true, false};
  });
}

TransferResult apply_scratch(const NetworkSpec& src_spec, const ActionSpace& target, std::uint64_t seed) {
  NetworkSpec spec = src_spec;
  spec.actions = target;
  spec.adapter_from.reset();
  if (spec.head == HeadKind::dueling_q && !spec.actions.is_discrete()) {
    throw ConfigError("a dueling Q network cannot drive continuous action space " + spec.actions.name());
  }
  Network net(spec, seed);
  TransferPlan plan{TransferMethod::scratch, {}, spec.actions, {}};
  net.params().for_each([&](const std::string& name, const Parameter<float>&) { plan.groups[param_group(name)] = {}; });
  return {std::move(net), std::move(plan)};
}

TransferResult restrict_actions(const Network& src, const std::string& keep, std::uint64_t seed) {
  return apply_replace(src, ActionSpace::subset(keep), false, seed);
}

TransferResult apply_transfer(TransferMethod method, const Network& src, const ActionSpace& target,
                              std::uint64_t seed) {
  switch (method) {
    case TransferMethod::fine_tune: return apply_fine_tune(src, target, seed);
    case TransferMethod::replace: return apply_replace(src, target, false, seed);
    case TransferMethod::replace_with_value: return apply_replace(src, target, true, seed);
    case TransferMethod::adapter: return apply_adapter(src, target, seed);
    case TransferMethod::scratch: return apply_scratch(src.spec(), target, seed);
  }
  throw ConfigError("unknown transfer method");
}

std::size_t trainable_count(const ParamStore& store) { return store.trainable_numel(); }

}  // namespace actxfer
