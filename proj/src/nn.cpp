#include "actxfer/nn.hpp"

namespace actxfer {

std::string to_string(HeadKind kind) { return kind == HeadKind::dueling_q ? "dueling_q" : "actor_critic"; }

HeadKind parse_head_kind(const std::string& s) {
  if (s == "dueling_q") return HeadKind::dueling_q;
  if (s == "actor_critic") return HeadKind::actor_critic;
  throw ConfigError("unknown head kind '" + s + "'");
}

TrunkLayout trunk_layout(ObsDims obs) {
  auto chain = [&](int k1, int s1) {
    int h = conv_out_size(obs.height, k1, s1), w = conv_out_size(obs.width, k1, s1);
    h = conv_out_size(h, 4, 2), w = conv_out_size(w, 4, 2);
    h = conv_out_size(h, 3, 1), w = conv_out_size(w, 3, 1);
    return 64 * h * w;
  };
  if (int flat = chain(8, 4); flat > 0) return {8, 4, flat};
  if (int flat = chain(4, 2); flat > 0) return {4, 2, flat};
  throw ConfigError("observation " + std::to_string(obs.height) + "x" + std::to_string(obs.width) +
                    " is too small for the convolutional trunk");
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::trunk: return "trunk";
    case ParamGroup::value_hidden: return "value_hidden";
    case ParamGroup::value_out: return "value_out";
    case ParamGroup::adv_hidden: return "adv_hidden";
    case ParamGroup::adv_out: return "adv_out";
    case ParamGroup::policy_out: return "policy_out";
    case ParamGroup::adapter: return "adapter";
  }
  return {};
}

ParamGroup param_group(const std::string& name) {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("trunk.")) return ParamGroup::trunk;
  if (starts("head.value.hidden.")) return ParamGroup::value_hidden;
  if (starts("head.value.out.")) return ParamGroup::value_out;
  if (starts("head.adv.hidden.")) return ParamGroup::adv_hidden;
  if (starts("head.adv.out.")) return ParamGroup::adv_out;
  if (starts("head.policy.")) return ParamGroup::policy_out;
  if (starts("adapter.")) return ParamGroup::adapter;
  throw ConfigError("parameter '" + name + "' belongs to no group");
}

std::vector<std::pair<std::string, Shape>> param_layout(const NetworkSpec& spec) {
  BasicParamStore<float> store;
  std::mt19937_64 rng(0);
  init_params(store, spec, rng);
  std::vector<std::pair<std::string, Shape>> out;
  store.for_each([&](const std::string& name, const Parameter<float>& p) { out.emplace_back(name, p.value.shape()); });
  return out;
}

Network::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  std::mt19937_64 rng(seed);
  init_params(params_, spec_, rng);
}

Network::Network(NetworkSpec spec, ParamStore params) : spec_(std::move(spec)), params_(std::move(params)) {
  const auto layout = param_layout(spec_);
  if (layout.size() != params_.entry_count()) {
    throw ConfigError("parameter store has " + std::to_string(params_.entry_count()) + " entries, network needs " +
                      std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    const auto& have = params_.at(name).value.shape();
    if (have != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(have) + ", expected " + shape_str(shape));
    }
  }
}

QOutput<float> Network::forward_q(Tape& tape, const Tensor& obs) {
  check_obs_shape(spec_, obs);
  auto features = build_trunk(tape, params_, spec_, tape.constant(obs));
  return build_q_head(tape, params_, spec_, features);
}

AcOutput<float> Network::forward_ac(Tape& tape, const Tensor& obs) {
  check_obs_shape(spec_, obs);
  auto features = build_trunk(tape, params_, spec_, tape.constant(obs));
  return build_ac_head(tape, params_, spec_, features);
}

Tensor Network::q_values(const Tensor& obs) {
  Tape tape(false);
  return forward_q(tape, obs).q.value();
}

std::map<ParamGroup, std::size_t> Network::group_sizes() const {
  std::map<ParamGroup, std::size_t> out;
  params_.for_each(
      [&](const std::string& name, const Parameter<float>& p) { out[param_group(name)] += p.value.size(); });
  return out;
}

}  // namespace actxfer
