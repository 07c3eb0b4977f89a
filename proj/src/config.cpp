#include "hat/config.hpp"

#include <functional>
#include <iomanip>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace hat {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::invalid_argument
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

int64_t to_int(const std::string& s) {
  size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not an integer: '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("not a boolean: '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t[");
    const auto e = item.find_last_not_of(" \t]");
    out.push_back(b == std::string::npos ? "" : item.substr(b, e - b + 1));
  }
  return out;
}

template <size_t N>
std::array<int64_t, N> to_int_array(const std::string& s) {
  auto parts = split_list(s);
  if (parts.size() != N) throw std::invalid_argument("expected " + std::to_string(N) + " comma-separated integers");
  std::array<int64_t, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = to_int(parts[i]);
  return out;
}

template <size_t N>
std::array<float, N> to_float_array(const std::string& s) {
  auto parts = split_list(s);
  if (parts.size() != N) throw std::invalid_argument("expected " + std::to_string(N) + " comma-separated numbers");
  std::array<float, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = static_cast<float>(to_double(parts[i]));
  return out;
}

template <typename A>
std::string join(const A& a) {
  std::ostringstream os;
  for (size_t i = 0; i < a.size(); ++i) {
    if (i) os << ',';
    if constexpr (std::is_floating_point_v<typename A::value_type>)
      os << fmt_double(a[i]);
    else
      os << a[i];
  }
  return os.str();
}

#define HAT_INT(KEY, MEMBER) \
  Field{KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); }, [](RunConfig& c, const std::string& v) { c.MEMBER = to_int(v); }}
#define HAT_DOUBLE(KEY, MEMBER) \
  Field{KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); }, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(v); }}
#define HAT_BOOL(KEY, MEMBER)                                                       \
  Field{KEY, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(v); }}
#define HAT_ARRAY4(KEY, MEMBER) \
  Field{KEY, [](const RunConfig& c) { return join(c.MEMBER); }, [](RunConfig& c, const std::string& v) { c.MEMBER = to_int_array<4>(v); }}
#define HAT_FLOAT3(KEY, MEMBER) \
  Field{KEY, [](const RunConfig& c) { return join(c.MEMBER); }, [](RunConfig& c, const std::string& v) { c.MEMBER = to_float_array<3>(v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = static_cast<uint64_t>(to_int(v)); }},
      Field{"output_dir", [](const RunConfig& c) { return c.output_dir; },
            [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
      HAT_INT("backbone.image_height", model.backbone.image_height),
      HAT_INT("backbone.image_width", model.backbone.image_width),
      HAT_ARRAY4("backbone.stage_channels", model.backbone.stage_channels),
      HAT_ARRAY4("backbone.blocks_per_stage", model.backbone.blocks_per_stage),
      HAT_INT("backbone.common_channels", model.backbone.common_channels),
      HAT_INT("backbone.scaling_divisor", model.backbone.scaling_divisor),
      HAT_INT("tfc.heads", model.tfc.heads),
      HAT_INT("tfc.ffn_ratio", model.tfc.ffn_ratio),
      HAT_DOUBLE("tfc.init_std", model.tfc.init_std),
      HAT_ARRAY4("dsa.depths", model.dsa.depths),
      HAT_BOOL("dsa.use_aux_loss", model.dsa.use_aux_loss),
      HAT_BOOL("dsa.use_nea", model.dsa.use_nea),
      HAT_BOOL("dsa.use_mfe_supervision", model.dsa.use_mfe_supervision),
      HAT_BOOL("dsa.self_concat_first", model.dsa.self_concat_first),
      HAT_BOOL("dsa.aux_neck", model.dsa.aux_neck),
      HAT_DOUBLE("loss.epsilon", loss.epsilon),
      HAT_DOUBLE("loss.margin", loss.margin),
      HAT_DOUBLE("loss.lambda", loss.lambda),
      HAT_BOOL("loss.normalize_triplet", loss.normalize_triplet),
      Field{"data.dataset", [](const RunConfig& c) { return c.dataset; },
            [](RunConfig& c, const std::string& v) { c.dataset = v; }},
      HAT_INT("data.ids_per_batch", sampler.ids_per_batch),
      HAT_INT("data.per_id", sampler.per_id),
      HAT_BOOL("data.augment", augment_enabled),
      HAT_INT("data.pad", augment.pad),
      HAT_DOUBLE("data.flip_prob", augment.flip_prob),
      HAT_DOUBLE("data.erase_prob", augment.erase_prob),
      HAT_DOUBLE("data.erase_area_min", augment.erase_area_min),
      HAT_DOUBLE("data.erase_area_max", augment.erase_area_max),
      HAT_DOUBLE("data.erase_aspect_min", augment.erase_aspect_min),
      HAT_FLOAT3("data.mean", augment.mean),
      HAT_FLOAT3("data.std", augment.stddev),
      HAT_FLOAT3("data.erase_fill", augment.erase_fill),
      HAT_DOUBLE("schedule.base_lr", schedule.base_lr),
      HAT_DOUBLE("schedule.warmup_start_lr", schedule.warmup_start_lr),
      HAT_INT("schedule.warmup_epochs", schedule.warmup_epochs),
      HAT_INT("schedule.decay_start_epoch", schedule.decay_start_epoch),
      HAT_INT("schedule.decay_every", schedule.decay_every),
      HAT_DOUBLE("schedule.decay_factor", schedule.decay_factor),
      HAT_INT("schedule.total_epochs", schedule.total_epochs),
      HAT_DOUBLE("schedule.tfc_lr_scale", schedule.tfc_lr_scale),
      HAT_DOUBLE("optim.beta1", optim.beta1),
      HAT_DOUBLE("optim.beta2", optim.beta2),
      HAT_DOUBLE("optim.eps", optim.eps),
      HAT_DOUBLE("optim.weight_decay", optim.weight_decay),
      HAT_INT("train.checkpoint_every", train.checkpoint_every),
      HAT_INT("train.eval_batch", train.eval_batch),
      Field{"eval.features", [](const RunConfig& c) { return c.eval.features; },
            [](RunConfig& c, const std::string& v) { c.eval.features = v; }},
      HAT_BOOL("eval.l2_normalize", eval.l2_normalize),
      HAT_INT("eval.max_rank", eval.max_rank),
  };
  return table;
}

#undef HAT_INT
#undef HAT_DOUBLE
#undef HAT_BOOL
#undef HAT_ARRAY4
#undef HAT_FLOAT3

void flatten_node(const YAML::Node& node, const std::string& prefix, FlatConfig& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = prefix.empty() ? kv.first.as<std::string>() : prefix + "." + kv.first.as<std::string>();
      flatten_node(kv.second, key, out);
    }
  } else if (node.IsSequence()) {
    std::string joined;
    for (size_t i = 0; i < node.size(); ++i) joined += (i ? "," : "") + node[i].as<std::string>();
    out[prefix] = joined;
  } else if (node.IsScalar()) {
    out[prefix] = node.as<std::string>();
  } else if (node.IsNull() && !prefix.empty()) {
    out[prefix] = "";
  }
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

FlatConfig flatten(const RunConfig& cfg) {
  FlatConfig out;
  for (const auto& f : fields()) out[f.key] = f.get(cfg);
  return out;
}

RunConfig from_flat(const FlatConfig& flat, std::vector<std::string>& errors) {
  RunConfig cfg;
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  for (const auto& [key, value] : flat) {
    auto it = index.find(key);
    if (it == index.end()) {
      errors.push_back(key + ": unknown key");
      continue;
    }
    try {
      it->second->set(cfg, value);
    } catch (const std::exception& e) {
      errors.push_back(key + ": " + e.what());
    }
  }
  cfg.augment.height = cfg.model.backbone.image_height;
  cfg.augment.width = cfg.model.backbone.image_width;

  if (cfg.dataset.empty()) errors.push_back("data.dataset: required (a Market-style folder or synth://num_ids/per_id/seed)");
  for (auto& e : cfg.model.validate()) errors.push_back(e);
  for (auto& e : cfg.loss.validate()) errors.push_back(e);
  for (auto& e : cfg.schedule.validate()) errors.push_back(e);
  if (cfg.sampler.ids_per_batch < 2) errors.push_back("data.ids_per_batch must be at least 2");
  if (cfg.sampler.per_id < 2) errors.push_back("data.per_id must be at least 2");
  if (cfg.eval.features != "concat" && cfg.eval.features != "backbone-only" && cfg.eval.features != "hat-only")
    errors.push_back("eval.features must be concat, backbone-only or hat-only");
  if (cfg.eval.max_rank < 1) errors.push_back("eval.max_rank must be positive");
  if (cfg.train.checkpoint_every < 0) errors.push_back("train.checkpoint_every must be non-negative");
  if (cfg.train.eval_batch < 1) errors.push_back("train.eval_batch must be positive");
  if (cfg.augment.erase_aspect_min <= 0 || cfg.augment.erase_aspect_min > 1)
    errors.push_back("data.erase_aspect_min must lie in (0, 1]");
  if (!(cfg.augment.erase_area_min > 0 && cfg.augment.erase_area_min <= cfg.augment.erase_area_max &&
        cfg.augment.erase_area_max < 1))
    errors.push_back("data.erase_area_min/max must satisfy 0 < min <= max < 1");
  return cfg;
}

FlatConfig read_config_file(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot open config file '" + path + "'");
  } catch (const YAML::Exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  FlatConfig flat;
  if (!root.IsNull()) {
    if (!root.IsMap()) throw ConfigError("config file '" + path + "' must contain a mapping");
    flatten_node(root, "", flat);
  }
  return flat;
}

void apply_overrides(FlatConfig& flat, const std::vector<std::string>& overrides, std::vector<std::string>& errors) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      errors.push_back("override '" + o + "': expected key=value");
      continue;
    }
    flat[o.substr(0, eq)] = o.substr(eq + 1);
  }
}

std::string to_yaml(const RunConfig& cfg) {
  YAML::Node root;
  for (const auto& [key, value] : flatten(cfg)) {
    const auto dot = key.find('.');
    if (dot == std::string::npos)
      root[key] = value;
    else
      root[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  YAML::Emitter out;
  out << root;
  return std::string(out.c_str()) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  std::string canon;
  for (const auto& [key, value] : flatten(cfg)) {
    if (key == "output_dir") continue;
    canon += key + "=" + value + "\n";
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(canon);
  return os.str();
}

}  // namespace hat
