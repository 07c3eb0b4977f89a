#include "hat/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace hat {

namespace {

constexpr char kMagic[8] = {'H', 'A', 'T', 'C', 'K', 'P', 'T', '\0'};

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::map<std::string, Tensor<float>*> model_slots(const HatModel<float>& model) {
  std::map<std::string, Tensor<float>*> slots;
  for (auto& [name, p] : model.named_parameters()) {
    Var<float> v = p;
    slots["param/" + name] = &v.mutable_value();
  }
  for (auto& [name, b] : model.named_buffers()) slots["buffer/" + name] = b;
  return slots;
}

}  // namespace

Checkpoint capture_checkpoint(const HatModel<float>& model, const Adam<float>* optimizer, int64_t epoch,
                              const RunConfig& cfg) {
  Checkpoint c;
  c.epoch = epoch;
  c.num_ids = model.config().num_ids;
  c.seed = cfg.seed;
  c.config_hash = config_hash(cfg);
  c.config = flatten(cfg);
  for (const auto& [key, t] : model_slots(model)) c.arrays[key] = *t;
  if (optimizer) {
    c.optimizer_step = optimizer->step_count();
    for (const auto& [name, t] : optimizer->first_moments()) c.arrays["adam_m/" + name] = t;
    for (const auto& [name, t] : optimizer->second_moments()) c.arrays["adam_v/" + name] = t;
  }
  return c;
}

void restore_checkpoint(const Checkpoint& ckpt, HatModel<float>& model, Adam<float>* optimizer) {
  std::map<std::string, Tensor<float>*> slots = model_slots(model);
  if (optimizer) {
    for (auto& [name, t] : optimizer->first_moments()) slots["adam_m/" + name] = &t;
    for (auto& [name, t] : optimizer->second_moments()) slots["adam_v/" + name] = &t;
  }
  std::vector<std::string> missing, unexpected, mismatched;
  for (const auto& [key, t] : slots) {
    auto it = ckpt.arrays.find(key);
    if (it == ckpt.arrays.end())
      missing.push_back(key);
    else if (it->second.shape() != t->shape())
      mismatched.push_back(key + " " + shape_str(it->second.shape()) + " vs model " + shape_str(t->shape()));
  }
  for (const auto& [key, t] : ckpt.arrays) {
    const bool optimizer_key = key.rfind("adam_", 0) == 0;
    if (!slots.count(key) && !(optimizer_key && !optimizer)) unexpected.push_back(key);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::ostringstream os;
    os << "checkpoint does not match the model architecture";
    for (const auto& k : missing) os << "\n  missing:    " << k;
    for (const auto& k : unexpected) os << "\n  unexpected: " << k;
    for (const auto& k : mismatched) os << "\n  shape:      " << k;
    throw CheckpointError(os.str());
  }
  for (auto& [key, t] : slots) *t = ckpt.arrays.at(key);
  if (optimizer) optimizer->set_step_count(ckpt.optimizer_step);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config_hash"] = ckpt.config_hash;
  manifest["config"] = ckpt.config;
  manifest["epoch"] = ckpt.epoch;
  manifest["optimizer_step"] = ckpt.optimizer_step;
  manifest["num_ids"] = ckpt.num_ids;
  // Every random stream is derived from (seed, epoch, batch, position).
  manifest["rng"] = {{"scheme", "derived"}, {"seed", ckpt.seed}};
  std::string payload;
  auto entries = nlohmann::json::array();
  for (const auto& [key, t] : ckpt.arrays) {
    entries.push_back({{"key", key}, {"shape", t.shape()}, {"offset", payload.size()}, {"count", t.numel()}});
    payload.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.numel()) * sizeof(float));
  }
  manifest["entries"] = entries;
  const std::string text = manifest.dump();

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    const uint32_t version = kCheckpointVersion;
    const uint64_t mlen = text.size();
    const uint64_t checksum = fnv1a(payload.data(), payload.size());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw CheckpointError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const size_t header = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < header + sizeof(uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint file");
  uint32_t version = 0;
  uint64_t mlen = 0;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
  std::memcpy(&mlen, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(mlen));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (header + mlen + sizeof(uint64_t) > bytes.size()) throw CheckpointError("checkpoint '" + path + "' is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  const size_t payload_begin = header + mlen;
  const size_t payload_size = bytes.size() - payload_begin - sizeof(uint64_t);
  uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + payload_begin + payload_size, sizeof(stored));
  if (stored != fnv1a(bytes.data() + payload_begin, payload_size))
    throw CheckpointError("checkpoint '" + path + "' payload checksum mismatch");

  Checkpoint c;
  try {
    c.epoch = manifest.at("epoch").get<int64_t>();
    c.optimizer_step = manifest.at("optimizer_step").get<int64_t>();
    c.num_ids = manifest.at("num_ids").get<int64_t>();
    c.config_hash = manifest.at("config_hash").get<std::string>();
    c.config = manifest.at("config").get<FlatConfig>();
    c.seed = manifest.at("rng").at("seed").get<uint64_t>();
    for (const auto& e : manifest.at("entries")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<size_t>();
      const auto count = e.at("count").get<int64_t>();
      if (count != shape_numel(shape) || offset + static_cast<size_t>(count) * sizeof(float) > payload_size)
        throw CheckpointError("entry '" + e.at("key").get<std::string>() + "' is out of bounds");
      Tensor<float> t(shape);
      std::memcpy(t.data(), bytes.data() + payload_begin + offset, static_cast<size_t>(count) * sizeof(float));
      c.arrays.emplace(e.at("key").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  return c;
}

int64_t load_backbone_weights(HatModel<float>& model, const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  int64_t copied = 0;
  for (const auto& [key, slot] : model_slots(model)) {
    const auto slash = key.find('/');
    if (key.compare(slash + 1, 9, "backbone.") != 0) continue;
    auto it = c.arrays.find(key);
    if (it == c.arrays.end()) continue;
    if (it->second.shape() != slot->shape())
      throw CheckpointError("backbone weight " + key + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(slot->shape()));
    *slot = it->second;
    ++copied;
  }
  return copied;
}

}  // namespace hat
