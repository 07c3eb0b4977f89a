#include "hat/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <regex>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace hat::data {

namespace fs = std::filesystem;

std::vector<int64_t> Dataset::identities() const {
  std::set<int64_t> ids;
  for (const auto& s : samples)
    if (s.identity >= 0) ids.insert(s.identity);
  return {ids.begin(), ids.end()};
}

LabelMap make_label_map(const Dataset& ds) {
  LabelMap m;
  m.raw_ids = ds.identities();
  std::map<int64_t, int64_t> index;
  for (size_t i = 0; i < m.raw_ids.size(); ++i) index[m.raw_ids[i]] = static_cast<int64_t>(i);
  for (const auto& s : ds.samples) {
    if (s.identity < 0) throw InputError("training split contains a distractor sample");
    m.labels.push_back(index.at(s.identity));
  }
  return m;
}

std::optional<ParsedName> parse_market_name(const std::string& filename) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+).*\.(jpg|jpeg|png|bmp)$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(filename, m, pattern)) return std::nullopt;
  return ParsedName{std::stoll(m[1].str()), std::stoll(m[2].str())};
}

namespace {

Dataset read_split(const fs::path& dir, bool keep_distractors, std::vector<std::string>& warnings) {
  Dataset ds;
  if (!fs::is_directory(dir)) return ds;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    auto parsed = parse_market_name(name);
    if (!parsed) {
      if (f.extension() == ".db" || f.extension() == ".txt") continue;
      warnings.push_back("skipped unparsable file " + (dir / name).string());
      continue;
    }
    if (parsed->identity < 0 && !keep_distractors) continue;
    Sample s;
    s.path = f.string();
    s.identity = parsed->identity < 0 ? -1 : parsed->identity;
    s.camera = parsed->camera;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct Rgb {
  float r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (i % 6) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

struct Signature {
  Rgb top, bottom, accent;
  int pattern;  // 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker
  double head_offset;
};

Signature identity_signature(uint64_t seed, int64_t id) {
  Rng rng(derive_seed({seed, 0x51d, static_cast<uint64_t>(id)}));
  Signature sig;
  const double hue = std::fmod(static_cast<double>(id) * 0.6180339887 + 0.05 * rng.uniform(), 1.0);
  sig.top = hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
  sig.bottom = hsv_to_rgb(hue + 0.35 + 0.3 * rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.8));
  sig.accent = hsv_to_rgb(hue + 0.5, 0.8, rng.uniform(0.1, 0.9));
  sig.pattern = static_cast<int>((id + static_cast<int64_t>(seed)) % 4);
  sig.head_offset = rng.uniform(-0.04, 0.04);
  return sig;
}

constexpr double kCameraGain[6] = {0.85, 0.9, 0.95, 1.05, 1.1, 1.15};

Tensor<float> draw_person(const Signature& sig, int64_t height, int64_t width, int64_t camera, Rng& rng) {
  Tensor<float> img({3, height, width});
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const double dx = rng.uniform(-W / 16.0, W / 16.0);
  const double dy = rng.uniform(-H / 32.0, H / 32.0);
  const double gain = kCameraGain[camera % 6] * (1.0 + 0.04 * rng.normal());
  const double bg = rng.uniform(0.35, 0.55);
  const int64_t period = std::max<int64_t>(2, height / 16);
  const Rgb skin{0.9f, 0.75f, 0.6f};
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - dx) / W;  // [0,1) across
      const double v = (static_cast<double>(y) + 0.5 - dy) / H;  // [0,1) down
      Rgb c{static_cast<float>(bg), static_cast<float>(bg), static_cast<float>(bg)};
      const double hx = (u - 0.5 - sig.head_offset) / 0.16, hy = (v - 0.12) / 0.09;
      if (hx * hx + hy * hy <= 1.0) {
        c = skin;
      } else if (v >= 0.22 && v < 0.55 && u >= 0.22 && u < 0.78) {
        bool accent = false;
        switch (sig.pattern) {
          case 1: accent = (y / period) % 2 == 1; break;
          case 2: accent = (x / period) % 2 == 1; break;
          case 3: accent = ((x / period) + (y / period)) % 2 == 1; break;
          default: break;
        }
        c = accent ? sig.accent : sig.top;
      } else if (v >= 0.55 && v < 0.95 && u >= 0.3 && u < 0.7 && !(u >= 0.47 && u < 0.53)) {
        c = sig.bottom;
      }
      const float vals[3] = {c.r, c.g, c.b};
      for (int64_t ch = 0; ch < 3; ++ch) {
        const double p = vals[ch] * gain + 0.03 * rng.normal();
        img[(ch * height + y) * width + x] = static_cast<float>(std::clamp(p, 0.0, 1.0));
      }
    }
  return img;
}

Sample synth_sample(uint64_t seed, uint64_t stream, int64_t id, int64_t index, int64_t camera, int64_t height,
                    int64_t width) {
  Rng rng(derive_seed({seed, stream, static_cast<uint64_t>(id), static_cast<uint64_t>(index)}));
  Sample s;
  s.identity = id;
  s.camera = camera;
  s.image = draw_person(identity_signature(seed, id), height, width, camera, rng);
  return s;
}

}  // namespace

DatasetSplits parse_market_folder(const std::string& root) {
  DatasetSplits out;
  const fs::path r(root);
  out.train = read_split(r / "bounding_box_train", false, out.warnings);
  out.query = read_split(r / "query", false, out.warnings);
  out.gallery = read_split(r / "bounding_box_test", true, out.warnings);
  return out;
}

std::optional<SynthSpec> parse_synth_uri(const std::string& uri) {
  static const std::regex pattern(R"(^synth://(\d+)/(\d+)/(\d+)$)");
  std::smatch m;
  if (!std::regex_match(uri, m, pattern)) return std::nullopt;
  return SynthSpec{std::stoll(m[1].str()), std::stoll(m[2].str()), std::stoull(m[3].str())};
}

Dataset synth_dataset(int64_t num_ids, int64_t per_id, int64_t height, int64_t width, uint64_t seed) {
  if (num_ids < 2 || per_id < 2) throw ConfigError("synthetic dataset needs num_ids >= 2 and per_id >= 2");
  Dataset ds;
  ds.samples.reserve(static_cast<size_t>(num_ids * per_id));
  for (int64_t id = 0; id < num_ids; ++id)
    for (int64_t j = 0; j < per_id; ++j) ds.samples.push_back(synth_sample(seed, 1, id, j, j % 6, height, width));
  return ds;
}

DatasetSplits synth_splits(const SynthSpec& spec, int64_t height, int64_t width) {
  DatasetSplits out;
  out.train = synth_dataset(spec.num_ids, spec.per_id, height, width, spec.seed);
  for (int64_t id = 0; id < spec.num_ids; ++id) {
    for (int64_t j = 0; j < 2; ++j) out.query.samples.push_back(synth_sample(spec.seed, 2, id, j, j, height, width));
    for (int64_t j = 0; j < 4; ++j)
      out.gallery.samples.push_back(synth_sample(spec.seed, 3, id, j, 2 + j, height, width));
  }
  return out;
}

DatasetSplits load_splits(const std::string& ref, int64_t height, int64_t width) {
  if (ref.rfind("synth://", 0) == 0) {
    auto spec = parse_synth_uri(ref);
    if (!spec) throw ConfigError("malformed synthetic dataset URI '" + ref + "' (expected synth://num_ids/per_id/seed)");
    return synth_splits(*spec, height, width);
  }
  if (!fs::is_directory(ref)) throw ConfigError("dataset root '" + ref + "' is not a directory");
  return parse_market_folder(ref);
}

Tensor<float> resize_image(const Tensor<float>& img, int64_t height, int64_t width) {
  const int64_t H = img.dim(1), W = img.dim(2);
  if (H == height && W == width) return img;
  Tensor<float> out({3, height, width});
  for (int64_t c = 0; c < 3; ++c) {
    cv::Mat src(static_cast<int>(H), static_cast<int>(W), CV_32F, const_cast<float*>(img.data() + c * H * W));
    cv::Mat dst(static_cast<int>(height), static_cast<int>(width), CV_32F, out.data() + c * height * width);
    cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_LINEAR);
  }
  return out;
}

Tensor<float> load_image(const std::string& path, int64_t height, int64_t width) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw InputError("cannot read image '" + path + "'");
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_LINEAR);
  Tensor<float> out({3, height, width});
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const auto& px = resized.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
      for (int64_t c = 0; c < 3; ++c) out[(c * height + y) * width + x] = static_cast<float>(px[2 - c]) / 255.0f;
    }
  return out;
}

Tensor<float> horizontal_flip(const Tensor<float>& img) {
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<float> out(img.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = img[(c * H + y) * W + (W - 1 - x)];
  return out;
}

Tensor<float> normalize(const Tensor<float>& image, const AugmentConfig& cfg) {
  Tensor<float> out = image;
  const int64_t plane = image.dim(1) * image.dim(2);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i) out[c * plane + i] = (out[c * plane + i] - cfg.mean[c]) / cfg.stddev[c];
  return out;
}

std::optional<EraseRegion> random_erase(Tensor<float>& image, const AugmentConfig& cfg, Rng& rng) {
  if (rng.uniform() >= cfg.erase_prob) return std::nullopt;
  const int64_t H = image.dim(1), W = image.dim(2);
  const double area = static_cast<double>(H * W);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * area;
    const double aspect = rng.uniform(cfg.erase_aspect_min, 1.0 / cfg.erase_aspect_min);
    const auto h = static_cast<int64_t>(std::lround(std::sqrt(target * aspect)));
    const auto w = static_cast<int64_t>(std::lround(std::sqrt(target / aspect)));
    if (h <= 0 || w <= 0 || h >= H || w >= W) continue;
    EraseRegion r{rng.randint(H - h + 1), rng.randint(W - w + 1), h, w};
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = r.top; y < r.top + h; ++y)
        for (int64_t x = r.left; x < r.left + w; ++x) image[(c * H + y) * W + x] = cfg.erase_fill[c];
    return r;
  }
  return std::nullopt;
}

Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& cfg, bool training, Rng& rng,
                      EraseRegion* erased) {
  Tensor<float> img = resize_image(image, cfg.height, cfg.width);
  if (!training) return normalize(img, cfg);
  const int64_t H = cfg.height, W = cfg.width, pad = cfg.pad;
  if (pad > 0) {
    // Zero-pad then crop a window of the original size.
    const int64_t top = rng.randint(2 * pad + 1), left = rng.randint(2 * pad + 1);
    Tensor<float> crop({3, H, W});
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const int64_t sy = y + top - pad, sx = x + left - pad;
          if (sy >= 0 && sy < H && sx >= 0 && sx < W) crop[(c * H + y) * W + x] = img[(c * H + sy) * W + sx];
        }
    img = std::move(crop);
  }
  if (rng.uniform() < cfg.flip_prob) img = horizontal_flip(img);
  img = normalize(img, cfg);
  auto region = random_erase(img, cfg, rng);
  if (erased) *erased = region.value_or(EraseRegion{});
  return img;
}

Tensor<float> sample_pixels(const Sample& s, int64_t height, int64_t width) {
  if (!s.image.empty()) return resize_image(s.image, height, width);
  return load_image(s.path, height, width);
}

PkSampler::PkSampler(std::vector<int64_t> labels, SamplerConfig cfg) : labels_(std::move(labels)), cfg_(cfg) {
  if (cfg.ids_per_batch < 1 || cfg.per_id < 1) throw ConfigError("sampler: P_ids and L must be positive");
  int64_t num_classes = 0;
  for (auto l : labels_) num_classes = std::max(num_classes, l + 1);
  by_class_.resize(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < labels_.size(); ++i) by_class_[static_cast<size_t>(labels_[i])].push_back(static_cast<int64_t>(i));
  int64_t populated = 0;
  for (const auto& c : by_class_) populated += c.empty() ? 0 : 1;
  if (populated < cfg.ids_per_batch)
    throw ConfigError("sampler: dataset has " + std::to_string(populated) + " identities, fewer than P_ids=" +
                      std::to_string(cfg.ids_per_batch));
}

std::vector<std::vector<int64_t>> PkSampler::epoch_batches(uint64_t seed, int64_t epoch) const {
  Rng rng(derive_seed({seed, 0x9a3, static_cast<uint64_t>(epoch)}));
  const auto L = static_cast<size_t>(cfg_.per_id);
  // Per identity: shuffled indices (topped up with replacement) cut into L-chunks.
  std::vector<std::vector<std::vector<int64_t>>> chunks(by_class_.size());
  for (size_t c = 0; c < by_class_.size(); ++c) {
    if (by_class_[c].empty()) continue;
    std::vector<int64_t> idx = by_class_[c];
    while (idx.size() < L) idx.push_back(by_class_[c][static_cast<size_t>(rng.randint(static_cast<int64_t>(by_class_[c].size())))]);
    rng.shuffle(idx.begin(), idx.end());
    for (size_t k = 0; k + L <= idx.size(); k += L) chunks[c].emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.begin() + static_cast<std::ptrdiff_t>(k + L));
  }
  std::vector<std::vector<int64_t>> batches;
  std::vector<size_t> next(chunks.size(), 0);
  while (true) {
    std::vector<int64_t> available;
    for (size_t c = 0; c < chunks.size(); ++c)
      if (next[c] < chunks[c].size()) available.push_back(static_cast<int64_t>(c));
    if (static_cast<int64_t>(available.size()) < cfg_.ids_per_batch) break;
    rng.shuffle(available.begin(), available.end());
    std::vector<int64_t> batch;
    for (int64_t p = 0; p < cfg_.ids_per_batch; ++p) {
      const auto c = static_cast<size_t>(available[static_cast<size_t>(p)]);
      const auto& chunk = chunks[c][next[c]++];
      batch.insert(batch.end(), chunk.begin(), chunk.end());
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

LabeledBatch make_batch(const Dataset& ds, const std::vector<int64_t>& labels, const std::vector<int64_t>& indices,
                        const AugmentConfig& cfg, bool training, uint64_t seed, int64_t epoch, int64_t batch_index) {
  const auto B = static_cast<int64_t>(indices.size());
  const int64_t plane = 3 * cfg.height * cfg.width;
  LabeledBatch out;
  out.images = Tensor<float>({B, 3, cfg.height, cfg.width});
  for (int64_t i = 0; i < B; ++i) {
    const auto& s = ds.samples[static_cast<size_t>(indices[static_cast<size_t>(i)])];
    Rng rng(derive_seed({seed, 0xa06, static_cast<uint64_t>(epoch), static_cast<uint64_t>(batch_index),
                         static_cast<uint64_t>(i)}));
    Tensor<float> img = augment(sample_pixels(s, cfg.height, cfg.width), cfg, training, rng);
    std::copy_n(img.data(), plane, out.images.data() + i * plane);
    out.labels.push_back(labels.empty() ? s.identity : labels[static_cast<size_t>(indices[static_cast<size_t>(i)])]);
    out.cameras.push_back(s.camera);
  }
  return out;
}

Tensor<float> eval_images(const Dataset& ds, const AugmentConfig& cfg, size_t begin, size_t end) {
  const auto B = static_cast<int64_t>(end - begin);
  const int64_t plane = 3 * cfg.height * cfg.width;
  Tensor<float> out({B, 3, cfg.height, cfg.width});
  Rng unused(0);
  for (size_t i = begin; i < end; ++i) {
    Tensor<float> img = augment(sample_pixels(ds.samples[i], cfg.height, cfg.width), cfg, false, unused);
    std::copy_n(img.data(), plane, out.data() + static_cast<int64_t>(i - begin) * plane);
  }
  return out;
}

}  // namespace hat::data
