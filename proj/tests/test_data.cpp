#include <filesystem>
#include <map>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "doctest.h"
#include "hat/data.hpp"
#include "test_util.hpp"

using namespace hat;
using namespace hat::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("hat_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_jpg(const fs::path& p, int shade) {
  cv::Mat img(24, 12, CV_8UC3, cv::Scalar(shade, 255 - shade, shade / 2));
  REQUIRE(cv::imwrite(p.string(), img));
}

}  // namespace

TEST_CASE("market file names") {
  auto p = parse_market_name("0002_c1s1_000451_03.jpg");
  REQUIRE(p);
  CHECK(p->identity == 2);
  CHECK(p->camera == 1);
  auto d = parse_market_name("-1_c3s1_000001_00.jpg");
  REQUIRE(d);
  CHECK(d->identity == -1);
  CHECK(d->camera == 3);
  CHECK_FALSE(parse_market_name("Thumbs.db"));
  CHECK_FALSE(parse_market_name("0002_x1s1.jpg"));
}

TEST_CASE("market folder round trip") {
  const fs::path root = fresh_dir("market");
  for (const auto* sub : {"bounding_box_train", "query", "bounding_box_test"}) fs::create_directories(root / sub);
  const std::vector<std::pair<int, int>> train{{2, 1}, {2, 3}, {7, 2}, {7, 5}, {11, 6}};
  for (size_t i = 0; i < train.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%04d_c%ds1_%06zu_00.jpg", train[i].first, train[i].second, i);
    write_jpg(root / "bounding_box_train" / name, static_cast<int>(20 * i));
  }
  write_jpg(root / "query" / "0002_c2s1_000100_00.jpg", 10);
  write_jpg(root / "bounding_box_test" / "0002_c4s1_000200_00.jpg", 30);
  write_jpg(root / "bounding_box_test" / "-1_c3s1_000300_00.jpg", 40);
  write_jpg(root / "bounding_box_test" / "garbage.jpg", 50);

  auto splits = parse_market_folder(root.string());
  REQUIRE(splits.train.size() == train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    CHECK(splits.train.samples[i].identity == train[i].first);
    CHECK(splits.train.samples[i].camera == train[i].second);
  }
  CHECK(splits.query.size() == 1);
  REQUIRE(splits.gallery.size() == 2);
  int distractors = 0;
  for (const auto& s : splits.gallery.samples) distractors += s.identity == -1;
  CHECK(distractors == 1);
  CHECK(splits.warnings.size() == 1);

  auto img = sample_pixels(splits.train.samples[0], 16, 8);
  CHECK(img.shape() == Shape{3, 16, 8});
  for (float v : img.vec()) CHECK((v >= 0.0f && v <= 1.0f));

  auto lm = make_label_map(splits.train);
  CHECK(lm.num_classes() == 3);
  CHECK(lm.labels == std::vector<int64_t>{0, 0, 1, 1, 2});
}

TEST_CASE("empty market folder gives empty splits") {
  auto splits = parse_market_folder(fresh_dir("empty").string());
  CHECK(splits.train.size() == 0);
  CHECK(splits.query.size() == 0);
  CHECK(splits.gallery.size() == 0);
  CHECK_THROWS_AS(load_splits((fs::temp_directory_path() / "hat_missing_dir_xyz").string(), 64, 32), ConfigError);
}

TEST_CASE("synthetic datasets") {
  auto spec = parse_synth_uri("synth://16/8/0");
  REQUIRE(spec);
  CHECK(spec->num_ids == 16);
  CHECK(spec->per_id == 8);
  CHECK(spec->seed == 0);
  CHECK_FALSE(parse_synth_uri("synth://16/8"));
  CHECK_FALSE(parse_synth_uri("synth://a/8/0"));

  auto a = synth_dataset(16, 8, 64, 32, 0), b = synth_dataset(16, 8, 64, 32, 0);
  REQUIRE(a.size() == 128);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    CHECK(a.samples[i].identity == b.samples[i].identity);
    CHECK(a.samples[i].camera == b.samples[i].camera);
  }
  auto c = synth_dataset(16, 8, 64, 32, 1);
  CHECK_FALSE(a.samples[0].image == c.samples[0].image);
}

TEST_CASE("synthetic identities are separable by pixel nearest neighbour") {
  auto ds = synth_dataset(16, 8, 64, 32, 0);
  int hits = 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    double best = 1e300;
    size_t arg = 0;
    for (size_t j = 0; j < ds.size(); ++j) {
      if (i == j) continue;
      double d = 0;
      for (int64_t k = 0; k < ds.samples[i].image.numel(); ++k)
        d += std::pow(ds.samples[i].image[k] - ds.samples[j].image[k], 2);
      if (d < best) best = d, arg = j;
    }
    hits += ds.samples[arg].identity == ds.samples[i].identity;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(ds.size()) > 0.75);
}

TEST_CASE("PK sampler batches") {
  CHECK(SamplerConfig{16, 4}.batch_size() == 64);

  PkSampler tiny({0, 0, 1, 1}, {2, 2});
  auto one = tiny.epoch_batches(0, 1);
  REQUIRE(one.size() == 1);
  auto sorted = one[0];
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int64_t>{0, 1, 2, 3});

  // Uneven class sizes, including classes smaller than L.
  std::vector<int64_t> labels;
  for (int64_t c = 0; c < 12; ++c)
    for (int64_t k = 0; k < 2 + c % 7; ++k) labels.push_back(c);
  PkSampler sampler(labels, {4, 3});
  int checked = 0;
  for (int64_t epoch = 1; checked < 1000; ++epoch)
    for (const auto& batch : sampler.epoch_batches(42, epoch)) {
      std::map<int64_t, int> counts;
      for (auto i : batch) ++counts[labels[i]];
      CHECK(counts.size() == 4);
      for (const auto& [l, n] : counts) CHECK(n == 3);
      ++checked;
    }
  CHECK(sampler.epoch_batches(42, 3) == sampler.epoch_batches(42, 3));
  CHECK(sampler.epoch_batches(42, 3) != sampler.epoch_batches(42, 4));
  CHECK_THROWS_AS(PkSampler({0, 0, 1, 1}, {3, 2}), ConfigError);
}

TEST_CASE("augmentation") {
  AugmentConfig cfg;
  cfg.height = 32;
  cfg.width = 16;
  Rng rng(1);
  Tensor<float> img = test::random_tensor<float>({3, 40, 20}, rng, 0, 1);

  Rng r1(5), r2(6);
  CHECK(augment(img, cfg, false, r1) == augment(img, cfg, false, r2));
  Tensor<float> small = resize_image(img, 32, 16);
  CHECK(horizontal_flip(horizontal_flip(small)) == small);
  CHECK_FALSE(horizontal_flip(small) == small);

  // Shapes and value bounds after normalization.
  const float lo = (0 - 0.485f) / 0.229f - 1e-4f, hi = (1 - 0.406f) / 0.225f + 1e-4f;
  for (int t = 0; t < 50; ++t) {
    auto out = augment(img, cfg, true, rng);
    CHECK(out.shape() == Shape{3, 32, 16});
    CHECK(std::all_of(out.vec().begin(), out.vec().end(), [&](float v) { return v >= lo && v <= hi; }));
  }
}

TEST_CASE("random erasing follows its parameters") {
  AugmentConfig cfg;
  cfg.height = 64;
  cfg.width = 32;
  Rng rng(2);
  const Tensor<float> base({3, 64, 32}, -7.0f);
  int erased = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    Tensor<float> img = base;
    auto r = random_erase(img, cfg, rng);
    if (!r) {
      CHECK(img == base);
      continue;
    }
    ++erased;
    const double area = static_cast<double>(r->height * r->width) / (64.0 * 32.0);
    CHECK(area >= 0.015);
    CHECK(area <= 0.45);
    int64_t wrong = 0;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < 64; ++y)
        for (int64_t x = 0; x < 32; ++x) {
          const bool inside = y >= r->top && y < r->top + r->height && x >= r->left && x < r->left + r->width;
          wrong += img[(c * 64 + y) * 32 + x] != (inside ? cfg.erase_fill[c] : -7.0f);
        }
    CHECK(wrong == 0);
  }
  // Probability 0.5 with a few failed placements: binomial sd is about 16.
  CHECK(erased > 420);
  CHECK(erased < 560);
}
