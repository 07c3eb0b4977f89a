#include "doctest.h"
#include "hat/model.hpp"
#include "test_util.hpp"

using namespace hat;
using hat::test::random_tensor;

namespace {

struct Call {
  int level;
  const Node<float>* current;
  const Node<float>* previous;
  const Node<float>* produced;
};

// Runs the recursion with a recording stand-in for the TFC.
std::vector<Call> unroll(const std::array<int64_t, 4>& depths, const std::vector<Var<float>>& aligned,
                         bool self_concat = true) {
  std::vector<Call> calls;
  dsa_recursion<float>(aligned, depths, self_concat, [&](int s, const Var<float>& cur, const Var<float>& prev) {
    TfcOutput<float> out{Var<float>(Tensor<float>({1})), Var<float>(Tensor<float>({1}))};
    calls.push_back({s, cur.node().get(), prev.defined() ? prev.node().get() : nullptr, out.feature.node().get()});
    return out;
  });
  return calls;
}

ModelConfig desk_model(std::array<int64_t, 4> depths) {
  ModelConfig m;
  m.backbone.image_height = 64;
  m.backbone.image_width = 32;
  m.backbone.stage_channels = {8, 8, 16, 16};
  m.backbone.common_channels = 8;
  m.tfc.heads = 4;
  m.tfc.ffn_ratio = 2;
  m.dsa.depths = depths;
  m.num_ids = 5;
  return m;
}

bool any_name_contains(const HatModel<float>& model, const std::string& needle) {
  for (const auto& [name, p] : model.named_parameters())
    if (name.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("recursion visits active levels low to high with the right inputs") {
  std::vector<Var<float>> aligned;
  for (int s = 0; s < 4; ++s) aligned.emplace_back(Tensor<float>({1}));
  const std::vector<std::array<int64_t, 4>> configs{{12, 0, 0, 0}, {0, 0, 12, 0}, {3, 3, 6, 0}, {0, 4, 4, 4}};
  for (const auto& depths : configs) {
    auto calls = unroll(depths, aligned);
    std::vector<int> active;
    for (int s = 0; s < 4; ++s)
      if (depths[s] > 0) active.push_back(s);
    REQUIRE(calls.size() == active.size());
    for (size_t i = 0; i < calls.size(); ++i) {
      CHECK(calls[i].level == active[i]);
      CHECK(calls[i].current == aligned[active[i]].node().get());
      // Base case pairs X with itself; later calls take the previous aggregate.
      CHECK(calls[i].previous == (i == 0 ? aligned[active[i]].node().get() : calls[i - 1].produced));
    }
  }
  auto alone = unroll({0, 0, 12, 0}, aligned, false);
  CHECK(alone[0].previous == nullptr);
}

TEST_CASE("DSA stage layout matches the depth allocation") {
  Rng rng(1);
  HatModel<float> m(desk_model({3, 3, 6, 0}), rng);
  CHECK(m.dsa().has_level(0));
  CHECK(m.dsa().has_level(1));
  CHECK(m.dsa().has_level(2));
  CHECK_FALSE(m.dsa().has_level(3));
  CHECK(m.dsa().tfc(0).depth() == 3);
  CHECK(m.dsa().tfc(1).depth() == 3);
  CHECK(m.dsa().tfc(2).depth() == 6);

  Rng rng2(1);
  HatModel<float> one(desk_model({0, 0, 12, 0}), rng2);
  CHECK(one.dsa().tfc(2).depth() == 12);
  for (int s : {0, 1, 3}) CHECK_FALSE(one.dsa().has_level(s));
}

TEST_CASE("skipped levels own no parameters") {
  for (const auto& depths : std::vector<std::array<int64_t, 4>>{{12, 0, 0, 0}, {0, 0, 12, 0}, {3, 3, 6, 0}, {0, 4, 4, 4}}) {
    Rng rng(2);
    HatModel<float> m(desk_model(depths), rng);
    for (int s = 0; s < 4; ++s) {
      const std::string lv = "level" + std::to_string(s + 1);
      CHECK(any_name_contains(m, "align." + lv + ".") == (depths[s] > 0));
      CHECK(any_name_contains(m, "dsa." + lv + ".") == (depths[s] > 0));
      CHECK(any_name_contains(m, "dsa." + lv + "_aux_classifier") == (depths[s] > 0));
    }
  }
}

TEST_CASE("model forward: aux heads, logits, features") {
  Rng rng(3);
  HatModel<float> m(desk_model({3, 3, 6, 0}), rng);
  Var<float> images(random_tensor<float>({4, 3, 64, 32}, rng));
  auto out = m.forward(images);
  CHECK(out.trace.levels.size() == 3);
  REQUIRE(out.aux.size() == 3);
  for (const auto& h : out.aux) CHECK(h.logits.shape() == Shape{4, 5});
  CHECK(out.main.logits.shape() == Shape{4, 5});
  CHECK(out.backbone_feature.shape() == Shape{4, 16});
  CHECK(out.hat_feature.shape() == Shape{4, 16});
  CHECK(test_feature(out.backbone_feature, out.hat_feature).shape() == Shape{4, 32});
  for (const auto& lv : out.trace.levels) CHECK(lv.out.feature.shape() == Shape{4, 8, 4, 2});
}

TEST_CASE("the final CLS depends on every active level") {
  Rng rng(4);
  HatModel<float> m(desk_model({3, 3, 6, 0}), rng);
  m.set_training(false);
  Var<float> images(random_tensor<float>({2, 3, 64, 32}, rng));
  auto out = m.forward(images);
  const Tensor<float> base = out.trace.final_cls().value();
  for (int s : {0, 1, 2}) {
    auto aligned = out.aligned;
    aligned[s] = Var<float>(Tensor<float>(aligned[s].shape()));
    auto trace = m.dsa().aggregate(aligned);
    CHECK(max_abs_diff(trace.final_cls().value(), base) > 1e-6f);
  }
}

TEST_CASE("aux heads exist even when the aux loss is off") {
  Rng rng(5);
  ModelConfig cfg = desk_model({3, 3, 6, 0});
  cfg.dsa.use_aux_loss = false;
  HatModel<float> m(cfg, rng);
  Var<float> images(random_tensor<float>({4, 3, 64, 32}, rng));
  auto out = m.forward(images);
  CHECK(out.aux.size() == 3);
  auto loss = m.loss(out, {0, 0, 1, 1}, LossConfig{});
  CHECK(loss.report.aux_losses.empty());
}

TEST_CASE("aux heads read the raw CLS unless the aux neck is on") {
  Var<float> images;
  for (bool neck : {false, true}) {
    Rng rng(6);
    ModelConfig cfg = desk_model({3, 3, 6, 0});
    cfg.dsa.aux_neck = neck;
    HatModel<float> m(cfg, rng);
    if (!images.defined()) images = Var<float>(random_tensor<float>({4, 3, 64, 32}, rng));
    auto out = m.forward(images);
    for (size_t i = 0; i < out.aux.size(); ++i) {
      const auto& cls = out.trace.levels[i].out.cls;
      const auto& emb = out.aux[i].embedding;
      if (!neck) {
        CHECK(emb.node() == cls.node());
        continue;
      }
      // Training-mode BN with unit scale and zero shift standardizes each column.
      const int64_t B = emb.dim(0), D = emb.dim(1);
      for (int64_t d = 0; d < D; ++d) {
        double mu = 0, var = 0;
        for (int64_t b = 0; b < B; ++b) mu += emb.value()[b * D + d];
        mu /= B;
        for (int64_t b = 0; b < B; ++b) var += std::pow(emb.value()[b * D + d] - mu, 2);
        CHECK(std::abs(mu) < 1e-4);
        CHECK(var / B == doctest::Approx(1.0).epsilon(0.05));
      }
    }
    int64_t neck_params = 0;
    for (const auto& [name, p] : m.named_parameters())
      if (name.find("_aux_neck") != std::string::npos) neck_params += p.numel();
    CHECK(neck_params == (neck ? 2 * (16 + 16 + 16) : 0));
  }
}

TEST_CASE("depth configuration validation") {
  DsaConfig d;
  d.depths = {0, 0, 0, 0};
  CHECK_FALSE(d.validate().empty());
  d.depths = {0, -1, 2, 0};
  CHECK_FALSE(d.validate().empty());
  d.depths = {0, 4, 4, 4};
  CHECK(d.num_active() == 3);
}
