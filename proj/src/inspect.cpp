#include "hat/inspect.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

namespace hat {

std::vector<LevelMap> aggregation_maps(HatModel<float>& model, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw InputError("inspect expects a (3, H, W) image, got " + shape_str(image.shape()));
  NoGradGuard no_grad;
  model.set_training(false);
  Var<float> batch(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}));
  const ModelOutput<float> out = model.forward(batch);
  std::vector<LevelMap> maps;
  for (const auto& lv : out.trace.levels) {
    const Tensor<float>& f = lv.out.feature.value();
    const int64_t c = f.dim(1), h = f.dim(2), w = f.dim(3);
    Tensor<float> m({h, w});
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < h * w; ++i) m[i] += f[ch * h * w + i];
    for (auto& v : m.vec()) v /= static_cast<float>(c);
    maps.push_back({lv.level + 1, std::move(m)});
  }
  return maps;
}

std::vector<std::string> write_level_maps(const std::vector<LevelMap>& maps, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  for (const auto& lm : maps) {
    const int64_t h = lm.map.dim(0), w = lm.map.dim(1);
    const auto [lo, hi] = std::minmax_element(lm.map.vec().begin(), lm.map.vec().end());
    const float range = *hi - *lo;
    cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const float v = range > 0 ? (lm.map.at({y, x}) - *lo) / range : 0.5f;
        img.at<uint8_t>(static_cast<int>(y), static_cast<int>(x)) = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    const std::string stem = dir + "/level" + std::to_string(lm.level);
    if (!cv::imwrite(stem + ".png", img)) throw std::runtime_error("cannot write " + stem + ".png");
    std::ofstream csv(stem + ".csv");
    csv.precision(9);
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) csv << (x ? "," : "") << lm.map.at({y, x});
      csv << "\n";
    }
    written.push_back(stem + ".png");
    written.push_back(stem + ".csv");
  }
  return written;
}

}  // namespace hat
