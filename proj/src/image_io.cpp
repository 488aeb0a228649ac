#include "tbtnet/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <unordered_map>

namespace tbtnet {

std::array<uint8_t, 3> voc_palette_color(int index) {
  std::array<uint8_t, 3> rgb{0, 0, 0};
  int c = index;
  for (int j = 0; j < 8; ++j) {
    for (int k = 0; k < 3; ++k) rgb[k] = static_cast<uint8_t>(rgb[k] | (((c >> k) & 1) << (7 - j)));
    c >>= 3;
  }
  return rgb;
}

namespace {

uint32_t pack(uint8_t r, uint8_t g, uint8_t b) { return (uint32_t{r} << 16) | (uint32_t{g} << 8) | b; }

const std::unordered_map<uint32_t, uint8_t>& palette_lookup() {
  static const auto table = [] {
    std::unordered_map<uint32_t, uint8_t> t;
    for (int i = 255; i >= 0; --i) {
      auto c = voc_palette_color(i);
      t[pack(c[0], c[1], c[2])] = static_cast<uint8_t>(i);
    }
    return t;
  }();
  return table;
}

}  // namespace

cv::Mat read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

cv::Mat read_label_map(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw LoadError("cannot read mask " + path.string());
  if (raw.depth() != CV_8U) throw LoadError("mask is not 8-bit: " + path.string());
  if (raw.channels() == 1) return raw;
  if (raw.channels() != 3 && raw.channels() != 4) throw LoadError("unsupported mask layout: " + path.string());

  const auto& lookup = palette_lookup();
  cv::Mat labels(raw.rows, raw.cols, CV_8UC1);
  const int ch = raw.channels();
  for (int y = 0; y < raw.rows; ++y) {
    const uint8_t* src = raw.ptr<uint8_t>(y);
    uint8_t* dst = labels.ptr<uint8_t>(y);
    for (int x = 0; x < raw.cols; ++x) {
      const uint8_t* px = src + x * ch;
      auto it = lookup.find(pack(px[2], px[1], px[0]));
      if (it == lookup.end()) {
        throw LoadError("mask colour outside the VOC palette at (" + std::to_string(x) + ", " + std::to_string(y) +
                        ") in " + path.string());
      }
      dst[x] = it->second;
    }
  }
  return labels;
}

torch::Tensor image_to_tensor(const cv::Mat& rgb, int64_t size) {
  if (rgb.type() != CV_8UC3) throw ShapeError("expected an 8-bit 3-channel image");
  if (size <= 0) throw ConfigError("image size must be positive");
  cv::Mat resized;
  const int s = static_cast<int>(size);
  if (rgb.rows == s && rgb.cols == s) {
    resized = rgb;
  } else {
    cv::resize(rgb, resized, cv::Size(s, s), 0, 0, cv::INTER_LINEAR);
  }
  if (!resized.isContinuous()) resized = resized.clone();
  auto t = torch::from_blob(resized.data, {size, size, 3}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor label_to_mask(const cv::Mat& labels, int value, int64_t size) {
  if (labels.type() != CV_8UC1) throw ShapeError("expected a single-channel 8-bit label map");
  if (size <= 0) throw ConfigError("image size must be positive");
  cv::Mat binary = labels == value;
  cv::Mat resized;
  const int s = static_cast<int>(size);
  cv::resize(binary, resized, cv::Size(s, s), 0, 0, cv::INTER_NEAREST);
  if (!resized.isContinuous()) resized = resized.clone();
  auto t = torch::from_blob(resized.data, {size, size}, torch::kUInt8);
  return t.gt(0).to(torch::kFloat32);
}

void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("mask must be [H,W]");
  auto bytes = mask.gt(0.5).to(torch::kUInt8).mul(255).contiguous();
  cv::Mat m(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1, bytes.data_ptr<uint8_t>());
  if (!cv::imwrite(path.string(), m)) throw LoadError("cannot write " + path.string());
}

void write_rgb_png(const std::filesystem::path& path, const cv::Mat& rgb) {
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw LoadError("cannot write " + path.string());
}

void write_label_png(const std::filesystem::path& path, const cv::Mat& labels) {
  if (labels.type() != CV_8UC1) throw ShapeError("expected a single-channel 8-bit label map");
  if (!cv::imwrite(path.string(), labels)) throw LoadError("cannot write " + path.string());
}

}  // namespace tbtnet
