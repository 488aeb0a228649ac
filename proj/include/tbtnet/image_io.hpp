#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <array>
#include <filesystem>

#include "tbtnet/common.hpp"

namespace tbtnet {

/// RGB triple of the standard VOC colour map entry `index`.
std::array<uint8_t, 3> voc_palette_color(int index);

/// 8-bit RGB image. Throws LoadError naming the file when unreadable.
cv::Mat read_rgb(const std::filesystem::path& path);

/// Single-channel label map. Colour-mapped PNGs decoded to RGB are mapped
/// back through the VOC palette; colours outside it are rejected.
cv::Mat read_label_map(const std::filesystem::path& path);

/// Bilinear resize to size x size, scaled to [0,1]: [3,size,size] float.
torch::Tensor image_to_tensor(const cv::Mat& rgb, int64_t size);

/// 1 where `labels == value`, resized with nearest neighbour: [size,size] float.
torch::Tensor label_to_mask(const cv::Mat& labels, int value, int64_t size);

/// Binary [H,W] tensor written as an 8-bit PNG with values 0/255.
void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask);

/// Lossless writers for 8-bit RGB images and single-channel label maps.
void write_rgb_png(const std::filesystem::path& path, const cv::Mat& rgb);
void write_label_png(const std::filesystem::path& path, const cv::Mat& labels);

}  // namespace tbtnet
