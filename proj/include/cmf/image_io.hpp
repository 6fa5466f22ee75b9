#pragma once

#include <string>
#include <vector>

#include "cmf/tensor.hpp"

namespace cmf {

// Decodes a PNG into a [1,H,W] grayscale tensor scaled to [0,1]. Color
// inputs are reduced with the BT.601 luma weights; alpha is dropped.
TensorF load_png(const std::string& path);

void save_png(const std::string& path, const TensorF& image);

// IDX files per the published MNIST header layout (magic 0x00000803 for
// images, 0x00000801 for labels, big-endian dims, u8 payload).
TensorF load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);

TensorF resize_bilinear(const TensorF& image, int64_t out_h, int64_t out_w);

}  // namespace cmf
