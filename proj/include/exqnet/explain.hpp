#pragma once

#include <filesystem>
#include <string>

#include "exqnet/data.hpp"
#include "exqnet/model.hpp"

namespace exqnet {

struct Heatmap {
  Tensor<float> values;  // [H,W] in [0,1]
  std::string layer;
  std::size_t class_index = 0;
};

// map = relu(sum_c mean_hw(grad_c) * features_c) resized to out_h x out_w and
// scaled so its max is 1. An all-zero map stays zero. features and
// feature_grad are [1,C,h,w].
template <typename T>
Tensor<float> grad_cam_map(const Tensor<T>& features, const Tensor<T>& feature_grad,
                           std::size_t out_h, std::size_t out_w);

// Grad-CAM of class_index against the output of the named stage (default: the
// last DFSEB block). image is a preprocessed [1,3,T,T] tensor.
template <typename T>
Heatmap gradcam(ExquisiteNet<T>& model, const Tensor<T>& image, std::size_t class_index,
                const std::string& layer = "");

// Blue (0) to red (1) colormap blended 50/50 with the raw 0..255 image.
// Writes a PPM when out_path is non-empty and returns the blend.
Image overlay(const Heatmap& heatmap, const Image& original, const std::filesystem::path& out_path);

// Share of heatmap mass that falls inside box; 0 for an all-zero map.
double mass_inside(const Heatmap& heatmap, const Box& box);

}  // namespace exqnet
