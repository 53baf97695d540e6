#include "exqnet/explain.hpp"

namespace exqnet {

template <typename T>
Tensor<float> grad_cam_map(const Tensor<T>& features, const Tensor<T>& feature_grad,
                           std::size_t out_h, std::size_t out_w) {
  if (features.rank() != 4 || features.dim(0) != 1 || features.dims() != feature_grad.dims()) {
    throw ShapeError("grad-cam expects matching [1,C,h,w] features and gradients");
  }
  const std::size_t channels = features.dim(1);
  const std::size_t h = features.dim(2), w = features.dim(3), plane = h * w;
  Tensor<double> cam({1, 1, h, w});
  for (std::size_t c = 0; c < channels; ++c) {
    const T* g = feature_grad.ptr() + c * plane;
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += g[i];
    weight /= static_cast<double>(plane);
    const T* a = features.ptr() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) cam[i] += weight * a[i];
  }
  for (double& v : cam.data()) v = std::max(v, 0.0);

  Tensor<double> up = resize_bilinear(cam, out_h, out_w);
  const double peak = max_abs(up);
  Tensor<float> out({out_h, out_w});
  if (peak > 0.0) {
    for (std::size_t i = 0; i < up.size(); ++i) {
      out[i] = std::clamp(static_cast<float>(up[i] / peak), 0.0f, 1.0f);
    }
  }
  return out;
}

template <typename T>
Heatmap gradcam(ExquisiteNet<T>& model, const Tensor<T>& image, std::size_t class_index,
                const std::string& layer) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("gradcam expects a single [1,3,H,W] image, got " + to_string(image.dims()));
  }
  const std::size_t classes = model.config().classes;
  if (class_index >= classes) {
    throw LabelError("class " + std::to_string(class_index) + " outside [0," +
                     std::to_string(classes) + ")");
  }
  const std::string target =
      layer.empty() ? "dfseb" + std::to_string(model.config().schedule.size()) : layer;
  const std::size_t idx = model.stage_index(target);
  if (idx + 1 >= model.stage_count()) throw ConfigError("gradcam layer must precede the classifier");

  std::vector<Tensor<T>> outputs;
  const Tensor<T> logits = model.forward(image, Mode::kEval, &outputs);
  Tensor<T> seed(logits.dims());
  seed[class_index] = T{1};
  const Tensor<T> grad = model.backward(seed, idx + 1);
  model.zero_grad();

  const Tensor<T>& features = outputs[idx];
  if (features.rank() != 4) throw ConfigError("gradcam layer '" + target + "' is not spatial");
  return Heatmap{grad_cam_map(features, grad, image.dim(2), image.dim(3)), target, class_index};
}

Image overlay(const Heatmap& heatmap, const Image& original, const std::filesystem::path& out_path) {
  if (original.rank() != 4 || original.dim(0) != 1 || original.dim(1) != 3 ||
      original.dim(2) != heatmap.values.dim(0) || original.dim(3) != heatmap.values.dim(1)) {
    throw ShapeError("overlay: heatmap " + to_string(heatmap.values.dims()) +
                     " does not match image " + to_string(original.dims()));
  }
  const std::size_t plane = heatmap.values.size();
  Image out(original.dims());
  for (std::size_t i = 0; i < plane; ++i) {
    const float h = heatmap.values[i];
    const float colour[3] = {255.0f * h, 0.0f, 255.0f * (1.0f - h)};
    for (std::size_t c = 0; c < 3; ++c) {
      out[c * plane + i] = 0.5f * original[c * plane + i] + 0.5f * colour[c];
    }
  }
  if (!out_path.empty()) write_ppm(out_path, out);
  return out;
}

double mass_inside(const Heatmap& heatmap, const Box& box) {
  const std::size_t h = heatmap.values.dim(0), w = heatmap.values.dim(1);
  double total = 0.0, inside = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = heatmap.values[y * w + x];
      total += v;
      if (box.contains(x, y)) inside += v;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

template Tensor<float> grad_cam_map<float>(const Tensor<float>&, const Tensor<float>&, std::size_t,
                                           std::size_t);
template Tensor<float> grad_cam_map<double>(const Tensor<double>&, const Tensor<double>&,
                                            std::size_t, std::size_t);
template Heatmap gradcam<float>(ExquisiteNet<float>&, const Tensor<float>&, std::size_t,
                                const std::string&);
template Heatmap gradcam<double>(ExquisiteNet<double>&, const Tensor<double>&, std::size_t,
                                 const std::string&);

}  // namespace exqnet
