#pragma once

#include <span>
#include <vector>

#include "matchkit/tensor.hpp"

namespace matchkit {

// Planar float image. Channel c, row y, column x lives at (c * height + y) * width + x.
template <std::size_t Channels>
struct PlanarImage {
  static constexpr std::size_t channels = Channels;

  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> data;

  PlanarImage() = default;
  PlanarImage(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), data(Channels * w * h, fill) {}

  std::size_t plane_size() const { return width * height; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::span<float> plane(std::size_t c) { return {data.data() + c * plane_size(), plane_size()}; }
  std::span<const float> plane(std::size_t c) const { return {data.data() + c * plane_size(), plane_size()}; }
  bool empty() const { return data.empty(); }

  // Values finite and inside [0, 1].
  bool in_unit_range() const {
    for (float v : data) {
      if (!(v >= 0.0f && v <= 1.0f)) return false;
    }
    return true;
  }

  bool operator==(const PlanarImage&) const = default;
};

// Three planes (red, green, blue), values in [0, 1].
using RgbImage = PlanarImage<3>;
// One plane, values in [0, 1].
using GrayImage = PlanarImage<1>;
// One unbounded plane: transform output before rescaling.
using RawImage = PlanarImage<1>;

// Bilinear resample to an explicit size (pixel centers aligned).
template <std::size_t C>
PlanarImage<C> resize_bilinear(const PlanarImage<C>& src, std::size_t width, std::size_t height) {
  if (src.width == width && src.height == height) return src;
  if (src.empty() || width == 0 || height == 0) throw Error("resize: empty image");
  PlanarImage<C> out(width, height);
  const double sx = static_cast<double>(src.width) / width, sy = static_cast<double>(src.height) / height;
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (std::size_t c = 0; c < C; ++c) {
        const double top = src.at(c, y0, x0) * (1 - tx) + src.at(c, y0, x1) * tx;
        const double bottom = src.at(c, y1, x0) * (1 - tx) + src.at(c, y1, x1) * tx;
        out.at(c, y, x) = static_cast<float>(top * (1 - ty) + bottom * ty);
      }
    }
  }
  return out;
}

// Resize to a target height keeping the aspect ratio.
template <std::size_t C>
PlanarImage<C> resize_to_height(const PlanarImage<C>& src, std::size_t height) {
  if (src.height == height) return src;
  const auto width = static_cast<std::size_t>(
      std::max(1.0, std::round(static_cast<double>(src.width) * height / static_cast<double>(src.height))));
  return resize_bilinear(src, width, height);
}

// Stacks same-sized images into an [N, C, H, W] tensor.
template <typename T, std::size_t C>
ad::Tensor<T> stack_images(std::span<const PlanarImage<C>* const> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const std::size_t w = images[0]->width, h = images[0]->height;
  std::vector<T> values;
  values.reserve(images.size() * C * w * h);
  for (const auto* img : images) {
    if (img->width != w || img->height != h) throw ShapeError("stack_images: images in a batch differ in size");
    for (float v : img->data) values.push_back(static_cast<T>(v));
  }
  return ad::Tensor<T>::from_values({images.size(), C, h, w}, std::move(values));
}

template <typename T, std::size_t C>
ad::Tensor<T> stack_images(const std::vector<const PlanarImage<C>*>& images) {
  return stack_images<T, C>(std::span<const PlanarImage<C>* const>(images));
}

template <typename T, std::size_t C>
ad::Tensor<T> image_tensor(const PlanarImage<C>& img) {
  std::vector<const PlanarImage<C>*> one{&img};
  return stack_images<T, C>(one);
}

// Extracts sample n of an [N, 1, H, W] tensor.
template <typename T>
GrayImage plane_from_tensor(const ad::Tensor<T>& t, std::size_t n) {
  if (t.rank() != 4 || t.dim(1) != 1 || n >= t.dim(0)) throw ShapeError("plane_from_tensor: expected [N,1,H,W]");
  GrayImage out(t.dim(3), t.dim(2));
  const std::size_t plane = out.plane_size();
  for (std::size_t i = 0; i < plane; ++i) out.data[i] = static_cast<float>(t[n * plane + i]);
  return out;
}

}  // namespace matchkit
