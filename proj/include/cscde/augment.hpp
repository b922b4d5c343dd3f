#pragma once

// Geometric augmentation of square (1,c,s,s) images with their label maps.

#include <cstddef>
#include <utility>

#include "cscde/errors.hpp"
#include "cscde/rng.hpp"
#include "cscde/tensor.hpp"

namespace cscde {

template <typename T>
Tensor<T> hflip(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) y.at(n, c, i, x.w() - 1 - j) = x.at(n, c, i, j);
  return y;
}

/// Counter-clockwise rotation by 90 degrees; requires square planes.
template <typename T>
Tensor<T> rot90(const Tensor<T>& x) {
  if (x.h() != x.w()) throw ShapeError("rot90 needs square planes, got " + x.shape().str());
  const std::size_t s = x.h();
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) y.at(n, c, s - 1 - j, i) = x.at(n, c, i, j);
  return y;
}

struct AugmentChoice {
  bool flip = false;
  int quarter_turns = 0;
};

inline AugmentChoice draw_augment(SplitMix64& rng) {
  AugmentChoice a;
  a.flip = rng.coin(0.5);
  a.quarter_turns = static_cast<int>(rng.below(4));
  return a;
}

/// Flip first, then rotate; image and mask receive the same transform.
template <typename Real>
std::pair<Tensor<Real>, LabelMap> apply_augment(Tensor<Real> image, LabelMap mask, AugmentChoice a) {
  if (a.flip) {
    image = hflip(image);
    mask = hflip(mask);
  }
  for (int k = 0; k < a.quarter_turns; ++k) {
    image = rot90(image);
    mask = rot90(mask);
  }
  return {std::move(image), std::move(mask)};
}

template <typename Real>
std::pair<Tensor<Real>, LabelMap> augment(Tensor<Real> image, LabelMap mask, SplitMix64& rng) {
  return apply_augment(std::move(image), std::move(mask), draw_augment(rng));
}

}  // namespace cscde
