#pragma once

#include <string>
#include <utility>

#include "hafusion/rng.hpp"
#include "hafusion/tape.hpp"
#include "hafusion/tensor.hpp"

namespace hafusion::model {

// Uniform Glorot initialization with explicit fans; biases and layer-norm
// shifts start at zero, layer-norm gains at one.
template <typename T>
Parameter<T> glorot(std::string name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                    Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-limit, limit));
  return Parameter<T>(std::move(name), std::move(t));
}

template <typename T>
Parameter<T> constant_param(std::string name, Shape shape, T value) {
  return Parameter<T>(std::move(name), Tensor<T>(std::move(shape), value));
}

}  // namespace hafusion::model
