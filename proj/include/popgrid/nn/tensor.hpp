#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace popgrid::nn {

/// Single-sample activation volume, planar (channel, row, col).
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int channels, int height, int width, double fill = 0.0)
        : c(channels), h(height), w(width), data(static_cast<std::size_t>(channels) * height * width, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    double& at(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

/// A named parameter or buffer with its gradient accumulator.
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    int group = 0;          ///< learning-rate group: 0 = stem, 1..S = stages, S+1 = head
    bool trainable = true;  ///< false for buffers such as frozen normalisation statistics

    Param() = default;
    Param(std::string n, std::vector<int> s, bool train = true);
    std::size_t numel() const { return value.size(); }
    void zero_grad();
};

struct ForwardContext {
    /// Source of dropout noise; dropout is inactive while null.
    std::mt19937_64* rng = nullptr;
};

std::string shape_string(const std::vector<int>& shape);

}  // namespace popgrid::nn
