#pragma once

#include "popgrid/nn/layers.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace testutil {

inline popgrid::nn::Tensor random_tensor(int c, int h, int w, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    popgrid::nn::Tensor t(c, h, w);
    for (auto& v : t.data) v = d(rng);
    return t;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

/// Fresh empty directory under the test binary's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::current_path() / ("scratch_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
