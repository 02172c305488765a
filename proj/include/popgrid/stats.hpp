#pragma once

#include <span>
#include <vector>

namespace popgrid::stats {

double mean(std::span<const double> v);
/// Unbiased (n - 1) standard deviation; 0 for fewer than two values.
double sample_std(std::span<const double> v);
/// Linear-interpolation quantile (type 7): position q * (n - 1) in the sorted values.
double quantile(std::vector<double> v, double q);
/// Mean of the two central order statistics for even counts.
double median(std::vector<double> v);
double pearson(std::span<const double> a, std::span<const double> b);
/// Ranks 1..n with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> v);
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace popgrid::stats
