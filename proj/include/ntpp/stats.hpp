#pragma once

#include <functional>
#include <span>
#include <vector>

namespace ntpp::stats {

struct KsResult {
    double statistic{0.0};
    double p_value{1.0};
    std::size_t n{0};
};

/// Asymptotic Kolmogorov distribution tail P(K > x).
double kolmogorov_sf(double x);

/// One-sample test against a continuous CDF, using Stephens' finite-sample
/// correction of the asymptotic p-value.
KsResult ks_one_sample(std::span<const double> samples, const std::function<double(double)>& cdf);

/// One-sample test against the unit-rate exponential.
KsResult ks_exponential(std::span<const double> samples, double rate = 1.0);

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> xs);
/// Unbiased sample variance.
double variance(std::span<const double> xs);

} // namespace ntpp::stats
