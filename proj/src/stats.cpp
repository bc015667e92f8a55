#include "ntpp/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ntpp::stats {

double kolmogorov_sf(double x) {
    if (x <= 0.0) {
        return 1.0;
    }
    if (x < 1.18) {
        // Jacobi-theta form of the CDF converges fast for small x.
        const double c = std::numbers::pi * std::numbers::pi / (8.0 * x * x);
        double cdf = 0.0;
        for (int k = 1; k <= 20; ++k) {
            const double m = 2.0 * k - 1.0;
            cdf += std::exp(-m * m * c);
        }
        cdf *= std::sqrt(2.0 * std::numbers::pi) / x;
        return std::clamp(1.0 - cdf, 0.0, 1.0);
    }
    double sum = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * k * k * x * x);
        sum += (k % 2 == 1 ? term : -term);
        if (term < 1e-18) {
            break;
        }
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

namespace {

double corrected_p(double d, double n_eff) {
    const double rn = std::sqrt(n_eff);
    return kolmogorov_sf((rn + 0.12 + 0.11 / rn) * d);
}

} // namespace

KsResult ks_one_sample(std::span<const double> samples, const std::function<double(double)>& cdf) {
    std::vector<double> xs(samples.begin(), samples.end());
    if (xs.empty()) {
        return {};
    }
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    return {d, corrected_p(d, n), xs.size()};
}

KsResult ks_exponential(std::span<const double> samples, double rate) {
    return ks_one_sample(samples, [rate](double x) { return x <= 0.0 ? 0.0 : -std::expm1(-rate * x); });
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) {
        return {};
    }
    std::vector<double> xa(a.begin(), a.end());
    std::vector<double> xb(b.begin(), b.end());
    std::sort(xa.begin(), xa.end());
    std::sort(xb.begin(), xb.end());
    const double na = static_cast<double>(xa.size());
    const double nb = static_cast<double>(xb.size());
    std::size_t i = 0;
    std::size_t j = 0;
    double d = 0.0;
    while (i < xa.size() && j < xb.size()) {
        const double x = std::min(xa[i], xb[j]);
        while (i < xa.size() && xa[i] <= x) {
            ++i;
        }
        while (j < xb.size() && xb[j] <= x) {
            ++j;
        }
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return {d, corrected_p(d, na * nb / (na + nb)), xa.size() + xb.size()};
}

double mean(std::span<const double> xs) {
    if (xs.empty()) {
        throw std::invalid_argument("mean of empty sample");
    }
    double s = 0.0;
    for (double x : xs) {
        s += x;
    }
    return s / static_cast<double>(xs.size());
}

double variance(std::span<const double> xs) {
    if (xs.size() < 2) {
        throw std::invalid_argument("variance needs at least two samples");
    }
    const double m = mean(xs);
    double s = 0.0;
    for (double x : xs) {
        s += (x - m) * (x - m);
    }
    return s / static_cast<double>(xs.size() - 1);
}

} // namespace ntpp::stats
