#pragma once

#include "ntpp/data.hpp"
#include "ntpp/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace ntpp::hawkes {

using Matrix = std::vector<std::vector<double>>;

/// Multivariate Hawkes process with exponential kernels:
///   lambda_i(t) = mu[i] + sum_{t_m < t} alpha[i][k_m] * exp(-beta[i][k_m] * (t - t_m))
/// alpha[i][j] is the jump a type-j event adds to the type-i intensity.
struct HawkesParams {
    std::vector<double> mu;
    Matrix alpha;
    Matrix beta;

    int dim() const { return static_cast<int>(mu.size()); }

    friend bool operator==(const HawkesParams&, const HawkesParams&) = default;
};

/// Throws std::invalid_argument unless mu >= 0, alpha >= 0, beta > 0 and the
/// shapes agree.
void validate(const HawkesParams& params);

/// Spectral radius of the branching matrix alpha / beta.
double branching_spectral_radius(const HawkesParams& params);

/// Stationary rates (I - alpha/beta)^{-1} mu. Only meaningful when the
/// branching spectral radius is below one.
std::vector<double> stationary_rates(const HawkesParams& params);

/// Homogeneous rates, or an inhomogeneous rate function thinned against a
/// constant bound on its total.
struct PoissonParams {
    std::vector<double> rates;
    std::function<std::vector<double>(double)> rate_fn;
    double dominating_rate{0.0};

    static PoissonParams homogeneous(std::vector<double> rates) { return {std::move(rates), {}, 0.0}; }
};

data::EventSequence poisson_simulate(const PoissonParams& params, double t_end, Rng& rng);

/// Intensity vector at t given the events in `history` (all must be at or
/// before t). Throws std::invalid_argument if t precedes the last event.
std::vector<double> hawkes_intensity(const HawkesParams& params, std::span<const data::Event> history,
                                     double t);

/// Exact sample on [0, t_end] by Ogata thinning. The bound is the total
/// intensity right after the current point, which dominates until the next
/// event since all kernels decay.
data::EventSequence hawkes_simulate(const HawkesParams& params, double t_end, Rng& rng);

struct SimulationConfig {
    HawkesParams params;
    double t_end{67.0};
    std::size_t n_sequences{25000};
    std::uint64_t seed{0};

    friend bool operator==(const SimulationConfig&, const SimulationConfig&) = default;
};

/// Generation config with the two-process defaults used for the synthetic benchmark.
SimulationConfig default_simulation_config();

/// Sequence i is drawn from Rng(seed).split(i), so results do not depend on
/// the thread count.
data::Dataset simulate_dataset(const SimulationConfig& config, int threads = 1);

/// sum_n log lambda_{k_n}(t_n) - sum_k int_0^{t_end} lambda_k, by the O(n K^2)
/// exponential-kernel recursion. Returns -infinity if an event lands where
/// its intensity is zero.
double hawkes_loglik(const HawkesParams& params, const data::EventSequence& seq);

struct LoglikGradient {
    double value{0.0};
    std::vector<double> d_mu;
    Matrix d_alpha;
    Matrix d_beta;
};

/// Log-likelihood together with its analytic gradient.
LoglikGradient hawkes_loglik_grad(const HawkesParams& params, const data::EventSequence& seq);

struct FitOptions {
    double gradient_tolerance{1e-6};
    int max_iterations{500};
    int lbfgs_memory{10};
    /// alpha entries that are exactly zero in the initial guess stay zero,
    /// and the matching beta (which no longer enters the likelihood) is held.
    bool keep_zero_alpha{true};
    bool fit_mu{true};
    bool fit_alpha{true};
    bool fit_beta{true};
};

struct FitResult {
    HawkesParams params;
    /// Total log-likelihood over the dataset at `params`.
    double loglik{-std::numeric_limits<double>::infinity()};
    /// Per-event mean objective after every accepted step (starts with init).
    std::vector<double> trace;
    double gradient_norm{0.0};
    int iterations{0};
    bool converged{false};
    std::size_t n_events{0};
};

/// Maximum likelihood by L-BFGS over log-parameters (positivity by
/// construction) with a backtracking line search that only accepts
/// improving steps. The objective is the mean log-likelihood per event, and
/// the gradient-norm tolerance applies to that scale.
FitResult hawkes_fit(const data::Dataset& dataset, const HawkesParams& init, const FitOptions& options = {});

double dataset_loglik(const HawkesParams& params, const data::Dataset& dataset);

/// Compensator increments Lambda(t_i) - Lambda(t_{i-1}) of the pooled
/// process, starting from Lambda(0) = 0. Unit-rate exponential under the
/// true model.
std::vector<double> time_rescale(const HawkesParams& params, const data::EventSequence& seq);

/// Pooled increments over a dataset. The rescaled sequences are laid end
/// to end on one axis (each sequence's unobserved tail Lambda(t_end) -
/// Lambda(t_last) is carried into the next sequence's first increment), so
/// under the true model the result is i.i.d. Exponential(1) even for short,
/// censored sequences.
std::vector<double> time_rescale(const HawkesParams& params, const data::Dataset& dataset);

// ---------------------------------------------------------------------------
// JSON forms.

/// {"mu": [...], "alpha": [[...], ...], "beta": [[...], ...]}. A number for
/// beta applies to every pair. Errors name the offending field.
nlohmann::json to_json(const HawkesParams& params);
HawkesParams params_from_json(const nlohmann::json& j);

/// {"params": {...}, "t_end": num, "n_sequences": int, "seed": int}; missing
/// fields keep the values of `defaults`.
nlohmann::json to_json(const SimulationConfig& config);
SimulationConfig simulation_config_from_json(const nlohmann::json& j,
                                             SimulationConfig defaults = default_simulation_config());

} // namespace ntpp::hawkes
