#include "ntpp/hawkes.hpp"

#include "ntpp/error.hpp"
#include "ntpp/parallel.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace ntpp::hawkes {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix zeros(int k) {
    return Matrix(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k), 0.0));
}

std::size_t idx(int i) { return static_cast<std::size_t>(i); }

} // namespace

void validate(const HawkesParams& params) {
    const int k = params.dim();
    if (k < 1) {
        throw std::invalid_argument("HawkesParams: mu must be non-empty");
    }
    if (params.alpha.size() != idx(k) || params.beta.size() != idx(k)) {
        throw std::invalid_argument(fmt::format("HawkesParams: alpha and beta must be {0}x{0}", k));
    }
    for (int i = 0; i < k; ++i) {
        if (!(params.mu[idx(i)] >= 0.0) || !std::isfinite(params.mu[idx(i)])) {
            throw std::invalid_argument(fmt::format("HawkesParams: mu[{}] must be finite and >= 0", i));
        }
        if (params.alpha[idx(i)].size() != idx(k) || params.beta[idx(i)].size() != idx(k)) {
            throw std::invalid_argument(fmt::format("HawkesParams: alpha and beta must be {0}x{0}", k));
        }
        for (int j = 0; j < k; ++j) {
            const double a = params.alpha[idx(i)][idx(j)];
            const double b = params.beta[idx(i)][idx(j)];
            if (!(a >= 0.0) || !std::isfinite(a)) {
                throw std::invalid_argument(fmt::format("HawkesParams: alpha[{}][{}] must be finite and >= 0", i, j));
            }
            if (!(b > 0.0) || !std::isfinite(b)) {
                throw std::invalid_argument(fmt::format("HawkesParams: beta[{}][{}] must be finite and > 0", i, j));
            }
        }
    }
}

namespace {

Eigen::MatrixXd branching_matrix(const HawkesParams& params) {
    const int k = params.dim();
    Eigen::MatrixXd g(k, k);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            g(i, j) = params.alpha[idx(i)][idx(j)] / params.beta[idx(i)][idx(j)];
        }
    }
    return g;
}

} // namespace

double branching_spectral_radius(const HawkesParams& params) {
    validate(params);
    const Eigen::MatrixXd g = branching_matrix(params);
    const Eigen::EigenSolver<Eigen::MatrixXd> solver(g, false);
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

std::vector<double> stationary_rates(const HawkesParams& params) {
    validate(params);
    const int k = params.dim();
    const Eigen::MatrixXd g = branching_matrix(params);
    const Eigen::VectorXd mu = Eigen::Map<const Eigen::VectorXd>(params.mu.data(), k);
    const Eigen::VectorXd rates = (Eigen::MatrixXd::Identity(k, k) - g).partialPivLu().solve(mu);
    return {rates.data(), rates.data() + k};
}

data::EventSequence poisson_simulate(const PoissonParams& params, double t_end, Rng& rng) {
    if (!(t_end > 0.0)) {
        throw std::invalid_argument("poisson_simulate: t_end must be positive");
    }
    data::EventSequence seq;
    seq.t_end = t_end;
    if (!params.rate_fn) {
        double total = 0.0;
        for (double r : params.rates) {
            if (!(r >= 0.0)) {
                throw std::invalid_argument("poisson_simulate: rates must be >= 0");
            }
            total += r;
        }
        if (total <= 0.0) {
            return seq;
        }
        double t = 0.0;
        while (true) {
            t += rng.exponential(total);
            if (t > t_end) {
                break;
            }
            double u = rng.uniform() * total;
            int mark = 0;
            while (mark + 1 < static_cast<int>(params.rates.size()) && u > params.rates[idx(mark)]) {
                u -= params.rates[idx(mark)];
                ++mark;
            }
            seq.events.push_back({t, mark});
        }
        return seq;
    }
    const double bound = params.dominating_rate;
    if (!(bound > 0.0)) {
        return seq;
    }
    double t = 0.0;
    while (true) {
        t += rng.exponential(bound);
        if (t > t_end) {
            break;
        }
        const auto rates = params.rate_fn(t);
        double total = 0.0;
        for (double r : rates) {
            if (!(r >= 0.0)) {
                throw std::invalid_argument("poisson_simulate: rate function returned a negative rate");
            }
            total += r;
        }
        if (total > bound * (1.0 + 1e-12)) {
            throw std::domain_error(fmt::format(
                "poisson_simulate: rate {} at t={} exceeds dominating rate {}", total, t, bound));
        }
        double u = rng.uniform() * bound;
        if (u > total) {
            continue;
        }
        int mark = 0;
        while (mark + 1 < static_cast<int>(rates.size()) && u > rates[idx(mark)]) {
            u -= rates[idx(mark)];
            ++mark;
        }
        seq.events.push_back({t, mark});
    }
    return seq;
}

std::vector<double> hawkes_intensity(const HawkesParams& params, std::span<const data::Event> history,
                                     double t) {
    const int k = params.dim();
    if (!history.empty() && t < history.back().time) {
        throw std::invalid_argument(fmt::format("hawkes_intensity: query time {} precedes last event at {}", t,
                                                history.back().time));
    }
    std::vector<double> lambda = params.mu;
    for (const auto& e : history) {
        const double dt = t - e.time;
        for (int i = 0; i < k; ++i) {
            lambda[idx(i)] += params.alpha[idx(i)][idx(e.mark)] * std::exp(-params.beta[idx(i)][idx(e.mark)] * dt);
        }
    }
    return lambda;
}

data::EventSequence hawkes_simulate(const HawkesParams& params, double t_end, Rng& rng) {
    if (!(t_end > 0.0)) {
        throw std::invalid_argument("hawkes_simulate: t_end must be positive");
    }
    const int k = params.dim();
    data::EventSequence seq;
    seq.t_end = t_end;
    // excitation[i][j]: current contribution of past type-j events to lambda_i.
    Matrix excitation = zeros(k);
    std::vector<double> lambda(idx(k));
    auto total_intensity = [&] {
        double total = 0.0;
        for (int i = 0; i < k; ++i) {
            double li = params.mu[idx(i)];
            for (int j = 0; j < k; ++j) {
                li += excitation[idx(i)][idx(j)];
            }
            lambda[idx(i)] = li;
            total += li;
        }
        return total;
    };
    double t = 0.0;
    double bound = total_intensity();
    while (bound > 0.0) {
        const double candidate = t + rng.exponential(bound);
        if (candidate > t_end) {
            break;
        }
        const double dt = candidate - t;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
                excitation[idx(i)][idx(j)] *= std::exp(-params.beta[idx(i)][idx(j)] * dt);
            }
        }
        t = candidate;
        const double total = total_intensity();
        const double u = rng.uniform() * bound;
        if (u <= total) {
            double v = rng.uniform() * total;
            int mark = 0;
            while (mark + 1 < k && v > lambda[idx(mark)]) {
                v -= lambda[idx(mark)];
                ++mark;
            }
            seq.events.push_back({t, mark});
            for (int i = 0; i < k; ++i) {
                excitation[idx(i)][idx(mark)] += params.alpha[idx(i)][idx(mark)];
            }
        }
        bound = total_intensity();
    }
    return seq;
}

SimulationConfig default_simulation_config() {
    SimulationConfig c;
    c.params.mu = {0.1, 0.05};
    c.params.alpha = {{0.2, 0.0}, {0.0, 0.4}};
    c.params.beta = {{1.0, 1.0}, {1.0, 1.0}};
    c.t_end = 67.0;
    c.n_sequences = 25000;
    c.seed = 2022;
    return c;
}

data::Dataset simulate_dataset(const SimulationConfig& config, int threads) {
    validate(config.params);
    if (const double rho = branching_spectral_radius(config.params); rho >= 1.0) {
        std::cerr << fmt::format("warning: branching spectral radius {:.4f} >= 1, process is not stationary\n", rho);
    }
    data::Dataset ds;
    ds.class_count = config.params.dim();
    ds.sequences.resize(config.n_sequences);
    const Rng root(config.seed);
    parallel_for(config.n_sequences, threads, [&](std::size_t i) {
        Rng rng = root.split(i);
        auto seq = hawkes_simulate(config.params, config.t_end, rng);
        seq.id = std::to_string(i);
        ds.sequences[i] = std::move(seq);
    });
    return ds;
}

namespace {

/// Shared recursion for the value and (optionally) the gradient.
template <bool WithGrad>
double loglik_impl(const HawkesParams& params, const data::EventSequence& seq, LoglikGradient* grad) {
    const int k = params.dim();
    const auto& events = seq.events;
    Matrix r = zeros(k);  // sum over past type-j events of exp(-beta_ij * age)
    Matrix d = zeros(k);  // sum of age * exp(-beta_ij * age)
    double value = 0.0;
    bool zero_intensity = false;
    double prev_t = 0.0;
    int prev_mark = -1;
    for (const auto& e : events) {
        const double dt = e.time - prev_t;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
                const double a = r[idx(i)][idx(j)] + (j == prev_mark ? 1.0 : 0.0);
                const double decay = std::exp(-params.beta[idx(i)][idx(j)] * dt);
                if constexpr (WithGrad) {
                    d[idx(i)][idx(j)] = decay * (d[idx(i)][idx(j)] + dt * a);
                }
                r[idx(i)][idx(j)] = decay * a;
            }
        }
        const int i = e.mark;
        double lambda = params.mu[idx(i)];
        for (int j = 0; j < k; ++j) {
            lambda += params.alpha[idx(i)][idx(j)] * r[idx(i)][idx(j)];
        }
        if (!(lambda > 0.0)) {
            zero_intensity = true;
        } else {
            value += std::log(lambda);
            if constexpr (WithGrad) {
                grad->d_mu[idx(i)] += 1.0 / lambda;
                for (int j = 0; j < k; ++j) {
                    grad->d_alpha[idx(i)][idx(j)] += r[idx(i)][idx(j)] / lambda;
                    grad->d_beta[idx(i)][idx(j)] -= params.alpha[idx(i)][idx(j)] * d[idx(i)][idx(j)] / lambda;
                }
            }
        }
        prev_t = e.time;
        prev_mark = e.mark;
    }
    // Compensator.
    const double horizon = seq.t_end;
    for (int i = 0; i < k; ++i) {
        value -= params.mu[idx(i)] * horizon;
        if constexpr (WithGrad) {
            grad->d_mu[idx(i)] -= horizon;
        }
    }
    for (const auto& e : events) {
        const double tau = horizon - e.time;
        const int j = e.mark;
        for (int i = 0; i < k; ++i) {
            const double a = params.alpha[idx(i)][idx(j)];
            const double b = params.beta[idx(i)][idx(j)];
            const double decay = std::exp(-b * tau);
            const double frac = -std::expm1(-b * tau) / b;
            value -= a * frac;
            if constexpr (WithGrad) {
                grad->d_alpha[idx(i)][idx(j)] -= frac;
                grad->d_beta[idx(i)][idx(j)] -= a * (tau * decay / b - frac / b);
            }
        }
    }
    if (zero_intensity) {
        return kNegInf;
    }
    return value;
}

} // namespace

double hawkes_loglik(const HawkesParams& params, const data::EventSequence& seq) {
    return loglik_impl<false>(params, seq, nullptr);
}

LoglikGradient hawkes_loglik_grad(const HawkesParams& params, const data::EventSequence& seq) {
    const int k = params.dim();
    LoglikGradient g;
    g.d_mu.assign(idx(k), 0.0);
    g.d_alpha = zeros(k);
    g.d_beta = zeros(k);
    g.value = loglik_impl<true>(params, seq, &g);
    return g;
}

double dataset_loglik(const HawkesParams& params, const data::Dataset& dataset) {
    double total = 0.0;
    for (const auto& s : dataset.sequences) {
        total += hawkes_loglik(params, s);
    }
    return total;
}

namespace {

enum class Slot { Mu, Alpha, Beta };

struct FreeParam {
    Slot slot;
    int i;
    int j;
};

double& slot_ref(HawkesParams& p, const FreeParam& f) {
    switch (f.slot) {
    case Slot::Mu:
        return p.mu[idx(f.i)];
    case Slot::Alpha:
        return p.alpha[idx(f.i)][idx(f.j)];
    case Slot::Beta:
        break;
    }
    return p.beta[idx(f.i)][idx(f.j)];
}

double slot_value(const HawkesParams& p, const FreeParam& f) {
    return slot_ref(const_cast<HawkesParams&>(p), f);
}

double slot_grad(const LoglikGradient& g, const FreeParam& f) {
    switch (f.slot) {
    case Slot::Mu:
        return g.d_mu[idx(f.i)];
    case Slot::Alpha:
        return g.d_alpha[idx(f.i)][idx(f.j)];
    case Slot::Beta:
        break;
    }
    return g.d_beta[idx(f.i)][idx(f.j)];
}

struct Evaluation {
    double value;  // mean log-likelihood per event
    std::vector<double> grad;  // w.r.t. log-parameters
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

} // namespace

FitResult hawkes_fit(const data::Dataset& dataset, const HawkesParams& init, const FitOptions& options) {
    validate(init);
    if (dataset.sequences.empty()) {
        throw std::invalid_argument("hawkes_fit: dataset is empty");
    }
    const int k = init.dim();
    if (dataset.class_count > k) {
        throw std::invalid_argument("hawkes_fit: dataset has more classes than the model");
    }
    FitResult result;
    result.n_events = dataset.event_count();
    const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(result.n_events, 1));

    std::vector<FreeParam> free;
    bool any_excitation = false;
    for (int i = 0; i < k; ++i) {
        if (options.fit_mu) {
            if (!(init.mu[idx(i)] > 0.0)) {
                throw std::invalid_argument("hawkes_fit: initial mu must be positive for free entries");
            }
            free.push_back({Slot::Mu, i, 0});
        }
    }
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const bool structural_zero = options.keep_zero_alpha && init.alpha[idx(i)][idx(j)] == 0.0;
            if (structural_zero) {
                continue;
            }
            any_excitation = true;
            if (options.fit_alpha) {
                if (!(init.alpha[idx(i)][idx(j)] > 0.0)) {
                    throw std::invalid_argument("hawkes_fit: free alpha entries need a positive initial value");
                }
                free.push_back({Slot::Alpha, i, j});
            }
            if (options.fit_beta) {
                free.push_back({Slot::Beta, i, j});
            }
        }
    }

    HawkesParams current = init;
    const double init_value = dataset_loglik(current, dataset);
    if (!std::isfinite(init_value)) {
        throw NumericalError("hawkes_fit: non-finite log-likelihood at the initial parameters");
    }

    if (!any_excitation && options.fit_mu) {
        // Poisson submodel: closed-form MLE, events per unit of exposure.
        double exposure = 0.0;
        std::vector<double> counts(idx(k), 0.0);
        for (const auto& s : dataset.sequences) {
            exposure += s.t_end;
            for (const auto& e : s.events) {
                counts[idx(e.mark)] += 1.0;
            }
        }
        for (int i = 0; i < k; ++i) {
            current.mu[idx(i)] = counts[idx(i)] / exposure;
        }
        result.params = current;
        result.loglik = dataset_loglik(current, dataset);
        result.trace = {init_value * scale, result.loglik * scale};
        result.converged = true;
        return result;
    }

    auto evaluate = [&](const HawkesParams& p) {
        Evaluation ev{0.0, std::vector<double>(free.size(), 0.0)};
        for (const auto& s : dataset.sequences) {
            const auto g = hawkes_loglik_grad(p, s);
            ev.value += g.value;
            for (std::size_t f = 0; f < free.size(); ++f) {
                ev.grad[f] += slot_grad(g, free[f]);
            }
        }
        ev.value *= scale;
        for (std::size_t f = 0; f < free.size(); ++f) {
            // chain rule into log-space
            ev.grad[f] *= scale * slot_value(p, free[f]);
        }
        return ev;
    };
    auto with_log_params = [&](const std::vector<double>& theta) {
        HawkesParams p = current;
        for (std::size_t f = 0; f < free.size(); ++f) {
            slot_ref(p, free[f]) = std::exp(theta[f]);
        }
        return p;
    };

    std::vector<double> theta(free.size());
    for (std::size_t f = 0; f < free.size(); ++f) {
        theta[f] = std::log(slot_ref(current, free[f]));
    }
    Evaluation ev = evaluate(current);
    result.trace.push_back(ev.value);

    // L-BFGS on the negated objective.
    std::deque<std::vector<double>> s_hist;
    std::deque<std::vector<double>> y_hist;
    const std::size_t n = free.size();
    int iter = 0;
    auto grad_norm = [](const std::vector<double>& g) { return std::sqrt(dot(g, g)); };
    while (iter < options.max_iterations) {
        if (grad_norm(ev.grad) < options.gradient_tolerance) {
            result.converged = true;
            break;
        }
        // Descent direction for F = -f, with gradient G = -g.
        std::vector<double> q(n);
        for (std::size_t f = 0; f < n; ++f) {
            q[f] = -ev.grad[f];
        }
        std::vector<double> alphas(s_hist.size());
        for (std::size_t m = s_hist.size(); m-- > 0;) {
            const double rho = 1.0 / dot(y_hist[m], s_hist[m]);
            alphas[m] = rho * dot(s_hist[m], q);
            for (std::size_t f = 0; f < n; ++f) {
                q[f] -= alphas[m] * y_hist[m][f];
            }
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
        } else {
            gamma = 1.0 / std::max(1.0, grad_norm(ev.grad));
        }
        for (auto& v : q) {
            v *= gamma;
        }
        for (std::size_t m = 0; m < s_hist.size(); ++m) {
            const double rho = 1.0 / dot(y_hist[m], s_hist[m]);
            const double beta = rho * dot(y_hist[m], q);
            for (std::size_t f = 0; f < n; ++f) {
                q[f] += s_hist[m][f] * (alphas[m] - beta);
            }
        }
        std::vector<double> dir(n);
        for (std::size_t f = 0; f < n; ++f) {
            dir[f] = -q[f];
        }
        double slope = dot(ev.grad, dir);  // directional derivative of f
        if (!(slope > 0.0)) {
            s_hist.clear();
            y_hist.clear();
            dir = ev.grad;
            const double gn = grad_norm(ev.grad);
            for (auto& v : dir) {
                v /= std::max(1.0, gn);
            }
            slope = dot(ev.grad, dir);
        }
        double step = 1.0;
        bool accepted = false;
        std::vector<double> next_theta(n);
        Evaluation next{};
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t f = 0; f < n; ++f) {
                next_theta[f] = theta[f] + step * dir[f];
            }
            const HawkesParams trial = with_log_params(next_theta);
            next = evaluate(trial);
            if (std::isfinite(next.value) && next.value >= ev.value + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            break;
        }
        std::vector<double> s(n);
        std::vector<double> y(n);
        for (std::size_t f = 0; f < n; ++f) {
            s[f] = next_theta[f] - theta[f];
            y[f] = -(next.grad[f] - ev.grad[f]);
        }
        if (dot(s, y) > 1e-16) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            if (s_hist.size() > static_cast<std::size_t>(options.lbfgs_memory)) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
        }
        theta = next_theta;
        ev = std::move(next);
        result.trace.push_back(ev.value);
        ++iter;
    }
    if (!result.converged && grad_norm(ev.grad) < options.gradient_tolerance) {
        result.converged = true;
    }
    result.params = with_log_params(theta);
    result.iterations = iter;
    result.gradient_norm = grad_norm(ev.grad);
    result.loglik = dataset_loglik(result.params, dataset);
    return result;
}

namespace {

/// Compensator increments between events; `tail` receives Lambda(t_end) - Lambda(t_last).
std::vector<double> rescale_impl(const HawkesParams& params, const data::EventSequence& seq, double& tail) {
    const int k = params.dim();
    Matrix excitation = zeros(k);
    const double mu_total = std::accumulate(params.mu.begin(), params.mu.end(), 0.0);
    std::vector<double> out;
    out.reserve(seq.events.size());
    auto advance = [&](double dt) {
        double inc = mu_total * dt;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
                const double b = params.beta[idx(i)][idx(j)];
                double& x = excitation[idx(i)][idx(j)];
                inc += x * (-std::expm1(-b * dt)) / b;
                x *= std::exp(-b * dt);
            }
        }
        return inc;
    };
    double prev_t = 0.0;
    for (const auto& e : seq.events) {
        out.push_back(advance(e.time - prev_t));
        for (int i = 0; i < k; ++i) {
            excitation[idx(i)][idx(e.mark)] += params.alpha[idx(i)][idx(e.mark)];
        }
        prev_t = e.time;
    }
    tail = advance(std::max(0.0, seq.t_end - prev_t));
    return out;
}

} // namespace

std::vector<double> time_rescale(const HawkesParams& params, const data::EventSequence& seq) {
    double tail = 0.0;
    return rescale_impl(params, seq, tail);
}

std::vector<double> time_rescale(const HawkesParams& params, const data::Dataset& dataset) {
    std::vector<double> out;
    double carry = 0.0;
    for (const auto& s : dataset.sequences) {
        double tail = 0.0;
        auto part = rescale_impl(params, s, tail);
        if (!part.empty()) {
            part.front() += carry;
            carry = 0.0;
        }
        carry += tail;
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

} // namespace ntpp::hawkes
