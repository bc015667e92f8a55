#include "ntpp/hawkes.hpp"
#include "ntpp/stats.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace ntpp;
using namespace ntpp::hawkes;
using data::Event;
using data::EventSequence;

namespace {

HawkesParams benchmark_params() { return default_simulation_config().params; }

/// O(n^2) evaluation straight from the intensity and compensator formulas.
double brute_force_loglik(const HawkesParams& p, const EventSequence& seq) {
    const int k = p.dim();
    double ll = 0.0;
    for (std::size_t n = 0; n < seq.size(); ++n) {
        const auto& e = seq.events[n];
        double lam = p.mu[e.mark];
        for (std::size_t m = 0; m < n; ++m) {
            const auto& h = seq.events[m];
            lam += p.alpha[e.mark][h.mark] * std::exp(-p.beta[e.mark][h.mark] * (e.time - h.time));
        }
        ll += std::log(lam);
    }
    for (int i = 0; i < k; ++i) {
        double comp = p.mu[i] * seq.t_end;
        for (const auto& h : seq.events) {
            const double b = p.beta[i][h.mark];
            comp += p.alpha[i][h.mark] / b * (1.0 - std::exp(-b * (seq.t_end - h.time)));
        }
        ll -= comp;
    }
    return ll;
}

HawkesParams random_params(int k, Rng& rng) {
    HawkesParams p;
    p.mu.resize(k);
    p.alpha.assign(k, std::vector<double>(k));
    p.beta.assign(k, std::vector<double>(k));
    for (int i = 0; i < k; ++i) {
        p.mu[i] = 0.05 + rng.uniform();
        for (int j = 0; j < k; ++j) {
            p.alpha[i][j] = 0.3 * rng.uniform();
            p.beta[i][j] = 0.5 + 2.0 * rng.uniform();
        }
    }
    return p;
}

EventSequence random_sequence(int k, std::size_t n, Rng& rng) {
    EventSequence s;
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        t += rng.exponential(1.0);
        s.events.push_back({t, static_cast<int>(rng.below(static_cast<std::uint64_t>(k)))});
    }
    s.t_end = t + rng.exponential(1.0);
    return s;
}

} // namespace

TEST_CASE("poisson_simulate") {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        CHECK(poisson_simulate(PoissonParams::homogeneous({0.0}), 100.0, rng).empty());
    }
    const auto long_run = poisson_simulate(PoissonParams::homogeneous({0.5}), 1e6, rng);
    CHECK(std::abs(static_cast<double>(long_run.size()) / 1e6 - 0.5) < 0.002);

    std::vector<double> counts;
    for (int r = 0; r < 10000; ++r) {
        counts.push_back(static_cast<double>(poisson_simulate(PoissonParams::homogeneous({2.0}), 1.0, rng).size()));
    }
    CHECK(std::abs(stats::mean(counts) - 2.0) < 0.05);
    CHECK(std::abs(stats::variance(counts) - 2.0) < 0.15);
}

TEST_CASE("inhomogeneous poisson thinning") {
    Rng rng(4);
    PoissonParams p;
    p.rate_fn = [](double t) { return std::vector<double>{1.0 + std::sin(t)}; };
    p.dominating_rate = 2.0;
    double total = 0.0;
    const double horizon = 2.0 * std::numbers::pi * 10000.0;
    total += static_cast<double>(poisson_simulate(p, horizon, rng).size());
    CHECK(std::abs(total / horizon - 1.0) < 0.015);

    p.dominating_rate = 1.5;
    CHECK_THROWS(poisson_simulate(p, 100.0, rng));
}

TEST_CASE("hawkes_intensity evaluates the exponential kernel sum") {
    const HawkesParams p = benchmark_params();
    const auto lam0 = hawkes_intensity(p, {}, 3.0);
    CHECK(lam0[0] == doctest::Approx(0.1));
    CHECK(lam0[1] == doctest::Approx(0.05));

    const std::vector<Event> one{{0.0, 0}};
    const auto at0 = hawkes_intensity(p, one, 0.0);
    CHECK(at0[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(at0[1] == doctest::Approx(0.05).epsilon(1e-12));
    const auto at_ln2 = hawkes_intensity(p, one, std::log(2.0));
    CHECK(at_ln2[0] == doctest::Approx(0.2).epsilon(1e-12));

    CHECK_THROWS(hawkes_intensity(p, one, -0.5));

    Rng rng(8);
    for (int r = 0; r < 50; ++r) {
        const HawkesParams q = random_params(3, rng);
        const auto seq = random_sequence(3, 10, rng);
        const auto lam = hawkes_intensity(q, seq.events, seq.t_end);
        for (int i = 0; i < 3; ++i) {
            CHECK(lam[i] >= q.mu[i]);
        }
    }
}

TEST_CASE("stationary rates and spectral radius") {
    const HawkesParams p = benchmark_params();
    const auto rates = stationary_rates(p);
    CHECK(rates[0] == doctest::Approx(0.125));
    CHECK(rates[1] == doctest::Approx(0.05 / 0.6));
    CHECK(branching_spectral_radius(p) == doctest::Approx(0.4));
}

TEST_CASE("hawkes_simulate matches the stationary rates and is reproducible") {
    const HawkesParams p = benchmark_params();
    Rng rng(2024);
    const double horizon = 4e5;
    const auto seq = hawkes_simulate(p, horizon, rng);
    std::vector<double> counts(2, 0.0);
    for (const auto& e : seq.events) {
        counts[e.mark] += 1.0;
    }
    CHECK(std::abs(counts[0] / horizon / 0.125 - 1.0) < 0.03);
    CHECK(std::abs(counts[1] / horizon / (0.05 / 0.6) - 1.0) < 0.03);

    Rng a(99), b(99);
    CHECK(hawkes_simulate(p, 500.0, a) == hawkes_simulate(p, 500.0, b));

    SimulationConfig cfg = default_simulation_config();
    cfg.n_sequences = 64;
    CHECK(simulate_dataset(cfg, 1) == simulate_dataset(cfg, 3));
}

TEST_CASE("hawkes with zero excitation is a poisson process") {
    HawkesParams p = benchmark_params();
    p.alpha = {{0, 0}, {0, 0}};
    Rng r1(5), r2(6);
    const auto h = hawkes_simulate(p, 20000.0, r1);
    const auto q = poisson_simulate(PoissonParams::homogeneous(p.mu), 20000.0, r2);
    auto gaps = [](const EventSequence& s) {
        std::vector<double> g;
        for (std::size_t i = 1; i < s.size(); ++i) {
            g.push_back(s.events[i].time - s.events[i - 1].time);
        }
        return g;
    };
    CHECK(stats::ks_two_sample(gaps(h), gaps(q)).p_value > 0.01);
}

TEST_CASE("hawkes_loglik closed-form cases") {
    HawkesParams uni{{0.1}, {{0.0}}, {{1.0}}};
    EventSequence one;
    one.events = {{1.0, 0}};
    one.t_end = 2.0;
    CHECK(hawkes_loglik(uni, one) == doctest::Approx(std::log(0.1) - 0.2).epsilon(1e-14));
    CHECK(hawkes_loglik(uni, one) == doctest::Approx(-2.50259).epsilon(1e-5));

    EventSequence empty;
    empty.t_end = 10.0;
    CHECK(hawkes_loglik(uni, empty) == doctest::Approx(-1.0).epsilon(1e-14));

    HawkesParams dead{{0.0, 0.1}, {{0, 0}, {0, 0}}, {{1, 1}, {1, 1}}};
    EventSequence hit;
    hit.events = {{1.0, 0}};
    hit.t_end = 2.0;
    CHECK(hawkes_loglik(dead, hit) == -std::numeric_limits<double>::infinity());
}

TEST_CASE("recursive loglik equals the brute-force double loop") {
    Rng rng(31);
    double worst = 0.0;
    for (int r = 0; r < 200; ++r) {
        const int k = 1 + static_cast<int>(rng.below(4));
        const HawkesParams p = random_params(k, rng);
        const auto seq = random_sequence(k, rng.below(201), rng);
        const double a = hawkes_loglik(p, seq);
        const double b = brute_force_loglik(p, seq);
        worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(b)));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("loglik gradient matches central differences") {
    Rng rng(12);
    double worst = 0.0;
    for (int r = 0; r < 20; ++r) {
        const int k = 1 + static_cast<int>(rng.below(3));
        const HawkesParams p = random_params(k, rng);
        const auto seq = random_sequence(k, 30, rng);
        const LoglikGradient g = hawkes_loglik_grad(p, seq);
        CHECK(g.value == doctest::Approx(hawkes_loglik(p, seq)).epsilon(1e-13));
        auto fd = [&](auto mutate, double analytic) {
            HawkesParams up = p, down = p;
            const double h = 1e-5;
            mutate(up, h);
            mutate(down, -h);
            const double num = (hawkes_loglik(up, seq) - hawkes_loglik(down, seq)) / (2 * h);
            worst = std::max(worst, std::abs(num - analytic) / std::max({1.0, std::abs(num), std::abs(analytic)}));
        };
        for (int i = 0; i < k; ++i) {
            fd([i](HawkesParams& q, double h) { q.mu[i] += h; }, g.d_mu[i]);
            for (int j = 0; j < k; ++j) {
                fd([i, j](HawkesParams& q, double h) { q.alpha[i][j] += h; }, g.d_alpha[i][j]);
                fd([i, j](HawkesParams& q, double h) { q.beta[i][j] += h; }, g.d_beta[i][j]);
            }
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("hawkes_fit Poisson submodel has the closed-form rate") {
    HawkesParams p = benchmark_params();
    p.alpha = {{0, 0}, {0, 0}};
    SimulationConfig cfg{p, 50.0, 200, 3};
    const auto ds = simulate_dataset(cfg);
    HawkesParams init = p;
    init.mu = {0.3, 0.3};
    const FitResult fit = hawkes_fit(ds, init);
    std::vector<double> count(2, 0.0);
    double exposure = 0.0;
    for (const auto& s : ds.sequences) {
        exposure += s.t_end;
        for (const auto& e : s.events) {
            count[e.mark] += 1.0;
        }
    }
    CHECK(fit.params.mu[0] == doctest::Approx(count[0] / exposure).epsilon(1e-12));
    CHECK(fit.params.mu[1] == doctest::Approx(count[1] / exposure).epsilon(1e-12));
}

TEST_CASE("hawkes_fit improves monotonically and beats the truth on its training data") {
    SimulationConfig cfg = default_simulation_config();
    cfg.n_sequences = 400;
    cfg.seed = 77;
    const auto ds = simulate_dataset(cfg);
    HawkesParams init = cfg.params;
    init.mu = {0.15, 0.08};
    init.alpha = {{0.3, 0.0}, {0.0, 0.3}};
    init.beta = {{2.0, 1.0}, {1.0, 0.6}};
    const FitResult fit = hawkes_fit(ds, init);
    for (std::size_t i = 1; i < fit.trace.size(); ++i) {
        CHECK(fit.trace[i] >= fit.trace[i - 1]);
    }
    const double n = static_cast<double>(ds.event_count());
    CHECK(fit.loglik / n >= dataset_loglik(cfg.params, ds) / n - 1e-6);
    CHECK(fit.params.alpha[0][1] == 0.0);
    CHECK(fit.params.alpha[1][0] == 0.0);
}

TEST_CASE("time_rescale") {
    Rng rng(3);
    const auto seq = poisson_simulate(PoissonParams::homogeneous({1.0}), 100.0, rng);
    HawkesParams unit{{1.0}, {{0.0}}, {{1.0}}};
    const auto inc = time_rescale(unit, seq);
    REQUIRE(inc.size() == seq.size());
    double prev = 0.0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        CHECK(inc[i] == doctest::Approx(seq.events[i].time - prev).epsilon(1e-12));
        prev = seq.events[i].time;
    }

    SimulationConfig cfg = default_simulation_config();
    cfg.n_sequences = 800;
    cfg.seed = 5;
    const auto ds = simulate_dataset(cfg);
    const auto good = time_rescale(cfg.params, ds);
    CHECK(good.size() >= 10000);
    CHECK(stats::ks_exponential(good).p_value > 0.01);

    HawkesParams wrong = cfg.params;
    wrong.mu = {0.2, 0.1};
    CHECK(stats::ks_exponential(time_rescale(wrong, ds)).p_value < 0.001);
}

TEST_CASE("kolmogorov distribution") {
    CHECK(stats::kolmogorov_sf(0.0) == doctest::Approx(1.0));
    CHECK(stats::kolmogorov_sf(1.3581) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(stats::kolmogorov_sf(1.6276) == doctest::Approx(0.01).epsilon(1e-3));
    CHECK(stats::kolmogorov_sf(0.8) == doctest::Approx(0.5441).epsilon(1e-3));
    Rng rng(1);
    std::vector<double> u(5000);
    for (auto& x : u) {
        x = rng.exponential(1.0);
    }
    CHECK(stats::ks_exponential(u).p_value > 0.01);
    CHECK(stats::ks_exponential(u, 1.3).p_value < 0.001);
}

TEST_CASE("hawkes params and simulation config json") {
    const SimulationConfig cfg = default_simulation_config();
    CHECK(simulation_config_from_json(to_json(cfg)) == cfg);
    CHECK(params_from_json(to_json(cfg.params)) == cfg.params);

    const auto scalar_beta = params_from_json(nlohmann::json::parse(R"({"mu": [0.1, 0.2], "alpha": 0.0, "beta": 2})"));
    CHECK(scalar_beta.beta == Matrix{{2.0, 2.0}, {2.0, 2.0}});
    CHECK(scalar_beta.alpha == Matrix{{0.0, 0.0}, {0.0, 0.0}});

    auto rejects = [](const char* text, const std::string& needle) {
        try {
            params_from_json(nlohmann::json::parse(text));
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
            return;
        }
        FAIL("accepted " << text);
    };
    rejects(R"({"mu": [0.1, 0.2], "alpha": [[0, 0], [-1, 0]], "beta": 1})", "alpha[1][0]");
    rejects(R"({"mu": [0.1, 0.2], "alpha": [[0, 0]], "beta": 1})", "alpha");
    rejects(R"({"mu": [0.1], "alpha": 0, "beta": 0})", "beta[0][0]");
    rejects(R"({"mu": [0.1], "alpha": 0})", "missing field \"beta\"");
    rejects(R"({"mu": [0.1], "alpha": 0, "beta": 1, "gamma": 1})", "unknown field \"gamma\"");

    const auto partial = simulation_config_from_json(nlohmann::json::parse(R"({"seed": 9, "t_end": 10})"));
    CHECK(partial.seed == 9);
    CHECK(partial.t_end == 10.0);
    CHECK(partial.params == cfg.params);
    CHECK(partial.n_sequences == cfg.n_sequences);
    CHECK_THROWS_AS(simulation_config_from_json(nlohmann::json::parse(R"({"seed": -1})")), std::invalid_argument);
    CHECK_THROWS_AS(simulation_config_from_json(nlohmann::json::parse(R"({"t_end": 0})")), std::invalid_argument);
    CHECK_THROWS_AS(simulation_config_from_json(nlohmann::json::parse(R"({"sequences": 5})")), std::invalid_argument);
}
