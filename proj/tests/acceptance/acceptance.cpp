#include "ntpp/autodiff.hpp"
#include "ntpp/data.hpp"
#include "ntpp/evaluation.hpp"
#include "ntpp/hawkes.hpp"
#include "ntpp/model.hpp"
#include "ntpp/rng.hpp"
#include "ntpp/runtime.hpp"
#include "ntpp/stats.hpp"
#include "ntpp/training.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace ntpp;

namespace {

// Pinned tolerances and limits. Changing any of these changes what "pass" means.
constexpr double kC1RateTolerance = 0.03;
constexpr double kC1MinExposure = 1e6;
constexpr double kC2Tolerance = 1e-10;
constexpr std::size_t kC2Sequences = 1000;
constexpr std::size_t kC2MaxLength = 200;
constexpr std::size_t kC3Sequences = 2000;
constexpr double kC3RelativeTolerance = 0.10;
constexpr double kC3MinPValue = 0.01;
constexpr double kC4NeuralTolerance = 1e-4;
constexpr double kC4HawkesTolerance = 1e-6;
constexpr double kC5AccuracyWindow = 0.05;
constexpr double kC5OracleMargin = 0.02;
constexpr double kC6MaxMinorityRecall = 0.05;
constexpr double kC6MinAccuracy = 0.75;
constexpr double kC6MinF1Gap = 0.15;
constexpr double kC7MinFraction = 0.99;
constexpr std::size_t kC7Sequences = 20;
constexpr std::size_t kC7GridPoints = 500;
constexpr double kC8NullTolerance = 0.02;
constexpr double kC8MinGain = 0.03;

// Wall-clock budgets in seconds.
const std::map<int, double> kRuntimeLimit{{1, 60.0},   {2, 60.0},   {3, 600.0},  {4, 300.0}, {5, 7200.0},
                                          {6, 1800.0}, {7, 1800.0}, {8, 3600.0}, {9, 7200.0}};

// Target next-mark accuracies on the synthetic Hawkes benchmark.
const std::vector<std::pair<std::string, double>> kC5Reference{
    {"sa-cond-poisson", 0.538}, {"sa-lnm", 0.537}, {"sa-rmtpp-poisson", 0.526}};

constexpr std::uint64_t kHawkesSeed = 2022;

struct Outcome {
    bool pass{false};
    std::string detail;
};

struct Context {
    fs::path work;
    int threads{1};
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string verdict(bool ok) { return ok ? "ok" : "FAIL"; }

void log_line(const std::string& text) { std::cerr << text << std::endl; }

/// Stationary rates mu_i / (1 - alpha_ii / beta_ii) of a diagonal kernel.
std::vector<double> diagonal_stationary_rates(const hawkes::HawkesParams& p) {
    std::vector<double> out;
    for (int i = 0; i < p.dim(); ++i) {
        out.push_back(p.mu[i] / (1.0 - p.alpha[i][i] / p.beta[i][i]));
    }
    return out;
}

/// Intensities and compensator evaluated without the recursion.
double brute_force_loglik(const hawkes::HawkesParams& p, const data::EventSequence& seq) {
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
    for (int i = 0; i < p.dim(); ++i) {
        double comp = p.mu[i] * seq.t_end;
        for (const auto& h : seq.events) {
            const double b = p.beta[i][h.mark];
            comp += p.alpha[i][h.mark] / b * (1.0 - std::exp(-b * (seq.t_end - h.time)));
        }
        ll -= comp;
    }
    return ll;
}

hawkes::HawkesParams random_params(int k, Rng& rng) {
    hawkes::HawkesParams p;
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

data::EventSequence random_sequence(int k, std::size_t n, Rng& rng) {
    data::EventSequence s;
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        t += rng.exponential(1.0);
        s.events.push_back({t, static_cast<int>(rng.below(static_cast<std::uint64_t>(k)))});
    }
    s.t_end = t + rng.exponential(1.0);
    return s;
}

data::Dataset hawkes_benchmark(const Context& ctx) {
    hawkes::SimulationConfig cfg = hawkes::default_simulation_config();
    cfg.seed = kHawkesSeed;
    return hawkes::simulate_dataset(cfg, ctx.threads);
}

train::TrainConfig default_train_config(const Context& ctx, std::uint64_t seed) {
    train::TrainConfig tc;
    tc.seed = seed;
    tc.threads = ctx.threads;
    return tc;
}

train::EpochCallback epoch_logger(const std::string& tag) {
    return [tag](const train::EpochRecord& e) {
        log_line(fmt::format("  [{}] epoch {:>3} train {:.5f} valid {:.5f} ({:.1f} s)", tag, e.epoch, e.train_nll,
                             e.valid_nll, e.seconds));
    };
}

struct Holdout {
    nn::NeuralTppModel model;
    data::Dataset train_set;
    data::Dataset test_set;
    eval::EvalReport test;
    train::TrainReport report;
};

/// 80/10/10 sequence split, normalisation by the training mean interval,
/// training with defaults, and next-mark evaluation on the test part.
Holdout train_holdout(nn::ModelConfig mc, const data::Dataset& ds, const train::TrainConfig& tc,
                      const std::string& tag) {
    const data::Split split = data::fraction_split(ds, 0.8, 0.1, tc.seed);
    const double scale = data::mean_inter_event_time(split.train);
    auto tr = data::rescale_times(split.train, scale);
    auto va = data::rescale_times(split.valid, scale);
    auto te = data::rescale_times(split.test, scale);
    mc.class_count = ds.class_count;
    nn::NeuralTppModel init(mc);
    init.time_scale = tr.time_scale;
    auto result = train::train(init, tr, va, tc, epoch_logger(tag));
    auto rep = eval::evaluate_next_mark(result.model, te, 256, tc.threads);
    return {std::move(result.model), std::move(tr), std::move(te), std::move(rep), std::move(result.report)};
}

// ---------------------------------------------------------------------------

Outcome criterion1(const Context& ctx) {
    hawkes::SimulationConfig cfg = hawkes::default_simulation_config();
    cfg.seed = kHawkesSeed + 1;
    cfg.n_sequences = static_cast<std::size_t>(std::ceil(kC1MinExposure / cfg.t_end));
    const auto ds = hawkes::simulate_dataset(cfg, ctx.threads);
    const double exposure = static_cast<double>(cfg.n_sequences) * cfg.t_end;
    std::vector<double> counts(2, 0.0);
    for (const auto& s : ds.sequences) {
        for (const auto& e : s.events) {
            counts[static_cast<std::size_t>(e.mark)] += 1.0;
        }
    }
    const auto expected = diagonal_stationary_rates(cfg.params);
    bool pass = exposure >= kC1MinExposure;
    std::string detail = fmt::format("exposure {:.0f}", exposure);
    for (std::size_t i = 0; i < 2; ++i) {
        const double rate = counts[i] / exposure;
        const double rel = std::abs(rate - expected[i]) / expected[i];
        pass = pass && rel <= kC1RateTolerance;
        detail += fmt::format("; rate[{}] {:.5f} vs {:.5f} (rel {:.4f})", i, rate, expected[i], rel);
    }
    return {pass, detail};
}

Outcome criterion2(const Context&) {
    Rng rng(kHawkesSeed, 2);
    double worst = 0.0;
    for (std::size_t r = 0; r < kC2Sequences; ++r) {
        const int k = 1 + static_cast<int>(rng.below(4));
        const auto p = random_params(k, rng);
        const auto seq = random_sequence(k, rng.below(kC2MaxLength + 1), rng);
        const double fast = hawkes::hawkes_loglik(p, seq);
        const double slow = brute_force_loglik(p, seq);
        worst = std::max(worst, std::abs(fast - slow) / std::max(1.0, std::abs(slow)));
    }
    return {worst < kC2Tolerance, fmt::format("{} sequences, max error {:.3e}", kC2Sequences, worst)};
}

Outcome criterion3(const Context& ctx) {
    hawkes::SimulationConfig cfg = hawkes::default_simulation_config();
    cfg.seed = kHawkesSeed + 3;
    cfg.n_sequences = kC3Sequences;
    const auto ds = hawkes::simulate_dataset(cfg, ctx.threads);
    const auto& truth = cfg.params;

    // Start away from the truth on every free coordinate; the cross terms start
    // at zero and stay there, matching the diagonal generator.
    hawkes::HawkesParams init;
    init.mu = {0.3, 0.3};
    init.alpha = {{0.1, 0.0}, {0.0, 0.1}};
    init.beta = {{2.0, 2.0}, {2.0, 2.0}};
    const auto fit = hawkes::hawkes_fit(ds, init);

    bool pass = fit.converged;
    std::string detail = fmt::format("{} events, {} iterations{}", fit.n_events, fit.iterations,
                                     fit.converged ? "" : " (not converged)");
    double worst = 0.0;
    auto check = [&](const std::string& name, double estimate, double target) {
        const double rel = std::abs(estimate - target) / std::abs(target);
        worst = std::max(worst, rel);
        detail += fmt::format("; {} {:.4f} ({:+.1f}%)", name, estimate, 100.0 * (estimate - target) / target);
    };
    for (int i = 0; i < 2; ++i) {
        check(fmt::format("mu{}", i), fit.params.mu[i], truth.mu[i]);
        check(fmt::format("alpha{}{}", i, i), fit.params.alpha[i][i], truth.alpha[i][i]);
        check(fmt::format("beta{}{}", i, i), fit.params.beta[i][i], truth.beta[i][i]);
    }
    pass = pass && worst <= kC3RelativeTolerance;
    pass = pass && fit.params.alpha[0][1] == 0.0 && fit.params.alpha[1][0] == 0.0;
    const auto ks = stats::ks_exponential(hawkes::time_rescale(fit.params, ds));
    pass = pass && ks.p_value > kC3MinPValue;
    detail += fmt::format("; max rel {:.4f}; KS D {:.5f} p {:.4f}", worst, ks.statistic, ks.p_value);
    return {pass, detail};
}

Outcome criterion4(const Context&) {
    Rng rng(kHawkesSeed, 4);
    data::Dataset ds;
    ds.class_count = 3;
    for (int i = 0; i < 3; ++i) {
        auto s = random_sequence(3, 4 + static_cast<std::size_t>(i), rng);
        s.id = fmt::format("g{}", i);
        s.static_features = std::vector<double>{rng.normal(), rng.normal()};
        ds.sequences.push_back(std::move(s));
    }
    const std::vector<std::size_t> idx{0, 1, 2};
    bool pass = true;
    double worst_neural = 0.0;
    std::string failures;
    for (const auto enc : {nn::EncoderKind::self_attention, nn::EncoderKind::recurrent}) {
        for (const auto& name : nn::model_names()) {
            for (const bool conditioned : {false, true}) {
                nn::ModelConfig mc;
                mc.class_count = 3;
                mc.encoder.kind = enc;
                mc.encoder.dropout = 0.0;
                mc.decoder.kind = nn::parse_model_name(name);
                mc.decoder.mc_samples_eval = 20;
                mc.decoder.learnable_softplus_scale = true;
                mc.conditioner = conditioned;
                mc.static_dim = conditioned ? 2 : 0;
                mc.init_seed = 11;
                const nn::NeuralTppModel model(mc);
                const nn::Batch batch = nn::make_batch(ds, idx, mc.encoder.max_context, mc.static_dim);
                nn::ForwardOptions opt;
                opt.mc_seed = 5;
                const double err = ad::grad_check(
                    [&](ad::Tape& tape, std::span<const ad::Var> in) {
                        nn::Binding b(model, tape, std::vector<ad::Var>(in.begin(), in.end()));
                        return nn::batch_nll(b, batch, opt);
                    },
                    model.parameters().values(), 1e-6);
                worst_neural = std::max(worst_neural, err);
                if (!(err < kC4NeuralTolerance)) {
                    pass = false;
                    failures += fmt::format(" {}/{}{}={:.2e}", nn::to_string(enc), name, conditioned ? "+p" : "", err);
                }
            }
        }
    }

    double worst_hawkes = 0.0;
    for (int r = 0; r < 20; ++r) {
        const int k = 1 + static_cast<int>(rng.below(3));
        auto p = r == 0 ? hawkes::default_simulation_config().params : random_params(k, rng);
        const auto seq = random_sequence(p.dim(), 40, rng);
        const auto g = hawkes::hawkes_loglik_grad(p, seq);
        auto fd = [&](auto mutate, double analytic) {
            auto up = p;
            auto down = p;
            const double h = 1e-5;
            mutate(up, h);
            mutate(down, -h);
            const double num = (hawkes::hawkes_loglik(up, seq) - hawkes::hawkes_loglik(down, seq)) / (2 * h);
            worst_hawkes =
                std::max(worst_hawkes, std::abs(num - analytic) / std::max({1.0, std::abs(num), std::abs(analytic)}));
        };
        for (int i = 0; i < p.dim(); ++i) {
            fd([i](hawkes::HawkesParams& q, double h) { q.mu[i] += h; }, g.d_mu[i]);
            for (int j = 0; j < p.dim(); ++j) {
                fd([i, j](hawkes::HawkesParams& q, double h) { q.alpha[i][j] += h; }, g.d_alpha[i][j]);
                fd([i, j](hawkes::HawkesParams& q, double h) { q.beta[i][j] += h; }, g.d_beta[i][j]);
            }
        }
    }
    pass = pass && worst_hawkes < kC4HawkesTolerance;
    return {pass, fmt::format("neural max rel err {:.3e} over {} models{}; hawkes max rel err {:.3e}", worst_neural,
                              4 * nn::model_names().size(), failures.empty() ? "" : "; failing:" + failures,
                              worst_hawkes)};
}

/// Everything reported by the cross-validation pipeline except wall-clock timings.
nlohmann::json strip_timings(nlohmann::json j) {
    if (j.is_object()) {
        j.erase("seconds");
        j.erase("wall_seconds");
        for (auto& [key, value] : j.items()) {
            value = strip_timings(value);
        }
    } else if (j.is_array()) {
        for (auto& value : j) {
            value = strip_timings(value);
        }
    }
    return j;
}

/// The synthetic-benchmark cross-validation: simulation, oracle, and five
/// folds per model with default training settings.
nlohmann::json benchmark_pipeline(const Context& ctx) {
    const auto ds = hawkes_benchmark(ctx);
    const auto oracle = eval::oracle_accuracy(hawkes::default_simulation_config().params, ds);
    nlohmann::json out{{"n_sequences", ds.size()},
                       {"n_events", ds.event_count()},
                       {"oracle_accuracy", oracle.accuracy},
                       {"majority_accuracy", eval::majority_baseline(ds).accuracy},
                       {"models", nlohmann::json::object()}};
    log_line(fmt::format("  dataset: {} sequences, {} events, oracle accuracy {:.4f}", ds.size(), ds.event_count(),
                         oracle.accuracy));
    for (const auto& [name, reference] : kC5Reference) {
        nn::ModelConfig mc;
        mc.class_count = ds.class_count;
        mc.decoder.kind = nn::parse_model_name(name);
        const auto tc = default_train_config(ctx, kHawkesSeed);
        const std::string tag = name;
        const auto cv = train::cross_validate(mc, ds, tc, [&](int fold, const train::EpochRecord& e) {
            log_line(fmt::format("  [{} fold {}] epoch {:>3} train {:.5f} valid {:.5f} ({:.1f} s)", tag, fold,
                                 e.epoch, e.train_nll, e.valid_nll, e.seconds));
        });
        log_line(train::format_summary(cv));
        out["models"][name] = strip_timings(train::to_json(cv));
    }
    return out;
}

Outcome criterion5(const Context& ctx) {
    const auto result = benchmark_pipeline(ctx);
    fs::create_directories(ctx.work);
    std::ofstream(ctx.work / "c5_metrics.json") << result.dump(1) << "\n";

    const double oracle = result.at("oracle_accuracy").get<double>();
    bool pass = true;
    std::string detail = fmt::format("oracle {:.4f}, majority {:.4f}", oracle,
                                     result.at("majority_accuracy").get<double>());
    for (const auto& [name, reference] : kC5Reference) {
        const auto& summary = result.at("models").at(name).at("summary");
        const double acc = summary.at("accuracy").at("mean").get<double>();
        const double f1 = summary.at("weighted_f1").at("mean").get<double>();
        const bool in_window = std::abs(acc - reference) <= kC5AccuracyWindow;
        const bool below_oracle = acc <= oracle + kC5OracleMargin;
        pass = pass && in_window && below_oracle;
        detail += fmt::format("; {} acc {:.4f} (target {:.3f}±{:.2f} {}, oracle bound {}) wF1 {:.4f}", name, acc,
                              reference, kC5AccuracyWindow, verdict(in_window), verdict(below_oracle), f1);
    }
    return {pass, detail};
}

/// Three marks with diagonal excitation whose stationary event counts stand
/// in the ratio 50:10:1.
hawkes::SimulationConfig imbalanced_config() {
    hawkes::SimulationConfig cfg;
    cfg.params.mu = {0.5, 0.1, 0.01};
    cfg.params.alpha = {{0.2, 0.0, 0.0}, {0.0, 0.2, 0.0}, {0.0, 0.0, 0.2}};
    cfg.params.beta = {{1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
    cfg.t_end = 67.0;
    cfg.n_sequences = 5000;
    cfg.seed = kHawkesSeed + 6;
    return cfg;
}

struct ImbalancedRun {
    nn::NeuralTppModel model;
    data::Dataset train_set;
    data::Dataset test_set;
    eval::EvalReport test;
};

ImbalancedRun imbalanced_model(const Context& ctx) {
    const fs::path dir = ctx.work / "c6";
    const auto cfg = imbalanced_config();
    const auto ds = hawkes::simulate_dataset(cfg, ctx.threads);
    nn::ModelConfig mc;
    mc.decoder.kind = nn::DecoderKind::cond_poisson;
    auto run = train_holdout(mc, ds, default_train_config(ctx, kHawkesSeed + 6), "imbalanced");
    fs::create_directories(dir);
    nn::save_checkpoint(run.model, dir / "checkpoint.json");
    std::ofstream(dir / "test_report.json") << eval::to_json(run.test).dump(1) << "\n";
    return {std::move(run.model), std::move(run.train_set), std::move(run.test_set), std::move(run.test)};
}

Outcome criterion6(const Context& ctx) {
    const auto run = imbalanced_model(ctx);
    const auto counts = data::dataset_stats(run.train_set).class_counts;
    log_line(fmt::format("  training class counts {}", fmt::join(counts, " : ")));
    log_line(eval::format_report(run.test));
    const auto minority = static_cast<std::size_t>(std::min_element(counts.begin(), counts.end()) - counts.begin());
    const double recall = run.test.per_class[minority].recall;
    const double gap = run.test.weighted_f1 - run.test.macro_f1;
    const bool pass = recall < kC6MaxMinorityRecall && run.test.accuracy > kC6MinAccuracy && gap >= kC6MinF1Gap;
    return {pass, fmt::format("class counts {}; minority recall {:.4f} {}; accuracy {:.4f} {}; weighted F1 {:.4f} - "
                              "macro F1 {:.4f} = {:.4f} {}",
                              fmt::join(counts, ":"), recall, verdict(recall < kC6MaxMinorityRecall),
                              run.test.accuracy, verdict(run.test.accuracy > kC6MinAccuracy), run.test.weighted_f1,
                              run.test.macro_f1, gap, verdict(gap >= kC6MinF1Gap))};
}

Outcome criterion7(const Context& ctx) {
    // Reuses the criterion-6 model when present; the pipeline is deterministic,
    // so rebuilding it gives the same parameters.
    const fs::path ckpt = ctx.work / "c6" / "checkpoint.json";
    const auto cfg = imbalanced_config();
    const auto ds = hawkes::simulate_dataset(cfg, ctx.threads);
    const data::Split split = data::fraction_split(ds, 0.8, 0.1, kHawkesSeed + 6);
    std::optional<nn::NeuralTppModel> model;
    if (fs::exists(ckpt)) {
        model.emplace(nn::load_checkpoint(ckpt));
        log_line("  using " + ckpt.string());
    } else {
        model.emplace(imbalanced_model(ctx).model);
    }
    const auto counts = data::dataset_stats(split.train).class_counts;
    const auto dominant = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    const auto rare = static_cast<std::size_t>(std::min_element(counts.begin(), counts.end()) - counts.begin());
    std::size_t below = 0;
    std::size_t total = 0;
    const std::size_t n = std::min(kC7Sequences, split.test.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto trace = eval::intensity_trace(*model, split.test.sequences[i], eval::GridSpec{kC7GridPoints});
        for (std::size_t g = 0; g < trace.grid.size(); ++g) {
            below += trace.values[g][rare] < trace.values[g][dominant] ? 1 : 0;
            ++total;
        }
    }
    const double fraction = static_cast<double>(below) / static_cast<double>(total);
    return {n == kC7Sequences && fraction >= kC7MinFraction,
            fmt::format("{} held-out sequences, {} grid points; rare class {} below class {} at {:.4f} of points", n,
                        total, rare, dominant, fraction)};
}

/// The benchmark process with a two-element static vector drawn
/// independently of the events.
data::Dataset independent_features_dataset(const Context& ctx) {
    hawkes::SimulationConfig cfg = hawkes::default_simulation_config();
    cfg.seed = kHawkesSeed + 8;
    cfg.n_sequences = 10000;
    auto ds = hawkes::simulate_dataset(cfg, ctx.threads);
    const Rng root(kHawkesSeed + 8, 1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Rng rng = root.split(i);
        ds.sequences[i].static_features = std::vector<double>{rng.uniform() < 0.5 ? 1.0 : 0.0, rng.normal()};
    }
    return ds;
}

/// A binary feature selects which of two mirrored Hawkes processes generates
/// the sequence: regime 0 favours mark 0, regime 1 favours mark 1. The
/// horizon is short so little history is available to infer the regime.
data::Dataset two_regime_dataset() {
    hawkes::HawkesParams regime[2];
    regime[0].mu = {0.6, 0.06};
    regime[1].mu = {0.06, 0.6};
    for (auto& p : regime) {
        p.alpha = {{0.2, 0.0}, {0.0, 0.2}};
        p.beta = {{1.0, 1.0}, {1.0, 1.0}};
    }
    constexpr std::size_t n = 20000;
    constexpr double t_end = 4.0;
    data::Dataset ds;
    ds.class_count = 2;
    const Rng root(kHawkesSeed + 9);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = root.split(i);
        const int r = rng.uniform() < 0.5 ? 0 : 1;
        auto seq = hawkes::hawkes_simulate(regime[r], t_end, rng);
        seq.id = fmt::format("regime{}-{}", r, i);
        seq.static_features = std::vector<double>{static_cast<double>(r)};
        ds.sequences.push_back(std::move(seq));
    }
    data::validate(ds);
    return ds;
}

std::pair<double, double> plain_and_conditioned(const Context& ctx, const data::Dataset& ds, std::uint64_t seed,
                                                const std::string& tag) {
    const auto tc = default_train_config(ctx, seed);
    nn::ModelConfig plain;
    plain.decoder.kind = nn::DecoderKind::cond_poisson;
    plain.init_seed = seed;
    nn::ModelConfig conditioned = plain;
    conditioned.conditioner = true;
    conditioned.static_dim = ds.static_dim();
    const auto a = train_holdout(plain, ds, tc, tag + " plain");
    const auto b = train_holdout(conditioned, ds, tc, tag + " parameterized");
    return {a.test.accuracy, b.test.accuracy};
}

Outcome criterion8(const Context& ctx) {
    const auto null_ds = independent_features_dataset(ctx);
    const auto [null_plain, null_cond] = plain_and_conditioned(ctx, null_ds, kHawkesSeed + 8, "independent");
    const auto regime_ds = two_regime_dataset();
    const auto [reg_plain, reg_cond] = plain_and_conditioned(ctx, regime_ds, kHawkesSeed + 9, "two-regime");
    const bool null_ok = std::abs(null_cond - null_plain) <= kC8NullTolerance;
    const bool gain_ok = reg_cond - reg_plain >= kC8MinGain;
    return {null_ok && gain_ok,
            fmt::format("independent features: plain {:.4f} parameterized {:.4f} (diff {:+.4f}) {}; two-regime: "
                        "plain {:.4f} parameterized {:.4f} (gain {:+.4f}) {}",
                        null_plain, null_cond, null_cond - null_plain, verdict(null_ok), reg_plain, reg_cond,
                        reg_cond - reg_plain, verdict(gain_ok))};
}

Outcome criterion9(const Context& ctx) {
    const fs::path previous = ctx.work / "c5_metrics.json";
    nlohmann::json first;
    if (fs::exists(previous)) {
        first = nlohmann::json::parse(std::ifstream(previous));
        log_line("  comparing against " + previous.string());
    } else {
        log_line("  no earlier run found; running the pipeline twice");
        first = nlohmann::json::parse(benchmark_pipeline(ctx).dump());
    }
    // Round-trip through text so both sides went through identical serialisation.
    const auto second = nlohmann::json::parse(benchmark_pipeline(ctx).dump());
    const auto diff = nlohmann::json::diff(first, second);
    std::string detail = fmt::format("{} differing entries", diff.size());
    if (!diff.empty()) {
        detail += ": " + diff.dump().substr(0, 400);
    }
    return {diff.empty(), detail};
}

const std::map<int, std::pair<std::string, std::function<Outcome(const Context&)>>> kCriteria{
    {1, {"Hawkes simulator rate law", criterion1}},
    {2, {"likelihood recursion vs brute force", criterion2}},
    {3, {"MLE consistency and time-rescaling fit", criterion3}},
    {4, {"gradient gates", criterion4}},
    {5, {"synthetic Hawkes cross-validation accuracy", criterion5}},
    {6, {"rare-event blindness", criterion6}},
    {7, {"intensity gap between common and rare marks", criterion7}},
    {8, {"static-feature parametrization", criterion8}},
    {9, {"bitwise determinism of the benchmark pipeline", criterion9}},
};

} // namespace

int main(int argc, char** argv) {
    ntpp::tune_allocator();
    CLI::App app{"Acceptance checks; prints one PASS/FAIL line per criterion"};
    std::vector<int> selected;
    Context ctx;
    ctx.work = "acceptance_work";
    ctx.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    app.add_option("-c,--criterion", selected, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
    app.add_option("--work", ctx.work, "Directory for artifacts shared between criteria");
    app.add_option("--threads", ctx.threads, "Worker threads")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);
    if (selected.empty()) {
        for (const auto& [id, entry] : kCriteria) {
            selected.push_back(id);
        }
    }

    bool all = true;
    for (const int id : selected) {
        const auto& [name, fn] = kCriteria.at(id);
        log_line(fmt::format("criterion {} ({}) running...", id, name));
        const auto start = Clock::now();
        Outcome out;
        try {
            out = fn(ctx);
        } catch (const std::exception& e) {
            out = {false, fmt::format("exception: {}", e.what())};
        }
        const double secs = seconds_since(start);
        const double limit = kRuntimeLimit.at(id);
        const bool in_time = secs < limit;
        const bool pass = out.pass && in_time;
        all = all && pass;
        std::cout << fmt::format("criterion {} [{}]: {}  {}; runtime {:.1f} s (limit {:.0f} s) {}", id, name,
                                 pass ? "PASS" : "FAIL", out.detail, secs, limit, verdict(in_time))
                  << std::endl;
    }
    return all ? 0 : 1;
}
