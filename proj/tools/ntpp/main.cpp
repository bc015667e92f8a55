#include "support.hpp"

#include "ntpp/data.hpp"
#include "ntpp/error.hpp"
#include "ntpp/evaluation.hpp"
#include "ntpp/hawkes.hpp"
#include "ntpp/model.hpp"
#include "ntpp/runtime.hpp"
#include "ntpp/stats.hpp"
#include "ntpp/training.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ntpp;
using cli::Manifest;

namespace {

struct Common {
    int threads{1};
    std::vector<std::string> argv;
};

fs::path sibling(const fs::path& path, const std::string& suffix) {
    fs::path out = path;
    out += suffix;
    return out;
}

data::Dataset load_dataset(const fs::path& path, std::optional<int> class_count) {
    data::LoadOptions opts;
    opts.class_count = class_count;
    return data::load_jsonl(path, opts);
}

/// Saves a dataset and its sidecar through temporaries.
void save_dataset_atomic(const data::Dataset& ds, const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = sibling(path, ".tmp");
    data::save_jsonl(ds, tmp);
    const fs::path tmp_meta = data::meta_path(tmp);
    if (fs::exists(tmp_meta)) {
        fs::rename(tmp_meta, data::meta_path(path));
    }
    fs::rename(tmp, path);
}

std::vector<std::string> class_names(const data::Dataset& ds, int k) {
    std::vector<std::string> out;
    for (int c = 0; c < k; ++c) {
        out.push_back(ds.class_name(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> n_sequences;
    std::optional<double> t_end;
};

int run_simulate(const SimulateArgs& a, const Common& common) {
    Manifest manifest("simulate", common.argv);
    hawkes::SimulationConfig cfg = hawkes::default_simulation_config();
    if (!a.config.empty()) {
        cfg = hawkes::simulation_config_from_json(cli::read_json_file(a.config), cfg);
        manifest.add_input(a.config);
    }
    if (a.seed) cfg.seed = *a.seed;
    if (a.n_sequences) cfg.n_sequences = *a.n_sequences;
    if (a.t_end) cfg.t_end = *a.t_end;
    hawkes::validate(cfg.params);

    const data::Dataset ds = hawkes::simulate_dataset(cfg, common.threads);
    save_dataset_atomic(ds, a.out);
    std::cout << data::format_stats(data::dataset_stats(ds), fs::path(a.out).stem().string(), ds.class_count);

    manifest.set_config(hawkes::to_json(cfg));
    manifest.set_seed(cfg.seed);
    manifest.add_output(a.out);
    manifest.write(sibling(a.out, ".manifest.json"));
    return cli::exit_ok;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
    std::string data;
    std::optional<int> class_count;
    double train_fraction{0.8};
    double valid_fraction{0.1};
    std::uint64_t seed{0};
    std::string json;
};

int run_stats(const StatsArgs& a, const Common&) {
    const data::Dataset ds = load_dataset(a.data, a.class_count);
    const data::Split split = data::fraction_split(ds, a.train_fraction, a.valid_fraction, a.seed);
    const auto report = data::dataset_stats(ds, &split);
    std::cout << data::format_stats(report, fs::path(a.data).stem().string(), ds.class_count);
    if (!a.json.empty()) {
        cli::write_json_atomic(a.json, {{"n_sequences", report.n_sequences},
                                        {"n_events", report.n_events},
                                        {"avg_length", report.avg_length},
                                        {"class_counts", report.class_counts},
                                        {"train_events", report.train_events},
                                        {"valid_events", report.valid_events},
                                        {"test_events", report.test_events}});
    }
    return cli::exit_ok;
}

// ---------------------------------------------------------------------------
// fit-hawkes

struct FitArgs {
    std::string data;
    std::string out;
    std::string init;
    std::optional<int> class_count;
    int max_iterations{500};
    double tolerance{1e-6};
};

hawkes::HawkesParams default_init(const data::Dataset& ds) {
    const auto k = static_cast<std::size_t>(ds.class_count);
    double horizon = 0.0;
    for (const auto& s : ds.sequences) {
        horizon += s.t_end;
    }
    const auto counts = data::dataset_stats(ds).class_counts;
    hawkes::HawkesParams p;
    for (std::size_t c = 0; c < k; ++c) {
        const double rate = horizon > 0.0 ? static_cast<double>(counts[c]) / horizon : 0.1;
        p.mu.push_back(std::max(0.5 * rate, 1e-3));
    }
    p.alpha.assign(k, std::vector<double>(k, 0.1));
    p.beta.assign(k, std::vector<double>(k, 1.0));
    return p;
}

hawkes::HawkesParams read_params(const fs::path& path) {
    const auto j = cli::read_json_file(path);
    return hawkes::params_from_json(j.contains("params") ? j.at("params") : j);
}

int run_fit(const FitArgs& a, const Common& common) {
    Manifest manifest("fit-hawkes", common.argv);
    const data::Dataset ds = data::denormalize_times(load_dataset(a.data, a.class_count));
    manifest.add_input(a.data);
    hawkes::HawkesParams init = default_init(ds);
    if (!a.init.empty()) {
        init = read_params(a.init);
        manifest.add_input(a.init);
        if (init.dim() != ds.class_count) {
            throw std::invalid_argument(
                fmt::format("--init has dimension {} but the data has {} classes", init.dim(), ds.class_count));
        }
    }
    hawkes::FitOptions opts;
    opts.max_iterations = a.max_iterations;
    opts.gradient_tolerance = a.tolerance;
    const auto fit = hawkes::hawkes_fit(ds, init, opts);
    const nlohmann::json out{{"params", hawkes::to_json(fit.params)},
                             {"loglik", fit.loglik},
                             {"n_events", fit.n_events},
                             {"iterations", fit.iterations},
                             {"converged", fit.converged},
                             {"gradient_norm", fit.gradient_norm}};
    cli::write_json_atomic(a.out, out);
    std::cout << out.dump(2) << "\n";
    manifest.set_config({{"init", hawkes::to_json(init)},
                         {"max_iterations", a.max_iterations},
                         {"gradient_tolerance", a.tolerance}});
    manifest.add_output(a.out);
    manifest.write(sibling(a.out, ".manifest.json"));
    return fit.converged ? cli::exit_ok : cli::exit_numerical;
}

// ---------------------------------------------------------------------------
// gof

struct GofArgs {
    std::string data;
    std::string params;
    std::optional<int> class_count;
    std::string out;
};

int run_gof(const GofArgs& a, const Common& common) {
    const data::Dataset ds = data::denormalize_times(load_dataset(a.data, a.class_count));
    const auto params = read_params(a.params);
    const auto inc = hawkes::time_rescale(params, ds);
    const auto ks = stats::ks_exponential(inc);
    const nlohmann::json out{{"n", ks.n},
                             {"ks_statistic", ks.statistic},
                             {"p_value", ks.p_value},
                             {"mean_increment", stats::mean(inc)}};
    std::cout << fmt::format("time-rescaled increments: n = {}, mean = {:.4f}\nKS statistic = {:.5f}, p = {:.4g}\n",
                             ks.n, stats::mean(inc), ks.statistic, ks.p_value);
    if (!a.out.empty()) {
        Manifest manifest("gof", common.argv);
        manifest.add_input(a.data);
        manifest.add_input(a.params);
        cli::write_json_atomic(a.out, out);
        manifest.add_output(a.out);
        manifest.write(sibling(a.out, ".manifest.json"));
    }
    return cli::exit_ok;
}

// ---------------------------------------------------------------------------
// train / cv

struct TrainArgs {
    std::string model;
    std::string data;
    std::string out;
    std::string config;
    std::string model_config;
    std::optional<int> class_count;
    bool static_features{false};
    std::optional<std::string> encoder;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<std::size_t> batch_size;
    std::optional<int> patience;
    std::optional<std::uint64_t> seed;
    std::optional<double> valid_fraction;
    std::optional<int> folds;
    double test_fraction{0.1};
    bool verbose{false};
};

struct Resolved {
    data::Dataset dataset;
    nn::ModelConfig model;
    train::TrainConfig train;
};

Resolved resolve(const TrainArgs& a, const Common& common, Manifest& manifest) {
    const nn::DecoderKind kind = nn::parse_model_name(a.model);
    Resolved r;
    if (!a.config.empty()) {
        r.train = train::train_config_from_json(cli::read_json_file(a.config));
        manifest.add_input(a.config);
    }
    if (a.epochs) r.train.max_epochs = *a.epochs;
    if (a.lr) r.train.learning_rate = *a.lr;
    if (a.batch_size) r.train.batch_size = *a.batch_size;
    if (a.patience) r.train.patience = *a.patience;
    if (a.seed) r.train.seed = *a.seed;
    if (a.valid_fraction) r.train.valid_fraction = *a.valid_fraction;
    if (a.folds) r.train.folds = *a.folds;
    r.train.threads = common.threads;
    r.train.validate();

    nlohmann::json model_json = nlohmann::json::object();
    if (!a.model_config.empty()) {
        model_json = cli::read_json_file(a.model_config);
        manifest.add_input(a.model_config);
    }
    r.model = nn::model_config_from_json(model_json);
    if (!model_json.contains("init_seed")) {
        r.model.init_seed = r.train.seed;
    }
    r.model.decoder.kind = kind;
    if (a.encoder) {
        r.model.encoder.kind = nn::parse_encoder_kind(*a.encoder);
    }

    r.dataset = load_dataset(a.data, a.class_count);
    manifest.add_input(a.data);
    r.model.class_count = r.dataset.class_count;
    if (a.static_features) {
        const std::size_t dim = r.dataset.static_dim();
        if (dim == 0) {
            throw DataError("--static-features needs every sequence to carry a \"static\" feature vector");
        }
        r.model.conditioner = true;
        r.model.static_dim = dim;
    } else {
        r.model.conditioner = false;
        r.model.static_dim = 0;
    }
    r.model.validate();
    manifest.set_config({{"model", nn::to_json(r.model)}, {"train", train::to_json(r.train)}});
    manifest.set_seed(r.train.seed);
    return r;
}

train::EpochCallback progress(bool verbose, const std::string& prefix) {
    if (!verbose) {
        return {};
    }
    return [prefix](const train::EpochRecord& e) {
        std::cerr << fmt::format("{}epoch {:>3}  train {:.5f}  valid {:.5f}  ({:.1f} s)\n", prefix, e.epoch,
                                 e.train_nll, e.valid_nll, e.seconds);
    };
}

int run_train(const TrainArgs& a, const Common& common) {
    Manifest manifest("train", common.argv);
    Resolved r = resolve(a, common, manifest);
    const double train_fraction = 1.0 - r.train.valid_fraction - a.test_fraction;
    if (!(train_fraction > 0.0) || a.test_fraction < 0.0) {
        throw std::invalid_argument("valid and test fractions must leave a positive training share");
    }
    const data::Split split = data::fraction_split(r.dataset, train_fraction, r.train.valid_fraction, r.train.seed);
    const double scale = data::mean_inter_event_time(split.train);
    if (!(scale > 0.0)) {
        throw DataError("training portion has no inter-event interval");
    }
    const auto train_set = data::rescale_times(split.train, scale);
    const auto valid_set = data::rescale_times(split.valid, scale);
    const auto test_set = data::rescale_times(split.test, scale);

    nn::NeuralTppModel model(r.model);
    model.time_scale = train_set.time_scale;
    const fs::path dir = a.out;
    fs::create_directories(dir);

    train::TrainResult result{model, {}};
    try {
        result = train::train(model, train_set, valid_set, r.train, progress(a.verbose, ""));
    } catch (const train::DivergenceError& e) {
        cli::write_json_atomic(dir / "checkpoint_last_finite.json", nn::checkpoint_json(e.last_finite()));
        cli::write_json_atomic(dir / "train_report.json", train::to_json(e.report()));
        manifest.add_output(dir / "checkpoint_last_finite.json");
        manifest.add_output(dir / "train_report.json");
        manifest.write(dir / "manifest.json");
        throw;
    }
    cli::write_json_atomic(dir / "checkpoint.json", nn::checkpoint_json(result.model));
    cli::write_json_atomic(dir / "train_report.json", train::to_json(result.report));
    cli::write_text_atomic(dir / "train_report.txt", train::format_report(result.report));
    std::cout << train::format_report(result.report);
    manifest.add_output(dir / "checkpoint.json");
    manifest.add_output(dir / "train_report.json");
    manifest.add_output(dir / "train_report.txt");

    if (test_set.size() > 0) {
        auto rep = eval::evaluate_next_mark(result.model, test_set, 256, common.threads);
        rep.class_names = class_names(r.dataset, r.model.class_count);
        cli::write_json_atomic(dir / "test_report.json", eval::to_json(rep));
        std::cout << "\nTest set next-mark classification:\n" << eval::format_report(rep);
        manifest.add_output(dir / "test_report.json");
    }
    manifest.write(dir / "manifest.json");
    return cli::exit_ok;
}

int run_cv(const TrainArgs& a, const Common& common) {
    Manifest manifest("cv", common.argv);
    const Resolved r = resolve(a, common, manifest);
    std::function<void(int, const train::EpochRecord&)> cb;
    if (a.verbose) {
        cb = [](int fold, const train::EpochRecord& e) {
            std::cerr << fmt::format("fold {} epoch {:>3}  train {:.5f}  valid {:.5f}  ({:.1f} s)\n", fold, e.epoch,
                                     e.train_nll, e.valid_nll, e.seconds);
        };
    }
    train::CvResult cv = train::cross_validate(r.model, r.dataset, r.train, cb);
    const auto names = class_names(r.dataset, r.model.class_count);
    std::string text;
    for (auto& f : cv.folds) {
        f.eval.class_names = names;
        text += fmt::format("Fold {}\n{}\n", f.fold, eval::format_report(f.eval));
    }
    text += train::format_summary(cv);
    const fs::path dir = a.out;
    fs::create_directories(dir);
    cli::write_json_atomic(dir / "cv.json", train::to_json(cv));
    cli::write_text_atomic(dir / "cv.txt", text);
    std::cout << text;
    manifest.add_output(dir / "cv.json");
    manifest.add_output(dir / "cv.txt");
    manifest.write(dir / "manifest.json");
    return cli::exit_ok;
}

// ---------------------------------------------------------------------------
// evaluate / trace

struct EvaluateArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
};

int run_evaluate(const EvaluateArgs& a, const Common& common) {
    const nn::NeuralTppModel model = nn::load_checkpoint(a.checkpoint);
    const data::Dataset ds = load_dataset(a.data, model.config().class_count);
    eval::EvalReport rep = eval::evaluate_next_mark(model, ds, 256, common.threads);
    rep.class_names = class_names(ds, model.config().class_count);
    std::cout << eval::format_report(rep);
    if (!a.out.empty()) {
        Manifest manifest("evaluate", common.argv);
        manifest.add_input(a.checkpoint);
        manifest.add_input(a.data);
        cli::write_json_atomic(a.out, eval::to_json(rep));
        manifest.add_output(a.out);
        manifest.write(sibling(a.out, ".manifest.json"));
    }
    return cli::exit_ok;
}

struct TraceArgs {
    std::string checkpoint;
    std::string params;
    std::string data;
    std::string out;
    std::optional<int> class_count;
    std::size_t index{0};
    std::string seq_id;
    std::size_t points{500};
    std::optional<double> begin;
    std::optional<double> end;
};

int run_trace(const TraceArgs& a, const Common& common) {
    if (a.checkpoint.empty() == a.params.empty()) {
        throw std::invalid_argument("trace needs exactly one of --checkpoint or --params");
    }
    Manifest manifest("trace", common.argv);
    std::optional<nn::NeuralTppModel> model;
    std::optional<hawkes::HawkesParams> params;
    std::optional<int> k = a.class_count;
    if (!a.checkpoint.empty()) {
        model.emplace(nn::load_checkpoint(a.checkpoint));
        k = model->config().class_count;
        manifest.add_input(a.checkpoint);
    } else {
        params = read_params(a.params);
        k = params->dim();
        manifest.add_input(a.params);
    }
    const data::Dataset ds = data::denormalize_times(load_dataset(a.data, k));
    manifest.add_input(a.data);
    std::size_t index = a.index;
    if (!a.seq_id.empty()) {
        const auto it = std::find_if(ds.sequences.begin(), ds.sequences.end(),
                                     [&](const data::EventSequence& s) { return s.id == a.seq_id; });
        if (it == ds.sequences.end()) {
            throw DataError(fmt::format("no sequence with id \"{}\"", a.seq_id));
        }
        index = static_cast<std::size_t>(it - ds.sequences.begin());
    }
    if (index >= ds.size()) {
        throw DataError(fmt::format("sequence index {} out of range (dataset has {})", index, ds.size()));
    }
    const auto& seq = ds.sequences[index];
    const eval::GridSpec spec{a.points, a.begin, a.end};
    const auto names = class_names(ds, *k);
    const eval::IntensityTrace trace =
        model ? eval::intensity_trace(*model, seq, spec, names) : eval::hawkes_trace(*params, seq, spec, names);
    const fs::path csv = sibling(a.out, ".csv");
    const fs::path svg = sibling(a.out, ".svg");
    cli::write_text_atomic(csv, eval::trace_csv(trace));
    cli::write_text_atomic(svg, eval::trace_svg(trace, fmt::format("Intensities for sequence {}", seq.id)));
    std::cout << fmt::format("wrote {} and {} ({} grid points, {} events)\n", csv.string(), svg.string(),
                             trace.grid.size(), seq.size());
    manifest.set_config({{"index", index}, {"points", a.points}});
    manifest.add_output(csv);
    manifest.add_output(svg);
    manifest.write(sibling(a.out, ".manifest.json"));
    return cli::exit_ok;
}

} // namespace

int main(int argc, char** argv) {
    ntpp::tune_allocator();
    Common common;
    common.argv.assign(argv, argv + argc);

    CLI::App app{"Neural temporal point processes for event sequences"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", cli::artifact_version());
    app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);

    int code = cli::exit_ok;
    auto dispatch = [&](auto fn) { return [&, fn] { code = fn(); }; };

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic Hawkes dataset");
    simulate->add_option("--config", sim.config, "Generation config (JSON)")->check(CLI::ExistingFile);
    simulate->add_option("--out", sim.out, "Output JSONL path")->required();
    simulate->add_option("--seed", sim.seed, "Override the config seed");
    simulate->add_option("--n-sequences", sim.n_sequences, "Override the number of sequences");
    simulate->add_option("--t-end", sim.t_end, "Override the observation horizon");
    simulate->callback(dispatch([&] { return run_simulate(sim, common); }));

    StatsArgs st;
    auto* stats_cmd = app.add_subcommand("stats", "Dataset properties table");
    stats_cmd->add_option("--data", st.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
    stats_cmd->add_option("--class-count", st.class_count, "Declared number of classes");
    stats_cmd->add_option("--train-fraction", st.train_fraction, "Training share of sequences");
    stats_cmd->add_option("--valid-fraction", st.valid_fraction, "Validation share of sequences");
    stats_cmd->add_option("--seed", st.seed, "Split seed");
    stats_cmd->add_option("--json", st.json, "Also write the numbers as JSON");
    stats_cmd->callback(dispatch([&] { return run_stats(st, common); }));

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit-hawkes", "Maximum-likelihood fit of an exponential Hawkes process");
    fit_cmd->add_option("--data", fit.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--out", fit.out, "Fitted parameters (JSON)")->required();
    fit_cmd->add_option("--init", fit.init, "Initial parameters; zero alpha entries stay zero")
        ->check(CLI::ExistingFile);
    fit_cmd->add_option("--class-count", fit.class_count, "Declared number of classes");
    fit_cmd->add_option("--max-iter", fit.max_iterations, "L-BFGS iteration cap");
    fit_cmd->add_option("--tol", fit.tolerance, "Gradient-norm tolerance (per event)");
    fit_cmd->callback(dispatch([&] { return run_fit(fit, common); }));

    GofArgs gof;
    auto* gof_cmd = app.add_subcommand("gof", "Time-rescaling goodness-of-fit test");
    gof_cmd->add_option("--data", gof.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
    gof_cmd->add_option("--params", gof.params, "Hawkes parameters (JSON)")->required()->check(CLI::ExistingFile);
    gof_cmd->add_option("--class-count", gof.class_count, "Declared number of classes");
    gof_cmd->add_option("--out", gof.out, "Write the result as JSON");
    gof_cmd->callback(dispatch([&] { return run_gof(gof, common); }));

    auto add_train_options = [](CLI::App* cmd, TrainArgs& t) {
        cmd->add_option("--model", t.model, "One of: " + fmt::format("{}", fmt::join(nn::model_names(), ", ")))
            ->required();
        cmd->add_option("--data", t.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", t.out, "Output directory")->required();
        cmd->add_option("--config", t.config, "Train config (JSON, flat keys)")->check(CLI::ExistingFile);
        cmd->add_option("--model-config", t.model_config, "Model hyperparameters (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("--class-count", t.class_count, "Declared number of classes");
        cmd->add_flag("--static-features", t.static_features, "Condition on per-sequence static features");
        cmd->add_option("--encoder", t.encoder, "self_attention or recurrent");
        cmd->add_option("--epochs", t.epochs, "Maximum epochs");
        cmd->add_option("--lr", t.lr, "Learning rate");
        cmd->add_option("--batch-size", t.batch_size, "Sequences per batch");
        cmd->add_option("--patience", t.patience, "Early-stopping patience");
        cmd->add_option("--seed", t.seed, "Seed for splits, initialisation and batching");
        cmd->add_option("--valid-fraction", t.valid_fraction, "Validation share");
        cmd->add_flag("--verbose", t.verbose, "Print per-epoch progress to stderr");
    };

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a neural TPP");
    add_train_options(train_cmd, tr);
    train_cmd->add_option("--test-fraction", tr.test_fraction, "Held-out test share");
    train_cmd->callback(dispatch([&] { return run_train(tr, common); }));

    TrainArgs cv;
    auto* cv_cmd = app.add_subcommand("cv", "K-fold cross-validation of a neural TPP");
    add_train_options(cv_cmd, cv);
    cv_cmd->add_option("--folds", cv.folds, "Number of folds");
    cv_cmd->callback(dispatch([&] { return run_cv(cv, common); }));

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "Next-mark classification report");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", ev.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", ev.out, "Write the report as JSON");
    eval_cmd->callback(dispatch([&] { return run_evaluate(ev, common); }));

    TraceArgs tc;
    auto* trace_cmd = app.add_subcommand("trace", "Intensity trace of one sequence (CSV and SVG)");
    trace_cmd->add_option("--checkpoint", tc.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
    trace_cmd->add_option("--params", tc.params, "Hawkes parameters instead of a model")->check(CLI::ExistingFile);
    trace_cmd->add_option("--data", tc.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
    trace_cmd->add_option("--out", tc.out, "Output prefix (.csv and .svg are appended)")->required();
    trace_cmd->add_option("--class-count", tc.class_count, "Declared number of classes");
    trace_cmd->add_option("--index", tc.index, "Sequence index");
    trace_cmd->add_option("--seq-id", tc.seq_id, "Sequence id (overrides --index)");
    trace_cmd->add_option("--points", tc.points, "Grid points");
    trace_cmd->add_option("--begin", tc.begin, "Grid start");
    trace_cmd->add_option("--end", tc.end, "Grid end");
    trace_cmd->callback(dispatch([&] { return run_trace(tc, common); }));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? cli::exit_ok : cli::exit_usage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return cli::exit_data;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return cli::exit_numerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return code;
}
