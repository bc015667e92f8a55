#include "ntpp/training.hpp"

#include "ntpp/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ntpp::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

/// Independent 64-bit seed for a (purpose, index) pair.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
    return Rng(seed, purpose).split(index).next_u64();
}

constexpr std::uint64_t kOrderStream = 0x0BA7C4;
constexpr std::uint64_t kDropoutStream = 0xD209;
constexpr std::uint64_t kMcStream = 0x3C7A;
constexpr std::uint64_t kValidMcStream = 0x3C7B;
constexpr std::uint64_t kFoldInitStream = 0xF01D;
constexpr std::uint64_t kFoldTrainStream = 0xF01E;

struct Adam {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step{0};

    explicit Adam(const nn::ParameterStore& params) {
        for (const auto& t : params.values()) {
            m.emplace_back(t.numel(), 0.0);
            v.emplace_back(t.numel(), 0.0);
        }
    }

    void update(nn::ParameterStore& params, const std::vector<std::vector<double>>& grads, const TrainConfig& cfg) {
        ++step;
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
        auto& values = params.values();
        for (std::size_t p = 0; p < values.size(); ++p) {
            auto& w = values[p].data;
            const auto& g = grads[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[p][i] = cfg.adam_beta1 * m[p][i] + (1.0 - cfg.adam_beta1) * g[i];
                v[p][i] = cfg.adam_beta2 * v[p][i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                const double mhat = m[p][i] / c1;
                const double vhat = v[p][i] / c2;
                w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
            }
        }
    }
};

std::size_t static_dim_of(const nn::NeuralTppModel& model) {
    return model.has_conditioner() ? model.config().static_dim : 0;
}

} // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) {
        throw std::invalid_argument("batch_size must be at least 1");
    }
    if (max_epochs < 0) {
        throw std::invalid_argument("max_epochs must be non-negative");
    }
    if (patience < 1) {
        throw std::invalid_argument("patience must be at least 1");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be a non-negative finite number");
    }
    if (folds < 2) {
        throw std::invalid_argument("folds must be at least 2");
    }
    if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) {
        throw std::invalid_argument("valid_fraction must lie in (0, 1)");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw std::invalid_argument("adam_beta1 and adam_beta2 must lie in [0, 1)");
    }
    if (!(adam_epsilon > 0.0)) {
        throw std::invalid_argument("adam_epsilon must be positive");
    }
    if (threads < 1) {
        throw std::invalid_argument("threads must be at least 1");
    }
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"learning_rate", c.learning_rate},
            {"patience", c.patience},
            {"seed", c.seed},
            {"folds", c.folds},
            {"valid_fraction", c.valid_fraction},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"threads", c.threads}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) {
        throw std::invalid_argument("train config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "batch_size") {
                c.batch_size = value.get<std::size_t>();
            } else if (key == "max_epochs") {
                c.max_epochs = value.get<int>();
            } else if (key == "learning_rate") {
                c.learning_rate = value.get<double>();
            } else if (key == "patience") {
                c.patience = value.get<int>();
            } else if (key == "seed") {
                c.seed = value.get<std::uint64_t>();
            } else if (key == "folds") {
                c.folds = value.get<int>();
            } else if (key == "valid_fraction") {
                c.valid_fraction = value.get<double>();
            } else if (key == "adam_beta1") {
                c.adam_beta1 = value.get<double>();
            } else if (key == "adam_beta2") {
                c.adam_beta2 = value.get<double>();
            } else if (key == "adam_epsilon") {
                c.adam_epsilon = value.get<double>();
            } else if (key == "threads") {
                c.threads = value.get<int>();
            } else {
                throw std::invalid_argument(fmt::format("unknown train config key \"{}\"", key));
            }
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(fmt::format("train config key \"{}\": {}", key, e.what()));
        }
    }
    c.validate();
    return c;
}

std::vector<nn::Batch> make_batches(const data::Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                                    std::size_t max_context, std::size_t static_dim) {
    if (batch_size < 1) {
        throw std::invalid_argument("batch_size must be at least 1");
    }
    std::vector<std::size_t> order = data::shuffled_indices(dataset.size(), derive_seed(seed, kOrderStream, 0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dataset.sequences[a].size() < dataset.sequences[b].size();
    });
    const std::size_t n_batches = (order.size() + batch_size - 1) / batch_size;
    std::vector<nn::Batch> out;
    out.reserve(n_batches);
    for (const std::size_t b : data::shuffled_indices(n_batches, derive_seed(seed, kOrderStream, 1))) {
        const std::size_t begin = b * batch_size;
        const std::size_t end = std::min(order.size(), begin + batch_size);
        out.push_back(nn::make_batch(dataset, std::span<const std::size_t>(order).subspan(begin, end - begin),
                                     max_context, static_dim));
    }
    return out;
}

ad::Var batch_loss(const nn::Binding& params, const nn::Batch& batch, const nn::ForwardOptions& options) {
    const ad::Var total = nn::batch_nll(params, batch, options);
    return ad::scale(total, 1.0 / static_cast<double>(std::max<std::size_t>(1, batch.n_sequences())));
}

bool TrainReport::same_metrics(const TrainReport& other) const {
    if (epochs.size() != other.epochs.size() || best_epoch != other.best_epoch ||
        best_valid_nll != other.best_valid_nll || early_stopped != other.early_stopped) {
        return false;
    }
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const auto& a = epochs[i];
        const auto& b = other.epochs[i];
        if (a.epoch != b.epoch || a.train_nll != b.train_nll || a.valid_nll != b.valid_nll) {
            return false;
        }
    }
    return true;
}

nlohmann::json to_json(const TrainReport& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        epochs.push_back(
            {{"epoch", e.epoch}, {"train_nll", e.train_nll}, {"valid_nll", e.valid_nll}, {"seconds", e.seconds}});
    }
    return {{"epochs", epochs},
            {"best_epoch", r.best_epoch},
            {"best_valid_nll", r.best_valid_nll},
            {"early_stopped", r.early_stopped},
            {"wall_seconds", r.wall_seconds}};
}

std::string format_report(const TrainReport& r) {
    std::ostringstream os;
    os << fmt::format("{:>6}{:>16}{:>16}{:>10}\n", "epoch", "train NLL", "valid NLL", "seconds");
    for (const auto& e : r.epochs) {
        os << fmt::format("{:>6}{:>16.6f}{:>16.6f}{:>10.1f}{}\n", e.epoch, e.train_nll, e.valid_nll, e.seconds,
                          e.epoch == r.best_epoch ? "  *" : "");
    }
    os << fmt::format("best epoch {} (valid NLL {:.6f}){}, {:.1f} s\n", r.best_epoch, r.best_valid_nll,
                      r.early_stopped ? ", early stop" : "", r.wall_seconds);
    return os.str();
}

DivergenceError::DivergenceError(const std::string& what, nn::NeuralTppModel last_finite, TrainReport report)
    : NumericalError(what),
      last_finite_(std::make_shared<const nn::NeuralTppModel>(std::move(last_finite))),
      report_(std::move(report)) {}

TrainResult train(const nn::NeuralTppModel& init, const data::Dataset& train_set, const data::Dataset& valid_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.size() == 0) {
        throw DataError("training set is empty");
    }
    if (valid_set.size() == 0) {
        throw DataError("validation set is empty");
    }
    const auto start = Clock::now();
    const auto& mcfg = init.config();
    const auto max_context = static_cast<std::size_t>(mcfg.encoder.max_context);
    const std::size_t static_dim = static_dim_of(init);
    const std::size_t eval_batch = std::max<std::size_t>(config.batch_size, 64);

    nn::ForwardOptions eval_opts;
    eval_opts.mc_seed = derive_seed(config.seed, kValidMcStream, 0);

    nn::NeuralTppModel model = init;
    TrainReport report;
    auto valid_nll = [&](const nn::NeuralTppModel& m) {
        return nn::mean_nll(m, valid_set, eval_batch, eval_opts, config.threads);
    };

    {
        const auto t0 = Clock::now();
        EpochRecord e0;
        e0.epoch = 0;
        e0.train_nll = nn::mean_nll(model, train_set, eval_batch, eval_opts, config.threads);
        e0.valid_nll = valid_nll(model);
        e0.seconds = seconds_since(t0);
        if (!std::isfinite(e0.train_nll) || !std::isfinite(e0.valid_nll)) {
            throw DivergenceError("initial parameters give a non-finite NLL", model, report);
        }
        report.epochs.push_back(e0);
        report.best_epoch = 0;
        report.best_valid_nll = e0.valid_nll;
        if (on_epoch) {
            on_epoch(e0);
        }
    }
    nn::NeuralTppModel best = model;
    Adam adam(model.parameters());
    std::uint64_t step = 0;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto t0 = Clock::now();
        const nn::NeuralTppModel epoch_start = model;
        const auto batches = make_batches(train_set, config.batch_size,
                                          derive_seed(config.seed, kOrderStream, static_cast<std::uint64_t>(epoch)),
                                          max_context, static_dim);
        double nll_sum = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : batches) {
            nn::ForwardOptions opts;
            opts.training = true;
            opts.dropout_seed = derive_seed(config.seed, kDropoutStream, step);
            opts.mc_seed = derive_seed(config.seed, kMcStream, step);
            opts.mc_samples = mcfg.decoder.mc_samples_train;
            ++step;

            ad::Tape tape;
            nn::Binding binding(model, tape, true);
            ad::Var loss;
            try {
                loss = batch_loss(binding, batch, opts);
            } catch (const NumericalError& e) {
                throw DivergenceError(fmt::format("epoch {}: {}", epoch, e.what()), model, report);
            }
            const double value = loss.value().item();
            tape.backward(loss);
            std::vector<std::vector<double>> grads;
            grads.reserve(binding.vars().size());
            bool finite = std::isfinite(value);
            for (const auto& var : binding.vars()) {
                grads.push_back(tape.gradient(var));
                for (double g : grads.back()) {
                    finite = finite && std::isfinite(g);
                }
            }
            if (!finite) {
                throw DivergenceError(fmt::format("epoch {}: non-finite loss or gradient", epoch), model, report);
            }
            const nn::NeuralTppModel before = model;
            adam.update(model.parameters(), grads, config);
            if (!model.parameters().all_finite()) {
                throw DivergenceError(fmt::format("epoch {}: parameters became non-finite", epoch), before, report);
            }
            nll_sum += value * static_cast<double>(batch.n_sequences());
            seen += batch.n_sequences();
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_nll = nll_sum / static_cast<double>(std::max<std::size_t>(1, seen));
        try {
            rec.valid_nll = valid_nll(model);
        } catch (const NumericalError& e) {
            throw DivergenceError(fmt::format("epoch {} validation: {}", epoch, e.what()), epoch_start, report);
        }
        if (!std::isfinite(rec.valid_nll)) {
            throw DivergenceError(fmt::format("epoch {}: non-finite validation NLL", epoch), epoch_start, report);
        }
        rec.seconds = seconds_since(t0);
        report.epochs.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        if (rec.valid_nll < report.best_valid_nll) {
            report.best_valid_nll = rec.valid_nll;
            report.best_epoch = epoch;
            best = model;
        } else if (epoch - report.best_epoch >= config.patience) {
            report.early_stopped = true;
            break;
        }
    }
    report.wall_seconds = seconds_since(start);
    return {std::move(best), std::move(report)};
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    if (values.empty()) {
        return s;
    }
    double sum = 0.0;
    for (double v : values) {
        sum += v;
    }
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) {
            ss += (v - s.mean) * (v - s.mean);
        }
        s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

CvResult cross_validate(const nn::ModelConfig& model_config, const data::Dataset& dataset, const TrainConfig& config,
                        const std::function<void(int fold, const EpochRecord&)>& on_epoch) {
    config.validate();
    data::validate(dataset);
    const auto n_folds = static_cast<std::size_t>(config.folds);
    const int outer = std::min(config.threads, config.folds);
    const int inner = std::max(1, config.threads / std::max(1, outer));

    std::vector<FoldResult> results(n_folds);
    parallel_for(n_folds, outer, [&](std::size_t f) {
        const int fold = static_cast<int>(f);
        const data::Split split = data::kfold_split(dataset, config.folds, fold, config.valid_fraction, config.seed);
        const double scale = data::mean_inter_event_time(split.train);
        if (!(scale > 0.0)) {
            throw DataError(fmt::format("fold {}: training portion has no inter-event interval", fold));
        }
        const data::Dataset train_set = data::rescale_times(split.train, scale);
        const data::Dataset valid_set = data::rescale_times(split.valid, scale);
        const data::Dataset test_set = data::rescale_times(split.test, scale);

        nn::ModelConfig mc = model_config;
        mc.init_seed = derive_seed(config.seed, kFoldInitStream, f);
        nn::NeuralTppModel model(mc);
        model.time_scale = train_set.time_scale;

        TrainConfig tc = config;
        tc.seed = derive_seed(config.seed, kFoldTrainStream, f);
        tc.threads = inner;
        EpochCallback cb;
        if (on_epoch) {
            cb = [&, fold](const EpochRecord& e) { on_epoch(fold, e); };
        }
        TrainResult trained = train(model, train_set, valid_set, tc, cb);

        FoldResult& r = results[f];
        r.fold = fold;
        r.train = std::move(trained.report);
        r.time_scale = train_set.time_scale;
        r.train_sequences = train_set.size();
        r.valid_sequences = valid_set.size();
        r.test_sequences = test_set.size();
        nn::ForwardOptions eval_opts;
        eval_opts.mc_seed = derive_seed(tc.seed, kValidMcStream, 1);
        r.test_nll = nn::mean_nll(trained.model, test_set, std::max<std::size_t>(config.batch_size, 64), eval_opts,
                                  inner);
        r.eval = eval::evaluate_next_mark(trained.model, test_set, 256, inner);
    });

    CvResult out;
    out.folds = std::move(results);
    std::vector<double> acc, wf1, mf1, nll;
    for (const auto& r : out.folds) {
        acc.push_back(r.eval.accuracy);
        wf1.push_back(r.eval.weighted_f1);
        mf1.push_back(r.eval.macro_f1);
        nll.push_back(r.test_nll);
    }
    out.accuracy = summarize(acc);
    out.weighted_f1 = summarize(wf1);
    out.macro_f1 = summarize(mf1);
    out.test_nll = summarize(nll);
    return out;
}

nlohmann::json to_json(const CvResult& result) {
    auto summary = [](const Summary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : result.folds) {
        folds.push_back({{"fold", f.fold},
                         {"eval", eval::to_json(f.eval)},
                         {"train", to_json(f.train)},
                         {"test_nll", f.test_nll},
                         {"time_scale", f.time_scale},
                         {"train_sequences", f.train_sequences},
                         {"valid_sequences", f.valid_sequences},
                         {"test_sequences", f.test_sequences}});
    }
    return {{"folds", folds},
            {"summary",
             {{"accuracy", summary(result.accuracy)},
              {"weighted_f1", summary(result.weighted_f1)},
              {"macro_f1", summary(result.macro_f1)},
              {"test_nll", summary(result.test_nll)}}}};
}

std::string format_summary(const CvResult& result) {
    std::ostringstream os;
    os << fmt::format("{:>6}{:>12}{:>14}{:>12}{:>12}{:>12}\n", "fold", "accuracy", "weighted F1", "macro F1",
                      "test NLL", "best epoch");
    for (const auto& f : result.folds) {
        os << fmt::format("{:>6}{:>12.4f}{:>14.4f}{:>12.4f}{:>12.4f}{:>12}\n", f.fold, f.eval.accuracy,
                          f.eval.weighted_f1, f.eval.macro_f1, f.test_nll, f.train.best_epoch);
    }
    os << fmt::format("{:>6}{:>12.4f}{:>14.4f}{:>12.4f}{:>12.4f}\n", "mean", result.accuracy.mean,
                      result.weighted_f1.mean, result.macro_f1.mean, result.test_nll.mean);
    os << fmt::format("{:>6}{:>12.4f}{:>14.4f}{:>12.4f}{:>12.4f}\n", "std", result.accuracy.std,
                      result.weighted_f1.std, result.macro_f1.std, result.test_nll.std);
    return os.str();
}

} // namespace ntpp::train
