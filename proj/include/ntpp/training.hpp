#pragma once

#include "ntpp/data.hpp"
#include "ntpp/error.hpp"
#include "ntpp/evaluation.hpp"
#include "ntpp/model.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ntpp::train {

struct TrainConfig {
    std::size_t batch_size{512};
    int max_epochs{100};
    double learning_rate{1e-3};
    /// Epochs without a strict improvement of the validation NLL before stopping.
    int patience{10};
    std::uint64_t seed{0};
    int folds{5};
    /// Share of the non-test sequences held out for early stopping.
    double valid_fraction{0.1};
    double adam_beta1{0.9};
    double adam_beta2{0.999};
    double adam_epsilon{1e-8};
    /// Worker threads for evaluation passes and parallel folds.
    int threads{1};

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Flat keys mirroring the field names. Unknown keys are rejected.
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

/// Sequences sorted by length (ties in a seeded random order), cut into
/// batches of at most batch_size, then the batch order is shuffled with the
/// same seed.
std::vector<nn::Batch> make_batches(const data::Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                                    std::size_t max_context, std::size_t static_dim = 0);

/// Mean per-sequence NLL of a batch, the loss minimised by train().
ad::Var batch_loss(const nn::Binding& params, const nn::Batch& batch, const nn::ForwardOptions& options);

struct EpochRecord {
    /// Epoch 0 is the evaluation of the initial parameters.
    int epoch{0};
    /// Mean per-sequence NLL on the training set, accumulated over the
    /// epoch's steps (evaluation mode for epoch 0).
    double train_nll{0.0};
    double valid_nll{0.0};
    double seconds{0.0};
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    int best_epoch{0};
    double best_valid_nll{0.0};
    bool early_stopped{false};
    double wall_seconds{0.0};

    /// Equality of everything except timings.
    bool same_metrics(const TrainReport& other) const;
};

nlohmann::json to_json(const TrainReport& report);
std::string format_report(const TrainReport& report);

/// Raised when a step produces a non-finite loss or parameter. Carries the
/// parameters before the failing step and the report up to that point.
class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, nn::NeuralTppModel last_finite, TrainReport report);

    const nn::NeuralTppModel& last_finite() const { return *last_finite_; }
    const TrainReport& report() const { return report_; }

private:
    std::shared_ptr<const nn::NeuralTppModel> last_finite_;
    TrainReport report_;
};

struct TrainResult {
    /// Parameters of the best validation epoch.
    nn::NeuralTppModel model;
    TrainReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on the mean batch NLL with early stopping on validation NLL. Both
/// datasets must already be in the model's time units.
TrainResult train(const nn::NeuralTppModel& init, const data::Dataset& train_set, const data::Dataset& valid_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

struct FoldResult {
    int fold{0};
    eval::EvalReport eval;
    TrainReport train;
    double test_nll{0.0};
    double time_scale{1.0};
    std::size_t train_sequences{0};
    std::size_t valid_sequences{0};
    std::size_t test_sequences{0};
};

struct Summary {
    double mean{0.0};
    /// Sample standard deviation (0 for one fold).
    double std{0.0};
};

struct CvResult {
    std::vector<FoldResult> folds;
    Summary accuracy;
    Summary weighted_f1;
    Summary macro_f1;
    Summary test_nll;
};

Summary summarize(const std::vector<double>& values);

/// One model per fold of kfold_split(dataset, folds, i, valid_fraction,
/// seed). Each fold is normalised by its own training mean inter-event
/// time, initialised from a fold-specific seed, trained, and scored on its
/// test fold. Folds run in parallel when config.threads > 1.
CvResult cross_validate(const nn::ModelConfig& model_config, const data::Dataset& dataset, const TrainConfig& config,
                        const std::function<void(int fold, const EpochRecord&)>& on_epoch = {});

nlohmann::json to_json(const CvResult& result);
std::string format_summary(const CvResult& result);

} // namespace ntpp::train
