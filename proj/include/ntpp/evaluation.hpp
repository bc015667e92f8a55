#pragma once

#include "ntpp/data.hpp"
#include "ntpp/hawkes.hpp"
#include "ntpp/model.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

/// Next-mark classification metrics, intensity traces and the true-model
/// baseline. Where a precision, recall or F1 denominator is zero the metric
/// is 0.
namespace ntpp::eval {

struct ClassMetrics {
    double precision{0.0};
    double recall{0.0};
    double f1{0.0};
    std::size_t support{0};
    /// Number of times the class was predicted.
    std::size_t predicted{0};

    friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct EvalReport {
    std::size_t n{0};
    double accuracy{0.0};
    /// Support-weighted mean of per-class F1 (classes without support carry no weight).
    double weighted_f1{0.0};
    /// Unweighted mean of per-class F1 over classes that occur in the truth
    /// or the predictions.
    double macro_f1{0.0};
    std::vector<ClassMetrics> per_class;
    std::vector<std::string> class_names;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Throws std::invalid_argument on a length mismatch or a label outside [0, K).
EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& predictions, int class_count);

double weighted_f1(const std::vector<int>& truth, const std::vector<int>& predictions, int class_count);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Aligned table with columns Precision, Recall, F1 Score, # samples, one
/// row per class in index order, followed by accuracy and averages.
std::string format_report(const EvalReport& report);

struct ClassificationReport {
    std::string table;
    EvalReport report;
};

/// K is the number of names.
ClassificationReport classification_report(const std::vector<int>& truth, const std::vector<int>& predictions,
                                           const std::vector<std::string>& class_names);

/// The dataset with times expressed in the units the model was trained on
/// (a copy rescaled by model.time_scale / dataset.time_scale when they differ).
data::Dataset in_model_units(const nn::NeuralTppModel& model, const data::Dataset& dataset);

/// Every event i >= 2 of every sequence is classified by the argmax of
/// predict_mark at its true time given the true history. The dataset is
/// first converted with in_model_units.
EvalReport evaluate_next_mark(const nn::NeuralTppModel& model, const data::Dataset& dataset,
                              std::size_t batch_size = 256, int threads = 1);

/// Predicted marks of evaluate_next_mark in the same order, with the truth.
struct MarkLabels {
    std::vector<int> truth;
    std::vector<int> predicted;
};
MarkLabels next_mark_labels(const nn::NeuralTppModel& model, const data::Dataset& dataset,
                            std::size_t batch_size = 256, int threads = 1);

/// Bayes classifier under the generating Hawkes process: argmax_k
/// lambda_k(t_i) given the true history, on the same events as
/// evaluate_next_mark. Times must be in the units the params refer to.
MarkLabels oracle_labels(const hawkes::HawkesParams& params, const data::Dataset& dataset);
EvalReport oracle_accuracy(const hawkes::HawkesParams& params, const data::Dataset& dataset);

/// Always predicts the most frequent true class on the scored events.
EvalReport majority_baseline(const data::Dataset& dataset);

// ---------------------------------------------------------------------------
// Intensity traces.

struct GridSpec {
    std::size_t points{200};
    /// Defaults to [0, t_end] of the traced sequence.
    std::optional<double> begin;
    std::optional<double> end;
};

struct IntensityTrace {
    std::vector<double> grid;
    /// values[g][k] = lambda_k(grid[g]).
    std::vector<std::vector<double>> values;
    std::vector<data::Event> events;
    std::vector<std::string> class_names;
};

/// Uniform grid; throws std::invalid_argument if it leaves [0, t_end] or has
/// fewer than two points.
std::vector<double> make_grid(const data::EventSequence& seq, const GridSpec& spec);

/// Model intensities for a sequence in original time units (grid and rates
/// are reported in those units), each grid point conditioned on the events
/// strictly before it.
IntensityTrace intensity_trace(const nn::NeuralTppModel& model, const data::EventSequence& seq,
                               const GridSpec& spec, const std::vector<std::string>& class_names = {});

IntensityTrace hawkes_trace(const hawkes::HawkesParams& params, const data::EventSequence& seq,
                            const GridSpec& spec, const std::vector<std::string>& class_names = {});

/// Header `t,lambda_0,...,lambda_{K-1}`; values in %.10e.
std::string trace_csv(const IntensityTrace& trace);

/// Standalone SVG line plot, one polyline per class, event ticks along the
/// time axis.
std::string trace_svg(const IntensityTrace& trace, const std::string& title = "");

} // namespace ntpp::eval
