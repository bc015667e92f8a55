#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ntpp::data {

struct Event {
    double time{0.0};
    int mark{0};

    friend bool operator==(const Event&, const Event&) = default;
};

/// One user's (or one realisation's) marked events on [0, t_end].
struct EventSequence {
    std::string id;
    std::vector<Event> events;
    double t_end{0.0};
    std::optional<std::vector<double>> static_features;

    std::size_t size() const { return events.size(); }
    bool empty() const { return events.empty(); }

    friend bool operator==(const EventSequence&, const EventSequence&) = default;
};

struct Dataset {
    std::vector<EventSequence> sequences;
    int class_count{0};
    std::vector<std::string> class_names;
    /// Multiply stored times by this to recover the original units.
    double time_scale{1.0};

    std::size_t size() const { return sequences.size(); }
    std::size_t event_count() const;
    /// Length of the static feature vector, or 0 if sequences carry none.
    std::size_t static_dim() const;
    std::string class_name(int mark) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Throws DataError describing the first violated invariant.
void validate_sequence(const EventSequence& seq, int class_count);
void validate(const Dataset& dataset);

struct LoadOptions {
    /// Declared class count. When absent it comes from the metadata sidecar,
    /// or else from the largest mark seen.
    std::optional<int> class_count;
};

/// One JSON record per line:
///   {"seq_id": str, "t_end": num, "events": [{"t": num, "k": int}...], "static": [num...]}
/// Dataset-level fields (class count, names, time scale) live in an optional
/// sidecar `<path>.meta.json`.
Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options = {});
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

std::filesystem::path meta_path(const std::filesystem::path& path);

/// Mean gap between consecutive events within sequences; 0 if there are none.
double mean_inter_event_time(const Dataset& dataset);

/// Divide every time (and t_end) by `scale`, recording it in time_scale.
Dataset rescale_times(const Dataset& dataset, double scale);
/// Rescale by the dataset's own mean inter-event time.
Dataset normalize_times(const Dataset& dataset);
Dataset denormalize_times(const Dataset& dataset);

/// Sequences picked by index, keeping dataset-level metadata.
Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

struct Split {
    Dataset train;
    Dataset valid;
    Dataset test;
    std::vector<std::size_t> train_index;
    std::vector<std::size_t> valid_index;
    std::vector<std::size_t> test_index;
};

/// Seeded permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/// Sequence-level k-fold split. The permutation is cut into n_folds
/// contiguous folds (the first n % n_folds folds get one extra sequence);
/// fold `fold_index` is the test set and the rest is divided into valid
/// (the first round(valid_fraction * rest) of them) and train.
Split kfold_split(const Dataset& dataset, int n_folds, int fold_index, double valid_fraction,
                  std::uint64_t seed);

/// Plain train/valid/test split by fractions (test gets the remainder).
Split fraction_split(const Dataset& dataset, double train_fraction, double valid_fraction,
                     std::uint64_t seed);

struct StatsReport {
    std::size_t n_sequences{0};
    std::size_t n_events{0};
    double avg_length{0.0};
    std::vector<std::size_t> class_counts;
    std::size_t train_events{0};
    std::size_t valid_events{0};
    std::size_t test_events{0};
};

StatsReport dataset_stats(const Dataset& dataset, const Split* splits = nullptr);

/// Aligned text table with the columns of a dataset-properties table.
std::string format_stats(const StatsReport& report, const std::string& name, int class_count);

} // namespace ntpp::data
