#include "ntpp/data.hpp"

#include "ntpp/error.hpp"
#include "ntpp/rng.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace ntpp::data {

using nlohmann::json;

std::size_t Dataset::event_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) {
        n += s.events.size();
    }
    return n;
}

std::size_t Dataset::static_dim() const {
    for (const auto& s : sequences) {
        if (s.static_features) {
            return s.static_features->size();
        }
    }
    return 0;
}

std::string Dataset::class_name(int mark) const {
    if (mark >= 0 && static_cast<std::size_t>(mark) < class_names.size()) {
        return class_names[static_cast<std::size_t>(mark)];
    }
    return std::to_string(mark);
}

void validate_sequence(const EventSequence& seq, int class_count) {
    if (!std::isfinite(seq.t_end) || seq.t_end < 0.0) {
        throw DataError("sequence '" + seq.id + "': t_end must be finite and >= 0");
    }
    double prev = -1.0;
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
        const auto& e = seq.events[i];
        if (!std::isfinite(e.time) || e.time < 0.0) {
            throw DataError(fmt::format("sequence '{}': event {} has invalid time", seq.id, i));
        }
        if (e.time <= prev) {
            throw DataError(fmt::format("sequence '{}': non-monotone times at event {}", seq.id, i));
        }
        if (e.time > seq.t_end) {
            throw DataError(fmt::format("sequence '{}': event {} after t_end", seq.id, i));
        }
        if (e.mark < 0 || e.mark >= class_count) {
            throw DataError(fmt::format("sequence '{}': mark {} outside [0, {})", seq.id, e.mark,
                                        class_count));
        }
        prev = e.time;
    }
    if (seq.static_features) {
        for (double v : *seq.static_features) {
            if (!std::isfinite(v)) {
                throw DataError("sequence '" + seq.id + "': non-finite static feature");
            }
        }
    }
}

void validate(const Dataset& dataset) {
    if (dataset.class_count < 1 && !dataset.sequences.empty()) {
        throw DataError("class count must be positive");
    }
    if (!(dataset.time_scale > 0.0) || !std::isfinite(dataset.time_scale)) {
        throw DataError("time_scale must be positive");
    }
    std::optional<std::size_t> static_len;
    for (const auto& s : dataset.sequences) {
        validate_sequence(s, dataset.class_count);
        const std::size_t len = s.static_features ? s.static_features->size() : 0;
        if (!static_len) {
            static_len = len;
        } else if (*static_len != len) {
            throw DataError("sequence '" + s.id + "': inconsistent static-feature length");
        }
    }
}

std::filesystem::path meta_path(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".meta.json");
}

namespace {

EventSequence parse_record(const json& j, std::size_t line_no) {
    EventSequence seq;
    if (!j.is_object()) {
        throw DataError("expected a JSON object");
    }
    if (j.contains("seq_id")) {
        seq.id = j.at("seq_id").get<std::string>();
    } else {
        seq.id = std::to_string(line_no - 1);
    }
    seq.t_end = j.at("t_end").get<double>();
    for (const auto& e : j.at("events")) {
        seq.events.push_back(Event{e.at("t").get<double>(), e.at("k").get<int>()});
    }
    if (j.contains("static") && !j.at("static").is_null()) {
        seq.static_features = j.at("static").get<std::vector<double>>();
    }
    return seq;
}

} // namespace

Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    Dataset ds;
    std::optional<int> declared = options.class_count;
    if (const auto mp = meta_path(path); std::filesystem::exists(mp)) {
        std::ifstream min(mp);
        json meta;
        try {
            meta = json::parse(min);
        } catch (const json::exception& e) {
            throw DataError(mp.string() + ": " + e.what());
        }
        if (!declared && meta.contains("class_count")) {
            declared = meta.at("class_count").get<int>();
        }
        if (meta.contains("class_names")) {
            ds.class_names = meta.at("class_names").get<std::vector<std::string>>();
        }
        ds.time_scale = meta.value("time_scale", 1.0);
    }

    std::string line;
    std::size_t line_no = 0;
    int max_mark = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        EventSequence seq;
        try {
            seq = parse_record(json::parse(line), line_no);
            validate_sequence(seq, declared.value_or(std::numeric_limits<int>::max()));
        } catch (const json::exception& e) {
            throw DataError(fmt::format("{}: line {}: malformed record: {}", path.string(), line_no, e.what()));
        } catch (const DataError& e) {
            throw DataError(fmt::format("{}: line {}: {}", path.string(), line_no, e.what()));
        }
        for (const auto& e : seq.events) {
            max_mark = std::max(max_mark, e.mark);
        }
        ds.sequences.push_back(std::move(seq));
    }
    ds.class_count = declared ? *declared : max_mark + 1;
    if (!declared && ds.class_count < 1) {
        ds.class_count = 1;
    }
    try {
        validate(ds);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return ds;
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + path.string());
        }
        for (const auto& s : dataset.sequences) {
            json j;
            j["seq_id"] = s.id;
            j["t_end"] = s.t_end;
            json events = json::array();
            for (const auto& e : s.events) {
                events.push_back({{"t", e.time}, {"k", e.mark}});
            }
            j["events"] = std::move(events);
            if (s.static_features) {
                j["static"] = *s.static_features;
            }
            out << j.dump() << '\n';
        }
        if (!out) {
            throw std::runtime_error("I/O failure writing " + path.string());
        }
    }
    json meta{{"class_count", dataset.class_count}, {"time_scale", dataset.time_scale}};
    if (!dataset.class_names.empty()) {
        meta["class_names"] = dataset.class_names;
    }
    std::ofstream mout(meta_path(path), std::ios::binary | std::ios::trunc);
    mout << meta.dump(2) << '\n';
    if (!mout) {
        throw std::runtime_error("I/O failure writing " + meta_path(path).string());
    }
}

double mean_inter_event_time(const Dataset& dataset) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : dataset.sequences) {
        for (std::size_t i = 1; i < s.events.size(); ++i) {
            total += s.events[i].time - s.events[i - 1].time;
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

Dataset rescale_times(const Dataset& dataset, double scale) {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw DataError("time rescaling needs a positive finite scale");
    }
    Dataset out = dataset;
    for (auto& s : out.sequences) {
        for (auto& e : s.events) {
            e.time /= scale;
        }
        s.t_end /= scale;
    }
    out.time_scale = dataset.time_scale * scale;
    return out;
}

Dataset normalize_times(const Dataset& dataset) {
    const double mean = mean_inter_event_time(dataset);
    if (!(mean > 0.0)) {
        throw DataError("cannot normalize times: no positive inter-event intervals");
    }
    return rescale_times(dataset, mean);
}

Dataset denormalize_times(const Dataset& dataset) {
    Dataset out = dataset;
    for (auto& s : out.sequences) {
        for (auto& e : s.events) {
            e.time *= dataset.time_scale;
        }
        s.t_end *= dataset.time_scale;
    }
    out.time_scale = 1.0;
    return out;
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices) {
    Dataset out;
    out.class_count = dataset.class_count;
    out.class_names = dataset.class_names;
    out.time_scale = dataset.time_scale;
    out.sequences.reserve(indices.size());
    for (std::size_t i : indices) {
        out.sequences.push_back(dataset.sequences.at(i));
    }
    return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed, 0x5EED);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.below(i)]);
    }
    return idx;
}

namespace {

void fill_split(const Dataset& dataset, Split& split) {
    split.train = subset(dataset, split.train_index);
    split.valid = subset(dataset, split.valid_index);
    split.test = subset(dataset, split.test_index);
}

} // namespace

Split kfold_split(const Dataset& dataset, int n_folds, int fold_index, double valid_fraction,
                  std::uint64_t seed) {
    const std::size_t n = dataset.size();
    if (n_folds < 2) {
        throw std::invalid_argument("kfold_split: n_folds must be >= 2");
    }
    if (fold_index < 0 || fold_index >= n_folds) {
        throw std::invalid_argument("kfold_split: fold_index out of range");
    }
    if (static_cast<std::size_t>(n_folds) > n) {
        throw DataError(fmt::format("kfold_split: {} folds requested for {} sequences", n_folds, n));
    }
    if (valid_fraction < 0.0 || valid_fraction >= 1.0) {
        throw std::invalid_argument("kfold_split: valid_fraction must be in [0, 1)");
    }
    const auto perm = shuffled_indices(n, seed);
    const std::size_t folds = static_cast<std::size_t>(n_folds);
    const std::size_t base = n / folds;
    const std::size_t extra = n % folds;
    std::size_t begin = 0;
    Split split;
    std::vector<std::size_t> rest;
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        for (std::size_t i = begin; i < begin + len; ++i) {
            if (f == static_cast<std::size_t>(fold_index)) {
                split.test_index.push_back(perm[i]);
            } else {
                rest.push_back(perm[i]);
            }
        }
        begin += len;
    }
    const auto n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(rest.size())));
    split.valid_index.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_valid));
    split.train_index.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_valid), rest.end());
    fill_split(dataset, split);
    return split;
}

Split fraction_split(const Dataset& dataset, double train_fraction, double valid_fraction,
                     std::uint64_t seed) {
    if (train_fraction < 0.0 || valid_fraction < 0.0 || train_fraction + valid_fraction > 1.0) {
        throw std::invalid_argument("fraction_split: fractions must be non-negative and sum to <= 1");
    }
    const std::size_t n = dataset.size();
    const auto perm = shuffled_indices(n, seed);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    const auto n_valid = std::min(n - n_train,
                                  static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n))));
    Split split;
    split.train_index.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.valid_index.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                             perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    split.test_index.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), perm.end());
    fill_split(dataset, split);
    return split;
}

StatsReport dataset_stats(const Dataset& dataset, const Split* splits) {
    StatsReport r;
    r.n_sequences = dataset.size();
    r.class_counts.assign(static_cast<std::size_t>(std::max(dataset.class_count, 0)), 0);
    for (const auto& s : dataset.sequences) {
        for (const auto& e : s.events) {
            r.class_counts.at(static_cast<std::size_t>(e.mark)) += 1;
        }
        r.n_events += s.events.size();
    }
    r.avg_length = r.n_sequences == 0 ? 0.0
                                      : static_cast<double>(r.n_events) / static_cast<double>(r.n_sequences);
    if (splits != nullptr) {
        r.train_events = splits->train.event_count();
        r.valid_events = splits->valid.event_count();
        r.test_events = splits->test.event_count();
    }
    return r;
}

namespace {

std::string thousands(std::size_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    const std::size_t n = digits.size();
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(digits[i]);
        if ((n - i - 1) % 3 == 0 && i + 1 < n) {
            out.push_back(',');
        }
    }
    return out;
}

} // namespace

std::string format_stats(const StatsReport& report, const std::string& name, int class_count) {
    std::ostringstream os;
    os << fmt::format("{:<16}{:>10}{:>12}{:>12}{:>14}{:>12}{:>12}{:>12}\n", "Dataset", "# classes",
                      "# events", "Avg. length", "# sequences", "Train", "Valid", "Test");
    os << fmt::format("{:<16}{:>10}{:>12}{:>12.1f}{:>14}{:>12}{:>12}{:>12}\n", name, class_count,
                      thousands(report.n_events), report.avg_length, thousands(report.n_sequences),
                      thousands(report.train_events), thousands(report.valid_events),
                      thousands(report.test_events));
    os << "\nEvents per class:\n";
    for (std::size_t k = 0; k < report.class_counts.size(); ++k) {
        os << fmt::format("  {:<6}{:>12}\n", k, thousands(report.class_counts[k]));
    }
    return os.str();
}

} // namespace ntpp::data
