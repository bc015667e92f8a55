#include "ntpp/evaluation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ntpp::eval {

namespace {

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

std::string default_name(const std::vector<std::string>& names, std::size_t k) {
    return k < names.size() ? names[k] : std::to_string(k);
}

std::vector<std::string> resolve_names(const std::vector<std::string>& names, int class_count) {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < static_cast<std::size_t>(class_count); ++k) {
        out.push_back(default_name(names, k));
    }
    return out;
}

std::string xml_escape(const std::string& text) {
    std::string out;
    for (char c : text) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& predictions, int class_count) {
    if (truth.size() != predictions.size()) {
        throw std::invalid_argument(fmt::format("evaluate_predictions: {} labels but {} predictions", truth.size(),
                                                predictions.size()));
    }
    if (class_count < 0) {
        throw std::invalid_argument("evaluate_predictions: negative class count");
    }
    const auto k = static_cast<std::size_t>(class_count);
    std::vector<std::size_t> tp(k, 0), predicted(k, 0), support(k, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i];
        const int p = predictions[i];
        if (t < 0 || t >= class_count || p < 0 || p >= class_count) {
            throw std::invalid_argument(
                fmt::format("evaluate_predictions: label pair ({}, {}) at {} outside [0, {})", t, p, i, class_count));
        }
        ++support[static_cast<std::size_t>(t)];
        ++predicted[static_cast<std::size_t>(p)];
        if (t == p) {
            ++tp[static_cast<std::size_t>(t)];
            ++correct;
        }
    }

    EvalReport r;
    r.n = truth.size();
    r.accuracy = ratio(static_cast<double>(correct), static_cast<double>(r.n));
    r.per_class.resize(k);
    std::size_t present = 0;
    double macro = 0.0;
    double weighted = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        auto& m = r.per_class[c];
        m.support = support[c];
        m.predicted = predicted[c];
        m.precision = ratio(static_cast<double>(tp[c]), static_cast<double>(predicted[c]));
        m.recall = ratio(static_cast<double>(tp[c]), static_cast<double>(support[c]));
        m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
        weighted += static_cast<double>(m.support) * m.f1;
        if (support[c] > 0 || predicted[c] > 0) {
            macro += m.f1;
            ++present;
        }
    }
    r.weighted_f1 = ratio(weighted, static_cast<double>(r.n));
    r.macro_f1 = ratio(macro, static_cast<double>(present));
    return r;
}

double weighted_f1(const std::vector<int>& truth, const std::vector<int>& predictions, int class_count) {
    return evaluate_predictions(truth, predictions, class_count).weighted_f1;
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const auto& m = report.per_class[c];
        classes.push_back({{"class", default_name(report.class_names, c)},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"f1", m.f1},
                           {"support", m.support},
                           {"predicted", m.predicted}});
    }
    return {{"n", report.n},
            {"accuracy", report.accuracy},
            {"weighted_f1", report.weighted_f1},
            {"macro_f1", report.macro_f1},
            {"classes", classes}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.n = j.at("n").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.weighted_f1 = j.at("weighted_f1").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    for (const auto& c : j.at("classes")) {
        r.per_class.push_back({c.at("precision").get<double>(), c.at("recall").get<double>(),
                               c.at("f1").get<double>(), c.at("support").get<std::size_t>(),
                               c.value("predicted", std::size_t{0})});
        r.class_names.push_back(c.at("class").get<std::string>());
    }
    return r;
}

std::string format_report(const EvalReport& report) {
    const std::size_t k = report.per_class.size();
    if (k == 0) {
        return "";
    }
    std::size_t width = 12;
    for (std::size_t c = 0; c < k; ++c) {
        width = std::max(width, default_name(report.class_names, c).size() + 2);
    }
    std::ostringstream os;
    os << fmt::format("{:<{}}{:>11}{:>11}{:>11}{:>12}\n", "", width, "Precision", "Recall", "F1 Score", "# samples");
    double macro_p = 0.0, macro_r = 0.0, weighted_p = 0.0, weighted_r = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const auto& m = report.per_class[c];
        os << fmt::format("{:<{}}{:>11.3f}{:>11.3f}{:>11.3f}{:>12}\n", default_name(report.class_names, c), width,
                          m.precision, m.recall, m.f1, m.support);
        weighted_p += static_cast<double>(m.support) * m.precision;
        weighted_r += static_cast<double>(m.support) * m.recall;
        if (m.support > 0 || m.predicted > 0) {
            macro_p += m.precision;
            macro_r += m.recall;
            ++present;
        }
    }
    const double n = static_cast<double>(report.n);
    os << "\n";
    os << fmt::format("{:<{}}{:>11}{:>11}{:>11.3f}{:>12}\n", "accuracy", width, "", "", report.accuracy, report.n);
    os << fmt::format("{:<{}}{:>11.3f}{:>11.3f}{:>11.3f}{:>12}\n", "macro avg", width,
                      ratio(macro_p, static_cast<double>(present)), ratio(macro_r, static_cast<double>(present)),
                      report.macro_f1, report.n);
    os << fmt::format("{:<{}}{:>11.3f}{:>11.3f}{:>11.3f}{:>12}\n", "weighted avg", width, ratio(weighted_p, n),
                      ratio(weighted_r, n), report.weighted_f1, report.n);
    return os.str();
}

ClassificationReport classification_report(const std::vector<int>& truth, const std::vector<int>& predictions,
                                           const std::vector<std::string>& class_names) {
    ClassificationReport out;
    if (truth.empty() && predictions.empty()) {
        out.report.class_names = class_names;
        return out;
    }
    out.report = evaluate_predictions(truth, predictions, static_cast<int>(class_names.size()));
    out.report.class_names = class_names;
    out.table = format_report(out.report);
    return out;
}

data::Dataset in_model_units(const nn::NeuralTppModel& model, const data::Dataset& dataset) {
    if (model.time_scale == dataset.time_scale) {
        return dataset;
    }
    return data::rescale_times(dataset, model.time_scale / dataset.time_scale);
}

MarkLabels next_mark_labels(const nn::NeuralTppModel& model, const data::Dataset& dataset, std::size_t batch_size,
                            int threads) {
    const data::Dataset scaled = in_model_units(model, dataset);
    const auto preds = nn::next_mark_predictions(model, scaled, batch_size, threads);
    MarkLabels out;
    out.truth = preds.truth;
    out.predicted.reserve(preds.distributions.size());
    for (const auto& d : preds.distributions) {
        out.predicted.push_back(d.argmax());
    }
    return out;
}

EvalReport evaluate_next_mark(const nn::NeuralTppModel& model, const data::Dataset& dataset, std::size_t batch_size,
                              int threads) {
    const auto labels = next_mark_labels(model, dataset, batch_size, threads);
    EvalReport r = evaluate_predictions(labels.truth, labels.predicted, model.config().class_count);
    r.class_names = resolve_names(dataset.class_names, model.config().class_count);
    return r;
}

MarkLabels oracle_labels(const hawkes::HawkesParams& params, const data::Dataset& dataset) {
    if (dataset.time_scale != 1.0) {
        return oracle_labels(params, data::denormalize_times(dataset));
    }
    MarkLabels out;
    for (const auto& s : dataset.sequences) {
        for (std::size_t i = 1; i < s.size(); ++i) {
            const auto history = std::span<const data::Event>(s.events).first(i);
            const auto lam = hawkes::hawkes_intensity(params, history, s.events[i].time);
            const auto best = std::max_element(lam.begin(), lam.end()) - lam.begin();
            out.truth.push_back(s.events[i].mark);
            out.predicted.push_back(static_cast<int>(best));
        }
    }
    return out;
}

EvalReport oracle_accuracy(const hawkes::HawkesParams& params, const data::Dataset& dataset) {
    const auto labels = oracle_labels(params, dataset);
    EvalReport r = evaluate_predictions(labels.truth, labels.predicted, params.dim());
    r.class_names = resolve_names(dataset.class_names, params.dim());
    return r;
}

EvalReport majority_baseline(const data::Dataset& dataset) {
    const int k = std::max(dataset.class_count, 1);
    std::vector<int> truth;
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (const auto& s : dataset.sequences) {
        for (std::size_t i = 1; i < s.size(); ++i) {
            truth.push_back(s.events[i].mark);
            ++counts[static_cast<std::size_t>(s.events[i].mark)];
        }
    }
    const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    EvalReport r = evaluate_predictions(truth, std::vector<int>(truth.size(), majority), k);
    r.class_names = resolve_names(dataset.class_names, k);
    return r;
}

// ---------------------------------------------------------------------------

std::vector<double> make_grid(const data::EventSequence& seq, const GridSpec& spec) {
    const double a = spec.begin.value_or(0.0);
    const double b = spec.end.value_or(seq.t_end);
    if (spec.points < 2) {
        throw std::invalid_argument("intensity grid needs at least two points");
    }
    if (!(a >= 0.0) || !(b <= seq.t_end) || !(a < b)) {
        throw std::invalid_argument(
            fmt::format("intensity grid [{}, {}] must be a proper subinterval of [0, {}]", a, b, seq.t_end));
    }
    std::vector<double> grid(spec.points);
    for (std::size_t i = 0; i < spec.points; ++i) {
        grid[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(spec.points - 1);
    }
    grid.back() = b;
    return grid;
}

IntensityTrace intensity_trace(const nn::NeuralTppModel& model, const data::EventSequence& seq,
                               const GridSpec& spec, const std::vector<std::string>& class_names) {
    IntensityTrace out;
    out.grid = make_grid(seq, spec);
    out.events = seq.events;
    out.class_names = resolve_names(class_names, model.config().class_count);

    const double scale = model.time_scale;
    data::EventSequence local = seq;
    for (auto& e : local.events) {
        e.time /= scale;
    }
    local.t_end /= scale;
    std::vector<double> grid(out.grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        grid[i] = std::min(out.grid[i] / scale, local.t_end);
    }
    out.values = nn::intensity_grid(model, local, grid);
    for (auto& row : out.values) {
        for (auto& v : row) {
            v /= scale;
        }
    }
    return out;
}

IntensityTrace hawkes_trace(const hawkes::HawkesParams& params, const data::EventSequence& seq,
                            const GridSpec& spec, const std::vector<std::string>& class_names) {
    IntensityTrace out;
    out.grid = make_grid(seq, spec);
    out.events = seq.events;
    out.class_names = resolve_names(class_names, params.dim());
    std::size_t before = 0;
    for (double t : out.grid) {
        while (before < seq.events.size() && seq.events[before].time < t) {
            ++before;
        }
        out.values.push_back(hawkes::hawkes_intensity(params, std::span<const data::Event>(seq.events).first(before), t));
    }
    return out;
}

std::string trace_csv(const IntensityTrace& trace) {
    std::string out = "t";
    const std::size_t k = trace.values.empty() ? trace.class_names.size() : trace.values.front().size();
    for (std::size_t c = 0; c < k; ++c) {
        out += fmt::format(",lambda_{}", c);
    }
    out += "\n";
    for (std::size_t g = 0; g < trace.grid.size(); ++g) {
        out += fmt::format("{:.10e}", trace.grid[g]);
        for (double v : trace.values[g]) {
            out += fmt::format(",{:.10e}", v);
        }
        out += "\n";
    }
    return out;
}

std::string trace_svg(const IntensityTrace& trace, const std::string& title) {
    static const char* palette[] = {"#1f77b4", "#2ca02c", "#d62728", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    const double width = 800, height = 420;
    const double left = 60, right = 160, top = 40, bottom = 50;
    const double pw = width - left - right;
    const double ph = height - top - bottom;
    const std::size_t k = trace.values.empty() ? 0 : trace.values.front().size();

    double t0 = trace.grid.empty() ? 0.0 : trace.grid.front();
    double t1 = trace.grid.empty() ? 1.0 : trace.grid.back();
    if (t1 <= t0) {
        t1 = t0 + 1.0;
    }
    double vmax = 0.0;
    for (const auto& row : trace.values) {
        for (double v : row) {
            if (std::isfinite(v)) {
                vmax = std::max(vmax, v);
            }
        }
    }
    if (vmax <= 0.0) {
        vmax = 1.0;
    }
    vmax *= 1.05;
    auto x = [&](double t) { return left + pw * (t - t0) / (t1 - t0); };
    auto y = [&](double v) { return top + ph * (1.0 - v / vmax); };

    std::ostringstream os;
    os << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">)", width,
                      height, width, height)
       << "\n";
    os << R"(<rect width="100%" height="100%" fill="white"/>)" << "\n";
    if (!title.empty()) {
        os << fmt::format(R"(<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>)",
                          left + pw / 2, xml_escape(title))
           << "\n";
    }
    os << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>)", left, top, pw, ph)
       << "\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = vmax * i / 4.0;
        const double t = t0 + (t1 - t0) * i / 4.0;
        os << fmt::format(
                  R"(<text x="{:.1f}" y="{:.1f}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3g}</text>)",
                  left - 6, y(v) + 4, v)
           << "\n";
        os << fmt::format(
                  R"(<text x="{:.1f}" y="{:.1f}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.3g}</text>)",
                  x(t), top + ph + 18, t)
           << "\n";
    }
    os << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-family="sans-serif" font-size="12" text-anchor="middle">t</text>)",
                      left + pw / 2, height - 8)
       << "\n";
    for (std::size_t c = 0; c < k; ++c) {
        const char* color = palette[c % std::size(palette)];
        os << fmt::format(R"(<polyline fill="none" stroke="{}" stroke-width="1.5" points=")", color);
        for (std::size_t g = 0; g < trace.grid.size(); ++g) {
            os << fmt::format("{:.2f},{:.2f} ", x(trace.grid[g]), y(trace.values[g][c]));
        }
        os << "\"/>\n";
        const std::string name = c < trace.class_names.size() ? trace.class_names[c] : std::to_string(c);
        const double ly = top + 16.0 * static_cast<double>(c) + 8;
        os << fmt::format(R"(<line x1="{:.1f}" y1="{:.1f}" x2="{:.1f}" y2="{:.1f}" stroke="{}" stroke-width="2"/>)",
                          left + pw + 12, ly, left + pw + 32, ly, color)
           << "\n";
        os << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-family="sans-serif" font-size="12">{}</text>)",
                          left + pw + 38, ly + 4, xml_escape(name))
           << "\n";
    }
    for (const auto& e : trace.events) {
        if (e.time < t0 || e.time > t1) {
            continue;
        }
        const char* color = palette[static_cast<std::size_t>(e.mark) % std::size(palette)];
        os << fmt::format(R"(<line x1="{:.2f}" y1="{:.1f}" x2="{:.2f}" y2="{:.1f}" stroke="{}" stroke-width="1"/>)",
                          x(e.time), top + ph, x(e.time), top + ph - 8, color)
           << "\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace ntpp::eval
