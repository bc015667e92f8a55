#include "ntpp/model.hpp"

#include "ntpp/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ntpp::nn {

using nlohmann::json;

std::string to_string(EncoderKind kind) {
    return kind == EncoderKind::self_attention ? "self_attention" : "recurrent";
}

std::string to_string(DecoderKind kind) {
    switch (kind) {
    case DecoderKind::cond_poisson: return "cond_poisson";
    case DecoderKind::rmtpp: return "rmtpp";
    case DecoderKind::lnm: return "lnm";
    case DecoderKind::mlp_mc: return "mlp_mc";
    case DecoderKind::sa_mc: return "sa_mc";
    }
    throw std::logic_error("unknown decoder kind");
}

EncoderKind parse_encoder_kind(std::string_view text) {
    if (text == "self_attention" || text == "sa") {
        return EncoderKind::self_attention;
    }
    if (text == "recurrent" || text == "gru" || text == "rnn") {
        return EncoderKind::recurrent;
    }
    throw std::invalid_argument(fmt::format("unknown encoder kind '{}' (expected self_attention or recurrent)", text));
}

DecoderKind parse_decoder_kind(std::string_view text) {
    std::string s(text);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::replace(s.begin(), s.end(), '-', '_');
    if (s.starts_with("sa_") && s != "sa_mc") {
        s = s.substr(3);
    }
    if (s == "cond_poisson") {
        return DecoderKind::cond_poisson;
    }
    if (s == "rmtpp" || s == "rmtpp_poisson") {
        return DecoderKind::rmtpp;
    }
    if (s == "lnm") {
        return DecoderKind::lnm;
    }
    if (s == "mlp_mc") {
        return DecoderKind::mlp_mc;
    }
    if (s == "sa_mc" || s == "sa_sa_mc") {
        return DecoderKind::sa_mc;
    }
    throw std::invalid_argument(fmt::format("unknown decoder kind '{}'", text));
}

std::string model_name(DecoderKind kind) {
    switch (kind) {
    case DecoderKind::cond_poisson: return "sa-cond-poisson";
    case DecoderKind::rmtpp: return "sa-rmtpp-poisson";
    case DecoderKind::lnm: return "sa-lnm";
    case DecoderKind::mlp_mc: return "sa-mlp-mc";
    case DecoderKind::sa_mc: return "sa-sa-mc";
    }
    throw std::logic_error("unknown decoder kind");
}

const std::vector<std::string>& model_names() {
    static const std::vector<std::string> names{"sa-cond-poisson", "sa-lnm", "sa-mlp-mc", "sa-rmtpp-poisson",
                                                "sa-sa-mc"};
    return names;
}

DecoderKind parse_model_name(std::string_view name) {
    for (const auto& n : model_names()) {
        if (n == name) {
            return parse_decoder_kind(n);
        }
    }
    std::string list;
    for (const auto& n : model_names()) {
        list += (list.empty() ? "" : ", ") + n;
    }
    throw std::invalid_argument(fmt::format("unknown model '{}'; expected one of: {}", name, list));
}

bool has_intensity(DecoderKind kind) { return kind != DecoderKind::lnm; }

bool uses_monte_carlo(DecoderKind kind) { return kind == DecoderKind::mlp_mc || kind == DecoderKind::sa_mc; }

void EncoderConfig::validate() const {
    if (d_model < 2 || d_model % 2 != 0) {
        throw std::invalid_argument("encoder.d_model must be even and >= 2");
    }
    if (n_layers < 1) {
        throw std::invalid_argument("encoder.n_layers must be >= 1");
    }
    if (kind == EncoderKind::self_attention && (n_heads < 1 || d_model % n_heads != 0)) {
        throw std::invalid_argument(
            fmt::format("encoder.d_model ({}) must be divisible by encoder.n_heads ({})", d_model, n_heads));
    }
    if (d_ff < 1) {
        throw std::invalid_argument("encoder.d_ff must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw std::invalid_argument("encoder.dropout must be in [0, 1)");
    }
    if (max_context < 1) {
        throw std::invalid_argument("encoder.max_context must be >= 1");
    }
}

void DecoderConfig::validate() const {
    if (mixture_components < 1) {
        throw std::invalid_argument("decoder.mixture_components must be >= 1");
    }
    if (mc_samples_train < 1 || mc_samples_eval < 1) {
        throw std::invalid_argument("decoder MC sample counts must be >= 1");
    }
    if (mlp_hidden < 1 || attention_dim < 1) {
        throw std::invalid_argument("decoder hidden sizes must be >= 1");
    }
    if (!(softplus_scale > 0.0)) {
        throw std::invalid_argument("decoder.softplus_scale must be > 0");
    }
}

void ModelConfig::validate() const {
    if (class_count < 1) {
        throw std::invalid_argument("class_count must be >= 1");
    }
    encoder.validate();
    decoder.validate();
    if (conditioner && conditioner_hidden < 1) {
        throw std::invalid_argument("conditioner_hidden must be >= 1");
    }
}

json to_json(const ModelConfig& c) {
    return json{
        {"class_count", c.class_count},
        {"encoder",
         {{"kind", to_string(c.encoder.kind)},
          {"d_model", c.encoder.d_model},
          {"n_layers", c.encoder.n_layers},
          {"n_heads", c.encoder.n_heads},
          {"d_ff", c.encoder.d_ff},
          {"dropout", c.encoder.dropout},
          {"max_context", c.encoder.max_context}}},
        {"decoder",
         {{"kind", to_string(c.decoder.kind)},
          {"mixture_components", c.decoder.mixture_components},
          {"mc_samples_train", c.decoder.mc_samples_train},
          {"mc_samples_eval", c.decoder.mc_samples_eval},
          {"mlp_hidden", c.decoder.mlp_hidden},
          {"attention_dim", c.decoder.attention_dim},
          {"softplus_scale", c.decoder.softplus_scale},
          {"learnable_softplus_scale", c.decoder.learnable_softplus_scale}}},
        {"conditioner", c.conditioner},
        {"static_dim", c.static_dim},
        {"conditioner_hidden", c.conditioner_hidden},
        {"init_seed", c.init_seed},
    };
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.class_count = j.value("class_count", c.class_count);
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        if (e.contains("kind")) {
            c.encoder.kind = parse_encoder_kind(e.at("kind").get<std::string>());
        }
        c.encoder.d_model = e.value("d_model", c.encoder.d_model);
        c.encoder.n_layers = e.value("n_layers", c.encoder.n_layers);
        c.encoder.n_heads = e.value("n_heads", c.encoder.n_heads);
        c.encoder.d_ff = e.value("d_ff", c.encoder.d_ff);
        c.encoder.dropout = e.value("dropout", c.encoder.dropout);
        c.encoder.max_context = e.value("max_context", c.encoder.max_context);
    }
    if (j.contains("decoder")) {
        const auto& d = j.at("decoder");
        if (d.contains("kind")) {
            c.decoder.kind = parse_decoder_kind(d.at("kind").get<std::string>());
        }
        c.decoder.mixture_components = d.value("mixture_components", c.decoder.mixture_components);
        c.decoder.mc_samples_train = d.value("mc_samples_train", c.decoder.mc_samples_train);
        c.decoder.mc_samples_eval = d.value("mc_samples_eval", c.decoder.mc_samples_eval);
        c.decoder.mlp_hidden = d.value("mlp_hidden", c.decoder.mlp_hidden);
        c.decoder.attention_dim = d.value("attention_dim", c.decoder.attention_dim);
        c.decoder.softplus_scale = d.value("softplus_scale", c.decoder.softplus_scale);
        c.decoder.learnable_softplus_scale = d.value("learnable_softplus_scale", c.decoder.learnable_softplus_scale);
    }
    c.conditioner = j.value("conditioner", c.conditioner);
    c.static_dim = j.value("static_dim", c.static_dim);
    c.conditioner_hidden = j.value("conditioner_hidden", c.conditioner_hidden);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
}

std::vector<double> temporal_encoding(double t, int d_model) {
    if (d_model < 2 || d_model % 2 != 0) {
        throw std::invalid_argument("temporal_encoding: d_model must be even");
    }
    std::vector<double> out(static_cast<std::size_t>(d_model));
    for (int j = 0; 2 * j < d_model; ++j) {
        const double angle = t / std::pow(10000.0, 2.0 * j / d_model);
        out[static_cast<std::size_t>(2 * j)] = std::sin(angle);
        out[static_cast<std::size_t>(2 * j + 1)] = std::cos(angle);
    }
    return out;
}

void ParameterStore::add(std::string name, ad::Tensor value) {
    if (lookup_.contains(name)) {
        throw std::invalid_argument("duplicate parameter " + name);
    }
    lookup_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
}

bool ParameterStore::contains(std::string_view name) const { return lookup_.find(name) != lookup_.end(); }

std::size_t ParameterStore::index(std::string_view name) const {
    const auto it = lookup_.find(name);
    if (it == lookup_.end()) {
        throw std::out_of_range(fmt::format("no parameter named '{}'", name));
    }
    return it->second;
}

ad::Tensor& ParameterStore::at(std::string_view name) { return values_[index(name)]; }

const ad::Tensor& ParameterStore::at(std::string_view name) const { return values_[index(name)]; }

std::size_t ParameterStore::numel() const {
    std::size_t n = 0;
    for (const auto& v : values_) {
        n += v.numel();
    }
    return n;
}

bool ParameterStore::all_finite() const {
    for (const auto& v : values_) {
        for (double x : v.data) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
    }
    return true;
}

std::uint64_t sequence_key(const std::string& id) {
    // FNV-1a: stable across platforms, unlike std::hash.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : id) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

class Initializer {
public:
    Initializer(ParameterStore& store, std::uint64_t seed) : store_(store), root_(seed) {}

    void xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
        Rng rng = root_.split(sequence_key(name));
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        ad::Tensor t({fan_in, fan_out});
        for (auto& v : t.data) {
            v = limit * (2.0 * rng.uniform() - 1.0);
        }
        store_.add(name, std::move(t));
    }

    void constant(const std::string& name, ad::Shape shape, double value) {
        store_.add(name, ad::Tensor(std::move(shape), value));
    }

private:
    ParameterStore& store_;
    Rng root_;
};

} // namespace

NeuralTppModel::NeuralTppModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t k = sz(config_.class_count);
    const std::size_t d = sz(config_.encoder.d_model);
    const std::size_t ff = sz(config_.encoder.d_ff);
    Initializer init(params_, config_.init_seed);

    init.xavier("embedding", k + 1, d);
    for (int l = 0; l < config_.encoder.n_layers; ++l) {
        const std::string p = fmt::format("enc.{}.", l);
        if (config_.encoder.kind == EncoderKind::self_attention) {
            for (const char* m : {"q", "k", "v", "o"}) {
                init.xavier(p + "w" + m, d, d);
                init.constant(p + "b" + m, {d}, 0.0);
            }
            init.constant(p + "ln1.g", {d}, 1.0);
            init.constant(p + "ln1.b", {d}, 0.0);
            init.xavier(p + "ff1.w", d, ff);
            init.constant(p + "ff1.b", {ff}, 0.0);
            init.xavier(p + "ff2.w", ff, d);
            init.constant(p + "ff2.b", {d}, 0.0);
            init.constant(p + "ln2.g", {d}, 1.0);
            init.constant(p + "ln2.b", {d}, 0.0);
        } else {
            // GRU with gates ordered (update, reset, candidate).
            init.xavier(p + "wx", d, 3 * d);
            init.constant(p + "bx", {3 * d}, 0.0);
            init.xavier(p + "uzr", d, 2 * d);
            init.xavier(p + "un", d, d);
        }
    }

    if (config_.conditioner) {
        const std::size_t in = d + config_.static_dim;
        const std::size_t hc = sz(config_.conditioner_hidden);
        init.xavier("cond.a", in, d);
        init.constant("cond.c", {d}, 0.0);
        init.xavier("cond.w1", in, hc);
        init.constant("cond.b1", {hc}, 0.0);
        init.xavier("cond.w2", hc, d);
    }

    const auto& dc = config_.decoder;
    switch (dc.kind) {
    case DecoderKind::cond_poisson:
        init.xavier("dec.w", d, k);
        init.constant("dec.b", {k}, 0.0);
        break;
    case DecoderKind::rmtpp:
        init.xavier("dec.v", d, 1);
        init.constant("dec.b", {1}, 0.0);
        init.constant("dec.wt", {1}, 0.0);
        init.xavier("dec.mark.w", d, k);
        init.constant("dec.mark.b", {k}, 0.0);
        break;
    case DecoderKind::lnm: {
        const std::size_t m = sz(dc.mixture_components);
        init.xavier("dec.w", d, 3 * m);
        init.constant("dec.b", {3 * m}, 0.0);
        init.xavier("dec.mark.w", d, k);
        init.constant("dec.mark.b", {k}, 0.0);
        break;
    }
    case DecoderKind::mlp_mc: {
        const std::size_t h = sz(dc.mlp_hidden);
        init.xavier("dec.w1h", d, h);
        init.xavier("dec.w1t", d, h);
        init.constant("dec.b1", {h}, 0.0);
        init.xavier("dec.w2", h, k);
        init.constant("dec.b2", {k}, 0.0);
        break;
    }
    case DecoderKind::sa_mc: {
        const std::size_t a = sz(dc.attention_dim);
        init.xavier("dec.wq", d, a);
        init.constant("dec.bq", {a}, 0.0);
        init.xavier("dec.wk", d, a);
        init.xavier("dec.wv", d, a);
        init.xavier("dec.wo", a, k);
        init.constant("dec.bo", {k}, 0.0);
        break;
    }
    }
    if (dc.learnable_softplus_scale && has_intensity(dc.kind) && dc.kind != DecoderKind::rmtpp) {
        init.constant("dec.log_scale", {k}, std::log(dc.softplus_scale));
    }
}

void NeuralTppModel::set_identity_conditioner() {
    if (!config_.conditioner) {
        throw std::logic_error("set_identity_conditioner: model has no conditioner");
    }
    const std::size_t d = sz(config_.encoder.d_model);
    auto& a = params_.at("cond.a");
    std::fill(a.data.begin(), a.data.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        a.data[i * d + i] = 1.0;
    }
    auto& c = params_.at("cond.c");
    std::fill(c.data.begin(), c.data.end(), 0.0);
    auto& w2 = params_.at("cond.w2");
    std::fill(w2.data.begin(), w2.data.end(), 0.0);
}

json checkpoint_json(const NeuralTppModel& model) {
    json params = json::array();
    const auto& store = model.parameters();
    for (std::size_t i = 0; i < store.size(); ++i) {
        params.push_back({{"name", store.names()[i]}, {"shape", store.values()[i].shape}, {"data", store.values()[i].data}});
    }
    return json{{"format", "ntpp-checkpoint"},
                {"version", 1},
                {"config", to_json(model.config())},
                {"time_scale", model.time_scale},
                {"parameters", std::move(params)}};
}

NeuralTppModel model_from_checkpoint_json(const json& j) {
    if (j.value("format", std::string{}) != "ntpp-checkpoint") {
        throw DataError("not an ntpp checkpoint");
    }
    if (j.value("version", 0) != 1) {
        throw DataError(fmt::format("unsupported checkpoint version {}", j.value("version", 0)));
    }
    NeuralTppModel model(model_config_from_json(j.at("config")));
    model.time_scale = j.value("time_scale", 1.0);
    auto& store = model.parameters();
    std::size_t seen = 0;
    for (const auto& p : j.at("parameters")) {
        const auto name = p.at("name").get<std::string>();
        if (!store.contains(name)) {
            throw DataError("checkpoint has unexpected parameter " + name);
        }
        auto& t = store.at(name);
        const auto shape = p.at("shape").get<ad::Shape>();
        auto data = p.at("data").get<std::vector<double>>();
        if (shape != t.shape || data.size() != t.numel()) {
            throw DataError(fmt::format("checkpoint parameter {} has shape {}, model expects {}", name,
                                        ad::to_string(shape), ad::to_string(t.shape)));
        }
        t.data = std::move(data);
        ++seen;
    }
    if (seen != store.size()) {
        throw DataError(fmt::format("checkpoint holds {} of {} parameters", seen, store.size()));
    }
    return model;
}

void save_checkpoint(const NeuralTppModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << checkpoint_json(model).dump() << '\n';
    if (!out) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

NeuralTppModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return model_from_checkpoint_json(j);
}

std::vector<Window> history_windows(std::size_t n_events, std::size_t max_context) {
    const std::size_t positions = n_events + 1;
    const std::size_t c = std::max<std::size_t>(1, max_context);
    if (positions <= c) {
        return {{0, positions, 0}};
    }
    const std::size_t stride = std::max<std::size_t>(1, c / 2);
    std::vector<Window> windows{{0, c, 0}};
    std::size_t covered = c;
    for (std::size_t start = stride; covered < positions; start += stride) {
        const std::size_t end = std::min(start + c, positions);
        windows.push_back({start, end - start, covered});
        covered = end;
    }
    return windows;
}

std::size_t Batch::padded_positions() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{0}));
}

Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices, std::size_t max_context,
                 std::size_t static_dim) {
    Batch b;
    b.sequences.assign(indices.begin(), indices.end());
    const auto bos = static_cast<std::size_t>(dataset.class_count);

    struct RowPlan {
        std::size_t seq;
        Window w;
    };
    std::vector<RowPlan> plan;
    for (std::size_t s = 0; s < indices.size(); ++s) {
        const auto& seq = dataset.sequences.at(indices[s]);
        for (const auto& w : history_windows(seq.size(), max_context)) {
            plan.push_back({s, w});
            b.width = std::max(b.width, w.length);
        }
        if (static_dim > 0) {
            if (!seq.static_features || seq.static_features->size() != static_dim) {
                throw DataError(fmt::format("sequence '{}' lacks static features of length {}", seq.id, static_dim));
            }
            b.static_features.push_back(*seq.static_features);
        } else {
            b.static_features.push_back(seq.static_features.value_or(std::vector<double>{}));
        }
        b.sequence_keys.push_back(sequence_key(seq.id));
    }
    b.rows = plan.size();
    b.tokens.assign(b.rows * b.width, bos);
    b.times.assign(b.rows * b.width, 0.0);
    b.valid.assign(b.rows * b.width, 0);
    b.row_sequence.resize(b.rows);
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& rp = plan[r];
        const auto& seq = dataset.sequences[indices[rp.seq]];
        b.row_sequence[r] = rp.seq;
        double last = 0.0;
        for (std::size_t c = 0; c < b.width; ++c) {
            const std::size_t i = r * b.width + c;
            if (c < rp.w.length) {
                const std::size_t p = rp.w.start + c;
                if (p > 0) {
                    const auto& e = seq.events[p - 1];
                    b.tokens[i] = static_cast<std::size_t>(e.mark);
                    last = e.time;
                }
                b.times[i] = (p > 0) ? last : 0.0;
                b.valid[i] = 1;
                if (p >= rp.w.out_begin) {
                    Batch::Interval iv;
                    iv.row = r;
                    iv.col = c;
                    iv.seq = rp.seq;
                    iv.index = p;
                    iv.start = b.times[i];
                    if (p < seq.size()) {
                        iv.dt = seq.events[p].time - iv.start;
                        iv.next_mark = seq.events[p].mark;
                    } else {
                        iv.dt = std::max(0.0, seq.t_end - iv.start);
                        iv.next_mark = -1;
                    }
                    b.intervals.push_back(iv);
                }
            } else {
                b.times[i] = last;
            }
        }
    }
    std::stable_sort(b.intervals.begin(), b.intervals.end(), [](const auto& x, const auto& y) {
        return x.seq != y.seq ? x.seq < y.seq : x.index < y.index;
    });
    return b;
}

} // namespace ntpp::nn
