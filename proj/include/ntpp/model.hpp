#pragma once

#include "ntpp/autodiff.hpp"
#include "ntpp/data.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

/// Neural temporal point process models: a history encoder (self-attention
/// or recurrent) over [BOS, e_1, ..., e_n], an optional static-feature
/// conditioner, and one of five decoders that turn the embedding h_p of the
/// prefix ending at event p into the law of the next event.
namespace ntpp::nn {

enum class EncoderKind { self_attention, recurrent };

enum class DecoderKind { cond_poisson, rmtpp, lnm, mlp_mc, sa_mc };

std::string to_string(EncoderKind kind);
std::string to_string(DecoderKind kind);
EncoderKind parse_encoder_kind(std::string_view text);
/// Accepts "cond_poisson", "COND_POISSON", or the model name "sa-cond-poisson".
DecoderKind parse_decoder_kind(std::string_view text);

/// Command-line model names: sa-cond-poisson, sa-lnm, sa-mlp-mc, sa-rmtpp-poisson, sa-sa-mc.
std::string model_name(DecoderKind kind);
const std::vector<std::string>& model_names();
/// Throws std::invalid_argument listing the valid names.
DecoderKind parse_model_name(std::string_view name);

/// Intensity-based decoders define lambda_k(t); LNM models the interval
/// density directly.
bool has_intensity(DecoderKind kind);
bool uses_monte_carlo(DecoderKind kind);

struct EncoderConfig {
    EncoderKind kind{EncoderKind::self_attention};
    int d_model{32};
    int n_layers{2};
    int n_heads{2};
    int d_ff{64};
    double dropout{0.1};
    /// Window length in positions (the BOS token counts as one).
    int max_context{128};

    void validate() const;

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct DecoderConfig {
    DecoderKind kind{DecoderKind::cond_poisson};
    int mixture_components{8};
    int mc_samples_train{20};
    int mc_samples_eval{200};
    int mlp_hidden{32};
    /// Inner attention width of the SA_MC decoder.
    int attention_dim{16};
    double softplus_scale{1.0};
    bool learnable_softplus_scale{false};

    void validate() const;

    friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

struct ModelConfig {
    int class_count{1};
    EncoderConfig encoder;
    DecoderConfig decoder;
    /// Static-feature conditioner f([h; p]) replacing h before the decoder.
    bool conditioner{false};
    std::size_t static_dim{0};
    int conditioner_hidden{32};
    std::uint64_t init_seed{0};

    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// entry 2j = sin(t / 10000^(2j/d)), entry 2j+1 = cos(t / 10000^(2j/d)).
std::vector<double> temporal_encoding(double t, int d_model);

/// Ordered named tensors.
class ParameterStore {
public:
    void add(std::string name, ad::Tensor value);
    bool contains(std::string_view name) const;
    std::size_t index(std::string_view name) const;
    ad::Tensor& at(std::string_view name);
    const ad::Tensor& at(std::string_view name) const;

    std::size_t size() const { return values_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    std::vector<ad::Tensor>& values() { return values_; }
    const std::vector<ad::Tensor>& values() const { return values_; }
    std::size_t numel() const;
    bool all_finite() const;

    friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

private:
    std::vector<std::string> names_;
    std::vector<ad::Tensor> values_;
    std::map<std::string, std::size_t, std::less<>> lookup_;
};

class NeuralTppModel {
public:
    /// Randomly initialised from config.init_seed.
    explicit NeuralTppModel(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }

    bool has_conditioner() const { return config_.conditioner; }
    /// Sets conditioner weights so that it returns h unchanged.
    void set_identity_conditioner();

    /// Time unit of the data the model was trained on (see data::normalize_times).
    double time_scale{1.0};

    friend bool operator==(const NeuralTppModel&, const NeuralTppModel&) = default;

private:
    ModelConfig config_;
    ParameterStore params_;
};

/// JSON container:
///   {"format": "ntpp-checkpoint", "version": 1, "config": {...},
///    "time_scale": num, "parameters": [{"name": str, "shape": [...], "data": [...]}, ...]}
/// Doubles are written in shortest round-trip form, so load(save(m)) == m.
void save_checkpoint(const NeuralTppModel& model, const std::filesystem::path& path);
NeuralTppModel load_checkpoint(const std::filesystem::path& path);
nlohmann::json checkpoint_json(const NeuralTppModel& model);
NeuralTppModel model_from_checkpoint_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Padded batches.

/// One encoder window: positions [start, start + length) of a sequence's
/// position list (position 0 is BOS at time 0, position p is event p).
/// Embeddings are emitted for positions >= out_begin.
struct Window {
    std::size_t start{0};
    std::size_t length{0};
    std::size_t out_begin{0};
};

/// Windows of at most max_context positions covering n_events + 1
/// positions. Later windows overlap their predecessor by half a window, so
/// every emitted embedding sees at least max_context / 2 positions of
/// history (or the whole prefix when shorter).
std::vector<Window> history_windows(std::size_t n_events, std::size_t max_context);

struct Batch {
    /// Indices of the batch's sequences in the source dataset.
    std::vector<std::size_t> sequences;
    std::size_t rows{0};
    std::size_t width{0};
    /// rows x width, row-major. Token K is BOS; padding carries token K and
    /// valid = 0.
    std::vector<std::size_t> tokens;
    std::vector<double> times;
    std::vector<std::uint8_t> valid;
    std::vector<std::size_t> row_sequence;

    /// Interval p of a sequence runs from position p to event p + 1 (or to
    /// t_end after the last event) and is driven by h_p.
    struct Interval {
        std::size_t row{0};
        std::size_t col{0};
        std::size_t seq{0};
        std::size_t index{0};
        double start{0.0};
        double dt{0.0};
        /// Mark of the event closing the interval, -1 for the censored tail.
        int next_mark{-1};
    };
    std::vector<Interval> intervals;

    /// Per batch-local sequence: static features (possibly empty) and a
    /// stable key derived from the sequence id (seeds MC draws).
    std::vector<std::vector<double>> static_features;
    std::vector<std::uint64_t> sequence_keys;

    std::size_t n_sequences() const { return sequences.size(); }
    std::size_t padded_positions() const;
};

/// Packs the given sequences. A nonzero static_dim requires every sequence
/// to carry static features of that length (DataError otherwise).
Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices, std::size_t max_context,
                 std::size_t static_dim = 0);

std::uint64_t sequence_key(const std::string& id);

// ---------------------------------------------------------------------------
// Differentiable forward pass.

/// Model parameters placed on a tape, in ParameterStore order.
class Binding {
public:
    /// trainable: leaves are variables (gradients collected) or constants.
    Binding(const NeuralTppModel& model, ad::Tape& tape, bool trainable);
    /// Uses caller-provided variables (for gradient checks).
    Binding(const NeuralTppModel& model, ad::Tape& tape, std::vector<ad::Var> vars);

    ad::Var operator()(std::string_view name) const;
    const std::vector<ad::Var>& vars() const { return vars_; }
    ad::Tape& tape() const { return *tape_; }
    const NeuralTppModel& model() const { return *model_; }

private:
    const NeuralTppModel* model_;
    ad::Tape* tape_;
    std::vector<ad::Var> vars_;
};

struct ForwardOptions {
    bool training{false};
    std::uint64_t dropout_seed{0};
    std::uint64_t mc_seed{0};
    /// Monte Carlo points per interval; 0 picks the config's eval count.
    int mc_samples{0};
};

/// Embeddings of all positions of the batch, [rows * width, d_model]. With
/// `conditioned`, models with a conditioner return f([h; p]) instead of h.
ad::Var encode_batch(const Binding& params, const Batch& batch, const ForwardOptions& options,
                     bool conditioned = true);

/// Sum over the batch's sequences of sequence NLL. per_sequence, when
/// given, receives each sequence's NLL. Throws NumericalError naming the
/// sequence and interval if any term is non-finite.
ad::Var batch_nll(const Binding& params, const Batch& batch, const ForwardOptions& options,
                  std::vector<double>* per_sequence = nullptr);

/// NLL of one sequence (evaluation mode).
double nll(const NeuralTppModel& model, const data::EventSequence& seq, const ForwardOptions& options = {});

/// Mean per-sequence NLL over a dataset, computed in batches.
double mean_nll(const NeuralTppModel& model, const data::Dataset& dataset, std::size_t batch_size = 256,
                const ForwardOptions& options = {}, int threads = 1);

// ---------------------------------------------------------------------------
// Inference on concrete histories.

/// Encoder output per position: entry 0 is the BOS state, entry p the state
/// after event p. This is h before any static-feature conditioning.
struct HistoryEmbedding {
    std::vector<std::vector<double>> h;
};

HistoryEmbedding encode_history(const NeuralTppModel& model, const data::EventSequence& seq);

/// Applies the conditioner to a single embedding (returns h when the model
/// has none). Throws DataError if the model has a conditioner and the
/// features are missing.
std::vector<double> parameterize(const NeuralTppModel& model, std::span<const double> h,
                                 const std::optional<std::vector<double>>& static_features);

struct MarkDistribution {
    std::vector<double> p;
    /// Most likely mark; ties go to the lowest index.
    int argmax() const;
};

/// lambda_k(t_last + dt) given all events of `prefix` (t_end is ignored).
/// For LNM this is the hazard of the interval law split by the mark head.
std::vector<double> decoder_intensity(const NeuralTppModel& model, const data::EventSequence& prefix, double dt);

MarkDistribution predict_mark(const NeuralTppModel& model, const data::EventSequence& prefix, double t_next);

/// Teacher-forced next-mark distributions for events 2..n of every
/// sequence, in sequence order, plus the true marks.
struct MarkPredictions {
    std::vector<MarkDistribution> distributions;
    std::vector<int> truth;
};
MarkPredictions next_mark_predictions(const NeuralTppModel& model, const data::Dataset& dataset,
                                      std::size_t batch_size = 256, int threads = 1);

/// Intensities on a grid; each grid point conditions on all events strictly
/// before it. Rows are grid points.
std::vector<std::vector<double>> intensity_grid(const NeuralTppModel& model, const data::EventSequence& seq,
                                                std::span<const double> grid);

struct NextEvent {
    double dt{0.0};
    int mark{0};
};

/// Exact draw of the next event after `prefix`. dt is +infinity when the
/// model puts mass on "no further event" (RMTPP with decaying intensity).
/// Thinning kinds throw NumericalError when no finite dominating rate exists.
NextEvent sample_next(const NeuralTppModel& model, const data::EventSequence& prefix, Rng& rng);

} // namespace ntpp::nn
