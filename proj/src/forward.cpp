#include "ntpp/model.hpp"

#include "ntpp/error.hpp"
#include "ntpp/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <numbers>

namespace ntpp::nn {

using ad::Tensor;
using ad::Var;

Binding::Binding(const NeuralTppModel& model, ad::Tape& tape, bool trainable) : model_(&model), tape_(&tape) {
    const auto& values = model.parameters().values();
    vars_.reserve(values.size());
    for (const auto& v : values) {
        vars_.push_back(trainable ? tape.variable(v) : tape.constant(v));
    }
}

Binding::Binding(const NeuralTppModel& model, ad::Tape& tape, std::vector<Var> vars)
    : model_(&model), tape_(&tape), vars_(std::move(vars)) {
    if (vars_.size() != model.parameters().size()) {
        throw std::invalid_argument("Binding: wrong number of parameter variables");
    }
}

Var Binding::operator()(std::string_view name) const { return vars_[model_->parameters().index(name)]; }

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kMinInterval = 1e-12;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Var constant(ad::Tape& tape, ad::Shape shape, std::vector<double> data) {
    return tape.constant(Tensor(std::move(shape), std::move(data)));
}

Tensor temporal_rows(std::span<const double> times, int d_model) {
    const std::size_t d = sz(d_model);
    Tensor out({times.size(), d});
    std::vector<double> inv(d / 2);
    for (std::size_t j = 0; j < d / 2; ++j) {
        inv[j] = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(d_model));
    }
    for (std::size_t i = 0; i < times.size(); ++i) {
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double a = times[i] * inv[j];
            out.data[i * d + 2 * j] = std::sin(a);
            out.data[i * d + 2 * j + 1] = std::cos(a);
        }
    }
    return out;
}

Var linear(const Binding& p, Var x, const std::string& w, const std::string& b) {
    return ad::add_bias(ad::matmul(x, p(w)), p(b));
}

/// Entries of a flat variable picked by index, as a flat variable.
Var take(Var v, std::vector<std::size_t> idx) {
    const std::size_t n = idx.size();
    return ad::reshape(ad::gather_rows(ad::reshape(v, {v.numel(), 1}), std::move(idx)), {n});
}

Var positive(const Binding& p, Var x) {
    const auto& dc = p.model().config().decoder;
    if (p.model().parameters().contains("dec.log_scale")) {
        return ad::softplus_scaled(x, ad::exp(p("dec.log_scale")));
    }
    return ad::softplus_scaled(x, dc.softplus_scale);
}

Var self_attention_layer(const Binding& p, Var x, int layer, const Batch& batch, const ForwardOptions& opt,
                         Rng& drop_rng) {
    const auto& ec = p.model().config().encoder;
    const std::string pre = fmt::format("enc.{}.", layer);
    const std::size_t r = batch.rows;
    const std::size_t l = batch.width;
    const std::size_t d = sz(ec.d_model);
    const std::size_t dh = d / sz(ec.n_heads);
    const double drop = opt.training ? ec.dropout : 0.0;

    Var q = linear(p, x, pre + "wq", pre + "bq");
    Var k = linear(p, x, pre + "wk", pre + "bk");
    Var v = linear(p, x, pre + "wv", pre + "bv");

    // Causal mask plus key padding.
    std::vector<std::uint8_t> mask(r * l * l, 0);
    for (std::size_t row = 0; row < r; ++row) {
        for (std::size_t i = 0; i < l; ++i) {
            for (std::size_t j = 0; j < l; ++j) {
                mask[(row * l + i) * l + j] = (j > i || !batch.valid[row * l + j]) ? 1 : 0;
            }
        }
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    for (int h = 0; h < ec.n_heads; ++h) {
        const std::size_t b0 = sz(h) * dh;
        Var qh = ad::reshape(ad::slice(q, b0, b0 + dh), {r, l, dh});
        Var kh = ad::reshape(ad::slice(k, b0, b0 + dh), {r, l, dh});
        Var vh = ad::reshape(ad::slice(v, b0, b0 + dh), {r, l, dh});
        Var scores = ad::masked_fill(ad::scale(ad::bmm(qh, kh, true), inv_sqrt), mask, kNegInf);
        Var attn = ad::softmax_lastdim(scores);
        heads.push_back(ad::reshape(ad::bmm(attn, vh), {r * l, dh}));
    }
    Var joined = heads.size() == 1 ? heads[0] : ad::concat(heads);
    Var out = ad::dropout(linear(p, joined, pre + "wo", pre + "bo"), drop, drop_rng);
    x = ad::layer_norm(ad::add(x, out), p(pre + "ln1.g"), p(pre + "ln1.b"));
    Var ff = linear(p, ad::relu(linear(p, x, pre + "ff1.w", pre + "ff1.b")), pre + "ff2.w", pre + "ff2.b");
    ff = ad::dropout(ff, drop, drop_rng);
    return ad::layer_norm(ad::add(x, ff), p(pre + "ln2.g"), p(pre + "ln2.b"));
}

Var recurrent_layer(const Binding& p, Var x, int layer, const Batch& batch) {
    const auto& ec = p.model().config().encoder;
    const std::string pre = fmt::format("enc.{}.", layer);
    const std::size_t r = batch.rows;
    const std::size_t l = batch.width;
    const std::size_t d = sz(ec.d_model);
    ad::Tape& tape = p.tape();

    Var xw = linear(p, x, pre + "wx", pre + "bx");
    Var h = tape.constant(Tensor({r, d}, 0.0));
    std::vector<Var> steps;
    steps.reserve(l);
    for (std::size_t t = 0; t < l; ++t) {
        std::vector<std::size_t> idx(r);
        for (std::size_t row = 0; row < r; ++row) {
            idx[row] = row * l + t;
        }
        Var xt = ad::gather_rows(xw, idx);
        Var hu = ad::matmul(h, p(pre + "uzr"));
        Var z = ad::sigmoid(ad::add(ad::slice(xt, 0, d), ad::slice(hu, 0, d)));
        Var g = ad::sigmoid(ad::add(ad::slice(xt, d, 2 * d), ad::slice(hu, d, 2 * d)));
        Var cand = ad::tanh(ad::add(ad::slice(xt, 2 * d, 3 * d), ad::matmul(ad::mul(g, h), p(pre + "un"))));
        h = ad::add(cand, ad::mul(z, ad::sub(h, cand)));
        steps.push_back(h);
    }
    Var stacked = ad::concat_rows(steps);
    std::vector<std::size_t> order(r * l);
    for (std::size_t row = 0; row < r; ++row) {
        for (std::size_t t = 0; t < l; ++t) {
            order[row * l + t] = t * r + row;
        }
    }
    return ad::gather_rows(stacked, order);
}

Var apply_conditioner(const Binding& p, Var h, const Tensor& features) {
    Var z = ad::concat({h, p.tape().constant(features)});
    Var lin = linear(p, z, "cond.a", "cond.c");
    Var nonlin = ad::matmul(ad::tanh(linear(p, z, "cond.w1", "cond.b1")), p("cond.w2"));
    return ad::add(lin, nonlin);
}

/// Where decoder queries look up their attention context (SA_MC only).
struct QueryContext {
    Var hall;
    const Batch* batch{nullptr};
};

/// lambda [Q, K] for queries drawing history from rows `src` of H (one row
/// per interval) at offsets dt. `cells` gives each source's batch position
/// (row * width + col), used by SA_MC.
Var intensity_rows(const Binding& p, Var h, std::span<const std::size_t> src, std::span<const double> dt,
                   std::span<const std::size_t> cells, const QueryContext& ctx) {
    const auto& cfg = p.model().config();
    const auto& dc = cfg.decoder;
    ad::Tape& tape = p.tape();
    const std::size_t q = src.size();
    const std::size_t k = sz(cfg.class_count);
    std::vector<std::size_t> idx(src.begin(), src.end());
    switch (dc.kind) {
    case DecoderKind::cond_poisson:
        return positive(p, linear(p, ad::gather_rows(h, idx), "dec.w", "dec.b"));
    case DecoderKind::rmtpp: {
        Var hq = ad::gather_rows(h, idx);
        Var log_total = ad::add(ad::reshape(linear(p, hq, "dec.v", "dec.b"), {q}),
                                ad::mul_scalar(constant(tape, {q}, {dt.begin(), dt.end()}), p("dec.wt")));
        Var spread = ad::matmul(ad::reshape(log_total, {q, 1}), tape.constant(Tensor({1, k}, 1.0)));
        return ad::exp(ad::add(spread, ad::log_softmax_lastdim(linear(p, hq, "dec.mark.w", "dec.mark.b"))));
    }
    case DecoderKind::mlp_mc: {
        Var hw = ad::gather_rows(ad::matmul(h, p("dec.w1h")), idx);
        Var tw = ad::matmul(tape.constant(temporal_rows(dt, cfg.encoder.d_model)), p("dec.w1t"));
        Var hidden = ad::tanh(ad::add_bias(ad::add(hw, tw), p("dec.b1")));
        return positive(p, linear(p, hidden, "dec.w2", "dec.b2"));
    }
    case DecoderKind::sa_mc: {
        const Batch& b = *ctx.batch;
        const std::size_t a = sz(dc.attention_dim);
        const std::size_t r = b.rows;
        const std::size_t l = b.width;
        Var query = linear(p, tape.constant(temporal_rows(dt, cfg.encoder.d_model)), "dec.wq", "dec.bq");
        Var keys = ad::reshape(ad::matmul(ctx.hall, p("dec.wk")), {r, l, a});
        Var vals = ad::reshape(ad::matmul(ctx.hall, p("dec.wv")), {r, l, a});
        // Group queries by batch row into padded slots.
        std::vector<std::size_t> per_row(r, 0);
        std::vector<std::size_t> slot_of(q);
        for (std::size_t i = 0; i < q; ++i) {
            const std::size_t row = cells[src[i]] / l;
            slot_of[i] = per_row[row]++;
        }
        std::size_t slots = 1;
        for (auto c : per_row) {
            slots = std::max(slots, c);
        }
        std::vector<std::size_t> gather(r * slots, 0);
        std::vector<std::uint8_t> mask(r * slots * l, 1);
        std::vector<std::size_t> back(q);
        for (std::size_t row = 0; row < r; ++row) {
            for (std::size_t s = 0; s < slots; ++s) {
                mask[(row * slots + s) * l] = 0;  // padding slots attend to column 0 only
            }
        }
        for (std::size_t i = 0; i < q; ++i) {
            const std::size_t cell = cells[src[i]];
            const std::size_t row = cell / l;
            const std::size_t col = cell % l;
            const std::size_t slot = row * slots + slot_of[i];
            gather[slot] = i;
            back[i] = slot;
            for (std::size_t j = 0; j < l; ++j) {
                mask[slot * l + j] = (j > col || !b.valid[row * l + j]) ? 1 : 0;
            }
        }
        Var grouped = ad::reshape(ad::gather_rows(query, gather), {r, slots, a});
        Var scores = ad::scale(ad::bmm(grouped, keys, true), 1.0 / std::sqrt(static_cast<double>(a)));
        Var attn = ad::softmax_lastdim(ad::masked_fill(scores, mask, kNegInf));
        Var out = ad::gather_rows(ad::reshape(ad::bmm(attn, vals), {r * slots, a}), back);
        return positive(p, linear(p, out, "dec.wo", "dec.bo"));
    }
    case DecoderKind::lnm:
        break;
    }
    throw std::logic_error("intensity_rows: decoder has no intensity");
}

struct LnmParts {
    Var log_weights;  // [N, M]
    Var means;
    Var log_scales;
    Var mark_logp;    // [N, K]
};

LnmParts lnm_parts(const Binding& p, Var h) {
    const std::size_t m = sz(p.model().config().decoder.mixture_components);
    Var out = linear(p, h, "dec.w", "dec.b");
    return {ad::log_softmax_lastdim(ad::slice(out, 0, m)), ad::slice(out, m, 2 * m), ad::slice(out, 2 * m, 3 * m),
            ad::log_softmax_lastdim(linear(p, h, "dec.mark.w", "dec.mark.b"))};
}

/// Standardised log-interval z = (log dt - mean) / scale, [N, M].
Var lnm_z(const LnmParts& lp, std::span<const double> dt, ad::Tape& tape) {
    const std::size_t n = dt.size();
    const std::size_t m = lp.means.value().cols();
    Tensor x({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(std::max(dt[i], kMinInterval));
        for (std::size_t j = 0; j < m; ++j) {
            x.data[i * m + j] = lx;
        }
    }
    return ad::mul(ad::sub(tape.constant(std::move(x)), lp.means), ad::exp(ad::neg(lp.log_scales)));
}

/// log density of the log-normal mixture at dt, [N].
Var lnm_log_density(const LnmParts& lp, Var z, std::span<const double> dt, ad::Tape& tape) {
    const std::size_t n = dt.size();
    const std::size_t m = lp.means.value().cols();
    Tensor offset({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const double c = -std::log(std::max(dt[i], kMinInterval)) - 0.5 * std::log(2.0 * std::numbers::pi);
        for (std::size_t j = 0; j < m; ++j) {
            offset.data[i * m + j] = c;
        }
    }
    Var comp = ad::add(ad::sub(lp.log_weights, lp.log_scales), tape.constant(std::move(offset)));
    comp = ad::sub(comp, ad::scale(ad::mul(z, z), 0.5));
    return ad::logsumexp_lastdim(comp);
}

/// log P(interval > dt), [N].
Var lnm_log_survival(const LnmParts& lp, Var z) {
    return ad::logsumexp_lastdim(ad::add(lp.log_weights, ad::log_ndtr(ad::neg(z))));
}

std::vector<std::size_t> cells_of(const Batch& b) {
    std::vector<std::size_t> cells(b.intervals.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        cells[i] = b.intervals[i].row * b.width + b.intervals[i].col;
    }
    return cells;
}

} // namespace

Var encode_batch(const Binding& p, const Batch& batch, const ForwardOptions& options, bool conditioned) {
    const auto& cfg = p.model().config();
    const auto& ec = cfg.encoder;
    ad::Tape& tape = p.tape();
    const std::size_t n = batch.rows * batch.width;
    Rng drop_rng(options.dropout_seed, 0xD409);

    Var x = ad::add(ad::embedding_gather(p("embedding"), batch.tokens), tape.constant(temporal_rows(batch.times, ec.d_model)));
    x = ad::dropout(x, options.training ? ec.dropout : 0.0, drop_rng);
    for (int l = 0; l < ec.n_layers; ++l) {
        x = ec.kind == EncoderKind::self_attention ? self_attention_layer(p, x, l, batch, options, drop_rng)
                                                   : recurrent_layer(p, x, l, batch);
    }
    if (conditioned && p.model().has_conditioner()) {
        const std::size_t pd = cfg.static_dim;
        Tensor feats({n, pd});
        for (std::size_t r = 0; r < batch.rows; ++r) {
            const auto& f = batch.static_features[batch.row_sequence[r]];
            if (f.size() != pd) {
                throw DataError(fmt::format("conditioner expects {} static features, sequence {} has {}", pd,
                                            batch.sequences[batch.row_sequence[r]], f.size()));
            }
            for (std::size_t c = 0; c < batch.width; ++c) {
                std::copy(f.begin(), f.end(), feats.data.begin() + static_cast<std::ptrdiff_t>((r * batch.width + c) * pd));
            }
        }
        x = apply_conditioner(p, x, feats);
    }
    return x;
}

Var batch_nll(const Binding& p, const Batch& batch, const ForwardOptions& options, std::vector<double>* per_sequence) {
    const auto& cfg = p.model().config();
    const auto& dc = cfg.decoder;
    ad::Tape& tape = p.tape();
    const auto& ivs = batch.intervals;
    const std::size_t n = ivs.size();

    Var hall = encode_batch(p, batch, options);
    const std::vector<std::size_t> cells = cells_of(batch);
    Var h = ad::gather_rows(hall, cells);

    std::vector<double> dt(n);
    std::vector<std::size_t> events;
    std::vector<std::size_t> marks;
    std::vector<std::size_t> tails;
    for (std::size_t i = 0; i < n; ++i) {
        dt[i] = ivs[i].dt;
        if (ivs[i].next_mark >= 0) {
            events.push_back(i);
            marks.push_back(static_cast<std::size_t>(ivs[i].next_mark));
        } else {
            tails.push_back(i);
        }
    }
    std::vector<double> event_dt;
    for (auto i : events) {
        event_dt.push_back(dt[i]);
    }
    const QueryContext ctx{hall, &batch};

    // Per-interval positive terms (compensator or -log survival) and per-event log terms.
    Var interval_terms;
    Var event_terms;
    std::vector<std::size_t> tail_positions;
    switch (dc.kind) {
    case DecoderKind::cond_poisson: {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        Var lam = intensity_rows(p, h, all, dt, cells, ctx);
        interval_terms = ad::mul(ad::sum_lastdim(lam), constant(tape, {n}, dt));
        if (!events.empty()) {
            event_terms = ad::log(ad::pick(ad::gather_rows(lam, events), marks));
        }
        break;
    }
    case DecoderKind::rmtpp: {
        Var a = ad::reshape(linear(p, h, "dec.v", "dec.b"), {n});
        Var wdt = ad::mul_scalar(constant(tape, {n}, dt), p("dec.wt"));
        interval_terms = ad::mul(ad::mul(ad::exp(a), constant(tape, {n}, dt)), ad::expm1_ratio(wdt));
        if (!events.empty()) {
            Var logp = ad::log_softmax_lastdim(linear(p, ad::gather_rows(h, events), "dec.mark.w", "dec.mark.b"));
            event_terms = ad::add(take(ad::add(a, wdt), events), ad::pick(logp, marks));
        }
        break;
    }
    case DecoderKind::lnm: {
        LnmParts lp = lnm_parts(p, h);
        Var z = lnm_z(lp, dt, tape);
        if (!events.empty()) {
            Var logd = take(lnm_log_density(lp, z, dt, tape), events);
            event_terms = ad::add(logd, ad::pick(ad::gather_rows(lp.mark_logp, events), marks));
        }
        if (!tails.empty()) {
            interval_terms = ad::neg(take(lnm_log_survival(lp, z), tails));
            tail_positions = tails;
        }
        break;
    }
    case DecoderKind::mlp_mc:
    case DecoderKind::sa_mc: {
        const std::size_t m = sz(options.mc_samples > 0 ? options.mc_samples : dc.mc_samples_eval);
        std::vector<std::size_t> src = events;
        std::vector<double> qdt = event_dt;
        src.reserve(events.size() + n * m);
        qdt.reserve(events.size() + n * m);
        const Rng root(options.mc_seed, 0x3C);
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng = root.split(batch.sequence_keys[ivs[i].seq]).split(ivs[i].index);
            for (std::size_t s = 0; s < m; ++s) {
                src.push_back(i);
                qdt.push_back(rng.uniform() * dt[i]);
            }
        }
        Var lam = intensity_rows(p, h, src, qdt, cells, ctx);
        const std::size_t ne = events.size();
        std::vector<std::size_t> mc_rows(n * m);
        std::iota(mc_rows.begin(), mc_rows.end(), ne);
        Var mc_total = ad::reshape(ad::sum_lastdim(ad::gather_rows(lam, mc_rows)), {n, m});
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = dt[i] / static_cast<double>(m);
        }
        interval_terms = ad::mul(ad::sum_lastdim(mc_total), constant(tape, {n}, w));
        if (ne > 0) {
            std::vector<std::size_t> ev_rows(ne);
            std::iota(ev_rows.begin(), ev_rows.end(), std::size_t{0});
            event_terms = ad::log(ad::pick(ad::gather_rows(lam, ev_rows), marks));
        }
        break;
    }
    }

    // Per-sequence totals and finiteness check in interval order.
    const bool interval_all = dc.kind != DecoderKind::lnm;
    std::vector<double> totals(batch.n_sequences(), 0.0);
    auto fail = [&](std::size_t i, const char* what, double value) {
        const auto& iv = ivs[i];
        throw NumericalError(fmt::format("non-finite {} ({}) in sequence {} at interval {}", what, value,
                                         batch.sequences[iv.seq], iv.index));
    };
    if (interval_terms.valid()) {
        const auto& vals = interval_terms.value().data;
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const std::size_t i = interval_all ? j : tail_positions[j];
            if (!std::isfinite(vals[j])) {
                fail(i, "compensator", vals[j]);
            }
            totals[ivs[i].seq] += vals[j];
        }
    }
    if (event_terms.valid()) {
        const auto& vals = event_terms.value().data;
        for (std::size_t j = 0; j < vals.size(); ++j) {
            if (!std::isfinite(vals[j])) {
                fail(events[j], "event log-likelihood", vals[j]);
            }
            totals[ivs[events[j]].seq] -= vals[j];
        }
    }
    if (per_sequence) {
        *per_sequence = totals;
    }

    Var total;
    if (interval_terms.valid()) {
        total = ad::reduce_sum(interval_terms);
    }
    if (event_terms.valid()) {
        Var ev = ad::reduce_sum(event_terms);
        total = total.valid() ? ad::sub(total, ev) : ad::neg(ev);
    }
    if (!total.valid()) {
        total = tape.constant(Tensor::scalar(0.0));
    }
    return total;
}

double nll(const NeuralTppModel& model, const data::EventSequence& seq, const ForwardOptions& options) {
    data::Dataset one;
    one.class_count = model.config().class_count;
    one.sequences.push_back(seq);
    const std::size_t idx = 0;
    const Batch batch = make_batch(one, std::span(&idx, 1), sz(model.config().encoder.max_context),
                                   model.has_conditioner() ? model.config().static_dim : 0);
    ad::Tape tape;
    Binding binding(model, tape, false);
    return batch_nll(binding, batch, options).value().item();
}

double mean_nll(const NeuralTppModel& model, const data::Dataset& dataset, std::size_t batch_size,
                const ForwardOptions& options, int threads) {
    if (dataset.size() == 0) {
        return 0.0;
    }
    batch_size = std::max<std::size_t>(1, batch_size);
    // Batches of similar lengths keep padding small.
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dataset.sequences[a].size() < dataset.sequences[b].size();
    });
    const std::size_t chunks = (dataset.size() + batch_size - 1) / batch_size;
    std::vector<double> sums(chunks, 0.0);
    parallel_for(chunks, threads, [&](std::size_t c) {
        const auto idx = std::span<const std::size_t>(order).subspan(
            c * batch_size, std::min(dataset.size(), (c + 1) * batch_size) - c * batch_size);
        const Batch batch = make_batch(dataset, idx, sz(model.config().encoder.max_context),
                                       model.has_conditioner() ? model.config().static_dim : 0);
        ad::Tape tape;
        Binding binding(model, tape, false);
        sums[c] = batch_nll(binding, batch, options).value().item();
    });
    double total = 0.0;
    for (double s : sums) {
        total += s;
    }
    return total / static_cast<double>(dataset.size());
}

} // namespace ntpp::nn

// ---------------------------------------------------------------------------
// Inference.

namespace ntpp::nn {

namespace {

/// Forward state of one batch in evaluation mode.
struct Evaluated {
    const NeuralTppModel& model;
    Batch batch;
    ad::Tape tape;
    Binding binding;
    Var hall;
    Var h;
    std::vector<std::size_t> cells;

    Evaluated(const NeuralTppModel& m, Batch b)
        : model(m), batch(std::move(b)), binding(m, tape, false) {
        hall = encode_batch(binding, batch, {});
        cells = cells_of(batch);
        h = ad::gather_rows(hall, cells);
    }

    /// lambda rows [Q][K] at (interval src[i], offset dt[i]); for LNM the
    /// hazard of the interval law times the mark probabilities.
    std::vector<std::vector<double>> intensities(std::span<const std::size_t> src, std::span<const double> dt) {
        const std::size_t k = sz(model.config().class_count);
        Tensor lam;
        if (has_intensity(model.config().decoder.kind)) {
            lam = intensity_rows(binding, h, src, dt, cells, QueryContext{hall, &batch}).value();
        } else {
            std::vector<std::size_t> idx(src.begin(), src.end());
            LnmParts lp = lnm_parts(binding, ad::gather_rows(h, idx));
            Var z = lnm_z(lp, dt, tape);
            Var log_hazard = ad::sub(lnm_log_density(lp, z, dt, tape), lnm_log_survival(lp, z));
            lam = Tensor({src.size(), k});
            const auto& lh = log_hazard.value().data;
            const auto& lm = lp.mark_logp.value().data;
            for (std::size_t i = 0; i < src.size(); ++i) {
                for (std::size_t c = 0; c < k; ++c) {
                    lam.data[i * k + c] = std::exp(lh[i] + lm[i * k + c]);
                }
            }
        }
        std::vector<std::vector<double>> rows(src.size(), std::vector<double>(k));
        for (std::size_t i = 0; i < src.size(); ++i) {
            std::copy_n(lam.data.begin() + static_cast<std::ptrdiff_t>(i * k), k, rows[i].begin());
        }
        return rows;
    }

    /// Mark distributions at (interval, dt) queries.
    std::vector<MarkDistribution> marks(std::span<const std::size_t> src, std::span<const double> dt) {
        const std::size_t k = sz(model.config().class_count);
        std::vector<MarkDistribution> out(src.size());
        if (model.config().decoder.kind == DecoderKind::lnm) {
            std::vector<std::size_t> idx(src.begin(), src.end());
            Var probs = ad::softmax_lastdim(linear(binding, ad::gather_rows(h, idx), "dec.mark.w", "dec.mark.b"));
            const auto& v = probs.value().data;
            for (std::size_t i = 0; i < src.size(); ++i) {
                out[i].p.assign(v.begin() + static_cast<std::ptrdiff_t>(i * k),
                                v.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
            }
            return out;
        }
        const auto lam = intensities(src, dt);
        for (std::size_t i = 0; i < src.size(); ++i) {
            double total = 0.0;
            for (double x : lam[i]) {
                total += x;
            }
            out[i].p.resize(k);
            for (std::size_t c = 0; c < k; ++c) {
                out[i].p[c] = lam[i][c] / total;
            }
        }
        return out;
    }
};

Batch single_batch(const NeuralTppModel& model, const data::EventSequence& seq) {
    data::Dataset one;
    one.class_count = model.config().class_count;
    one.sequences.push_back(seq);
    const std::size_t idx = 0;
    return make_batch(one, std::span(&idx, 1), sz(model.config().encoder.max_context),
                      model.has_conditioner() ? model.config().static_dim : 0);
}

/// Copy of the prefix whose censored tail starts at its last event.
data::EventSequence as_prefix(const data::EventSequence& prefix, int class_count) {
    data::EventSequence s = prefix;
    s.t_end = s.events.empty() ? 0.0 : s.events.back().time;
    for (const auto& e : s.events) {
        if (e.mark < 0 || e.mark >= class_count) {
            throw DataError(fmt::format("prefix mark {} outside [0, {})", e.mark, class_count));
        }
    }
    return s;
}

int draw_categorical(std::span<const double> weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) {
        total += w;
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
        if (u < weights[i]) {
            return static_cast<int>(i);
        }
        u -= weights[i];
    }
    return static_cast<int>(weights.size()) - 1;
}

double softplus_value(double x, double s) {
    const double z = x / s;
    return s * (z > 30.0 ? z + std::exp(-z) : std::log1p(std::exp(z)));
}

double scale_of(const NeuralTppModel& model, std::size_t k) {
    if (model.parameters().contains("dec.log_scale")) {
        return std::exp(model.parameters().at("dec.log_scale").data[k]);
    }
    return model.config().decoder.softplus_scale;
}

} // namespace

int MarkDistribution::argmax() const {
    int best = 0;
    for (std::size_t i = 1; i < p.size(); ++i) {
        if (p[i] > p[static_cast<std::size_t>(best)]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

HistoryEmbedding encode_history(const NeuralTppModel& model, const data::EventSequence& seq) {
    Batch batch = single_batch(model, seq);
    ad::Tape tape;
    Binding binding(model, tape, false);
    Var hall = encode_batch(binding, batch, {}, false);
    const std::size_t d = sz(model.config().encoder.d_model);
    HistoryEmbedding out;
    out.h.resize(seq.size() + 1, std::vector<double>(d));
    const auto& v = hall.value().data;
    for (const auto& iv : batch.intervals) {
        const std::size_t cell = iv.row * batch.width + iv.col;
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(cell * d), d, out.h[iv.index].begin());
    }
    return out;
}

std::vector<double> parameterize(const NeuralTppModel& model, std::span<const double> h,
                                 const std::optional<std::vector<double>>& static_features) {
    const std::size_t d = sz(model.config().encoder.d_model);
    if (h.size() != d) {
        throw ShapeError(fmt::format("parameterize: embedding has {} entries, model uses {}", h.size(), d));
    }
    if (!model.has_conditioner()) {
        return {h.begin(), h.end()};
    }
    const std::size_t pd = model.config().static_dim;
    if (!static_features || static_features->size() != pd) {
        throw DataError(fmt::format("model conditions on {} static features, sequence provides {}", pd,
                                    static_features ? static_features->size() : 0));
    }
    ad::Tape tape;
    Binding binding(model, tape, false);
    Var hv = tape.constant(Tensor({1, d}, {h.begin(), h.end()}));
    return apply_conditioner(binding, hv, Tensor({1, pd}, *static_features)).value().data;
}

std::vector<double> decoder_intensity(const NeuralTppModel& model, const data::EventSequence& prefix, double dt) {
    if (!(dt >= 0.0)) {
        throw std::invalid_argument(fmt::format("decoder_intensity: negative offset {}", dt));
    }
    Evaluated ev(model, single_batch(model, as_prefix(prefix, model.config().class_count)));
    const std::size_t tail = ev.batch.intervals.size() - 1;
    const double off[] = {dt};
    return ev.intensities(std::span(&tail, 1), off)[0];
}

MarkDistribution predict_mark(const NeuralTppModel& model, const data::EventSequence& prefix, double t_next) {
    const double last = prefix.events.empty() ? 0.0 : prefix.events.back().time;
    if (t_next < last) {
        throw std::invalid_argument(fmt::format("predict_mark: t_next {} precedes last event {}", t_next, last));
    }
    Evaluated ev(model, single_batch(model, as_prefix(prefix, model.config().class_count)));
    const std::size_t tail = ev.batch.intervals.size() - 1;
    const double off[] = {t_next - last};
    return ev.marks(std::span(&tail, 1), off)[0];
}

MarkPredictions next_mark_predictions(const NeuralTppModel& model, const data::Dataset& dataset,
                                      std::size_t batch_size, int threads) {
    batch_size = std::max<std::size_t>(1, batch_size);
    const std::size_t chunks = (dataset.size() + batch_size - 1) / batch_size;
    std::vector<MarkPredictions> parts(chunks);
    parallel_for(chunks, threads, [&](std::size_t c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = c * batch_size; i < std::min(dataset.size(), (c + 1) * batch_size); ++i) {
            idx.push_back(i);
        }
        Evaluated ev(model, make_batch(dataset, idx, sz(model.config().encoder.max_context),
                                       model.has_conditioner() ? model.config().static_dim : 0));
        std::vector<std::size_t> src;
        std::vector<double> dt;
        for (std::size_t i = 0; i < ev.batch.intervals.size(); ++i) {
            const auto& iv = ev.batch.intervals[i];
            if (iv.index >= 1 && iv.next_mark >= 0) {
                src.push_back(i);
                dt.push_back(iv.dt);
                parts[c].truth.push_back(iv.next_mark);
            }
        }
        if (!src.empty()) {
            parts[c].distributions = ev.marks(src, dt);
        }
    });
    MarkPredictions out;
    for (auto& part : parts) {
        out.distributions.insert(out.distributions.end(), std::make_move_iterator(part.distributions.begin()),
                                 std::make_move_iterator(part.distributions.end()));
        out.truth.insert(out.truth.end(), part.truth.begin(), part.truth.end());
    }
    return out;
}

std::vector<std::vector<double>> intensity_grid(const NeuralTppModel& model, const data::EventSequence& seq,
                                                std::span<const double> grid) {
    if (grid.empty()) {
        return {};
    }
    Evaluated ev(model, single_batch(model, seq));
    std::vector<std::size_t> src;
    std::vector<double> dt;
    std::size_t p = 0;
    for (double g : grid) {
        if (g < 0.0 || g > seq.t_end) {
            throw std::invalid_argument(fmt::format("grid point {} outside [0, {}]", g, seq.t_end));
        }
        while (p < seq.size() && seq.events[p].time < g) {
            ++p;
        }
        while (p > 0 && seq.events[p - 1].time >= g) {
            --p;
        }
        const double start = p == 0 ? 0.0 : seq.events[p - 1].time;
        src.push_back(p);
        dt.push_back(g - start);
    }
    return ev.intensities(src, dt);
}

NextEvent sample_next(const NeuralTppModel& model, const data::EventSequence& prefix, Rng& rng) {
    const auto& cfg = model.config();
    const std::size_t k = sz(cfg.class_count);
    Evaluated ev(model, single_batch(model, as_prefix(prefix, cfg.class_count)));
    const std::size_t tail = ev.batch.intervals.size() - 1;
    const std::size_t one[] = {tail};
    const double zero[] = {0.0};

    switch (cfg.decoder.kind) {
    case DecoderKind::cond_poisson: {
        const auto lam = ev.intensities(one, zero)[0];
        double total = 0.0;
        for (double x : lam) {
            total += x;
        }
        const double dt = rng.exponential(total);
        return {dt, draw_categorical(lam, rng)};
    }
    case DecoderKind::rmtpp: {
        // lambda(s) = exp(a + w s) split by pi; invert the compensator.
        const auto lam0 = ev.intensities(one, zero)[0];
        double base = 0.0;
        for (double x : lam0) {
            base += x;
        }
        const double w = model.parameters().at("dec.wt").data[0];
        const double e = rng.exponential(1.0);
        double dt = 0.0;
        if (std::abs(w) < 1e-300) {
            dt = e / base;
        } else {
            const double arg = 1.0 + w * e / base;
            dt = arg > 0.0 ? std::log(arg) / w : std::numeric_limits<double>::infinity();
        }
        return {dt, draw_categorical(lam0, rng)};
    }
    case DecoderKind::lnm: {
        std::vector<std::size_t> idx{tail};
        LnmParts lp = lnm_parts(ev.binding, ad::gather_rows(ev.h, idx));
        const auto& lw = lp.log_weights.value().data;
        std::vector<double> w(lw.size());
        for (std::size_t j = 0; j < lw.size(); ++j) {
            w[j] = std::exp(lw[j]);
        }
        const auto j = static_cast<std::size_t>(draw_categorical(w, rng));
        const double dt = std::exp(lp.means.value().data[j] + std::exp(lp.log_scales.value().data[j]) * rng.normal());
        std::vector<double> pm(k);
        for (std::size_t c = 0; c < k; ++c) {
            pm[c] = std::exp(lp.mark_logp.value().data[c]);
        }
        return {dt, draw_categorical(pm, rng)};
    }
    case DecoderKind::mlp_mc:
    case DecoderKind::sa_mc:
        break;
    }

    // Thinning against a bound that holds for every offset.
    double bound = 0.0;
    if (cfg.decoder.kind == DecoderKind::mlp_mc) {
        const auto& w2 = model.parameters().at("dec.w2");
        const auto& b2 = model.parameters().at("dec.b2");
        const std::size_t hidden = w2.shape[0];
        for (std::size_t c = 0; c < k; ++c) {
            double top = b2.data[c];
            for (std::size_t j = 0; j < hidden; ++j) {
                top += std::abs(w2.data[j * k + c]);
            }
            bound += softplus_value(top, scale_of(model, c));
        }
    } else {
        // The attention output is a convex combination of value rows, so each
        // logit is at most its largest value-row logit.
        const auto& iv = ev.batch.intervals[tail];
        const std::size_t a = sz(cfg.decoder.attention_dim);
        const std::size_t d = sz(cfg.encoder.d_model);
        const auto& hall = ev.hall.value().data;
        const auto& wv = model.parameters().at("dec.wv").data;
        const auto& wo = model.parameters().at("dec.wo").data;
        const auto& bo = model.parameters().at("dec.bo").data;
        std::vector<double> top(k, -std::numeric_limits<double>::infinity());
        for (std::size_t j = 0; j <= iv.col; ++j) {
            const std::size_t cell = iv.row * ev.batch.width + j;
            if (!ev.batch.valid[cell]) {
                continue;
            }
            std::vector<double> v(a, 0.0);
            for (std::size_t x = 0; x < d; ++x) {
                for (std::size_t y = 0; y < a; ++y) {
                    v[y] += hall[cell * d + x] * wv[x * a + y];
                }
            }
            for (std::size_t c = 0; c < k; ++c) {
                double logit = bo[c];
                for (std::size_t y = 0; y < a; ++y) {
                    logit += v[y] * wo[y * k + c];
                }
                top[c] = std::max(top[c], logit);
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            bound += softplus_value(top[c], scale_of(model, c));
        }
    }
    if (!std::isfinite(bound) || bound <= 0.0 || bound > 1e12) {
        throw NumericalError(fmt::format("sample_next: no usable dominating rate (bound {})", bound));
    }
    constexpr std::size_t kBlock = 64;
    constexpr std::size_t kMaxCandidates = 1'000'000;
    double t = 0.0;
    for (std::size_t drawn = 0; drawn < kMaxCandidates; drawn += kBlock) {
        std::vector<double> times(kBlock);
        std::vector<double> accept(kBlock);
        for (std::size_t i = 0; i < kBlock; ++i) {
            t += rng.exponential(bound);
            times[i] = t;
            accept[i] = rng.uniform() * bound;
        }
        const std::vector<std::size_t> src(kBlock, tail);
        const auto lam = ev.intensities(src, times);
        for (std::size_t i = 0; i < kBlock; ++i) {
            double total = 0.0;
            for (double x : lam[i]) {
                total += x;
            }
            if (total > bound * (1.0 + 1e-9)) {
                throw NumericalError(
                    fmt::format("sample_next: intensity {} exceeds dominating rate {} at offset {}", total, bound, times[i]));
            }
            if (accept[i] <= total) {
                // Mark drawn from a stream derived from this candidate.
                Rng mark_rng = rng.split(drawn + i);
                return {times[i], draw_categorical(lam[i], mark_rng)};
            }
        }
    }
    throw NumericalError(fmt::format("sample_next: no acceptance after {} candidates (bound {})", kMaxCandidates, bound));
}

} // namespace ntpp::nn
