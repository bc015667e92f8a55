#pragma once

#include "ntpp/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

/// Minimal reverse-mode automatic differentiation over dense row-major
/// tensors of doubles. A Tape records every operation applied to its
/// variables; `Tape::backward` then propagates vector-Jacobian products in
/// reverse recording order. Broadcasting is limited to a trailing vector
/// applied to every row (biases, per-column scales).
namespace ntpp::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    /// Size of the last dimension.
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    /// Number of rows when viewed as a (numel / cols) x cols matrix.
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }
    double item() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const;
    Tape* tape() const { return tape_; }
    std::uint32_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape* tape_{nullptr};
    std::uint32_t id_{0};
};

class Tape {
public:
    /// Propagates the gradient of node `self` into its parents.
    using Backward = std::function<void(Tape&, std::uint32_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf whose gradient is collected by backward().
    Var variable(Tensor value);
    /// Leaf that never receives a gradient.
    Var constant(Tensor value);
    /// Records an operation result. `backward` is dropped when no input
    /// requires a gradient.
    Var record(Tensor value, bool requires_grad, Backward backward);

    const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of node `id`; empty if nothing flowed into it.
    std::span<const double> grad(std::uint32_t id) const { return nodes_[id].grad; }
    /// Zero-initialised gradient buffer of node `id`, allocated on first use.
    double* grad_buffer(std::uint32_t id);

    /// Seeds d(output)/d(output) = 1 and runs the reverse sweep. The output
    /// must hold exactly one element, and a tape can be swept only once.
    void backward(Var output);

    /// Accumulated gradient of a leaf (zeros if it does not affect the output).
    std::vector<double> gradient(Var leaf) const;

    std::size_t size() const { return nodes_.size(); }
    bool swept() const { return swept_; }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        Backward backward;
        bool requires_grad{false};
    };

    std::deque<Node> nodes_;
    bool swept_{false};
};

// ---------------------------------------------------------------------------
// Primitives. Every binary op requires its operands to live on the same tape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var shift(Var a, double c);
Var neg(Var a);
/// a * s for a one-element variable s.
Var mul_scalar(Var a, Var s);
/// Adds a vector of size cols(a) to every row of a.
Var add_bias(Var a, Var bias);
/// Multiplies every row of a elementwise by a vector of size cols(a).
Var mul_rowvec(Var a, Var v);

/// [.., K] x [K, N] -> [.., N].
Var matmul(Var a, Var b);
/// [B, M, K] x [B, K, N] -> [B, M, N]; with transpose_b, b is [B, N, K].
Var bmm(Var a, Var b, bool transpose_b = false);

/// Concatenation along the last dimension; all parts share leading dims.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
/// Concatenation along the first dimension; trailing dims must agree.
Var concat_rows(std::span<const Var> parts);
/// Columns [begin, end) of the last dimension.
Var slice(Var a, std::size_t begin, std::size_t end);
/// Rows of a rank-2 table, one per index (embedding lookup, repetition).
Var gather_rows(Var table, std::vector<std::size_t> indices);
/// Alias of gather_rows for embedding tables.
Var embedding_gather(Var table, std::vector<std::size_t> indices);
/// out[r] = a[r, index[r]] for a viewed as rows x cols.
Var pick(Var a, std::vector<std::size_t> index);
Var reshape(Var a, Shape shape);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
/// s * log(1 + exp(x / s)); overflow-safe (exactly x once x / s > 30 within 1e-12).
Var softplus_scaled(Var x, double s);
/// Same with a learnable positive scale per column (vector of size cols(x)).
Var softplus_scaled(Var x, Var s);
/// expm1(x) / x with the removable singularity at 0 filled in.
Var expm1_ratio(Var a);
/// log of the standard normal CDF, accurate far into the lower tail.
Var log_ndtr(Var a);

Var softmax_lastdim(Var a);
Var log_softmax_lastdim(Var a);
/// Reductions over the last dimension drop it ([R, C] -> [R]); a vector
/// reduces to shape {1}.
Var logsumexp_lastdim(Var a);
Var sum_lastdim(Var a);
/// Positions with mask != 0 are replaced by `value` and receive zero gradient.
Var masked_fill(Var a, std::vector<std::uint8_t> mask, double value);
Var reduce_sum(Var a);
Var reduce_mean(Var a);
/// Normalises each row to zero mean and unit variance, then applies gamma and beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, Rng& rng);

// ---------------------------------------------------------------------------

using Function = std::function<Var(Tape&, std::span<const Var>)>;

/// Central-difference check of reverse-mode gradients. Returns the largest
/// |analytic - numeric| / max(1, |analytic|, |numeric|) over all input
/// coordinates. `fn` must return a one-element variable and be a
/// deterministic function of its inputs.
double grad_check(const Function& fn, const std::vector<Tensor>& inputs, double eps = 1e-5);

/// Evaluates fn with all inputs as constants (no tape bookkeeping for grads).
double evaluate(const Function& fn, const std::vector<Tensor>& inputs);

} // namespace ntpp::ad
