#include "ntpp/autodiff.hpp"

#include "ntpp/error.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>

namespace ntpp::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? ", " : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(ad::numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != ad::numel(shape)) {
        throw ShapeError(fmt::format("tensor of shape {} given {} values", to_string(shape), data.size()));
    }
}

double Tensor::item() const {
    if (data.size() != 1) {
        throw ShapeError("item() on tensor of shape " + to_string(shape));
    }
    return data[0];
}

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
    if (swept_) {
        throw std::logic_error("tape already swept; record a new forward pass on a fresh tape");
    }
    nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : Backward{}, requires_grad});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

double* Tape::grad_buffer(std::uint32_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) {
        node.grad.assign(node.value.numel(), 0.0);
    }
    return node.grad.data();
}

void Tape::backward(Var output) {
    if (output.tape() != this) {
        throw std::invalid_argument("backward: output belongs to another tape");
    }
    if (swept_) {
        throw std::logic_error("backward: tape was already swept");
    }
    if (output.numel() != 1) {
        throw ShapeError("backward: output must be scalar, got shape " + to_string(output.shape()));
    }
    swept_ = true;
    if (!nodes_[output.id()].requires_grad) {
        return;
    }
    grad_buffer(output.id())[0] = 1.0;
    for (std::uint32_t id = output.id() + 1; id-- > 0;) {
        auto& node = nodes_[id];
        if (node.backward && !node.grad.empty()) {
            node.backward(*this, id);
        }
    }
}

std::vector<double> Tape::gradient(Var leaf) const {
    const auto& node = nodes_[leaf.id()];
    if (node.grad.empty()) {
        return std::vector<double>(node.value.numel(), 0.0);
    }
    return node.grad;
}

namespace {

Tape& common_tape(Var a, Var b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) {
        throw std::invalid_argument("operands live on different tapes");
    }
    return *a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, to_string(a.shape()), to_string(b.shape())));
    }
}

/// Applies an elementwise map; `deriv(x, y)` gives dy/dx from input and output.
template <typename F, typename D>
Var unary(Var a, F f, D deriv) {
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out.data[i] = f(x.data[i]);
    }
    const std::uint32_t ia = a.id();
    return tape.record(std::move(out), a.requires_grad(), [ia, deriv](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& xv = t.value(ia).data;
        const auto& yv = t.value(self).data;
        double* ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * deriv(xv[i], yv[i]);
        }
    });
}

Shape drop_last(const Shape& s) {
    if (s.size() <= 1) {
        return {1};
    }
    return Shape(s.begin(), s.end() - 1);
}

} // namespace

Var add(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    require_same_shape("add", a, b);
    Tensor out(a.shape());
    const auto& x = a.value().data;
    const auto& y = b.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = x[i] + y[i];
    }
    const auto ia = a.id();
    const auto ib = b.id();
    return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        for (const auto id : {ia, ib}) {
            if (t.requires_grad(id)) {
                double* gp = t.grad_buffer(id);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gp[i] += g[i];
                }
            }
        }
    });
}

Var sub(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    require_same_shape("sub", a, b);
    Tensor out(a.shape());
    const auto& x = a.value().data;
    const auto& y = b.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = x[i] - y[i];
    }
    const auto ia = a.id();
    const auto ib = b.id();
    return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        if (t.requires_grad(ia)) {
            double* ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        }
        if (t.requires_grad(ib)) {
            double* gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] -= g[i];
            }
        }
    });
}

Var mul(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    require_same_shape("mul", a, b);
    Tensor out(a.shape());
    const auto& x = a.value().data;
    const auto& y = b.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = x[i] * y[i];
    }
    const auto ia = a.id();
    const auto ib = b.id();
    return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& xv = t.value(ia).data;
        const auto& yv = t.value(ib).data;
        if (t.requires_grad(ia)) {
            double* ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * yv[i];
            }
        }
        if (t.requires_grad(ib)) {
            double* gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * xv[i];
            }
        }
    });
}

Var scale(Var a, double c) {
    return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var shift(Var a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var mul_scalar(Var a, Var s) {
    Tape& tape = common_tape(a, s);
    if (s.numel() != 1) {
        throw ShapeError("mul_scalar: scalar operand has shape " + to_string(s.shape()));
    }
    const double c = s.value().data[0];
    Tensor out(a.shape());
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = x[i] * c;
    }
    const auto ia = a.id();
    const auto is = s.id();
    return tape.record(std::move(out), a.requires_grad() || s.requires_grad(), [ia, is](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& xv = t.value(ia).data;
        const double cv = t.value(is).data[0];
        if (t.requires_grad(ia)) {
            double* ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * cv;
            }
        }
        if (t.requires_grad(is)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                acc += g[i] * xv[i];
            }
            t.grad_buffer(is)[0] += acc;
        }
    });
}

Var add_bias(Var a, Var bias) {
    Tape& tape = common_tape(a, bias);
    const std::size_t cols = a.value().cols();
    if (bias.numel() != cols) {
        throw ShapeError(fmt::format("add_bias: bias {} does not match {}", to_string(bias.shape()), to_string(a.shape())));
    }
    Tensor out(a.shape());
    const auto& x = a.value().data;
    const auto& b = bias.value().data;
    const std::size_t rows = a.value().rows();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.data[r * cols + c] = x[r * cols + c] + b[c];
        }
    }
    const auto ia = a.id();
    const auto ib = bias.id();
    return tape.record(std::move(out), a.requires_grad() || bias.requires_grad(),
                       [ia, ib, rows, cols](Tape& t, std::uint32_t self) {
                           const auto g = t.grad(self);
                           if (t.requires_grad(ia)) {
                               double* ga = t.grad_buffer(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   ga[i] += g[i];
                               }
                           }
                           if (t.requires_grad(ib)) {
                               double* gb = t.grad_buffer(ib);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       gb[c] += g[r * cols + c];
                                   }
                               }
                           }
                       });
}

Var mul_rowvec(Var a, Var v) {
    Tape& tape = common_tape(a, v);
    const std::size_t cols = a.value().cols();
    if (v.numel() != cols) {
        throw ShapeError(fmt::format("mul_rowvec: vector {} does not match {}", to_string(v.shape()), to_string(a.shape())));
    }
    const std::size_t rows = a.value().rows();
    Tensor out(a.shape());
    const auto& x = a.value().data;
    const auto& w = v.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.data[r * cols + c] = x[r * cols + c] * w[c];
        }
    }
    const auto ia = a.id();
    const auto iv = v.id();
    return tape.record(std::move(out), a.requires_grad() || v.requires_grad(),
                       [ia, iv, rows, cols](Tape& t, std::uint32_t self) {
                           const auto g = t.grad(self);
                           const auto& xv = t.value(ia).data;
                           const auto& wv = t.value(iv).data;
                           if (t.requires_grad(ia)) {
                               double* ga = t.grad_buffer(ia);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       ga[r * cols + c] += g[r * cols + c] * wv[c];
                                   }
                               }
                           }
                           if (t.requires_grad(iv)) {
                               double* gv = t.grad_buffer(iv);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       gv[c] += g[r * cols + c] * xv[r * cols + c];
                                   }
                               }
                           }
                       });
}

Var matmul(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (bv.rank() != 2 || av.rank() < 1 || av.cols() != bv.shape[0]) {
        throw ShapeError(fmt::format("matmul: shape mismatch {} x {}", to_string(av.shape), to_string(bv.shape)));
    }
    const auto m = static_cast<Eigen::Index>(av.rows());
    const auto k = static_cast<Eigen::Index>(av.cols());
    const auto n = static_cast<Eigen::Index>(bv.shape[1]);
    Shape out_shape = av.shape;
    out_shape.back() = static_cast<std::size_t>(n);
    Tensor out(out_shape);
    MatMap(out.data.data(), m, n).noalias() = ConstMatMap(av.data.data(), m, k) * ConstMatMap(bv.data.data(), k, n);
    const auto ia = a.id();
    const auto ib = b.id();
    return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
        const ConstMatMap g(t.grad(self).data(), m, n);
        if (t.requires_grad(ia)) {
            MatMap(t.grad_buffer(ia), m, k).noalias() += g * ConstMatMap(t.value(ib).data.data(), k, n).transpose();
        }
        if (t.requires_grad(ib)) {
            MatMap(t.grad_buffer(ib), k, n).noalias() += ConstMatMap(t.value(ia).data.data(), m, k).transpose() * g;
        }
    });
}

Var bmm(Var a, Var b, bool transpose_b) {
    Tape& tape = common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0]) {
        throw ShapeError(fmt::format("bmm: shape mismatch {} x {}", to_string(av.shape), to_string(bv.shape)));
    }
    const std::size_t batch = av.shape[0];
    const auto m = static_cast<Eigen::Index>(av.shape[1]);
    const auto k = static_cast<Eigen::Index>(av.shape[2]);
    const auto n = static_cast<Eigen::Index>(transpose_b ? bv.shape[1] : bv.shape[2]);
    const auto kb = static_cast<Eigen::Index>(transpose_b ? bv.shape[2] : bv.shape[1]);
    if (kb != k) {
        throw ShapeError(fmt::format("bmm: shape mismatch {} x {}{}", to_string(av.shape), to_string(bv.shape),
                                     transpose_b ? "^T" : ""));
    }
    Tensor out({batch, static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
    const std::size_t sa = static_cast<std::size_t>(m * k);
    const std::size_t sb = static_cast<std::size_t>(k * n);
    const std::size_t so = static_cast<std::size_t>(m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        const ConstMatMap am(av.data.data() + i * sa, m, k);
        MatMap om(out.data.data() + i * so, m, n);
        if (transpose_b) {
            om.noalias() = am * ConstMatMap(bv.data.data() + i * sb, n, k).transpose();
        } else {
            om.noalias() = am * ConstMatMap(bv.data.data() + i * sb, k, n);
        }
    }
    const auto ia = a.id();
    const auto ib = b.id();
    return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                       [=](Tape& t, std::uint32_t self) {
                           const double* g = t.grad(self).data();
                           const double* ad = t.value(ia).data.data();
                           const double* bd = t.value(ib).data.data();
                           const bool need_a = t.requires_grad(ia);
                           const bool need_b = t.requires_grad(ib);
                           double* ga = need_a ? t.grad_buffer(ia) : nullptr;
                           double* gb = need_b ? t.grad_buffer(ib) : nullptr;
                           for (std::size_t i = 0; i < batch; ++i) {
                               const ConstMatMap gm(g + i * so, m, n);
                               if (transpose_b) {
                                   // out = A B^T with B stored n x k
                                   if (need_a) {
                                       MatMap(ga + i * sa, m, k).noalias() += gm * ConstMatMap(bd + i * sb, n, k);
                                   }
                                   if (need_b) {
                                       MatMap(gb + i * sb, n, k).noalias() += gm.transpose() * ConstMatMap(ad + i * sa, m, k);
                                   }
                               } else {
                                   if (need_a) {
                                       MatMap(ga + i * sa, m, k).noalias() +=
                                           gm * ConstMatMap(bd + i * sb, k, n).transpose();
                                   }
                                   if (need_b) {
                                       MatMap(gb + i * sb, k, n).noalias() +=
                                           ConstMatMap(ad + i * sa, m, k).transpose() * gm;
                                   }
                               }
                           }
                       });
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    Tape& tape = *parts[0].tape();
    const std::size_t rows = parts[0].value().rows();
    Shape lead = drop_last(parts[0].shape());
    std::size_t total_cols = 0;
    bool needs = false;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.tape() != &tape) {
            throw std::invalid_argument("concat: operands live on different tapes");
        }
        if (p.value().rows() != rows || drop_last(p.shape()) != lead) {
            throw ShapeError(fmt::format("concat: shape mismatch {} vs {}", to_string(parts[0].shape()), to_string(p.shape())));
        }
        total_cols += p.value().cols();
        needs = needs || p.requires_grad();
        ids.push_back(p.id());
        widths.push_back(p.value().cols());
    }
    Shape out_shape = parts[0].shape();
    out_shape.back() = total_cols;
    Tensor out(out_shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.value().cols();
        const auto& d = p.value().data;
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        out.data.begin() + static_cast<std::ptrdiff_t>(r * total_cols + offset));
        }
        offset += w;
    }
    return tape.record(std::move(out), needs, [ids, widths, rows, total_cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            const std::size_t w = widths[p];
            if (t.requires_grad(ids[p])) {
                double* gp = t.grad_buffer(ids[p]);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) {
                        gp[r * w + c] += g[r * total_cols + off + c];
                    }
                }
            }
            off += w;
        }
    });
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    Tape& tape = *parts[0].tape();
    const Shape& first = parts[0].shape();
    const Shape tail(first.begin() + 1, first.end());
    std::size_t lead = 0;
    bool needs = false;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (p.tape() != &tape || s.empty() || Shape(s.begin() + 1, s.end()) != tail) {
            throw ShapeError(fmt::format("concat_rows: shape mismatch {} vs {}", to_string(first), to_string(s)));
        }
        lead += s[0];
        needs = needs || p.requires_grad();
        ids.push_back(p.id());
        sizes.push_back(p.numel());
    }
    Shape out_shape = first;
    out_shape[0] = lead;
    Tensor out(out_shape);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    return tape.record(std::move(out), needs, [ids, sizes](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        std::size_t o = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (t.requires_grad(ids[p])) {
                double* gp = t.grad_buffer(ids[p]);
                for (std::size_t i = 0; i < sizes[p]; ++i) {
                    gp[i] += g[o + i];
                }
            }
            o += sizes[p];
        }
    });
}

Var slice(Var a, std::size_t begin, std::size_t end) {
    Tape& tape = *a.tape();
    const std::size_t cols = a.value().cols();
    if (begin >= end || end > cols) {
        throw ShapeError(fmt::format("slice: [{}, {}) out of range for {}", begin, end, to_string(a.shape())));
    }
    const std::size_t rows = a.value().rows();
    const std::size_t w = end - begin;
    Shape out_shape = a.shape();
    out_shape.back() = w;
    Tensor out(out_shape);
    const auto& x = a.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), w,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r * w));
    }
    const auto ia = a.id();
    return tape.record(std::move(out), a.requires_grad(), [ia, rows, cols, begin, w](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                ga[r * cols + begin + c] += g[r * w + c];
            }
        }
    });
}

Var gather_rows(Var table, std::vector<std::size_t> indices) {
    Tape& tape = *table.tape();
    const Tensor& tv = table.value();
    if (tv.rank() != 2) {
        throw ShapeError("gather_rows: table must be rank 2, got " + to_string(tv.shape));
    }
    const std::size_t n_rows = tv.shape[0];
    const std::size_t d = tv.shape[1];
    Tensor out({indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n_rows) {
            throw ShapeError(fmt::format("gather_rows: index {} out of range for {}", indices[i], to_string(tv.shape)));
        }
        std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const auto it = table.id();
    return tape.record(std::move(out), table.requires_grad(),
                       [it, d, idx = std::move(indices)](Tape& t, std::uint32_t self) {
                           const auto g = t.grad(self);
                           double* gt = t.grad_buffer(it);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                               for (std::size_t c = 0; c < d; ++c) {
                                   gt[idx[i] * d + c] += g[i * d + c];
                               }
                           }
                       });
}

Var embedding_gather(Var table, std::vector<std::size_t> indices) { return gather_rows(table, std::move(indices)); }

Var pick(Var a, std::vector<std::size_t> index) {
    Tape& tape = *a.tape();
    const std::size_t rows = a.value().rows();
    const std::size_t cols = a.value().cols();
    if (index.size() != rows) {
        throw ShapeError(fmt::format("pick: {} indices for {} rows", index.size(), rows));
    }
    Tensor out(drop_last(a.shape()));
    const auto& x = a.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        if (index[r] >= cols) {
            throw ShapeError(fmt::format("pick: index {} out of range for {} columns", index[r], cols));
        }
        out.data[r] = x[r * cols + index[r]];
    }
    const auto ia = a.id();
    return tape.record(std::move(out), a.requires_grad(), [ia, cols, idx = std::move(index)](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            ga[r * cols + idx[r]] += g[r];
        }
    });
}

Var reshape(Var a, Shape shape) {
    if (ad::numel(shape) != a.numel()) {
        throw ShapeError(fmt::format("reshape: {} to {}", to_string(a.shape()), to_string(shape)));
    }
    Tensor out(std::move(shape), a.value().data);
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        double* ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
        }
    });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

namespace {

double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(1 + exp(z)), exact to double precision for every z.
double softplus_unit(double z) {
    if (z > 30.0) {
        return z + std::exp(-z);
    }
    if (z < -30.0) {
        return std::exp(z);
    }
    return std::log1p(std::exp(z));
}

} // namespace

Var sigmoid(Var a) {
    return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus_scaled(Var x, double s) {
    if (!(s > 0.0)) {
        throw std::invalid_argument("softplus_scaled: scale must be positive");
    }
    return unary(
        x, [s](double v) { return s * softplus_unit(v / s); }, [s](double v, double) { return sigmoid_value(v / s); });
}

Var softplus_scaled(Var x, Var s) {
    Tape& tape = common_tape(x, s);
    const std::size_t cols = x.value().cols();
    if (s.numel() != cols) {
        throw ShapeError(fmt::format("softplus_scaled: scale {} does not match {}", to_string(s.shape()), to_string(x.shape())));
    }
    const std::size_t rows = x.value().rows();
    const auto& xv = x.value().data;
    const auto& sv = s.value().data;
    for (double v : sv) {
        if (!(v > 0.0)) {
            throw std::invalid_argument("softplus_scaled: scale must be positive");
        }
    }
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.data[r * cols + c] = sv[c] * softplus_unit(xv[r * cols + c] / sv[c]);
        }
    }
    const auto ix = x.id();
    const auto is = s.id();
    return tape.record(std::move(out), x.requires_grad() || s.requires_grad(), [ix, is, rows, cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& xd = t.value(ix).data;
        const auto& sd = t.value(is).data;
        double* gx = t.requires_grad(ix) ? t.grad_buffer(ix) : nullptr;
        double* gs = t.requires_grad(is) ? t.grad_buffer(is) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                const double z = xd[i] / sd[c];
                const double sig = sigmoid_value(z);
                if (gx) {
                    gx[i] += g[i] * sig;
                }
                if (gs) {
                    gs[c] += g[i] * (softplus_unit(z) - z * sig);
                }
            }
        }
    });
}

Var expm1_ratio(Var a) {
    return unary(
        a,
        [](double x) { return std::abs(x) < 1e-5 ? 1.0 + x / 2.0 + x * x / 6.0 : std::expm1(x) / x; },
        [](double x, double) {
            if (std::abs(x) < 1e-5) {
                return 0.5 + x / 3.0 + x * x / 8.0;
            }
            return (x * std::exp(x) - std::expm1(x)) / (x * x);
        });
}

namespace {

double log_ndtr_value(double x) {
    if (x > -37.0) {
        return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
    }
    // Asymptotic series of the Mills ratio; terms are below 1e-10 here.
    const double x2 = x * x;
    double series = 1.0;
    double term = 1.0;
    for (int k = 1; k <= 6; ++k) {
        term *= -(2.0 * k - 1.0) / x2;
        series += term;
    }
    return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

} // namespace

Var log_ndtr(Var a) {
    return unary(a, log_ndtr_value, [](double x, double y) {
        return std::exp(-0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi) - y);
    });
}

Var softmax_lastdim(Var a) {
    const std::size_t rows = a.value().rows();
    const std::size_t cols = a.value().cols();
    const auto& x = a.value().data;
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        double* yr = out.data.data() + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = (xr[c] == -std::numeric_limits<double>::infinity()) ? 0.0 : std::exp(xr[c] - mx);
            z += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] /= z;
        }
    }
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia, rows, cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& y = t.value(self).data;
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            double dotp = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                dotp += g[r * cols + c] * y[r * cols + c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                ga[i] += y[i] * (g[i] - dotp);
            }
        }
    });
}

Var log_softmax_lastdim(Var a) {
    const std::size_t rows = a.value().rows();
    const std::size_t cols = a.value().cols();
    const auto& x = a.value().data;
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            z += std::exp(xr[c] - mx);
        }
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) {
            out.data[r * cols + c] = xr[c] - lse;
        }
    }
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia, rows, cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& y = t.value(self).data;
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            double gsum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                gsum += g[r * cols + c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                ga[i] += g[i] - std::exp(y[i]) * gsum;
            }
        }
    });
}

Var logsumexp_lastdim(Var a) {
    const std::size_t rows = a.value().rows();
    const std::size_t cols = a.value().cols();
    const auto& x = a.value().data;
    Tensor out(drop_last(a.shape()));
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        if (mx == -std::numeric_limits<double>::infinity()) {
            out.data[r] = mx;
            continue;
        }
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            z += std::exp(xr[c] - mx);
        }
        out.data[r] = mx + std::log(z);
    }
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia, rows, cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& y = t.value(self).data;
        const auto& xv = t.value(ia).data;
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            if (y[r] == -std::numeric_limits<double>::infinity()) {
                continue;
            }
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                ga[i] += g[r] * std::exp(xv[i] - y[r]);
            }
        }
    });
}

Var sum_lastdim(Var a) {
    const std::size_t rows = a.value().rows();
    const std::size_t cols = a.value().cols();
    const auto& x = a.value().data;
    Tensor out(drop_last(a.shape()));
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            s += x[r * cols + c];
        }
        out.data[r] = s;
    }
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia, rows, cols](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        double* ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                ga[r * cols + c] += g[r];
            }
        }
    });
}

Var masked_fill(Var a, std::vector<std::uint8_t> mask, double value) {
    if (mask.size() != a.numel()) {
        throw ShapeError(fmt::format("masked_fill: mask of {} elements for shape {}", mask.size(), to_string(a.shape())));
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            out.data[i] = value;
        }
    }
    const auto ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [ia, m = std::move(mask)](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        double* ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!m[i]) {
                ga[i] += g[i];
            }
        }
    });
}

Var reduce_sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data) {
        s += v;
    }
    const auto ia = a.id();
    return a.tape()->record(Tensor::scalar(s), a.requires_grad(), [ia](Tape& t, std::uint32_t self) {
        const double g = t.grad(self)[0];
        double* ga = t.grad_buffer(ia);
        const std::size_t n = t.value(ia).numel();
        for (std::size_t i = 0; i < n; ++i) {
            ga[i] += g;
        }
    });
}

Var reduce_mean(Var a) {
    if (a.numel() == 0) {
        throw ShapeError("reduce_mean of an empty tensor");
    }
    return scale(reduce_sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& tape = common_tape(x, gamma);
    common_tape(x, beta);
    const std::size_t rows = x.value().rows();
    const std::size_t cols = x.value().cols();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError(fmt::format("layer_norm: gamma {} / beta {} do not match {}", to_string(gamma.shape()),
                                     to_string(beta.shape()), to_string(x.shape())));
    }
    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * cols;
        double m = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            m += xr[c];
        }
        m /= static_cast<double>(cols);
        double v = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            v += (xr[c] - m) * (xr[c] - m);
        }
        v /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(v + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xr[c] - m) * is;
            (*xhat)[r * cols + c] = h;
            out.data[r * cols + c] = h * gv[c] + bv[c];
        }
    }
    const auto ix = x.id();
    const auto ig = gamma.id();
    const auto ib = beta.id();
    const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    return tape.record(std::move(out), needs, [=](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        const auto& gam = t.value(ig).data;
        const auto& xh = *xhat;
        if (t.requires_grad(ig)) {
            double* gg = t.grad_buffer(ig);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gg[i % cols] += g[i] * xh[i];
            }
        }
        if (t.requires_grad(ib)) {
            double* gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i % cols] += g[i];
            }
        }
        if (t.requires_grad(ix)) {
            double* gx = t.grad_buffer(ix);
            const double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dh = 0.0;
                double sum_dh_h = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const double dh = g[i] * gam[c];
                    sum_dh += dh;
                    sum_dh_h += dh * xh[i];
                }
                const double is = (*inv_std)[r];
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const double dh = g[i] * gam[c];
                    gx[i] += is * (dh - sum_dh / n - xh[i] * sum_dh_h / n);
                }
            }
        }
    });
}

Var dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) {
        return a;
    }
    if (p >= 1.0) {
        throw std::invalid_argument("dropout: p must be < 1");
    }
    const double keep = 1.0 / (1.0 - p);
    Tensor mask(a.shape());
    for (auto& m : mask.data) {
        m = rng.uniform() < p ? 0.0 : keep;
    }
    return mul(a, a.tape()->constant(std::move(mask)));
}

double evaluate(const Function& fn, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& in : inputs) {
        vars.push_back(tape.constant(in));
    }
    return fn(tape, vars).value().item();
}

double grad_check(const Function& fn, const std::vector<Tensor>& inputs, double eps) {
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& in : inputs) {
            vars.push_back(tape.variable(in));
        }
        Var out = fn(tape, vars);
        tape.backward(out);
        for (const auto& v : vars) {
            analytic.push_back(tape.gradient(v));
        }
    }
    double worst = 0.0;
    std::vector<Tensor> probe = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            const double orig = inputs[k].data[i];
            probe[k].data[i] = orig + eps;
            const double up = evaluate(fn, probe);
            probe[k].data[i] = orig - eps;
            const double down = evaluate(fn, probe);
            probe[k].data[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (!std::isfinite(err)) {
                return std::numeric_limits<double>::infinity();
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace ntpp::ad
