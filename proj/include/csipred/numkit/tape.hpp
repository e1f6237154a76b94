#pragma once

// Reverse-mode differentiation over a fixed primitive set. A Tape records
// every primitive applied during one forward pass; backward() walks the record
// in exact reverse order and returns d(loss)/d(param) for each registered
// parameter, in registration order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "csipred/error.hpp"
#include "csipred/numkit/mat.hpp"

namespace csipred::numkit {

class Tape;

/// Handle to a node on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Mat& value() const;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Mat& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that receives no gradient.
    Var constant(Mat value) { return push(std::move(value), false, {}); }

    /// Leaf whose gradient is returned by backward().
    Var param(Mat value)
    {
        Var v = push(std::move(value), true, {});
        params_.push_back(v.id);
        return v;
    }

    const Mat& value(Var v) const { return nodes_[v.id].value; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t num_params() const noexcept { return params_.size(); }

    /// Records a primitive result. `back` receives the upstream gradient and
    /// must accumulate into the inputs via grad().
    Var push(Mat value, bool needs_grad, Backward back)
    {
        if (consumed_) {
            throw UsageError("Tape: recording after backward()");
        }
        nodes_.push_back({std::move(value), needs_grad, needs_grad ? std::move(back) : Backward{}});
        return {this, nodes_.size() - 1};
    }

    /// Gradient accumulator for a node, zero-initialized on first touch.
    /// Only valid inside backward().
    Mat& grad(Var v)
    {
        Mat& g = grads_[v.id];
        if (g.empty() && !nodes_[v.id].value.empty()) {
            g = Mat(nodes_[v.id].value.rows(), nodes_[v.id].value.cols());
        }
        return g;
    }

    /// Accumulates d(loss)/d(param). `loss` must be a 1x1 node on this tape.
    std::vector<Mat> backward(Var loss)
    {
        if (consumed_) {
            throw UsageError("Tape: backward() called twice");
        }
        if (loss.tape != this) {
            throw UsageError("Tape: loss belongs to another tape");
        }
        if (value(loss).rows() != 1 || value(loss).cols() != 1) {
            throw ShapeError("Tape: loss must be 1x1, got " + value(loss).shape_str());
        }
        consumed_ = true;
        grads_.assign(nodes_.size(), Mat{});
        grad(loss)(0, 0) = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.back || grads_[i].empty()) {
                continue;
            }
            n.back(*this, grads_[i]);
        }
        std::vector<Mat> out;
        out.reserve(params_.size());
        for (std::size_t id : params_) {
            Mat g = std::move(grads_[id]);
            if (g.empty()) {
                g = Mat(nodes_[id].value.rows(), nodes_[id].value.cols());
            }
            out.push_back(std::move(g));
        }
        grads_.clear();
        return out;
    }

private:
    struct Node {
        Mat value;
        bool needs_grad;
        Backward back;
    };

    std::vector<Node> nodes_;
    std::vector<std::size_t> params_;
    std::vector<Mat> grads_;
    bool consumed_ = false;
};

inline const Mat& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& tape_of(Var a, Var b)
{
    if (a.tape != b.tape) {
        throw UsageError("Tape: operands recorded on different tapes");
    }
    return *a.tape;
}

inline void add_into(Mat& dst, const Mat& src)
{
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

template <class F>
Var unary(Var a, Mat out, F&& local_grad)
{
    Tape& t = *a.tape;
    return t.push(std::move(out), t.needs_grad(a),
                  [a, lg = std::forward<F>(local_grad)](Tape& tp, const Mat& g) {
                      Mat& ga = tp.grad(a);
                      lg(ga, g);
                  });
}

inline void require_row_vector(const Mat& m, const Mat& r, const char* op)
{
    if (r.rows() != 1 || r.cols() != m.cols()) {
        throw ShapeError(std::string(op) + ": expected 1x" + std::to_string(m.cols()) +
                         " row, got " + r.shape_str());
    }
}

}  // namespace detail

inline Var matmul(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    Mat out = matmul(a.value(), b.value());
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape& tp, const Mat& g) {
        if (tp.needs_grad(a)) {
            detail::add_into(tp.grad(a), matmul_nt(g, b.value()));
        }
        if (tp.needs_grad(b)) {
            detail::add_into(tp.grad(b), matmul_tn(a.value(), g));
        }
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    Mat out = matmul_nt(a.value(), b.value());
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape& tp, const Mat& g) {
        if (tp.needs_grad(a)) {
            matmul_acc(g, b.value(), tp.grad(a));
        }
        if (tp.needs_grad(b)) {
            detail::add_into(tp.grad(b), matmul_tn(g, a.value()));
        }
    });
}

inline Var add(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    return t.push(add(a.value(), b.value()), t.needs_grad(a) || t.needs_grad(b),
                  [a, b](Tape& tp, const Mat& g) {
                      if (tp.needs_grad(a)) {
                          detail::add_into(tp.grad(a), g);
                      }
                      if (tp.needs_grad(b)) {
                          detail::add_into(tp.grad(b), g);
                      }
                  });
}

inline Var sub(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    return t.push(sub(a.value(), b.value()), t.needs_grad(a) || t.needs_grad(b),
                  [a, b](Tape& tp, const Mat& g) {
                      if (tp.needs_grad(a)) {
                          detail::add_into(tp.grad(a), g);
                      }
                      if (tp.needs_grad(b)) {
                          Mat& gb = tp.grad(b);
                          for (std::size_t i = 0; i < gb.size(); ++i) {
                              gb[i] -= g[i];
                          }
                      }
                  });
}

/// Elementwise product.
inline Var hadamard(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "hadamard");
    Mat out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape& tp, const Mat& g) {
        if (tp.needs_grad(a)) {
            Mat& ga = tp.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g[i] * b.value()[i];
            }
        }
        if (tp.needs_grad(b)) {
            Mat& gb = tp.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] += g[i] * a.value()[i];
            }
        }
    });
}

/// Elementwise quotient a / b.
inline Var divide(Var a, Var b)
{
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "divide");
    Mat out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] /= b.value()[i];
    }
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape& tp, const Mat& g) {
        const Mat& bv = b.value();
        if (tp.needs_grad(a)) {
            Mat& ga = tp.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g[i] / bv[i];
            }
        }
        if (tp.needs_grad(b)) {
            Mat& gb = tp.grad(b);
            const Mat& av = a.value();
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
            }
        }
    });
}

/// m + broadcast(row) where row is 1 x m.cols.
inline Var add_row(Var m, Var row)
{
    Tape& t = detail::tape_of(m, row);
    detail::require_row_vector(m.value(), row.value(), "add_row");
    Mat out = m.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] += row.value()[j];
        }
    }
    return t.push(std::move(out), t.needs_grad(m) || t.needs_grad(row), [m, row](Tape& tp, const Mat& g) {
        if (tp.needs_grad(m)) {
            detail::add_into(tp.grad(m), g);
        }
        if (tp.needs_grad(row)) {
            Mat& gr = tp.grad(row);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gr[j] += g(i, j);
                }
            }
        }
    });
}

/// m * broadcast(row) elementwise, row is 1 x m.cols.
inline Var mul_row(Var m, Var row)
{
    Tape& t = detail::tape_of(m, row);
    detail::require_row_vector(m.value(), row.value(), "mul_row");
    Mat out = m.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] *= row.value()[j];
        }
    }
    return t.push(std::move(out), t.needs_grad(m) || t.needs_grad(row), [m, row](Tape& tp, const Mat& g) {
        const Mat& mv = m.value();
        const Mat& rv = row.value();
        if (tp.needs_grad(m)) {
            Mat& gm = tp.grad(m);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gm(i, j) += g(i, j) * rv[j];
                }
            }
        }
        if (tp.needs_grad(row)) {
            Mat& gr = tp.grad(row);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gr[j] += g(i, j) * mv(i, j);
                }
            }
        }
    });
}

inline Var scale(Var a, double s)
{
    return detail::unary(a, scale(a.value(), s), [s](Mat& ga, const Mat& g) {
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += s * g[i];
        }
    });
}

inline Var add_scalar(Var a, double s)
{
    Mat out = a.value();
    for (double& v : out.values()) {
        v += s;
    }
    return detail::unary(a, std::move(out), [](Mat& ga, const Mat& g) { detail::add_into(ga, g); });
}

/// Elementwise op whose derivative is a function of (input, output).
template <class Fwd, class Deriv>
Var elementwise(Var a, Fwd&& fwd, Deriv&& deriv)
{
    Mat out = a.value();
    for (double& v : out.values()) {
        v = fwd(v);
    }
    Tape& t = *a.tape;
    const Var self{&t, t.size()};
    return t.push(std::move(out), t.needs_grad(a), [a, self, deriv](Tape& tp, const Mat& g) {
        Mat& ga = tp.grad(a);
        const Mat& x = a.value();
        const Mat& y = self.value();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g[i] * deriv(x[i], y[i]);
        }
    });
}

inline Var exp(Var a)
{
    return elementwise(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var tanh(Var a)
{
    return elementwise(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a)
{
    return elementwise(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

/// log(1 + e^x), evaluated without overflow.
inline Var softplus(Var a)
{
    return elementwise(
        a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Var softmax_rows(Var a)
{
    Tape& t = *a.tape;
    const Var self{&t, t.size()};
    return t.push(softmax_rows(a.value()), t.needs_grad(a), [a, self](Tape& tp, const Mat& g) {
        const Mat& y = self.value();
        Mat& ga = tp.grad(a);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            auto yr = y.row(i);
            auto gr = g.row(i);
            double dot = 0.0;
            for (std::size_t j = 0; j < yr.size(); ++j) {
                dot += yr[j] * gr[j];
            }
            auto out = ga.row(i);
            for (std::size_t j = 0; j < yr.size(); ++j) {
                out[j] += yr[j] * (gr[j] - dot);
            }
        }
    });
}

inline Var transpose(Var a)
{
    return detail::unary(a, transpose(a.value()), [](Mat& ga, const Mat& g) {
        for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < g.cols(); ++j) {
                ga(j, i) += g(i, j);
            }
        }
    });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count)
{
    return detail::unary(a, slice_cols(a.value(), begin, count), [begin](Mat& ga, const Mat& g) {
        for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < g.cols(); ++j) {
                ga(i, begin + j) += g(i, j);
            }
        }
    });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count)
{
    return detail::unary(a, slice_rows(a.value(), begin, count), [begin](Mat& ga, const Mat& g) {
        for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < g.cols(); ++j) {
                ga(begin + i, j) += g(i, j);
            }
        }
    });
}

inline Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_cols: no operands");
    }
    Tape& t = *parts[0].tape;
    std::vector<Mat> vals;
    bool ng = false;
    for (Var p : parts) {
        detail::tape_of(parts[0], p);
        vals.push_back(p.value());
        ng = ng || t.needs_grad(p);
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.push(concat_cols(vals), ng, [ins](Tape& tp, const Mat& g) {
        std::size_t off = 0;
        for (Var p : ins) {
            const std::size_t w = p.value().cols();
            if (tp.needs_grad(p)) {
                Mat& gp = tp.grad(p);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        gp(i, j) += g(i, off + j);
                    }
                }
            }
            off += w;
        }
    });
}

inline Var concat_rows(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_rows: no operands");
    }
    Tape& t = *parts[0].tape;
    std::vector<Mat> vals;
    bool ng = false;
    for (Var p : parts) {
        detail::tape_of(parts[0], p);
        vals.push_back(p.value());
        ng = ng || t.needs_grad(p);
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.push(concat_rows(vals), ng, [ins](Tape& tp, const Mat& g) {
        std::size_t off = 0;
        for (Var p : ins) {
            const std::size_t h = p.value().rows();
            if (tp.needs_grad(p)) {
                Mat& gp = tp.grad(p);
                for (std::size_t i = 0; i < h; ++i) {
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                        gp(i, j) += g(off + i, j);
                    }
                }
            }
            off += h;
        }
    });
}

/// 1x1 sum of all entries.
inline Var sum(Var a)
{
    return detail::unary(a, Mat(1, 1, sum(a.value())), [](Mat& ga, const Mat& g) {
        for (double& v : ga.values()) {
            v += g[0];
        }
    });
}

/// 1x1 mean of all entries.
inline Var mean(Var a)
{
    const double n = static_cast<double>(a.value().size());
    return detail::unary(a, Mat(1, 1, sum(a.value()) / n), [n](Mat& ga, const Mat& g) {
        for (double& v : ga.values()) {
            v += g[0] / n;
        }
    });
}

/// Mean squared difference between a node and a fixed target, as a 1x1 node.
inline Var mse_loss(Var pred, const Mat& target)
{
    require_same_shape(pred.value(), target, "mse_loss");
    Tape& t = *pred.tape;
    Var tv = t.constant(target);
    Var d = sub(pred, tv);
    return mean(hadamard(d, d));
}

}  // namespace csipred::numkit
