#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "normtr/errors.hpp"

namespace normtr {

/// Dense row-major matrix with reverse-mode autodiff, templated on the
/// scalar type. Training runs on float; the finite-difference oracles run
/// the same code on double. Copying a tensor shares its storage, which is
/// what lets tape closures see gradient updates.
template <class S>
class TensorT {
public:
    struct Impl {
        int rows = 0;
        int cols = 0;
        std::vector<S> data;
        std::vector<S> grad;  // allocated iff requires_grad
        bool requires_grad = false;
    };

    TensorT() = default;

    TensorT(int rows, int cols, bool requires_grad = false)
        : p_(std::make_shared<Impl>()) {
        if (rows <= 0 || cols <= 0)
            throw ShapeError("tensor dims must be positive, got " + std::to_string(rows) + "x" +
                             std::to_string(cols));
        p_->rows = rows;
        p_->cols = cols;
        p_->data.assign(static_cast<std::size_t>(rows) * cols, S(0));
        set_requires_grad(requires_grad);
    }

    static TensorT zeros(int rows, int cols, bool requires_grad = false) {
        return TensorT(rows, cols, requires_grad);
    }

    static TensorT full(int rows, int cols, S value) {
        TensorT t(rows, cols);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static TensorT scalar(S value) { return full(1, 1, value); }

    static TensorT from_rows(const std::vector<std::vector<S>>& rows_in, bool requires_grad = false) {
        if (rows_in.empty() || rows_in.front().empty()) throw ShapeError("from_rows: empty input");
        TensorT t(static_cast<int>(rows_in.size()), static_cast<int>(rows_in.front().size()),
                  requires_grad);
        for (std::size_t r = 0; r < rows_in.size(); ++r) {
            if (rows_in[r].size() != rows_in.front().size())
                throw ShapeError("from_rows: ragged rows");
            std::copy(rows_in[r].begin(), rows_in[r].end(), t.data().begin() + r * t.cols());
        }
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    int rows() const { return p_->rows; }
    int cols() const { return p_->cols; }
    std::size_t numel() const { return p_->data.size(); }
    bool is_scalar() const { return numel() == 1; }

    std::vector<S>& data() { return p_->data; }
    const std::vector<S>& data() const { return p_->data; }
    std::vector<S>& grad() {
        if (!p_->requires_grad) throw ContractError("grad requested on non-tracked tensor");
        return p_->grad;
    }
    const std::vector<S>& grad() const {
        if (!p_->requires_grad) throw ContractError("grad requested on non-tracked tensor");
        return p_->grad;
    }

    S& at(int r, int c) { return p_->data[static_cast<std::size_t>(r) * p_->cols + c]; }
    S at(int r, int c) const { return p_->data[static_cast<std::size_t>(r) * p_->cols + c]; }
    S value() const {
        if (!is_scalar()) throw ContractError("value() on non-scalar tensor");
        return p_->data[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool on) {
        p_->requires_grad = on;
        if (on)
            p_->grad.assign(p_->data.size(), S(0));
        else
            p_->grad.clear();
    }
    void zero_grad() {
        if (p_->requires_grad) std::fill(p_->grad.begin(), p_->grad.end(), S(0));
    }

    /// Deep copy of values (no storage sharing, gradients not copied).
    TensorT clone_values() const {
        TensorT t(rows(), cols());
        t.data() = data();
        return t;
    }

    std::shared_ptr<Impl> impl() const { return p_; }

private:
    std::shared_ptr<Impl> p_;
};

/// Ordered record of differentiable ops. backward() replays the records in
/// strict reverse execution order; parameter gradients accumulate (+=)
/// across calls until zeroed explicitly.
template <class S>
class TapeT {
public:
    void record(std::shared_ptr<typename TensorT<S>::Impl> output, std::function<void()> backward) {
        records_.push_back({std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    void backward(const TensorT<S>& loss) {
        if (!loss.defined() || !loss.is_scalar())
            throw ContractError("backward requires a scalar loss");
        if (!loss.requires_grad())
            throw ContractError("backward: loss is not on the tape");
        // Zero every op output first so repeated backward calls accumulate
        // exactly (each call contributes one full pass into the leaves).
        for (auto& rec : records_)
            std::fill(rec.output->grad.begin(), rec.output->grad.end(), S(0));
        loss.impl()->grad[0] = S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    }

private:
    struct Record {
        std::shared_ptr<typename TensorT<S>::Impl> output;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

template <class S>
inline void check_finite(const TensorT<S>& t, const char* op) {
    for (S v : t.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class S>
inline bool track(TapeT<S>* tape, std::initializer_list<const TensorT<S>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

template <class S>
inline TensorT<S> make_output(int rows, int cols, bool tracked) {
    TensorT<S> out(rows, cols, tracked);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Every op validates shapes, checks outputs for
// non-finite values and, when a tape is supplied and an input is tracked,
// records its backward closure.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> matmul(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const bool tracked = detail::track(tape, {&a, &b});
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    const S* ad = a.data().data();
    const S* bd = b.data().data();
    S* od = out.data().data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const S av = ad[i * k + p];
            const S* brow = bd + static_cast<std::size_t>(p) * n;
            S* orow = od + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    detail::check_finite(out, "matmul");
    if (tracked) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi, m, k, n] {
            const S* g = oi->grad.data();
            if (ai->requires_grad) {
                S* ga = ai->grad.data();
                const S* bd2 = bi->data.data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        S acc = 0;
                        const S* grow = g + static_cast<std::size_t>(i) * n;
                        const S* brow = bd2 + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            }
            if (bi->requires_grad) {
                S* gb = bi->grad.data();
                const S* ad2 = ai->data.data();
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        const S av = ad2[i * k + p];
                        const S* grow = g + static_cast<std::size_t>(i) * n;
                        S* gbrow = gb + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

/// a (m x k) times b-transposed (n x k) -> m x n. Used for attention scores.
template <class S>
TensorT<S> matmul_nt(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dims " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
    const int m = a.rows(), k = a.cols(), n = b.rows();
    const bool tracked = detail::track(tape, {&a, &b});
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            S acc = 0;
            for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(j, p);
            out.at(i, j) = acc;
        }
    detail::check_finite(out, "matmul_nt");
    if (tracked) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi, m, k, n] {
            const S* g = oi->grad.data();
            if (ai->requires_grad)
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        S acc = 0;
                        for (int j = 0; j < n; ++j)
                            acc += g[i * n + j] * bi->data[static_cast<std::size_t>(j) * k + p];
                        ai->grad[static_cast<std::size_t>(i) * k + p] += acc;
                    }
            if (bi->requires_grad)
                for (int j = 0; j < n; ++j)
                    for (int p = 0; p < k; ++p) {
                        S acc = 0;
                        for (int i = 0; i < m; ++i)
                            acc += g[i * n + j] * ai->data[static_cast<std::size_t>(i) * k + p];
                        bi->grad[static_cast<std::size_t>(j) * k + p] += acc;
                    }
        });
    }
    return out;
}

template <class S>
TensorT<S> add(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
    const bool tracked = detail::track(tape, {&a, &b});
    TensorT<S> out = detail::make_output<S>(a.rows(), a.cols(), tracked);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::check_finite(out, "add");
    if (tracked) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            if (ai->requires_grad)
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            if (bi->requires_grad)
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

/// Adds a 1 x n bias row to every row of a (m x n).
template <class S>
TensorT<S> add_rowvec(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
        throw ShapeError("add_rowvec: bias must be 1x" + std::to_string(a.cols()));
    const bool tracked = detail::track(tape, {&a, &bias});
    TensorT<S> out = detail::make_output<S>(a.rows(), a.cols(), tracked);
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(i, j) = a.at(i, j) + bias.at(0, j);
    detail::check_finite(out, "add_rowvec");
    if (tracked) {
        auto ai = a.impl(), bi = bias.impl(), oi = out.impl();
        const int m = a.rows(), n = a.cols();
        tape->record(oi, [ai, bi, oi, m, n] {
            if (ai->requires_grad)
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            if (bi->requires_grad)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bi->grad[j] += oi->grad[static_cast<std::size_t>(i) * n + j];
        });
    }
    return out;
}

template <class S>
TensorT<S> scale(TapeT<S>* tape, const TensorT<S>& a, S factor) {
    const bool tracked = detail::track(tape, {&a});
    TensorT<S> out = detail::make_output<S>(a.rows(), a.cols(), tracked);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * factor;
    detail::check_finite(out, "scale");
    if (tracked) {
        auto ai = a.impl(), oi = out.impl();
        tape->record(oi, [ai, oi, factor] {
            if (ai->requires_grad)
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    ai->grad[i] += factor * oi->grad[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> leaky_relu(TapeT<S>* tape, const TensorT<S>& x, S slope) {
    if (!(slope > S(0) && slope < S(1))) throw ContractError("leaky_relu: slope must be in (0,1)");
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(x.rows(), x.cols(), tracked);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const S v = x.data()[i];
        out.data()[i] = v > S(0) ? v : slope * v;
    }
    detail::check_finite(out, "leaky_relu");
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, slope] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += (xi->data[i] > S(0) ? S(1) : slope) * oi->grad[i];
        });
    }
    return out;
}

/// Row-wise softmax, stabilized by subtracting each row's max.
template <class S>
TensorT<S> softmax_rows(TapeT<S>* tape, const TensorT<S>& x) {
    const int m = x.rows(), n = x.cols();
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    for (int i = 0; i < m; ++i) {
        S mx = x.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        S sum = 0;
        for (int j = 0; j < n; ++j) {
            const S e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    detail::check_finite(out, "softmax_rows");
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, m, n] {
            if (!xi->requires_grad) return;
            for (int i = 0; i < m; ++i) {
                const S* p = oi->data.data() + static_cast<std::size_t>(i) * n;
                const S* g = oi->grad.data() + static_cast<std::size_t>(i) * n;
                S dot = 0;
                for (int j = 0; j < n; ++j) dot += p[j] * g[j];
                S* gx = xi->grad.data() + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) gx[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// Row-wise layer normalization with learnable gain and bias (1 x n each).
template <class S>
TensorT<S> layer_norm_rows(TapeT<S>* tape, const TensorT<S>& x, const TensorT<S>& gain,
                           const TensorT<S>& bias, S eps = S(1e-5)) {
    const int m = x.rows(), n = x.cols();
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
        throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
    const bool tracked = detail::track(tape, {&x, &gain, &bias});
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    std::vector<S> xhat(static_cast<std::size_t>(m) * n);
    std::vector<S> inv_std(m);
    for (int i = 0; i < m; ++i) {
        S mu = 0;
        for (int j = 0; j < n; ++j) mu += x.at(i, j);
        mu /= static_cast<S>(n);
        S var = 0;
        for (int j = 0; j < n; ++j) {
            const S d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<S>(n);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < n; ++j) {
            const S h = (x.at(i, j) - mu) * is;
            xhat[static_cast<std::size_t>(i) * n + j] = h;
            out.at(i, j) = gain.at(0, j) * h + bias.at(0, j);
        }
    }
    detail::check_finite(out, "layer_norm_rows");
    if (tracked) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        tape->record(oi, [xi, gi, bi, oi, m, n, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)] {
            for (int i = 0; i < m; ++i) {
                const S* g = oi->grad.data() + static_cast<std::size_t>(i) * n;
                const S* h = xhat.data() + static_cast<std::size_t>(i) * n;
                if (bi->requires_grad)
                    for (int j = 0; j < n; ++j) bi->grad[j] += g[j];
                if (gi->requires_grad)
                    for (int j = 0; j < n; ++j) gi->grad[j] += g[j] * h[j];
                if (xi->requires_grad) {
                    S mean_dh = 0, mean_dh_h = 0;
                    for (int j = 0; j < n; ++j) {
                        const S dh = g[j] * gi->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= static_cast<S>(n);
                    mean_dh_h /= static_cast<S>(n);
                    S* gx = xi->grad.data() + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        const S dh = g[j] * gi->data[j];
                        gx[j] += inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

/// Mean over rows: m x n -> 1 x n.
template <class S>
TensorT<S> mean_rows(TapeT<S>* tape, const TensorT<S>& x) {
    const int m = x.rows(), n = x.cols();
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(1, n, tracked);
    for (int j = 0; j < n; ++j) {
        S acc = 0;
        for (int i = 0; i < m; ++i) acc += x.at(i, j);
        out.at(0, j) = acc / static_cast<S>(m);
    }
    detail::check_finite(out, "mean_rows");
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, m, n] {
            if (!xi->requires_grad) return;
            const S inv = S(1) / static_cast<S>(m);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xi->grad[static_cast<std::size_t>(i) * n + j] += oi->grad[j] * inv;
        });
    }
    return out;
}

template <class S>
TensorT<S> sum_all(TapeT<S>* tape, const TensorT<S>& x) {
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(1, 1, tracked);
    S acc = 0;
    for (S v : x.data()) acc += v;
    out.data()[0] = acc;
    detail::check_finite(out, "sum_all");
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            for (auto& g : xi->grad) g += oi->grad[0];
        });
    }
    return out;
}

template <class S>
TensorT<S> concat_rows(TapeT<S>* tape, const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int n = parts.front().cols();
    int m = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += p.rows();
        if (tape && p.requires_grad()) tracked = true;
    }
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    int r0 = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(),
                  out.data().begin() + static_cast<std::size_t>(r0) * n);
        r0 += p.rows();
    }
    detail::check_finite(out, "concat_rows");
    if (tracked) {
        std::vector<std::shared_ptr<typename TensorT<S>::Impl>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        tape->record(oi, [impls, oi, n] {
            int r = 0;
            for (auto& pi : impls) {
                const int pm = pi->rows;
                if (pi->requires_grad)
                    for (std::size_t i = 0; i < pi->grad.size(); ++i)
                        pi->grad[i] += oi->grad[static_cast<std::size_t>(r) * n + i];
                r += pm;
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> concat_cols(TapeT<S>* tape, const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int m = parts.front().rows();
    int n = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        n += p.cols();
        if (tape && p.requires_grad()) tracked = true;
    }
    TensorT<S> out = detail::make_output<S>(m, n, tracked);
    int c0 = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.cols(); ++j) out.at(i, c0 + j) = p.at(i, j);
        c0 += p.cols();
    }
    detail::check_finite(out, "concat_cols");
    if (tracked) {
        std::vector<std::shared_ptr<typename TensorT<S>::Impl>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        tape->record(oi, [impls, oi, m, n] {
            int c = 0;
            for (auto& pi : impls) {
                const int pn = pi->cols;
                if (pi->requires_grad)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pn; ++j)
                            pi->grad[static_cast<std::size_t>(i) * pn + j] +=
                                oi->grad[static_cast<std::size_t>(i) * n + c + j];
                c += pn;
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> slice_rows(TapeT<S>* tape, const TensorT<S>& x, int r0, int count) {
    if (r0 < 0 || count <= 0 || r0 + count > x.rows()) throw ShapeError("slice_rows: out of range");
    const int n = x.cols();
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(count, n, tracked);
    std::copy(x.data().begin() + static_cast<std::size_t>(r0) * n,
              x.data().begin() + static_cast<std::size_t>(r0 + count) * n, out.data().begin());
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, r0, n] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[static_cast<std::size_t>(r0) * n + i] += oi->grad[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> slice_cols(TapeT<S>* tape, const TensorT<S>& x, int c0, int count) {
    if (c0 < 0 || count <= 0 || c0 + count > x.cols()) throw ShapeError("slice_cols: out of range");
    const int m = x.rows(), n = x.cols();
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(m, count, tracked);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j) out.at(i, j) = x.at(i, c0 + j);
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, m, n, c0, count] {
            if (!xi->requires_grad) return;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j)
                    xi->grad[static_cast<std::size_t>(i) * n + c0 + j] +=
                        oi->grad[static_cast<std::size_t>(i) * count + j];
        });
    }
    return out;
}

/// Row-major reshape (copies; element order unchanged).
template <class S>
TensorT<S> reshape(TapeT<S>* tape, const TensorT<S>& x, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != x.numel())
        throw ShapeError("reshape: element count mismatch");
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(rows, cols, tracked);
    out.data() = x.data();
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

/// Identity forward; backward multiplies the upstream gradient by -lambda.
template <class S>
TensorT<S> grad_reverse(TapeT<S>* tape, const TensorT<S>& x, S lambda) {
    if (lambda < S(0)) throw ContractError("grad_reverse: lambda must be >= 0");
    const bool tracked = detail::track(tape, {&x});
    TensorT<S> out = detail::make_output<S>(x.rows(), x.cols(), tracked);
    out.data() = x.data();
    if (tracked) {
        auto xi = x.impl(), oi = out.impl();
        tape->record(oi, [xi, oi, lambda] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += -lambda * oi->grad[i];
        });
    }
    return out;
}

/// Mean over the batch of -log softmax(logits)[label].
template <class S>
TensorT<S> cross_entropy(TapeT<S>* tape, const TensorT<S>& logits, const std::vector<int>& labels) {
    const int b = logits.rows(), c = logits.cols();
    if (static_cast<int>(labels.size()) != b)
        throw ShapeError("cross_entropy: batch size mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= c)
            throw IndexError("cross_entropy: label " + std::to_string(lab) + " out of [0," +
                             std::to_string(c) + ")");
    const bool tracked = detail::track(tape, {&logits});
    TensorT<S> out = detail::make_output<S>(1, 1, tracked);
    std::vector<S> probs(static_cast<std::size_t>(b) * c);
    S total = 0;
    for (int i = 0; i < b; ++i) {
        S mx = logits.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        S sum = 0;
        for (int j = 0; j < c; ++j) {
            const S e = std::exp(logits.at(i, j) - mx);
            probs[static_cast<std::size_t>(i) * c + j] = e;
            sum += e;
        }
        for (int j = 0; j < c; ++j) probs[static_cast<std::size_t>(i) * c + j] /= sum;
        total += std::log(sum) + mx - logits.at(i, labels[i]);
    }
    out.data()[0] = total / static_cast<S>(b);
    detail::check_finite(out, "cross_entropy");
    if (tracked) {
        auto li = logits.impl(), oi = out.impl();
        tape->record(oi, [li, oi, labels, probs = std::move(probs), b, c] {
            if (!li->requires_grad) return;
            const S g = oi->grad[0] / static_cast<S>(b);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < c; ++j) {
                    S p = probs[static_cast<std::size_t>(i) * c + j];
                    if (j == labels[i]) p -= S(1);
                    li->grad[static_cast<std::size_t>(i) * c + j] += g * p;
                }
        });
    }
    return out;
}

/// (1/b) * sum of squared errors between pred (b x 1) and targets.
template <class S>
TensorT<S> mse(TapeT<S>* tape, const TensorT<S>& pred, const std::vector<S>& targets) {
    const int b = pred.rows();
    if (pred.cols() != 1) throw ShapeError("mse: pred must be b x 1");
    if (static_cast<int>(targets.size()) != b) throw ShapeError("mse: length mismatch");
    const bool tracked = detail::track(tape, {&pred});
    TensorT<S> out = detail::make_output<S>(1, 1, tracked);
    S total = 0;
    for (int i = 0; i < b; ++i) {
        const S d = pred.at(i, 0) - targets[i];
        total += d * d;
    }
    out.data()[0] = total / static_cast<S>(b);
    detail::check_finite(out, "mse");
    if (tracked) {
        auto pi = pred.impl(), oi = out.impl();
        tape->record(oi, [pi, oi, targets, b] {
            if (!pi->requires_grad) return;
            const S g = oi->grad[0];
            for (int i = 0; i < b; ++i)
                pi->grad[i] += g * S(2) * (pi->data[i] - targets[i]) / static_cast<S>(b);
        });
    }
    return out;
}

}  // namespace normtr
