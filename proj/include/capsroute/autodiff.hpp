#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capsroute/parallel.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Named learnable tensor. Lives outside any tape; optimizer steps mutate it,
/// forward passes register it on a per-step tape.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a valid
/// topological order by construction, so backward is a single reverse sweep.
/// Loops over routing iterations unroll onto the tape as they execute.
/// A tape is confined to one thread; run independent tapes for parallel work.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;                         // allocated in backward()
        bool needs_grad = false;
        std::function<void(Tape&)> backward; // adds into parents' grads
    };

    Var constant(Tensor value) { return emit(std::move(value), false); }

    Var leaf(Tensor value, bool needs_grad = true) {
        return emit(std::move(value), needs_grad);
    }

    Var param(const Parameter& p) {
        Var v = emit(p.value, p.trainable);
        params_.push_back({p.name, v.id, p.trainable});
        return v;
    }

    Var emit(Tensor value, bool needs_grad) {
        Node node;
        node.value = std::move(value);
        node.needs_grad = needs_grad;
        nodes_.push_back(std::move(node));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_backward(int id, std::function<void(Tape&)> fn) {
        nodes_[static_cast<std::size_t>(id)].backward = std::move(fn);
    }

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(Var v) const { return value(v.id); }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Tensor& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    std::size_t num_nodes() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Gradients
    /// accumulate over shared subgraphs; the sweep order is the fixed reverse
    /// insertion order, so runs are reproducible.
    void backward_from(Var loss) {
        if (loss.tape != this) throw ContractError("backward: loss lives on a different tape");
        if (value(loss).size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(value(loss).shape()));
        }
        for (auto& node : nodes_) {
            if (node.needs_grad) node.grad = Tensor::zeros(node.value.shape());
        }
        auto& loss_node = nodes_[static_cast<std::size_t>(loss.id)];
        if (!loss_node.needs_grad) return; // nothing trainable feeds the loss
        loss_node.grad[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            auto& node = nodes_[static_cast<std::size_t>(id)];
            if (node.needs_grad && node.backward) node.backward(*this);
        }
    }

    /// backward_from plus collection of d(loss)/d(parameter) for every
    /// trainable registered parameter.
    std::map<std::string, Tensor> backward(Var loss) {
        backward_from(loss);
        std::map<std::string, Tensor> out;
        for (const auto& entry : params_) {
            if (!entry.trainable) continue;
            const auto& g = nodes_[static_cast<std::size_t>(entry.id)].grad;
            out[entry.name] = g.size() > 0 ? g : Tensor::zeros(value(entry.id).shape());
        }
        return out;
    }

private:
    struct ParamEntry {
        std::string name;
        int id;
        bool trainable;
    };

    // Deque keeps references to existing nodes valid while new ops append.
    std::deque<Node> nodes_;
    std::vector<ParamEntry> params_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ContractError("op: operands live on different tapes");
    return *a.tape;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    double* d = dst.data();
    const double* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Unary op scaffold: forward maps value elementwise, backward multiplies the
// output gradient by dy/dx evaluated from (x, y).
template <typename Fwd, typename Dydx>
Var unary_op(Var x, Fwd&& fwd, Dydx&& dydx) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, dydx](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor& xv2 = tp.value(x.id);
            const Tensor& yv2 = tp.value(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dydx(xv2[i], yv2[i]);
        });
    }
    return y;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(t.value(a), t.value(b), "add");
    const Tensor &av = t.value(a), &bv = t.value(b);
    Tensor out = Tensor::uninitialized(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [a, b, yid = y.id](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(a.id)) detail::accumulate(tp.grad(a.id), g);
            if (tp.needs_grad(b.id)) detail::accumulate(tp.grad(b.id), g);
        });
    }
    return y;
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(t.value(a), t.value(b), "sub");
    const Tensor &av = t.value(a), &bv = t.value(b);
    Tensor out = Tensor::uninitialized(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [a, b, yid = y.id](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(a.id)) detail::accumulate(tp.grad(a.id), g);
            if (tp.needs_grad(b.id)) {
                Tensor& gb = tp.grad(b.id);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return y;
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(t.value(a), t.value(b), "mul");
    const Tensor &av = t.value(a), &bv = t.value(b);
    Tensor out = Tensor::uninitialized(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [a, b, yid = y.id](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &av2 = tp.value(a.id), &bv2 = tp.value(b.id);
            if (tp.needs_grad(a.id)) {
                Tensor& ga = tp.grad(a.id);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (tp.needs_grad(b.id)) {
                Tensor& gb = tp.grad(b.id);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return y;
}

inline Var scale(Var x, double k) {
    return detail::unary_op(
        x, [k](double v) { return v * k; }, [k](double, double) { return k; });
}

inline Var neg(Var x) { return scale(x, -1.0); }

inline Var add_const(Var x, double k) {
    return detail::unary_op(
        x, [k](double v) { return v + k; }, [](double, double) { return 1.0; });
}

inline Var relu(Var x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var square(Var x) {
    return detail::unary_op(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var sqrt(Var x) {
    return detail::unary_op(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var log(Var x) {
    return detail::unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var exp(Var x) {
    return detail::unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Numerically stable logistic sigmoid.
inline Var logistic(Var x) {
    return detail::unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

/// Elementwise max(x, k). Used as the variance floor; `floored` counts cells
/// where the floor was active (forward-time only).
inline Var max_const(Var x, double k, long* floored = nullptr) {
    if (floored != nullptr) {
        const Tensor& xv = x.tape->value(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (xv[i] < k) ++*floored;
        }
    }
    return detail::unary_op(
        x, [k](double v) { return v > k ? v : k; },
        [k](double v, double) { return v > k ? 1.0 : 0.0; });
}

/// Identity forward, zero backward: blocks gradient flow.
inline Var stop_gradient(Var x) {
    Tape& t = *x.tape;
    return t.constant(t.value(x));
}

/// Elementwise product with a fixed tensor (no gradient into the mask).
inline Var mul_mask(Var x, const Tensor& mask) {
    Tape& t = *x.tape;
    require_same_shape(t.value(x), mask, "mul_mask");
    const Tensor& xv = t.value(x);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, mask](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Shape ops and reductions
// ---------------------------------------------------------------------------

inline Var reshape(Var x, Shape new_shape) {
    Tape& t = *x.tape;
    Tensor out = t.value(x).reshaped(std::move(new_shape));
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return y;
}

inline Var sum_all(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    Var y = t.emit(Tensor::scalar(s), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id](Tape& tp) {
            const double g = tp.grad(yid)[0];
            Tensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return y;
}

inline Var mean_all(Var x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Sum over the trailing axis: [..., H] -> [...].
inline Var sum_lastaxis(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 2) throw ShapeError("sum_lastaxis: rank must be >= 2");
    const std::size_t H = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.size() / H;
    Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
    Tensor out = Tensor::uninitialized(std::move(out_shape));
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* row = xv.data() + r * H;
        for (std::size_t h = 0; h < H; ++h) s += row[h];
        out[r] = s;
    }
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, rows, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                double* grow = gx.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) grow[h] += g[r];
            }
        });
    }
    return y;
}

/// Sum over axis 1 of a rank-3 tensor: [B, I, J] -> [B, J].
inline Var sum_axis1(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 3) throw ShapeError("sum_axis1: want rank 3, got " + shape_str(xv.shape()));
    const std::size_t B = xv.extent(0), I = xv.extent(1), J = xv.extent(2);
    Tensor out = Tensor::zeros({B, J});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < I; ++i) {
            const double* row = xv.data() + (b * I + i) * J;
            double* orow = out.data() + b * J;
            for (std::size_t j = 0; j < J; ++j) orow[j] += row[j];
        }
    }
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, B, I, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t b = 0; b < B; ++b) {
                const double* grow = g.data() + b * J;
                for (std::size_t i = 0; i < I; ++i) {
                    double* xrow = gx.data() + (b * I + i) * J;
                    for (std::size_t j = 0; j < J; ++j) xrow[j] += grow[j];
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &av = t.value(a), &bv = t.value(b);
    Tensor out = capsroute::matmul(av, bv); // shape checks live in the raw kernel
    const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [a, b, yid = y.id, m, k, n](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &av2 = tp.value(a.id), &bv2 = tp.value(b.id);
            if (tp.needs_grad(a.id)) {
                Tensor& ga = tp.grad(a.id); // dA = G * B^T
                parallel_for(m, [&](std::size_t i) {
                    for (std::size_t tt = 0; tt < k; ++tt) {
                        double s = 0.0;
                        const double* grow = g.data() + i * n;
                        const double* brow = bv2.data() + tt * n;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + tt] += s;
                    }
                }, 8);
            }
            if (tp.needs_grad(b.id)) {
                Tensor& gb = tp.grad(b.id); // dB = A^T * G
                parallel_for(k, [&](std::size_t tt) {
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < m; ++i) {
                            s += av2[i * k + tt] * g[i * n + j];
                        }
                        gb[tt * n + j] += s;
                    }
                }, 8);
            }
        });
    }
    return y;
}

/// Adds a vector to every row of a matrix: [B, N] + [N].
inline Var add_rowvec(Var x, Var v) {
    Tape& t = detail::same_tape(x, v);
    const Tensor &xv = t.value(x), &vv = t.value(v);
    if (xv.rank() != 2 || vv.rank() != 1 || xv.extent(1) != vv.extent(0)) {
        throw ShapeError("add_rowvec: incompatible " + shape_str(xv.shape()) + " vs " +
                         shape_str(vv.shape()));
    }
    const std::size_t B = xv.extent(0), N = xv.extent(1);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t j = 0; j < N; ++j) out[bi * N + j] = xv[bi * N + j] + vv[j];
    }
    const bool ng = t.needs_grad(x.id) || t.needs_grad(v.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [x, v, yid = y.id, B, N](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(x.id)) detail::accumulate(tp.grad(x.id), g);
            if (tp.needs_grad(v.id)) {
                Tensor& gv = tp.grad(v.id);
                for (std::size_t bi = 0; bi < B; ++bi) {
                    for (std::size_t j = 0; j < N; ++j) gv[j] += g[bi * N + j];
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Broadcast helpers used by the routing algorithms
// ---------------------------------------------------------------------------

/// x[..., J] * w[...] where w matches x's leading extents.
inline Var mul_bcast_last(Var x, Var w) {
    Tape& t = detail::same_tape(x, w);
    const Tensor &xv = t.value(x), &wv = t.value(w);
    if (xv.rank() != wv.rank() + 1 || xv.size() % wv.size() != 0) {
        throw ShapeError("mul_bcast_last: incompatible " + shape_str(xv.shape()) + " vs " +
                         shape_str(wv.shape()));
    }
    const std::size_t rows = wv.size(), J = xv.size() / wv.size();
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double k = wv[r];
        for (std::size_t j = 0; j < J; ++j) out[r * J + j] = xv[r * J + j] * k;
    }
    const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [x, w, yid = y.id, rows, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &xv2 = tp.value(x.id), &wv2 = tp.value(w.id);
            if (tp.needs_grad(x.id)) {
                Tensor& gx = tp.grad(x.id);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < J; ++j) gx[r * J + j] += g[r * J + j] * wv2[r];
                }
            }
            if (tp.needs_grad(w.id)) {
                Tensor& gw = tp.grad(w.id);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < J; ++j) s += g[r * J + j] * xv2[r * J + j];
                    gw[r] += s;
                }
            }
        });
    }
    return y;
}

/// lp[B, I, J] + y[B, J] broadcast over axis 1.
inline Var add_bcast_axis1(Var x, Var y) {
    Tape& t = detail::same_tape(x, y);
    const Tensor &xv = t.value(x), &yv = t.value(y);
    if (xv.rank() != 3 || yv.rank() != 2 || xv.extent(0) != yv.extent(0) ||
        xv.extent(2) != yv.extent(1)) {
        throw ShapeError("add_bcast_axis1: incompatible " + shape_str(xv.shape()) + " vs " +
                         shape_str(yv.shape()));
    }
    const std::size_t B = xv.extent(0), I = xv.extent(1), J = xv.extent(2);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < I; ++i) {
            for (std::size_t j = 0; j < J; ++j) {
                out[(b * I + i) * J + j] = xv[(b * I + i) * J + j] + yv[b * J + j];
            }
        }
    }
    const bool ng = t.needs_grad(x.id) || t.needs_grad(y.id);
    Var z = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(z.id, [x, y, zid = z.id, B, I, J](Tape& tp) {
            const Tensor& g = tp.grad(zid);
            if (tp.needs_grad(x.id)) detail::accumulate(tp.grad(x.id), g);
            if (tp.needs_grad(y.id)) {
                Tensor& gy = tp.grad(y.id);
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t i = 0; i < I; ++i) {
                        for (std::size_t j = 0; j < J; ++j) {
                            gy[b * J + j] += g[(b * I + i) * J + j];
                        }
                    }
                }
            }
        });
    }
    return z;
}

/// x[..., J, H] + m[J, H] broadcast over all leading axes.
inline Var add_last2(Var x, Var m) {
    Tape& t = detail::same_tape(x, m);
    const Tensor &xv = t.value(x), &mv = t.value(m);
    if (mv.rank() != 2 || xv.rank() < 2 ||
        xv.extent(xv.rank() - 2) != mv.extent(0) ||
        xv.extent(xv.rank() - 1) != mv.extent(1)) {
        throw ShapeError("add_last2: incompatible " + shape_str(xv.shape()) + " vs " +
                         shape_str(mv.shape()));
    }
    const std::size_t tail = mv.size(), reps = xv.size() / tail;
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t k = 0; k < tail; ++k) out[r * tail + k] = xv[r * tail + k] + mv[k];
    }
    const bool ng = t.needs_grad(x.id) || t.needs_grad(m.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [x, m, yid = y.id, reps, tail](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(x.id)) detail::accumulate(tp.grad(x.id), g);
            if (tp.needs_grad(m.id)) {
                Tensor& gm = tp.grad(m.id);
                for (std::size_t r = 0; r < reps; ++r) {
                    for (std::size_t k = 0; k < tail; ++k) gm[k] += g[r * tail + k];
                }
            }
        });
    }
    return y;
}

/// x[B, J, H] + v[J] broadcast over B and H.
inline Var add_vec_mid(Var x, Var v) {
    Tape& t = detail::same_tape(x, v);
    const Tensor &xv = t.value(x), &vv = t.value(v);
    if (xv.rank() != 3 || vv.rank() != 1 || xv.extent(1) != vv.extent(0)) {
        throw ShapeError("add_vec_mid: incompatible " + shape_str(xv.shape()) + " vs " +
                         shape_str(vv.shape()));
    }
    const std::size_t B = xv.extent(0), J = xv.extent(1), H = xv.extent(2);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < J; ++j) {
            const double k = vv[j];
            for (std::size_t h = 0; h < H; ++h) {
                out[(b * J + j) * H + h] = xv[(b * J + j) * H + h] + k;
            }
        }
    }
    const bool ng = t.needs_grad(x.id) || t.needs_grad(v.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [x, v, yid = y.id, B, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(x.id)) detail::accumulate(tp.grad(x.id), g);
            if (tp.needs_grad(v.id)) {
                Tensor& gv = tp.grad(v.id);
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t j = 0; j < J; ++j) {
                        double s = 0.0;
                        for (std::size_t h = 0; h < H; ++h) s += g[(b * J + j) * H + h];
                        gv[j] += s;
                    }
                }
            }
        });
    }
    return y;
}

/// v[J] - x[B, J] with v broadcast over B.
inline Var vec_sub_bcast(Var v, Var x) {
    Tape& t = detail::same_tape(v, x);
    const Tensor &vv = t.value(v), &xv = t.value(x);
    if (xv.rank() != 2 || vv.rank() != 1 || xv.extent(1) != vv.extent(0)) {
        throw ShapeError("vec_sub_bcast: incompatible " + shape_str(vv.shape()) + " vs " +
                         shape_str(xv.shape()));
    }
    const std::size_t B = xv.extent(0), J = xv.extent(1);
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < J; ++j) out[b * J + j] = vv[j] - xv[b * J + j];
    }
    const bool ng = t.needs_grad(v.id) || t.needs_grad(x.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [v, x, yid = y.id, B, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            if (tp.needs_grad(v.id)) {
                Tensor& gv = tp.grad(v.id);
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t j = 0; j < J; ++j) gv[j] += g[b * J + j];
                }
            }
            if (tp.needs_grad(x.id)) {
                Tensor& gx = tp.grad(x.id);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities
// ---------------------------------------------------------------------------

/// Softmax along the trailing axis, max-subtracted. Rows sum to 1.
inline Var softmax_lastaxis(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 1) throw ShapeError("softmax_lastaxis: rank must be >= 1");
    const std::size_t J = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.size() / J;
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * J;
        double* orow = out.data() + r * J;
        double mx = row[0];
        for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < J; ++j) orow[j] /= sum;
    }
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, rows, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor& yv = tp.value(yid);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * J;
                const double* yrow = yv.data() + r * J;
                double dot = 0.0;
                for (std::size_t j = 0; j < J; ++j) dot += grow[j] * yrow[j];
                double* gxrow = gx.data() + r * J;
                for (std::size_t j = 0; j < J; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    }
    return y;
}

/// Softmax along the trailing axis for log-domain responsibility scores.
/// A row whose entries are all -inf (every parent's weighted density
/// underflowed) falls back to the uniform distribution; `underflow_rows`
/// counts such rows and their backward contribution is zero.
inline Var resp_softmax(Var x, long* underflow_rows = nullptr) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const std::size_t J = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.size() / J;
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * J;
        double* orow = out.data() + r * J;
        double mx = row[0];
        for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, row[j]);
        if (!(mx > -std::numeric_limits<double>::infinity())) {
            for (std::size_t j = 0; j < J; ++j) orow[j] = 1.0 / static_cast<double>(J);
            if (underflow_rows != nullptr) ++*underflow_rows;
            continue;
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < J; ++j) orow[j] /= sum;
    }
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, rows, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor& yv = tp.value(yid);
            const Tensor& xv2 = tp.value(x.id);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                double mx = xv2[r * J];
                for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, xv2[r * J + j]);
                if (!(mx > -std::numeric_limits<double>::infinity())) continue; // uniform fallback row
                const double* grow = g.data() + r * J;
                const double* yrow = yv.data() + r * J;
                double dot = 0.0;
                for (std::size_t j = 0; j < J; ++j) dot += grow[j] * yrow[j];
                double* gxrow = gx.data() + r * J;
                for (std::size_t j = 0; j < J; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Builds a scalar loss from leaf tensors on a fresh tape.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares analytic gradients against central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps) per coordinate and returns the worst
/// relative error, with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const LossBuilder& build, const std::vector<Tensor>& params,
                         double eps = 1e-5) {
    if (!(eps > 0.0)) throw ContractError("grad_check: eps must be > 0");

    // Analytic pass.
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (const Tensor& p : params) leaves.push_back(tape.leaf(p, true));
        Var loss = build(tape, leaves);
        tape.backward_from(loss);
        for (const Var& leaf : leaves) {
            const Tensor& g = tape.grad(leaf);
            analytic.push_back(g.size() > 0 ? g : Tensor::zeros(leaf.value().shape()));
        }
    }

    const auto eval = [&](const std::vector<Tensor>& pts) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(pts.size());
        for (const Tensor& p : pts) leaves.push_back(tape.leaf(p, false));
        return build(tape, leaves).value().scalar_value();
    };

    double worst = 0.0;
    std::vector<Tensor> pts = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = pts[p][i];
            pts[p][i] = orig + eps;
            const double fp = eval(pts);
            pts[p][i] = orig - eps;
            const double fm = eval(pts);
            pts[p][i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[p][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

/// Euclidean norm of each trailing-axis row: [..., H] -> [...].
inline Var l2norm_lastaxis(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 2) throw ShapeError("l2norm_lastaxis: rank must be >= 2");
    const std::size_t H = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.size() / H;
    Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
    Tensor out = Tensor::uninitialized(std::move(out_shape));
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * H;
        double sq = 0.0;
        for (std::size_t h = 0; h < H; ++h) sq += row[h] * row[h];
        out[r] = std::sqrt(sq);
    }
    Var y = t.emit(std::move(out), t.needs_grad(x.id));
    if (t.needs_grad(x.id)) {
        t.set_backward(y.id, [x, yid = y.id, rows, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor& yv = tp.value(yid);
            const Tensor& xv2 = tp.value(x.id);
            Tensor& gx = tp.grad(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                const double n = yv[r];
                if (n == 0.0) continue;
                const double k = g[r] / n;
                const double* row = xv2.data() + r * H;
                double* grow = gx.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) grow[h] += k * row[h];
            }
        });
    }
    return y;
}

} // namespace capsroute
