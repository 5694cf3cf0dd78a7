#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "capsroute/autodiff.hpp"
#include "capsroute/parallel.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Shared knobs for both routing families.
///   iterations      r, the number of routing iterations (>= 1)
///   bias_enabled    whether the learned symmetry-breaking offsets are active
///   lambda_schedule inverse temperature per iteration (EM only); when empty a
///                   doubling schedule 0.01 * 2^t is filled in
///   sigma_epsilon   variance floor for the EM M-step
///   squash_epsilon  denominator guard of squash; added to ||s|| (not clamped)
///                   so squash stays exactly odd
///   stop_routing_gradients  when true, coupling coefficients are treated as
///                   constants in backward (gradients still flow through the
///                   predictions/votes themselves)
struct RoutingConfig {
    int iterations = 3;
    bool bias_enabled = false;
    std::vector<double> lambda_schedule;
    double sigma_epsilon = 1e-8;
    double squash_epsilon = 1e-12;
    bool stop_routing_gradients = false;

    std::vector<double> effective_lambda_schedule() const {
        if (!lambda_schedule.empty()) {
            if (static_cast<int>(lambda_schedule.size()) != iterations) {
                throw ValueError("routing config: lambda_schedule has " +
                                 std::to_string(lambda_schedule.size()) + " entries for " +
                                 std::to_string(iterations) + " iterations");
            }
            return lambda_schedule;
        }
        std::vector<double> sched(static_cast<std::size_t>(iterations));
        double lambda = 0.01;
        for (auto& v : sched) {
            v = lambda;
            lambda *= 2.0;
        }
        return sched;
    }

    void validate() const {
        if (iterations < 1) throw ContractError("routing config: iterations must be >= 1");
        if (!(sigma_epsilon > 0.0) || !(squash_epsilon > 0.0)) {
            throw ValueError("routing config: epsilons must be > 0");
        }
        for (const double l : lambda_schedule) {
            if (!(l > 0.0)) throw ValueError("routing config: lambda values must be > 0");
        }
    }
};

/// Counters for the numerical guards. They never fire on well-conditioned
/// instances; the invariance verifier asserts exactly that.
struct RoutingStats {
    long variance_floor_hits = 0;
    long underflow_rows = 0;
    long denom_guard_hits = 0;
};

/// Layer parameters for routing-by-agreement. The bias tensor exists in both
/// modes; with bias_enabled=false it is pinned to zeros and non-trainable.
struct RbaLayerParams {
    Parameter W;    // [I, J, H_out, H_in]
    Parameter bias; // [J, H_out]
};

/// Layer parameters for EM routing. vote_bias is pinned like the RBA bias;
/// beta_a / beta_u are learned in both modes.
struct EmLayerParams {
    Parameter W;         // [I, J, 16]
    Parameter vote_bias; // [J, 16]
    Parameter beta_a;    // [J]
    Parameter beta_u;    // [J]
};

/// One layer of matrix capsules: activation in [0,1] plus a vectorized 4x4
/// pose per capsule. Batched as [B, I] / [B, I, 16].
struct EmCapsules {
    Tensor activations;
    Tensor poses;
};

// ---------------------------------------------------------------------------
// Capsule tensor ops (autodiff)
// ---------------------------------------------------------------------------

/// Predictions u_hat[b,i,j,:] = W[i,j] * u[b,i,:] for u [B,I,Hin], W [I,J,Hout,Hin].
inline Var rba_predictions(Var u, Var W) {
    Tape& t = detail::same_tape(u, W);
    const Tensor &uv = t.value(u), &wv = t.value(W);
    if (uv.rank() != 3 || wv.rank() != 4 || uv.extent(1) != wv.extent(0) ||
        uv.extent(2) != wv.extent(3)) {
        throw ShapeError("rba_predictions: incompatible " + shape_str(uv.shape()) + " vs " +
                         shape_str(wv.shape()));
    }
    const std::size_t B = uv.extent(0), I = uv.extent(1), Hi = uv.extent(2);
    const std::size_t J = wv.extent(1), Ho = wv.extent(2);
    Tensor out = Tensor::uninitialized({B, I, J, Ho});
    parallel_for(B, [&](std::size_t b) {
        for (std::size_t i = 0; i < I; ++i) {
            const double* urow = uv.data() + (b * I + i) * Hi;
            const double* wbase = wv.data() + i * J * Ho * Hi;
            double* obase = out.data() + ((b * I + i) * J) * Ho;
            for (std::size_t jo = 0; jo < J * Ho; ++jo) {
                const double* wrow = wbase + jo * Hi;
                double s = 0.0;
                for (std::size_t h = 0; h < Hi; ++h) s += wrow[h] * urow[h];
                obase[jo] = s;
            }
        }
    }, 1);
    const bool ng = t.needs_grad(u.id) || t.needs_grad(W.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [u, W, yid = y.id, B, I, J, Ho, Hi](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &uv2 = tp.value(u.id), &wv2 = tp.value(W.id);
            if (tp.needs_grad(u.id)) {
                Tensor& gu = tp.grad(u.id);
                parallel_for(B, [&](std::size_t b) {
                    for (std::size_t i = 0; i < I; ++i) {
                        double* gurow = gu.data() + (b * I + i) * Hi;
                        const double* wbase = wv2.data() + i * J * Ho * Hi;
                        const double* grow = g.data() + ((b * I + i) * J) * Ho;
                        for (std::size_t jo = 0; jo < J * Ho; ++jo) {
                            const double gv = grow[jo];
                            if (gv == 0.0) continue;
                            const double* wrow = wbase + jo * Hi;
                            for (std::size_t h = 0; h < Hi; ++h) gurow[h] += gv * wrow[h];
                        }
                    }
                }, 1);
            }
            if (tp.needs_grad(W.id)) {
                Tensor& gw = tp.grad(W.id);
                parallel_for(I, [&](std::size_t i) {
                    double* gwbase = gw.data() + i * J * Ho * Hi;
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* urow = uv2.data() + (b * I + i) * Hi;
                        const double* grow = g.data() + ((b * I + i) * J) * Ho;
                        for (std::size_t jo = 0; jo < J * Ho; ++jo) {
                            const double gv = grow[jo];
                            if (gv == 0.0) continue;
                            double* gwrow = gwbase + jo * Hi;
                            for (std::size_t h = 0; h < Hi; ++h) gwrow[h] += gv * urow[h];
                        }
                    }
                }, 1);
            }
        });
    }
    return y;
}

/// s[b,j,:] = sum_i w[b,i,j] * x[b,i,j,:]. The coupling-weighted sum of both
/// routing families.
inline Var weighted_sum_i(Var w, Var x) {
    Tape& t = detail::same_tape(w, x);
    const Tensor &wv = t.value(w), &xv = t.value(x);
    if (wv.rank() != 3 || xv.rank() != 4 || wv.extent(0) != xv.extent(0) ||
        wv.extent(1) != xv.extent(1) || wv.extent(2) != xv.extent(2)) {
        throw ShapeError("weighted_sum_i: incompatible " + shape_str(wv.shape()) + " vs " +
                         shape_str(xv.shape()));
    }
    const std::size_t B = wv.extent(0), I = wv.extent(1), J = wv.extent(2), H = xv.extent(3);
    Tensor out = Tensor::zeros({B, J, H});
    parallel_for(B, [&](std::size_t b) {
        double* obase = out.data() + b * J * H;
        for (std::size_t i = 0; i < I; ++i) {
            const double* wrow = wv.data() + (b * I + i) * J;
            const double* xbase = xv.data() + ((b * I + i) * J) * H;
            for (std::size_t j = 0; j < J; ++j) {
                const double k = wrow[j];
                const double* xrow = xbase + j * H;
                double* orow = obase + j * H;
                for (std::size_t h = 0; h < H; ++h) orow[h] += k * xrow[h];
            }
        }
    }, 1);
    const bool ng = t.needs_grad(w.id) || t.needs_grad(x.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [w, x, yid = y.id, B, I, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &wv2 = tp.value(w.id), &xv2 = tp.value(x.id);
            const bool need_w = tp.needs_grad(w.id), need_x = tp.needs_grad(x.id);
            Tensor* gw = need_w ? &tp.grad(w.id) : nullptr;
            Tensor* gx = need_x ? &tp.grad(x.id) : nullptr;
            parallel_for(B, [&](std::size_t b) {
                const double* gbase = g.data() + b * J * H;
                for (std::size_t i = 0; i < I; ++i) {
                    const double* xbase = xv2.data() + ((b * I + i) * J) * H;
                    const double* wrow = wv2.data() + (b * I + i) * J;
                    for (std::size_t j = 0; j < J; ++j) {
                        const double* grow = gbase + j * H;
                        if (need_w) {
                            double s = 0.0;
                            const double* xrow = xbase + j * H;
                            for (std::size_t h = 0; h < H; ++h) s += grow[h] * xrow[h];
                            (*gw)[(b * I + i) * J + j] += s;
                        }
                        if (need_x) {
                            const double k = wrow[j];
                            double* gxrow = gx->data() + ((b * I + i) * J + j) * H;
                            for (std::size_t h = 0; h < H; ++h) gxrow[h] += k * grow[h];
                        }
                    }
                }
            }, 1);
        });
    }
    return y;
}

/// Agreement logit increments a[b,i,j] = v[b,j,:] . u_hat[b,i,j,:].
inline Var caps_agreement(Var v, Var uhat) {
    Tape& t = detail::same_tape(v, uhat);
    const Tensor &vv = t.value(v), &uv = t.value(uhat);
    if (vv.rank() != 3 || uv.rank() != 4 || vv.extent(0) != uv.extent(0) ||
        vv.extent(1) != uv.extent(2) || vv.extent(2) != uv.extent(3)) {
        throw ShapeError("caps_agreement: incompatible " + shape_str(vv.shape()) + " vs " +
                         shape_str(uv.shape()));
    }
    const std::size_t B = uv.extent(0), I = uv.extent(1), J = uv.extent(2), H = uv.extent(3);
    Tensor out = Tensor::uninitialized({B, I, J});
    parallel_for(B, [&](std::size_t b) {
        const double* vbase = vv.data() + b * J * H;
        for (std::size_t i = 0; i < I; ++i) {
            const double* ubase = uv.data() + ((b * I + i) * J) * H;
            double* orow = out.data() + (b * I + i) * J;
            for (std::size_t j = 0; j < J; ++j) {
                const double* vrow = vbase + j * H;
                const double* urow = ubase + j * H;
                double s = 0.0;
                for (std::size_t h = 0; h < H; ++h) s += vrow[h] * urow[h];
                orow[j] = s;
            }
        }
    }, 1);
    const bool ng = t.needs_grad(v.id) || t.needs_grad(uhat.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [v, uhat, yid = y.id, B, I, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &vv2 = tp.value(v.id), &uv2 = tp.value(uhat.id);
            const bool need_v = tp.needs_grad(v.id), need_u = tp.needs_grad(uhat.id);
            Tensor* gv = need_v ? &tp.grad(v.id) : nullptr;
            Tensor* gu = need_u ? &tp.grad(uhat.id) : nullptr;
            parallel_for(B, [&](std::size_t b) {
                for (std::size_t i = 0; i < I; ++i) {
                    const double* grow = g.data() + (b * I + i) * J;
                    for (std::size_t j = 0; j < J; ++j) {
                        const double gval = grow[j];
                        if (gval == 0.0) continue;
                        const double* vrow = vv2.data() + (b * J + j) * H;
                        const double* urow = uv2.data() + ((b * I + i) * J + j) * H;
                        if (need_v) {
                            double* gvrow = gv->data() + (b * J + j) * H;
                            for (std::size_t h = 0; h < H; ++h) gvrow[h] += gval * urow[h];
                        }
                        if (need_u) {
                            double* gurow = gu->data() + ((b * I + i) * J + j) * H;
                            for (std::size_t h = 0; h < H; ++h) gurow[h] += gval * vrow[h];
                        }
                    }
                }
            }, 1);
        });
    }
    return y;
}

/// Norm-bounding capsule nonlinearity, applied to each trailing-axis row:
///   v = (||s||^2 / (1 + ||s||^2)) * s / (||s|| + eps)
/// The epsilon sits in a sum, not a clamp, so squash(-s) == -squash(s)
/// exactly and the zero vector maps to zero.
inline Var squash_lastaxis(Var s, double eps) {
    Tape& t = *s.tape;
    const Tensor& sv = t.value(s);
    if (sv.rank() < 1) throw ShapeError("squash: rank must be >= 1");
    const std::size_t H = sv.extent(sv.rank() - 1);
    const std::size_t rows = sv.size() / H;
    Tensor out = Tensor::uninitialized(sv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = sv.data() + r * H;
        double sq = 0.0;
        for (std::size_t h = 0; h < H; ++h) sq += row[h] * row[h];
        const double n = std::sqrt(sq);
        const double f = sq / ((1.0 + sq) * (n + eps));
        double* orow = out.data() + r * H;
        for (std::size_t h = 0; h < H; ++h) orow[h] = f * row[h];
    }
    Var y = t.emit(std::move(out), t.needs_grad(s.id));
    if (t.needs_grad(s.id)) {
        t.set_backward(y.id, [s, yid = y.id, rows, H, eps](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor& sv2 = tp.value(s.id);
            Tensor& gs = tp.grad(s.id);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = sv2.data() + r * H;
                const double* grow = g.data() + r * H;
                double sq = 0.0, dot = 0.0;
                for (std::size_t h = 0; h < H; ++h) {
                    sq += row[h] * row[h];
                    dot += grow[h] * row[h];
                }
                const double n = std::sqrt(sq);
                const double D = (1.0 + sq) * (n + eps);
                const double Dp = 1.0 + 3.0 * sq + 2.0 * eps * n;
                const double f = sq / D;
                const double q = (2.0 * D - n * Dp) / (D * D); // f'(n) / n
                double* gsrow = gs.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) {
                    gsrow[h] += f * grow[h] + q * dot * row[h];
                }
            }
        });
    }
    return y;
}

/// Votes V[b,i,j] = M[b,i] * W[i,j] as 4x4 matrix products over vectorized
/// poses: M [B,I,16], W [I,J,16] -> V [B,I,J,16].
inline Var em_votes(Var M, Var W) {
    Tape& t = detail::same_tape(M, W);
    const Tensor &mv = t.value(M), &wv = t.value(W);
    if (mv.rank() != 3 || wv.rank() != 3 || mv.extent(2) != 16 || wv.extent(2) != 16 ||
        mv.extent(1) != wv.extent(0)) {
        throw ShapeError("em_votes: incompatible " + shape_str(mv.shape()) + " vs " +
                         shape_str(wv.shape()));
    }
    const std::size_t B = mv.extent(0), I = mv.extent(1), J = wv.extent(1);
    Tensor out = Tensor::uninitialized({B, I, J, 16});
    parallel_for(B, [&](std::size_t b) {
        for (std::size_t i = 0; i < I; ++i) {
            const double* m = mv.data() + (b * I + i) * 16;
            for (std::size_t j = 0; j < J; ++j) {
                const double* w = wv.data() + (i * J + j) * 16;
                double* o = out.data() + ((b * I + i) * J + j) * 16;
                for (int r = 0; r < 4; ++r) {
                    for (int c = 0; c < 4; ++c) {
                        double s = 0.0;
                        for (int k = 0; k < 4; ++k) s += m[4 * r + k] * w[4 * k + c];
                        o[4 * r + c] = s;
                    }
                }
            }
        }
    }, 1);
    const bool ng = t.needs_grad(M.id) || t.needs_grad(W.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [M, W, yid = y.id, B, I, J](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &mv2 = tp.value(M.id), &wv2 = tp.value(W.id);
            if (tp.needs_grad(M.id)) {
                Tensor& gm = tp.grad(M.id);
                parallel_for(B, [&](std::size_t b) {
                    for (std::size_t i = 0; i < I; ++i) {
                        double* gmrow = gm.data() + (b * I + i) * 16;
                        for (std::size_t j = 0; j < J; ++j) {
                            const double* w = wv2.data() + (i * J + j) * 16;
                            const double* go = g.data() + ((b * I + i) * J + j) * 16;
                            for (int r = 0; r < 4; ++r) {
                                for (int k = 0; k < 4; ++k) {
                                    double s = 0.0;
                                    for (int c = 0; c < 4; ++c) s += go[4 * r + c] * w[4 * k + c];
                                    gmrow[4 * r + k] += s;
                                }
                            }
                        }
                    }
                }, 1);
            }
            if (tp.needs_grad(W.id)) {
                Tensor& gw = tp.grad(W.id);
                parallel_for(I, [&](std::size_t i) {
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* m = mv2.data() + (b * I + i) * 16;
                        for (std::size_t j = 0; j < J; ++j) {
                            double* gwrow = gw.data() + (i * J + j) * 16;
                            const double* go = g.data() + ((b * I + i) * J + j) * 16;
                            for (int k = 0; k < 4; ++k) {
                                for (int c = 0; c < 4; ++c) {
                                    double s = 0.0;
                                    for (int r = 0; r < 4; ++r) s += m[4 * r + k] * go[4 * r + c];
                                    gwrow[4 * k + c] += s;
                                }
                            }
                        }
                    }
                }, 1);
            }
        });
    }
    return y;
}

/// Responsibility-weighted mean over lower capsules:
///   mu[b,j,:] = sum_i w[b,i,j] x[b,i,j,:] / denom[b,j]
/// A column whose denom underflows produces zeros (guard counted, zero grad).
inline Var weighted_mean(Var w, Var x, Var denom, RoutingStats* stats = nullptr) {
    Tape& t = detail::same_tape(w, x);
    const Tensor &wv = t.value(w), &xv = t.value(x), &dv = t.value(denom);
    const std::size_t B = wv.extent(0), I = wv.extent(1), J = wv.extent(2), H = xv.extent(3);
    if (dv.rank() != 2 || dv.extent(0) != B || dv.extent(1) != J) {
        throw ShapeError("weighted_mean: bad denom shape " + shape_str(dv.shape()));
    }
    constexpr double kDenomFloor = 1e-300;
    Tensor out = Tensor::zeros({B, J, H});
    long guard_hits = 0;
    for (std::size_t b = 0; b < B; ++b) {
        double* obase = out.data() + b * J * H;
        for (std::size_t i = 0; i < I; ++i) {
            const double* wrow = wv.data() + (b * I + i) * J;
            const double* xbase = xv.data() + ((b * I + i) * J) * H;
            for (std::size_t j = 0; j < J; ++j) {
                const double k = wrow[j];
                const double* xrow = xbase + j * H;
                double* orow = obase + j * H;
                for (std::size_t h = 0; h < H; ++h) orow[h] += k * xrow[h];
            }
        }
        for (std::size_t j = 0; j < J; ++j) {
            const double d = dv[b * J + j];
            double* orow = obase + j * H;
            if (d < kDenomFloor) {
                for (std::size_t h = 0; h < H; ++h) orow[h] = 0.0;
                ++guard_hits;
            } else {
                for (std::size_t h = 0; h < H; ++h) orow[h] /= d;
            }
        }
    }
    if (stats != nullptr) stats->denom_guard_hits += guard_hits;
    const bool ng = t.needs_grad(w.id) || t.needs_grad(x.id) || t.needs_grad(denom.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [w, x, denom, yid = y.id, B, I, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &wv2 = tp.value(w.id), &xv2 = tp.value(x.id), &dv2 = tp.value(denom.id);
            const Tensor& muv = tp.value(yid);
            const bool need_w = tp.needs_grad(w.id), need_x = tp.needs_grad(x.id);
            const bool need_d = tp.needs_grad(denom.id);
            Tensor* gw = need_w ? &tp.grad(w.id) : nullptr;
            Tensor* gx = need_x ? &tp.grad(x.id) : nullptr;
            Tensor* gd = need_d ? &tp.grad(denom.id) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t j = 0; j < J; ++j) {
                    const double d = dv2[b * J + j];
                    if (d < kDenomFloor) continue; // guarded column: constant zero output
                    const double inv = 1.0 / d;
                    const double* grow = g.data() + (b * J + j) * H;
                    if (need_d) {
                        double s = 0.0;
                        const double* murow = muv.data() + (b * J + j) * H;
                        for (std::size_t h = 0; h < H; ++h) s += grow[h] * murow[h];
                        (*gd)[b * J + j] -= s * inv;
                    }
                    for (std::size_t i = 0; i < I; ++i) {
                        const double* xrow = xv2.data() + ((b * I + i) * J + j) * H;
                        if (need_w) {
                            double s = 0.0;
                            for (std::size_t h = 0; h < H; ++h) s += grow[h] * xrow[h];
                            (*gw)[(b * I + i) * J + j] += s * inv;
                        }
                        if (need_x) {
                            const double k = wv2[(b * I + i) * J + j] * inv;
                            double* gxrow = gx->data() + ((b * I + i) * J + j) * H;
                            for (std::size_t h = 0; h < H; ++h) gxrow[h] += k * grow[h];
                        }
                    }
                }
            }
        });
    }
    return y;
}

/// Responsibility-weighted variance (per component, before the floor):
///   var[b,j,:] = sum_i w[b,i,j] (x[b,i,j,:] - mu[b,j,:])^2 / denom[b,j]
inline Var weighted_var(Var w, Var x, Var mu, Var denom, RoutingStats* stats = nullptr) {
    Tape& t = detail::same_tape(w, x);
    const Tensor &wv = t.value(w), &xv = t.value(x), &muv = t.value(mu), &dv = t.value(denom);
    const std::size_t B = wv.extent(0), I = wv.extent(1), J = wv.extent(2), H = xv.extent(3);
    if (muv.shape() != Shape{B, J, H}) {
        throw ShapeError("weighted_var: bad mu shape " + shape_str(muv.shape()));
    }
    constexpr double kDenomFloor = 1e-300;
    Tensor out = Tensor::zeros({B, J, H});
    long guard_hits = 0;
    for (std::size_t b = 0; b < B; ++b) {
        double* obase = out.data() + b * J * H;
        const double* mubase = muv.data() + b * J * H;
        for (std::size_t i = 0; i < I; ++i) {
            const double* wrow = wv.data() + (b * I + i) * J;
            const double* xbase = xv.data() + ((b * I + i) * J) * H;
            for (std::size_t j = 0; j < J; ++j) {
                const double k = wrow[j];
                const double* xrow = xbase + j * H;
                const double* murow = mubase + j * H;
                double* orow = obase + j * H;
                for (std::size_t h = 0; h < H; ++h) {
                    const double d = xrow[h] - murow[h];
                    orow[h] += k * d * d;
                }
            }
        }
        for (std::size_t j = 0; j < J; ++j) {
            const double d = dv[b * J + j];
            double* orow = obase + j * H;
            if (d < kDenomFloor) {
                for (std::size_t h = 0; h < H; ++h) orow[h] = 0.0;
                ++guard_hits;
            } else {
                for (std::size_t h = 0; h < H; ++h) orow[h] /= d;
            }
        }
    }
    if (stats != nullptr) stats->denom_guard_hits += guard_hits;
    const bool ng = t.needs_grad(w.id) || t.needs_grad(x.id) || t.needs_grad(mu.id) ||
                    t.needs_grad(denom.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [w, x, mu, denom, yid = y.id, B, I, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &wv2 = tp.value(w.id), &xv2 = tp.value(x.id);
            const Tensor &muv2 = tp.value(mu.id), &dv2 = tp.value(denom.id);
            const Tensor& varv = tp.value(yid);
            const bool need_w = tp.needs_grad(w.id), need_x = tp.needs_grad(x.id);
            const bool need_mu = tp.needs_grad(mu.id), need_d = tp.needs_grad(denom.id);
            Tensor* gw = need_w ? &tp.grad(w.id) : nullptr;
            Tensor* gx = need_x ? &tp.grad(x.id) : nullptr;
            Tensor* gmu = need_mu ? &tp.grad(mu.id) : nullptr;
            Tensor* gd = need_d ? &tp.grad(denom.id) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t j = 0; j < J; ++j) {
                    const double d = dv2[b * J + j];
                    if (d < kDenomFloor) continue;
                    const double inv = 1.0 / d;
                    const double* grow = g.data() + (b * J + j) * H;
                    const double* murow = muv2.data() + (b * J + j) * H;
                    if (need_d) {
                        double s = 0.0;
                        const double* varrow = varv.data() + (b * J + j) * H;
                        for (std::size_t h = 0; h < H; ++h) s += grow[h] * varrow[h];
                        (*gd)[b * J + j] -= s * inv;
                    }
                    for (std::size_t i = 0; i < I; ++i) {
                        const double* xrow = xv2.data() + ((b * I + i) * J + j) * H;
                        const double k = wv2[(b * I + i) * J + j];
                        if (need_w) {
                            double s = 0.0;
                            for (std::size_t h = 0; h < H; ++h) {
                                const double dev = xrow[h] - murow[h];
                                s += grow[h] * dev * dev;
                            }
                            (*gw)[(b * I + i) * J + j] += s * inv;
                        }
                        if (need_x || need_mu) {
                            double* gxrow = need_x ? gx->data() + ((b * I + i) * J + j) * H : nullptr;
                            double* gmurow = need_mu ? gmu->data() + (b * J + j) * H : nullptr;
                            for (std::size_t h = 0; h < H; ++h) {
                                const double term = 2.0 * k * (xrow[h] - murow[h]) * inv * grow[h];
                                if (need_x) gxrow[h] += term;
                                if (need_mu) gmurow[h] -= term;
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

/// Log-density of each vote under its parent's diagonal Gaussian:
///   lp[b,i,j] = -0.5 sum_h [ (x-mu)^2/var + log(2 pi var) ]
/// Streams the [B,I,J,H] deviations instead of materializing them.
inline Var gaussian_logp(Var x, Var mu, Var var) {
    Tape& t = detail::same_tape(x, mu);
    const Tensor &xv = t.value(x), &muv = t.value(mu), &vv = t.value(var);
    const std::size_t B = xv.extent(0), I = xv.extent(1), J = xv.extent(2), H = xv.extent(3);
    if (muv.shape() != Shape{B, J, H} || vv.shape() != Shape{B, J, H}) {
        throw ShapeError("gaussian_logp: incompatible stats shapes " + shape_str(muv.shape()) +
                         " / " + shape_str(vv.shape()));
    }
    constexpr double kLog2Pi = 1.8378770664093453;
    Tensor out = Tensor::uninitialized({B, I, J});
    parallel_for(B, [&](std::size_t b) {
        const double* mubase = muv.data() + b * J * H;
        const double* varbase = vv.data() + b * J * H;
        for (std::size_t i = 0; i < I; ++i) {
            const double* xbase = xv.data() + ((b * I + i) * J) * H;
            double* orow = out.data() + (b * I + i) * J;
            for (std::size_t j = 0; j < J; ++j) {
                const double* xrow = xbase + j * H;
                const double* murow = mubase + j * H;
                const double* varrow = varbase + j * H;
                double s = 0.0;
                for (std::size_t h = 0; h < H; ++h) {
                    const double d = xrow[h] - murow[h];
                    s += d * d / varrow[h] + std::log(varrow[h]) + kLog2Pi;
                }
                orow[j] = -0.5 * s;
            }
        }
    }, 1);
    const bool ng = t.needs_grad(x.id) || t.needs_grad(mu.id) || t.needs_grad(var.id);
    Var y = t.emit(std::move(out), ng);
    if (ng) {
        t.set_backward(y.id, [x, mu, var, yid = y.id, B, I, J, H](Tape& tp) {
            const Tensor& g = tp.grad(yid);
            const Tensor &xv2 = tp.value(x.id), &muv2 = tp.value(mu.id), &vv2 = tp.value(var.id);
            const bool need_x = tp.needs_grad(x.id), need_mu = tp.needs_grad(mu.id);
            const bool need_var = tp.needs_grad(var.id);
            Tensor* gx = need_x ? &tp.grad(x.id) : nullptr;
            Tensor* gmu = need_mu ? &tp.grad(mu.id) : nullptr;
            Tensor* gvar = need_var ? &tp.grad(var.id) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                const double* mubase = muv2.data() + b * J * H;
                const double* varbase = vv2.data() + b * J * H;
                for (std::size_t i = 0; i < I; ++i) {
                    const double* xbase = xv2.data() + ((b * I + i) * J) * H;
                    const double* grow = g.data() + (b * I + i) * J;
                    for (std::size_t j = 0; j < J; ++j) {
                        const double gval = grow[j];
                        if (gval == 0.0) continue;
                        const double* xrow = xbase + j * H;
                        const double* murow = mubase + j * H;
                        const double* varrow = varbase + j * H;
                        for (std::size_t h = 0; h < H; ++h) {
                            const double dev = xrow[h] - murow[h];
                            const double invv = 1.0 / varrow[h];
                            const double ddev = gval * dev * invv;
                            if (need_x) gx->data()[((b * I + i) * J + j) * H + h] -= ddev;
                            if (need_mu) gmu->data()[(b * J + j) * H + h] += ddev;
                            if (need_var) {
                                gvar->data()[(b * J + j) * H + h] +=
                                    gval * 0.5 * (dev * dev * invv - 1.0) * invv;
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Routing-by-agreement (iterative, unrolled onto the tape)
// ---------------------------------------------------------------------------

/// Per-iteration snapshot for introspection: coupling coefficients c (post
/// softmax), logits b (post update), preactivations s and outputs v.
struct RbaIterationTrace {
    Tensor c, b, s, v;
};
using RbaHook = std::function<void(int iteration, const RbaIterationTrace&)>;

/// Iterative agreement routing over predictions uhat [B,I,J,H] with bias
/// [J,H] added to every preactivation (pass zeros when the bias is disabled):
///   b <- 0
///   repeat r times:  c = softmax_j(b);  s_j = sum_i c_ij uhat_ij + bias_j;
///                    v_j = squash(s_j);  b_ij += v_j . uhat_ij
/// Returns the final v [B,J,H].
inline Var rba_route(Var uhat, Var bias, const RoutingConfig& cfg, const RbaHook& hook = {}) {
    cfg.validate();
    Tape& t = *uhat.tape;
    const Tensor& uv = t.value(uhat);
    if (uv.rank() != 4) {
        throw ShapeError("rba_route: predictions must be [B,I,J,H], got " + shape_str(uv.shape()));
    }
    const std::size_t B = uv.extent(0), I = uv.extent(1), J = uv.extent(2);
    Var b = t.constant(Tensor::zeros({B, I, J}));
    Var v{};
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        Var c = softmax_lastaxis(b);
        Var c_used = cfg.stop_routing_gradients ? stop_gradient(c) : c;
        Var s = weighted_sum_i(c_used, uhat);
        s = add_last2(s, bias);
        v = squash_lastaxis(s, cfg.squash_epsilon);
        b = add(b, caps_agreement(v, uhat));
        if (hook) hook(iter, RbaIterationTrace{c.value(), b.value(), s.value(), v.value()});
    }
    return v;
}

// ---------------------------------------------------------------------------
// EM routing (iterative, unrolled onto the tape)
// ---------------------------------------------------------------------------

struct EmIterationTrace {
    Tensor r_in;     // responsibilities entering the M-step
    Tensor mu;       // [B,J,16]
    Tensor sigma_sq; // floored variances [B,J,16]
    Tensor cost;     // per-component cost [B,J,16]
    Tensor a_out;    // upper activations [B,J]
    Tensor r_out;    // E-step responsibilities [B,I,J]
};
using EmHook = std::function<void(int iteration, const EmIterationTrace&)>;

struct EmStepVars {
    Var mu, sigma_sq, cost, a_out;
};

/// M-step of EM routing for all parents at once.
///   R' = R * a_i;  mu, sigma^2 = weighted stats of votes under R';
///   cost_h = (beta_u + log sigma_h) * sum_i R';  a_j = logistic(lambda (beta_a - sum_h cost_h))
inline EmStepVars em_m_step(Var a_lower, Var R, Var V, Var beta_a, Var beta_u, double lambda,
                            double sigma_epsilon, RoutingStats* stats = nullptr) {
    Var r_weighted = mul_bcast_last(R, a_lower);
    Var denom = sum_axis1(r_weighted);
    Var mu = weighted_mean(r_weighted, V, denom, stats);
    Var var_raw = weighted_var(r_weighted, V, mu, denom, stats);
    long* floor_counter = stats != nullptr ? &stats->variance_floor_hits : nullptr;
    Var sigma_sq = max_const(var_raw, sigma_epsilon, floor_counter);
    // log sigma = 0.5 log sigma^2
    Var cost = mul_bcast_last(add_vec_mid(scale(log(sigma_sq), 0.5), beta_u), denom);
    Var a_out = logistic(scale(vec_sub_bcast(beta_a, sum_lastaxis(cost)), lambda));
    return EmStepVars{mu, sigma_sq, cost, a_out};
}

/// E-step: R_ij = a_j p_ij / sum_k a_k p_ik with the Gaussian densities kept
/// in the log domain; rows whose weighted densities all underflow fall back
/// to uniform (counted in stats).
inline Var em_e_step(const EmStepVars& m, Var V, RoutingStats* stats = nullptr) {
    Var lp = gaussian_logp(V, m.mu, m.sigma_sq);
    Var score = add_bcast_axis1(lp, log(m.a_out));
    long* rows = stats != nullptr ? &stats->underflow_rows : nullptr;
    return resp_softmax(score, rows);
}

struct EmRouteVars {
    Var activations; // [B,J]
    Var poses;       // [B,J,16]
};

/// Full EM routing over votes V [B,I,J,16] with input activations a [B,I]:
/// initializes R = 1/J, then alternates M- and E-steps for cfg.iterations
/// rounds using the per-iteration lambda schedule. Returns the last M-step's
/// activations and pose means.
inline EmRouteVars em_route(Var a_lower, Var V, Var beta_a, Var beta_u, const RoutingConfig& cfg,
                            const EmHook& hook = {}, RoutingStats* stats = nullptr) {
    cfg.validate();
    Tape& t = *V.tape;
    const Tensor& vv = t.value(V);
    if (vv.rank() != 4 || vv.extent(3) != 16) {
        throw ShapeError("em_route: votes must be [B,I,J,16], got " + shape_str(vv.shape()));
    }
    const std::size_t B = vv.extent(0), I = vv.extent(1), J = vv.extent(2);
    const std::vector<double> lambdas = cfg.effective_lambda_schedule();
    Var R = t.constant(Tensor::full({B, I, J}, 1.0 / static_cast<double>(J)));
    EmStepVars m;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        Var r_in = cfg.stop_routing_gradients && iter > 0 ? stop_gradient(R) : R;
        m = em_m_step(a_lower, r_in, V, beta_a, beta_u, lambdas[static_cast<std::size_t>(iter)],
                      cfg.sigma_epsilon, stats);
        R = em_e_step(m, V, stats);
        if (hook) {
            hook(iter, EmIterationTrace{r_in.value(), m.mu.value(), m.sigma_sq.value(),
                                        m.cost.value(), m.a_out.value(), R.value()});
        }
    }
    return EmRouteVars{m.a_out, m.mu};
}

// ---------------------------------------------------------------------------
// Raw-tensor entry points (tape built internally; same code path as above)
// ---------------------------------------------------------------------------

/// squash of a single vector [H].
inline Tensor squash(const Tensor& s, double squash_epsilon = 1e-12) {
    Tape t;
    return squash_lastaxis(t.constant(s.reshaped({1, s.size()})), squash_epsilon)
        .value()
        .reshaped({s.size()});
}

/// Predictions for one instance: u [I,Hin], W [I,J,Hout,Hin] -> [I,J,Hout].
inline Tensor rba_predictions(const Tensor& u, const Tensor& W) {
    Tape t;
    const std::size_t I = u.extent(0), Hi = u.extent(1);
    Var out = rba_predictions(t.constant(u.reshaped({1, I, Hi})), t.constant(W));
    const Shape& s = out.value().shape();
    return out.value().reshaped({s[1], s[2], s[3]});
}

/// Routing for one instance: uhat [I,J,H] -> [J,H].
inline Tensor rba_route(const Tensor& uhat, const RoutingConfig& cfg, const RbaLayerParams& params,
                        const RbaHook& hook = {}) {
    Tape t;
    const std::size_t I = uhat.extent(0), J = uhat.extent(1), H = uhat.extent(2);
    Var v = rba_route(t.constant(uhat.reshaped({1, I, J, H})), t.constant(params.bias.value), cfg,
                      hook);
    return v.value().reshaped({J, H});
}

/// Votes for one instance per the spec shape: [I,J,16].
inline Tensor em_votes(const EmCapsules& caps, const EmLayerParams& params, bool bias_enabled) {
    Tape t;
    const std::size_t I = caps.poses.extent(0);
    Var V = em_votes(t.constant(caps.poses.reshaped({1, I, 16})), t.constant(params.W.value));
    if (bias_enabled) V = add_last2(V, t.constant(params.vote_bias.value));
    const Shape& s = V.value().shape();
    return V.value().reshaped({s[1], s[2], s[3]});
}

struct EmMStepResult {
    Tensor mu, sigma_sq, a_out;
};

/// One-instance M-step: a [I], R [I,J], V [I,J,16].
inline EmMStepResult em_m_step(const Tensor& a, const Tensor& R, const Tensor& V,
                               const Tensor& beta_a, const Tensor& beta_u, double lambda,
                               double sigma_epsilon = 1e-8, RoutingStats* stats = nullptr) {
    Tape t;
    const std::size_t I = V.extent(0), J = V.extent(1), H = V.extent(2);
    EmStepVars m = em_m_step(t.constant(a.reshaped({1, I})), t.constant(R.reshaped({1, I, J})),
                             t.constant(V.reshaped({1, I, J, H})), t.constant(beta_a),
                             t.constant(beta_u), lambda, sigma_epsilon, stats);
    return EmMStepResult{m.mu.value().reshaped({J, H}), m.sigma_sq.value().reshaped({J, H}),
                         m.a_out.value().reshaped({J})};
}

/// One-instance E-step: returns R [I,J].
inline Tensor em_e_step(const Tensor& mu, const Tensor& sigma_sq, const Tensor& a_out,
                        const Tensor& V, RoutingStats* stats = nullptr) {
    Tape t;
    const std::size_t I = V.extent(0), J = V.extent(1), H = V.extent(2);
    EmStepVars m;
    m.mu = t.constant(mu.reshaped({1, J, H}));
    m.sigma_sq = t.constant(sigma_sq.reshaped({1, J, H}));
    m.a_out = t.constant(a_out.reshaped({1, J}));
    Var R = em_e_step(m, t.constant(V.reshaped({1, I, J, H})), stats);
    return R.value().reshaped({I, J});
}

/// One-instance EM routing per the spec shape: lower capsules in, J upper
/// capsules out.
inline EmCapsules em_route(const EmCapsules& caps, const RoutingConfig& cfg,
                           const EmLayerParams& params, const EmHook& hook = {},
                           RoutingStats* stats = nullptr) {
    Tape t;
    const std::size_t I = caps.poses.extent(0);
    Var M = t.constant(caps.poses.reshaped({1, I, 16}));
    Var V = em_votes(M, t.constant(params.W.value));
    if (cfg.bias_enabled) V = add_last2(V, t.constant(params.vote_bias.value));
    EmRouteVars out = em_route(t.constant(caps.activations.reshaped({1, I})), V,
                               t.constant(params.beta_a.value), t.constant(params.beta_u.value),
                               cfg, hook, stats);
    const std::size_t J = out.activations.value().extent(1);
    return EmCapsules{out.activations.value().reshaped({J}), out.poses.value().reshaped({J, 16})};
}

} // namespace capsroute
