#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "depass/errors.hpp"
#include "depass/forward.hpp"
#include "depass/model.hpp"
#include "depass/tensor.hpp"

namespace depass {

template <typename T>
constexpr double tau_rec = std::is_same_v<T, float> ? 1e-4 : 1e-10;

enum class InitKind { token_wise, attention_heads, mlp_neurons, subspace };

inline std::string to_string(InitKind k) {
    switch (k) {
        case InitKind::token_wise: return "token_wise";
        case InitKind::attention_heads: return "attention_heads";
        case InitKind::mlp_neurons: return "mlp_neurons";
        default: return "subspace";
    }
}

enum class Phase { pre_attention, post_attention, post_mlp, post_final_norm };

inline std::string to_string(Phase p) {
    switch (p) {
        case Phase::pre_attention: return "pre_attention";
        case Phase::post_attention: return "post_attention";
        case Phase::post_mlp: return "post_mlp";
        default: return "post_final_norm";
    }
}

enum class ApportionRule { softmax, linear_norm, linear_weighted };

inline std::string to_string(ApportionRule r) {
    switch (r) {
        case ApportionRule::softmax: return "softmax";
        case ApportionRule::linear_norm: return "linear_norm";
        default: return "linear_weighted";
    }
}

inline ApportionRule apportion_rule_from_string(const std::string& s) {
    if (s == "softmax") return ApportionRule::softmax;
    if (s == "linear_norm" || s == "linear-norm") return ApportionRule::linear_norm;
    if (s == "linear_weighted" || s == "linear-weighted") return ApportionRule::linear_weighted;
    throw ConfigError("unknown apportioning rule '" + s + "'");
}

/// Which rows feed the apportioning preactivations when the MLP is gated.
enum class SubkeySource { gate, up, gate_plus_up };

template <typename T>
struct InitSpec {
    InitKind kind = InitKind::token_wise;
    std::size_t layer = 0;                         // ignored for token_wise
    std::vector<std::vector<std::size_t>> groups;  // positions or neurons; empty = singletons
    Matrix<T> projector;                           // subspace only, D x D
};

template <typename T>
struct DecomposedState {
    Tensor3<T> data;  // N x M x D
    std::vector<std::string> component_labels;
    std::size_t start_layer = 0;
    std::size_t layer = 0;
    Phase phase = Phase::pre_attention;

    std::size_t positions() const { return data.dim0(); }
    std::size_t components() const { return data.dim1(); }
    std::size_t width() const { return data.dim2(); }
};

template <typename T>
Matrix<T> reconstruct(const Tensor3<T>& dec) {
    Matrix<T> sum(dec.dim0(), dec.dim2());
    sum.fill(T(0));
    for (std::size_t i = 0; i < dec.dim0(); ++i) {
        T* out = sum.row(i);
        for (std::size_t m = 0; m < dec.dim1(); ++m) {
            const T* part = dec.at(i, m);
            for (std::size_t d = 0; d < dec.dim2(); ++d) out[d] += part[d];
        }
    }
    return sum;
}

/// max over positions of ||sum_m dec_i - ref_i|| / (||ref_i|| + 1e-30)
template <typename T>
double reconstruction_error(const Tensor3<T>& dec, const Matrix<T>& ref) {
    if (dec.dim0() != ref.rows() || dec.dim2() != ref.cols()) {
        throw ConsistencyError("decomposition shape does not match the reference state");
    }
    Matrix<T> sum = reconstruct(dec);
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.rows(); ++i) {
        double diff = 0.0, norm = 0.0;
        const T* s = sum.row(i);
        const T* r = ref.row(i);
        for (std::size_t d = 0; d < ref.cols(); ++d) {
            double e = static_cast<double>(s[d]) - static_cast<double>(r[d]);
            diff += e * e;
            norm += static_cast<double>(r[d]) * static_cast<double>(r[d]);
        }
        worst = std::max(worst, std::sqrt(diff) / (std::sqrt(norm) + 1e-30));
    }
    return worst;
}

template <typename T>
double assert_reconstruction(const Tensor3<T>& dec, const Matrix<T>& ref, const std::string& where) {
    double err = reconstruction_error(dec, ref);
    if (!(err <= tau_rec<T>)) {
        throw ConsistencyError("component sum drifted from the traced state at " + where + " (rel err " +
                               std::to_string(err) + ")");
    }
    return err;
}

namespace detail {

inline void validate_partition(const std::vector<std::vector<std::size_t>>& groups, std::size_t domain,
                               const std::string& what) {
    std::vector<char> seen(domain, 0);
    for (const auto& g : groups) {
        if (g.empty()) throw InputError("empty " + what + " group");
        for (std::size_t idx : g) {
            if (idx >= domain) {
                throw InputError(what + " index " + std::to_string(idx) + " out of range (domain " +
                                 std::to_string(domain) + ")");
            }
            if (seen[idx]) throw InputError(what + " index " + std::to_string(idx) + " appears in two groups");
            seen[idx] = 1;
        }
    }
    for (std::size_t i = 0; i < domain; ++i) {
        if (!seen[i]) {
            throw InputError(what + " groups must cover every index; " + std::to_string(i) + " is missing");
        }
    }
}

inline std::vector<std::vector<std::size_t>> singleton_groups(std::size_t domain) {
    std::vector<std::vector<std::size_t>> g(domain);
    for (std::size_t i = 0; i < domain; ++i) g[i] = {i};
    return g;
}

inline std::string group_label(const std::string& prefix, const std::vector<std::size_t>& g) {
    bool contiguous = true;
    for (std::size_t i = 1; i < g.size(); ++i) {
        if (g[i] != g[i - 1] + 1) {
            contiguous = false;
            break;
        }
    }
    if (contiguous && g.size() > 1) {
        return prefix + std::to_string(g.front()) + "-" + std::to_string(g.back());
    }
    std::string s = prefix;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(g[i]);
    }
    return s;
}

/// Recomputes the normed input of a layer stage from the traced state and
/// scales, matching the standard pass bit for bit.
template <typename T>
Matrix<T> renorm_from_trace(const Matrix<T>& state, const std::vector<T>& scales, const std::vector<T>& gain) {
    return apply_rmsnorm(state, gain, scales);
}

}  // namespace detail

/// Builds the starting N x M x D tensor. The component sum reproduces the
/// traced full state at the init point.
template <typename T>
DecomposedState<T> init_decomposition(const WeightSet<T>& ws, const ForwardTrace<T>& trace,
                                      const InitSpec<T>& spec) {
    const ModelConfig& c = ws.config;
    const std::size_t N = trace.seq_len();
    const std::size_t D = c.d_model;
    DecomposedState<T> dec;

    switch (spec.kind) {
        case InitKind::token_wise: {
            auto groups = spec.groups.empty() ? detail::singleton_groups(N) : spec.groups;
            detail::validate_partition(groups, N, "position");
            const std::size_t M = groups.size();
            dec.data = Tensor3<T>(N, M, D);
            const Matrix<T>& x0 = trace.hidden[0];
            for (std::size_t g = 0; g < M; ++g) {
                dec.component_labels.push_back(detail::group_label("pos:", groups[g]));
                for (std::size_t i : groups[g]) {
                    std::copy(x0.row(i), x0.row(i) + D, dec.data.at(i, g));
                }
            }
            dec.start_layer = 0;
            dec.layer = 0;
            dec.phase = Phase::pre_attention;
            break;
        }
        case InitKind::attention_heads: {
            const std::size_t l = spec.layer;
            if (l >= c.num_layers) throw InputError("attention_heads layer out of range");
            const std::size_t H = c.num_heads;
            const std::size_t dh = c.head_dim();
            const LayerWeights<T>& lw = ws.layers[l];
            Matrix<T> xn = detail::renorm_from_trace(trace.hidden[l], trace.attn_scale[l], lw.attn_norm_gain);
            Matrix<T> v = matmul(xn, lw.wv);
            dec.data = Tensor3<T>(N, H + 1, D);
            for (std::size_t h = 0; h < H; ++h) {
                dec.component_labels.push_back("L" + std::to_string(l) + ".h" + std::to_string(h));
                const Matrix<T>& a = trace.attn[l][h];
                const std::size_t kvh = c.kv_head_of(h);
                for (std::size_t i = 0; i < N; ++i) {
                    std::vector<T> ctx(dh, T(0));
                    const T* arow = a.row(i);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T* vj = v.row(j) + kvh * dh;
                        for (std::size_t t = 0; t < dh; ++t) ctx[t] += arow[j] * vj[t];
                    }
                    T* out = dec.data.at(i, h);
                    for (std::size_t t = 0; t < dh; ++t) axpy(ctx[t], lw.wo.row(h * dh + t), out, D);
                }
            }
            dec.component_labels.push_back("residual");
            for (std::size_t i = 0; i < N; ++i) {
                std::copy(trace.hidden[l].row(i), trace.hidden[l].row(i) + D, dec.data.at(i, H));
            }
            dec.start_layer = l;
            dec.layer = l;
            dec.phase = Phase::post_attention;
            break;
        }
        case InitKind::mlp_neurons: {
            const std::size_t l = spec.layer;
            if (l >= c.num_layers) throw InputError("mlp_neurons layer out of range");
            auto groups = spec.groups.empty() ? detail::singleton_groups(c.d_mlp) : spec.groups;
            detail::validate_partition(groups, c.d_mlp, "neuron");
            const std::size_t G = groups.size();
            const Matrix<T>& m = trace.mlp_act[l];
            const Matrix<T>& wd = ws.layers[l].w_down;
            dec.data = Tensor3<T>(N, G + 1, D);
            for (std::size_t g = 0; g < G; ++g) {
                dec.component_labels.push_back(
                    detail::group_label("L" + std::to_string(l) + ".n:", groups[g]));
                for (std::size_t i = 0; i < N; ++i) {
                    T* out = dec.data.at(i, g);
                    for (std::size_t d = 0; d < D; ++d) {
                        T acc = T(0);
                        const T* wrow = wd.row(d);
                        for (std::size_t k : groups[g]) acc += m(i, k) * wrow[k];
                        out[d] += acc;
                    }
                }
            }
            dec.component_labels.push_back("residual");
            for (std::size_t i = 0; i < N; ++i) {
                std::copy(trace.x_attn[l].row(i), trace.x_attn[l].row(i) + D, dec.data.at(i, G));
            }
            dec.start_layer = l;
            dec.layer = l;
            dec.phase = Phase::post_mlp;
            break;
        }
        case InitKind::subspace: {
            const std::size_t l = spec.layer;
            if (l >= c.num_layers) throw InputError("subspace layer out of range");
            if (spec.projector.rows() != D || spec.projector.cols() != D) {
                throw InputError("projector must be d_model x d_model");
            }
            const Matrix<T>& x = trace.hidden[l];
            Matrix<T> px = matmul(x, spec.projector);  // projector is symmetric
            dec.data = Tensor3<T>(N, 2, D);
            for (std::size_t i = 0; i < N; ++i) {
                const T* xi = x.row(i);
                const T* pi = px.row(i);
                T* c0 = dec.data.at(i, 0);
                T* c1 = dec.data.at(i, 1);
                for (std::size_t d = 0; d < D; ++d) {
                    c0[d] = pi[d];
                    c1[d] = xi[d] - pi[d];
                }
            }
            dec.component_labels = {"subspace", "complement"};
            dec.start_layer = l;
            dec.layer = l;
            dec.phase = Phase::pre_attention;
            break;
        }
    }
    return dec;
}

/// Scales every component by the full state's per-position inverse RMS and
/// the gain. The scalar comes from the full state, never from a component.
template <typename T>
Tensor3<T> propagate_rmsnorm(const Tensor3<T>& dec, const Matrix<T>& full_state, const std::vector<T>& gain,
                             double eps) {
    assert_reconstruction(dec, full_state, "norm input");
    std::vector<T> scales = rmsnorm_scales(full_state, eps);
    Tensor3<T> out(dec.dim0(), dec.dim1(), dec.dim2());
    for (std::size_t i = 0; i < dec.dim0(); ++i) {
        for (std::size_t m = 0; m < dec.dim1(); ++m) {
            const T* src = dec.at(i, m);
            T* dst = out.at(i, m);
            for (std::size_t d = 0; d < dec.dim2(); ++d) dst[d] = src[d] * scales[i] * gain[d];
        }
    }
    return out;
}

/// Routes every component through the frozen attention pattern:
/// out_m = dec_m + sum_j A_j . (normed_m . W_V) . W_O_j.
template <typename T>
Tensor3<T> propagate_attention(const Tensor3<T>& dec, const Tensor3<T>& normed,
                               const std::vector<Matrix<T>>& attn_probs, const LayerWeights<T>& lw,
                               const ModelConfig& c) {
    const std::size_t N = dec.dim0(), M = dec.dim1(), D = dec.dim2();
    const std::size_t H = c.num_heads;
    const std::size_t dh = c.head_dim();
    if (attn_probs.size() != H) throw ConsistencyError("attention probability count does not match head count");
    for (const auto& a : attn_probs) {
        if (a.rows() != N || a.cols() != N) throw ConsistencyError("attention probability shape mismatch");
    }
    Tensor3<T> out = dec;
    Matrix<T> xm(N, D);
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t i = 0; i < N; ++i) std::copy(normed.at(i, m), normed.at(i, m) + D, xm.row(i));
        Matrix<T> v = matmul(xm, lw.wv);
        for (std::size_t h = 0; h < H; ++h) {
            const Matrix<T>& a = attn_probs[h];
            const std::size_t kvh = c.kv_head_of(h);
            for (std::size_t i = 0; i < N; ++i) {
                std::vector<T> ctx(dh, T(0));
                const T* arow = a.row(i);
                for (std::size_t j = 0; j <= i; ++j) {
                    const T* vj = v.row(j) + kvh * dh;
                    for (std::size_t t = 0; t < dh; ++t) ctx[t] += arow[j] * vj[t];
                }
                T* orow = out.at(i, m);
                for (std::size_t t = 0; t < dh; ++t) axpy(ctx[t], lw.wo.row(h * dh + t), orow, D);
            }
        }
    }
    return out;
}

/// Preactivations and the per-(position, neuron) split across components.
/// a_{i,m,k} = subkey_k . normed[i,m,:]; alpha normalizes over m in double.
/// Degenerate denominators fall back to uniform 1/M; the linear_weighted
/// fallback is counted for the caller's log.
template <typename T>
Tensor3<T> apportion_mlp(const Tensor3<T>& normed, const Matrix<T>& subkeys, ApportionRule rule,
                         std::size_t* weighted_fallbacks = nullptr) {
    const std::size_t N = normed.dim0(), M = normed.dim1(), D = normed.dim2();
    const std::size_t K = subkeys.rows();
    if (subkeys.cols() != D) throw ConsistencyError("subkey width does not match component width");

    Tensor3<T> a(N, M, K);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t m = 0; m < M; ++m) {
            const T* x = normed.at(i, m);
            T* arow = a.at(i, m);
            for (std::size_t k = 0; k < K; ++k) arow[k] = dot(subkeys.row(k), x, D);
        }
    }

    Tensor3<T> alpha(N, M, K);
    std::vector<double> col(M);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t m = 0; m < M; ++m) col[m] = static_cast<double>(a.at(i, m)[k]);
            switch (rule) {
                case ApportionRule::softmax: {
                    double mx = col[0];
                    for (std::size_t m = 1; m < M; ++m) mx = std::max(mx, col[m]);
                    double sum = 0.0;
                    for (std::size_t m = 0; m < M; ++m) {
                        col[m] = std::exp(col[m] - mx);
                        sum += col[m];
                    }
                    for (std::size_t m = 0; m < M; ++m) alpha.at(i, m)[k] = static_cast<T>(col[m] / sum);
                    break;
                }
                case ApportionRule::linear_norm: {
                    double mn = col[0];
                    for (std::size_t m = 1; m < M; ++m) mn = std::min(mn, col[m]);
                    double sum = 0.0;
                    for (std::size_t m = 0; m < M; ++m) sum += col[m] - mn;
                    if (sum == 0.0) {
                        for (std::size_t m = 0; m < M; ++m) alpha.at(i, m)[k] = static_cast<T>(1.0 / M);
                    } else {
                        for (std::size_t m = 0; m < M; ++m) {
                            alpha.at(i, m)[k] = static_cast<T>((col[m] - mn) / sum);
                        }
                    }
                    break;
                }
                case ApportionRule::linear_weighted: {
                    double sum = 0.0;
                    for (std::size_t m = 0; m < M; ++m) sum += col[m];
                    if (std::abs(sum) < 1e-12) {
                        if (weighted_fallbacks) ++*weighted_fallbacks;
                        for (std::size_t m = 0; m < M; ++m) alpha.at(i, m)[k] = static_cast<T>(1.0 / M);
                    } else {
                        for (std::size_t m = 0; m < M; ++m) alpha.at(i, m)[k] = static_cast<T>(col[m] / sum);
                    }
                    break;
                }
            }
        }
    }
    return alpha;
}

/// Component m gains sum_k alpha_{i,m,k} . m_{i,k} . v_k on top of its
/// post-attention value. Activations are the frozen trace values.
template <typename T>
Tensor3<T> propagate_mlp(const Tensor3<T>& dec, const Tensor3<T>& alpha, const Matrix<T>& activations,
                         const Matrix<T>& w_down) {
    const std::size_t N = dec.dim0(), M = dec.dim1(), D = dec.dim2();
    const std::size_t K = w_down.cols();
    if (alpha.dim0() != N || alpha.dim1() != M || alpha.dim2() != K) {
        throw ConsistencyError("apportioning tensor shape mismatch");
    }
    if (activations.rows() != N || activations.cols() != K || w_down.rows() != D) {
        throw ConsistencyError("activation or down-projection shape mismatch");
    }
    Tensor3<T> out = dec;
    std::vector<T> weighted(K);
    for (std::size_t i = 0; i < N; ++i) {
        const T* act = activations.row(i);
        for (std::size_t m = 0; m < M; ++m) {
            const T* al = alpha.at(i, m);
            for (std::size_t k = 0; k < K; ++k) weighted[k] = al[k] * act[k];
            T* orow = out.at(i, m);
            for (std::size_t d = 0; d < D; ++d) orow[d] += dot(w_down.row(d), weighted.data(), K);
        }
    }
    return out;
}

struct RunOptions {
    ApportionRule rule = ApportionRule::softmax;
    // Upper bound on components materialized per propagation step. Stages
    // stream component by component (never above any bound) and the
    // apportioning pass always gathers preactivations for all components
    // first, so results are identical for every batch size. 0 = no bound.
    std::size_t component_batch = 0;
    std::set<std::size_t> snapshot_layers;
    SubkeySource gated_subkey = SubkeySource::gate;
    std::size_t memory_budget_bytes = std::size_t(1) << 30;
};

template <typename T>
struct DecomposedRun {
    DecomposedState<T> state;   // at the top of the stack, before the final norm
    Tensor3<T> final_normed;    // after the final norm, feeds the LM head
    std::map<std::size_t, Tensor3<T>> snapshots;  // keyed by layer index, pre-attention point
    std::vector<std::string> warnings;
    double max_recon_error = 0.0;
};

namespace detail {

template <typename T>
Matrix<T> mlp_subkeys(const LayerWeights<T>& lw, const ModelConfig& c, SubkeySource src) {
    if (c.mlp_kind == MlpKind::plain) return lw.w_up;
    switch (src) {
        case SubkeySource::gate: return lw.w_gate;
        case SubkeySource::up: return lw.w_up;
        default: {
            Matrix<T> s = lw.w_gate;
            add_inplace(s, lw.w_up);
            return s;
        }
    }
}

}  // namespace detail

/// Replays the network over the decomposed tensor with every data-dependent
/// quantity frozen from the trace, asserting the component-sum invariant at
/// each stage boundary.
template <typename T>
DecomposedRun<T> run_decomposed(const WeightSet<T>& ws, const ForwardTrace<T>& trace, const InitSpec<T>& spec,
                                const RunOptions& opts = {}) {
    const ModelConfig& c = ws.config;
    const std::size_t N = trace.seq_len();

    DecomposedRun<T> run;
    DecomposedState<T> dec = init_decomposition(ws, trace, spec);
    const std::size_t M = dec.components();

    const std::size_t live = N * M * (c.d_model * 2 + c.d_mlp * 2) * sizeof(T);
    if (live > opts.memory_budget_bytes) {
        throw UsageError("decomposition needs about " + std::to_string(live / (1024 * 1024)) +
                         " MiB of workspace (budget " +
                         std::to_string(opts.memory_budget_bytes / (1024 * 1024)) +
                         " MiB); coarsen the groups or raise the memory budget");
    }

    auto note_error = [&](double e) { run.max_recon_error = std::max(run.max_recon_error, e); };
    auto take_snapshot = [&](std::size_t p) {
        if (opts.snapshot_layers.count(p)) run.snapshots.emplace(p, dec.data);
    };
    for (std::size_t p : opts.snapshot_layers) {
        if (p > c.num_layers) throw UsageError("snapshot layer out of range");
        bool reachable = spec.kind == InitKind::token_wise ||
                         (spec.kind == InitKind::subspace && p >= spec.layer) ||
                         (spec.kind == InitKind::attention_heads && p > spec.layer) ||
                         (spec.kind == InitKind::mlp_neurons && p > spec.layer);
        if (!reachable) throw UsageError("snapshot layer " + std::to_string(p) + " precedes the init point");
    }

    // Entry states align with the init point: pre_attention runs the whole
    // layer, post_attention runs the MLP half, post_mlp starts at layer+1.
    std::size_t l = dec.layer;
    bool do_attention = dec.phase == Phase::pre_attention;
    if (dec.phase == Phase::pre_attention) {
        note_error(assert_reconstruction(dec.data, trace.hidden[l], "init"));
        take_snapshot(l);
    } else if (dec.phase == Phase::post_attention) {
        note_error(assert_reconstruction(dec.data, trace.x_attn[l], "init"));
    } else {
        note_error(assert_reconstruction(dec.data, trace.hidden[l + 1], "init"));
        ++l;
        do_attention = true;
        take_snapshot(l);
    }

    std::size_t weighted_fallbacks = 0;
    for (; l < c.num_layers; ++l, do_attention = true) {
        const LayerWeights<T>& lw = ws.layers[l];
        if (do_attention) {
            Tensor3<T> normed = propagate_rmsnorm(dec.data, trace.hidden[l], lw.attn_norm_gain, c.norm_eps);
            dec.data = propagate_attention(dec.data, normed, trace.attn[l], lw, c);
            dec.layer = l;
            dec.phase = Phase::post_attention;
        }
        note_error(assert_reconstruction(dec.data, trace.x_attn[l], "post_attention L" + std::to_string(l)));

        Tensor3<T> normed = propagate_rmsnorm(dec.data, trace.x_attn[l], lw.mlp_norm_gain, c.norm_eps);
        Matrix<T> subkeys = detail::mlp_subkeys(lw, c, opts.gated_subkey);
        std::size_t before = weighted_fallbacks;
        Tensor3<T> alpha = apportion_mlp(normed, subkeys, opts.rule, &weighted_fallbacks);
        if (weighted_fallbacks > before) {
            run.warnings.push_back("layer " + std::to_string(l) + ": " +
                                   std::to_string(weighted_fallbacks - before) +
                                   " apportioning denominators near zero, fell back to uniform");
        }
        dec.data = propagate_mlp(dec.data, alpha, trace.mlp_act[l], lw.w_down);
        dec.layer = l;
        dec.phase = Phase::post_mlp;
        note_error(assert_reconstruction(dec.data, trace.hidden[l + 1], "post_mlp L" + std::to_string(l)));
        take_snapshot(l + 1);
    }

    run.final_normed = propagate_rmsnorm(dec.data, trace.hidden[c.num_layers], ws.final_norm_gain, c.norm_eps);
    note_error(assert_reconstruction(run.final_normed, trace.final_normed, "post_final_norm"));

    dec.layer = c.num_layers;
    run.state = std::move(dec);
    return run;
}

/// Snapshot export: one tensor per component plus the labels in the manifest.
template <typename T>
TensorArchive decomposition_to_archive(const DecomposedState<T>& dec, const Tensor3<T>& final_normed) {
    TensorArchive a;
    a.meta["decomposition.start_layer"] = std::to_string(dec.start_layer);
    a.meta["decomposition.phase"] = to_string(dec.phase);
    for (std::size_t m = 0; m < dec.components(); ++m) {
        a.meta["decomposition.label." + std::to_string(m)] = dec.component_labels[m];
    }
    a.add("components", {dec.data.dim0(), dec.data.dim1(), dec.data.dim2()}, dec.data.data());
    if (final_normed.dim0() > 0) {
        a.add("final_normed", {final_normed.dim0(), final_normed.dim1(), final_normed.dim2()}, final_normed.data());
    }
    return a;
}

}  // namespace depass
