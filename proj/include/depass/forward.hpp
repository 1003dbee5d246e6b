#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "depass/errors.hpp"
#include "depass/model.hpp"
#include "depass/tensor.hpp"
#include "depass/vocab.hpp"

namespace depass {

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
T apply_activation(Activation act, T x) {
    return act == Activation::gelu ? gelu(x) : silu(x);
}

/// Per-row inverse RMS: 1 / sqrt(mean(x^2) + eps).
template <typename T>
std::vector<T> rmsnorm_scales(const Matrix<T>& x, double eps) {
    std::vector<T> scales(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const T* row = x.row(i);
        T ss = T(0);
        for (std::size_t d = 0; d < x.cols(); ++d) ss += row[d] * row[d];
        scales[i] = T(1) / std::sqrt(ss / T(x.cols()) + T(eps));
    }
    return scales;
}

template <typename T>
Matrix<T> apply_rmsnorm(const Matrix<T>& x, const std::vector<T>& gain, const std::vector<T>& scales) {
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const T* src = x.row(i);
        T* dst = out.row(i);
        for (std::size_t d = 0; d < x.cols(); ++d) dst[d] = src[d] * scales[i] * gain[d];
    }
    return out;
}

/// Rotates adjacent pairs (2t, 2t+1) within each head by pos * theta^(-2t/dh).
/// Row index doubles as the absolute position.
template <typename T>
void apply_rope(Matrix<T>& x, std::size_t nheads, std::size_t head_dim, double theta) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        T* row = x.row(i);
        for (std::size_t h = 0; h < nheads; ++h) {
            T* base = row + h * head_dim;
            for (std::size_t t = 0; 2 * t + 1 < head_dim; ++t) {
                double ang = static_cast<double>(i) *
                             std::pow(theta, -2.0 * static_cast<double>(t) / static_cast<double>(head_dim));
                T c = static_cast<T>(std::cos(ang));
                T s = static_cast<T>(std::sin(ang));
                T x0 = base[2 * t];
                T x1 = base[2 * t + 1];
                base[2 * t] = x0 * c - x1 * s;
                base[2 * t + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// In-place max-subtracted softmax over row[0..len).
template <typename T>
void softmax_inplace(T* row, std::size_t len) {
    T mx = row[0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (std::size_t j = 0; j < len; ++j) row[j] /= sum;
}

/// Zeroed attention heads and MLP neurons, applied inside the standard pass.
/// A zeroed head contributes nothing to the attention output (its value/output
/// path is nulled); a zeroed neuron has its activation forced to zero.
struct ForwardMask {
    std::set<std::pair<std::size_t, std::size_t>> heads;    // (layer, head)
    std::set<std::pair<std::size_t, std::size_t>> neurons;  // (layer, neuron)

    bool empty() const { return heads.empty() && neurons.empty(); }

    void validate(const ModelConfig& c) const {
        for (const auto& [l, h] : heads) {
            if (l >= c.num_layers || h >= c.num_heads) {
                throw UsageError("masked head (" + std::to_string(l) + "," + std::to_string(h) + ") out of range");
            }
        }
        for (const auto& [l, k] : neurons) {
            if (l >= c.num_layers || k >= c.d_mlp) {
                throw UsageError("masked neuron (" + std::to_string(l) + "," + std::to_string(k) + ") out of range");
            }
        }
    }
};

/// Everything the decomposed pass replays: residual stream snapshots, frozen
/// attention probabilities, frozen MLP activations, and the norm scales.
template <typename T>
struct ForwardTrace {
    std::vector<TokenId> tokens;
    std::vector<Matrix<T>> hidden;             // hidden[p], p in 0..L; [0] is embeddings
    std::vector<Matrix<T>> x_attn;             // post-attention residual per layer
    std::vector<std::vector<Matrix<T>>> attn;  // [layer][head]: N x N causal probabilities
    std::vector<Matrix<T>> mlp_act;            // post-activation per layer: N x d_mlp
    std::vector<std::vector<T>> attn_scale;    // inverse RMS entering attention norm
    std::vector<std::vector<T>> mlp_scale;     // inverse RMS entering MLP norm
    std::vector<T> final_scale;                // inverse RMS entering final norm
    Matrix<T> final_normed;                    // N x D
    Matrix<T> logits;                          // N x V

    std::size_t seq_len() const { return tokens.size(); }
};

template <typename T>
Matrix<T> embed_tokens(const WeightSet<T>& ws, const std::vector<TokenId>& tokens) {
    const ModelConfig& c = ws.config;
    Matrix<T> x(tokens.size(), c.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= c.vocab_size) {
            throw InputError("token id " + std::to_string(tokens[i]) + " outside vocabulary of size " +
                             std::to_string(c.vocab_size));
        }
        const T* src = ws.token_embeddings.row(tokens[i]);
        std::copy(src, src + c.d_model, x.row(i));
    }
    return x;
}

template <typename T>
ForwardTrace<T> forward(const WeightSet<T>& ws, const std::vector<TokenId>& tokens,
                        const ForwardMask* mask = nullptr) {
    const ModelConfig& c = ws.config;
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > c.max_seq_len) {
        throw InputError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    }
    if (mask) mask->validate(c);

    const std::size_t N = tokens.size();
    const std::size_t D = c.d_model;
    const std::size_t H = c.num_heads;
    const std::size_t dh = c.head_dim();

    ForwardTrace<T> trace;
    trace.tokens = tokens;
    trace.hidden.reserve(c.num_layers + 1);
    trace.hidden.push_back(embed_tokens(ws, tokens));

    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const LayerWeights<T>& lw = ws.layers[l];
        const Matrix<T>& x = trace.hidden.back();

        auto scales = rmsnorm_scales(x, c.norm_eps);
        Matrix<T> xn = apply_rmsnorm(x, lw.attn_norm_gain, scales);
        trace.attn_scale.push_back(std::move(scales));

        Matrix<T> q = matmul(xn, lw.wq);
        Matrix<T> k = matmul(xn, lw.wk);
        Matrix<T> v = matmul(xn, lw.wv);
        if (c.rope) {
            apply_rope(q, H, dh, c.rope_theta);
            apply_rope(k, c.num_kv_heads, dh, c.rope_theta);
        }

        const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
        std::vector<Matrix<T>> probs;
        probs.reserve(H);
        Matrix<T> attn_out(N, D);
        attn_out.fill(T(0));
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t kvh = c.kv_head_of(h);
            Matrix<T> a(N, N);
            a.fill(T(0));
            for (std::size_t i = 0; i < N; ++i) {
                T* arow = a.row(i);
                const T* qi = q.row(i) + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    const T* kj = k.row(j) + kvh * dh;
                    T s = T(0);
                    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    arow[j] = s * inv_sqrt_dh;
                }
                softmax_inplace(arow, i + 1);
            }
            const bool zeroed = mask && mask->heads.count({l, h}) > 0;
            if (!zeroed) {
                // (A . v_head) . wo_rows, accumulated into the attention output
                for (std::size_t i = 0; i < N; ++i) {
                    std::vector<T> ctx(dh, T(0));
                    const T* arow = a.row(i);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T* vj = v.row(j) + kvh * dh;
                        for (std::size_t t = 0; t < dh; ++t) ctx[t] += arow[j] * vj[t];
                    }
                    T* out = attn_out.row(i);
                    for (std::size_t t = 0; t < dh; ++t) {
                        axpy(ctx[t], lw.wo.row(h * dh + t), out, D);
                    }
                }
            }
            probs.push_back(std::move(a));
        }
        trace.attn.push_back(std::move(probs));

        Matrix<T> x_attn = x;
        add_inplace(x_attn, attn_out);

        auto mscales = rmsnorm_scales(x_attn, c.norm_eps);
        Matrix<T> xn2 = apply_rmsnorm(x_attn, lw.mlp_norm_gain, mscales);
        trace.mlp_scale.push_back(std::move(mscales));

        Matrix<T> m(N, c.d_mlp);
        if (c.mlp_kind == MlpKind::plain) {
            Matrix<T> pre = matmul_nt(xn2, lw.w_up);
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t kk = 0; kk < c.d_mlp; ++kk) {
                    m(i, kk) = apply_activation(c.activation, pre(i, kk));
                }
            }
        } else {
            Matrix<T> g = matmul_nt(xn2, lw.w_gate);
            Matrix<T> u = matmul_nt(xn2, lw.w_up);
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t kk = 0; kk < c.d_mlp; ++kk) {
                    m(i, kk) = apply_activation(c.activation, g(i, kk)) * u(i, kk);
                }
            }
        }
        if (mask) {
            for (const auto& [ml, mk] : mask->neurons) {
                if (ml == l) {
                    for (std::size_t i = 0; i < N; ++i) m(i, mk) = T(0);
                }
            }
        }
        Matrix<T> mlp_out = matmul_nt(m, lw.w_down);
        trace.mlp_act.push_back(std::move(m));

        Matrix<T> x_next = x_attn;
        add_inplace(x_next, mlp_out);
        trace.x_attn.push_back(std::move(x_attn));
        trace.hidden.push_back(std::move(x_next));
    }

    trace.final_scale = rmsnorm_scales(trace.hidden.back(), c.norm_eps);
    trace.final_normed = apply_rmsnorm(trace.hidden.back(), ws.final_norm_gain, trace.final_scale);
    trace.logits = matmul_nt(trace.final_normed, ws.lm_head);
    return trace;
}

/// Softmax of the last-position logits, accumulated in double.
template <typename T>
std::vector<double> next_token_distribution(const ForwardTrace<T>& trace) {
    const std::size_t V = trace.logits.cols();
    const T* row = trace.logits.row(trace.logits.rows() - 1);
    std::vector<double> p(V);
    double mx = static_cast<double>(row[0]);
    for (std::size_t y = 1; y < V; ++y) mx = std::max(mx, static_cast<double>(row[y]));
    double sum = 0.0;
    for (std::size_t y = 0; y < V; ++y) {
        p[y] = std::exp(static_cast<double>(row[y]) - mx);
        sum += p[y];
    }
    for (std::size_t y = 0; y < V; ++y) p[y] /= sum;
    return p;
}

/// Ties break toward the lowest token id.
template <typename T>
TokenId greedy_argmax(const ForwardTrace<T>& trace) {
    const T* row = trace.logits.row(trace.logits.rows() - 1);
    std::size_t best = 0;
    for (std::size_t y = 1; y < trace.logits.cols(); ++y) {
        if (row[y] > row[best]) best = y;
    }
    return static_cast<TokenId>(best);
}

template <typename T>
TensorArchive trace_to_archive(const ForwardTrace<T>& trace, const WeightSet<T>& ws) {
    TensorArchive a;
    a.meta = ws.config.to_meta();
    a.meta["trace.fingerprint"] = model_fingerprint(ws);
    std::string toks;
    for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
        if (i) toks += ',';
        toks += std::to_string(trace.tokens[i]);
    }
    a.meta["trace.tokens"] = toks;
    for (std::size_t p = 0; p < trace.hidden.size(); ++p) {
        a.add("hidden." + std::to_string(p), trace.hidden[p]);
    }
    for (std::size_t l = 0; l < trace.x_attn.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        a.add(pre + "x_attn", trace.x_attn[l]);
        for (std::size_t h = 0; h < trace.attn[l].size(); ++h) {
            a.add(pre + "attn." + std::to_string(h), trace.attn[l][h]);
        }
        a.add(pre + "mlp_act", trace.mlp_act[l]);
        a.add(pre + "attn_scale", trace.attn_scale[l]);
        a.add(pre + "mlp_scale", trace.mlp_scale[l]);
    }
    a.add("final_scale", trace.final_scale);
    a.add("final_normed", trace.final_normed);
    a.add("logits", trace.logits);
    return a;
}

template <typename T>
ForwardTrace<T> trace_from_archive(const TensorArchive& a, const WeightSet<T>& ws) {
    ModelConfig c = ModelConfig::from_meta(a.meta);
    auto it = a.meta.find("trace.fingerprint");
    if (it == a.meta.end()) throw ArchiveError("trace archive missing fingerprint");
    if (it->second != model_fingerprint(ws)) {
        throw ConsistencyError("trace was produced by a different model (fingerprint mismatch)");
    }
    ForwardTrace<T> trace;
    auto tit = a.meta.find("trace.tokens");
    if (tit == a.meta.end()) throw ArchiveError("trace archive missing token list");
    std::size_t pos = 0;
    const std::string& s = tit->second;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        trace.tokens.push_back(static_cast<TokenId>(std::stoul(s.substr(pos, comma - pos))));
        pos = comma + 1;
    }
    for (std::size_t p = 0; p <= c.num_layers; ++p) {
        trace.hidden.push_back(a.matrix<T>("hidden." + std::to_string(p)));
    }
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        trace.x_attn.push_back(a.matrix<T>(pre + "x_attn"));
        std::vector<Matrix<T>> probs;
        for (std::size_t h = 0; h < c.num_heads; ++h) {
            probs.push_back(a.matrix<T>(pre + "attn." + std::to_string(h)));
        }
        trace.attn.push_back(std::move(probs));
        trace.mlp_act.push_back(a.matrix<T>(pre + "mlp_act"));
        trace.attn_scale.push_back(a.values<T>(pre + "attn_scale"));
        trace.mlp_scale.push_back(a.values<T>(pre + "mlp_scale"));
    }
    trace.final_scale = a.values<T>("final_scale");
    trace.final_normed = a.matrix<T>("final_normed");
    trace.logits = a.matrix<T>("logits");
    return trace;
}

}  // namespace depass
