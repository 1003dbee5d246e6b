#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "depass/attribution.hpp"
#include "depass/dataset.hpp"
#include "depass/decompose.hpp"
#include "depass/errors.hpp"
#include "depass/forward.hpp"
#include "depass/probe.hpp"

namespace depass {

/// Absolute relative change in the target probability.
inline double delta_p(double p_orig, double p_pert) {
    if (!(p_orig > 0.0)) throw NumericError("original probability is zero; relative change is undefined");
    return std::abs(p_orig - p_pert) / p_orig;
}

enum class InterventionKind { patch_top, recover_top };

inline std::string to_string(InterventionKind k) {
    return k == InterventionKind::patch_top ? "patch_top" : "recover_top";
}

struct InterventionSpec {
    InterventionKind kind = InterventionKind::patch_top;
    double k = 0.5;  // fraction of scoreable tokens, in (0, 1]
    bool keep_bos = true;
};

namespace detail {

/// Positions ranked by (score desc, position asc); the first n are "top".
inline std::vector<std::size_t> top_positions(const std::vector<std::size_t>& eligible,
                                              const std::vector<double>& scores, std::size_t n) {
    std::vector<std::size_t> order = eligible;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    order.resize(std::min(n, order.size()));
    return order;
}

inline std::size_t ceil_fraction(double k, std::size_t n_eff) {
    if (n_eff == 0) return 0;
    auto n = static_cast<std::size_t>(std::ceil(k * static_cast<double>(n_eff) - 1e-9));
    if (n < 1) n = 1;
    return std::min(n, n_eff);
}

}  // namespace detail

/// Removal-and-reassembly token masking. patch_top drops the ceil(K*N_eff)
/// highest-scoring tokens; recover_top keeps only that set. A leading BOS is
/// exempt from removal and from N_eff while keep_bos holds.
inline std::vector<TokenId> apply_token_intervention(const std::vector<TokenId>& tokens,
                                                     const std::vector<double>& scores,
                                                     const InterventionSpec& spec) {
    if (!(spec.k > 0.0 && spec.k <= 1.0)) throw ConfigError("intervention fraction must be in (0, 1]");
    if (scores.size() != tokens.size()) throw InputError("score vector does not align with the tokens");

    const bool bos_exempt = spec.keep_bos && !tokens.empty() && tokens[0] == kBosId;
    std::vector<std::size_t> eligible;
    for (std::size_t i = bos_exempt ? 1 : 0; i < tokens.size(); ++i) eligible.push_back(i);
    const std::size_t n_top = detail::ceil_fraction(spec.k, eligible.size());
    std::vector<std::size_t> top = detail::top_positions(eligible, scores, n_top);

    std::vector<char> removed(tokens.size(), 0);
    if (spec.kind == InterventionKind::patch_top) {
        for (std::size_t p : top) removed[p] = 1;
    } else {
        for (std::size_t p : eligible) removed[p] = 1;
        for (std::size_t p : top) removed[p] = 0;
    }
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!removed[i]) out.push_back(tokens[i]);
    }
    if (out.empty()) throw InputError("intervention removed every token");
    return out;
}

// ---- attention baselines ----

enum class BaselineMethod { attention_mean, attention_last, attention_rollout };

inline std::string to_string(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::attention_mean: return "attention_mean";
        case BaselineMethod::attention_last: return "attention_last";
        default: return "attention_rollout";
    }
}

inline BaselineMethod baseline_from_string(const std::string& s) {
    if (s == "attention_mean") return BaselineMethod::attention_mean;
    if (s == "attention_last") return BaselineMethod::attention_last;
    if (s == "attention_rollout") return BaselineMethod::attention_rollout;
    throw ConfigError("unknown baseline '" + s + "'");
}

namespace detail {

template <typename T>
Matrix<double> head_mean_attention(const std::vector<Matrix<T>>& heads) {
    const std::size_t n = heads[0].rows();
    Matrix<double> mean(n, n);
    mean.fill(0.0);
    for (const auto& a : heads) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) mean(i, j) += static_cast<double>(a(i, j));
        }
    }
    for (std::size_t i = 0; i < n * n; ++i) mean.data()[i] /= static_cast<double>(heads.size());
    return mean;
}

}  // namespace detail

/// Per-source-token relevance of the last query position.
template <typename T>
std::vector<double> baseline_scores(const ForwardTrace<T>& trace, BaselineMethod method) {
    const std::size_t N = trace.seq_len();
    const std::size_t L = trace.attn.size();
    const std::size_t last = N - 1;
    std::vector<double> scores(N, 0.0);
    switch (method) {
        case BaselineMethod::attention_mean: {
            std::size_t count = 0;
            for (std::size_t l = 0; l < L; ++l) {
                for (const auto& a : trace.attn[l]) {
                    for (std::size_t j = 0; j < N; ++j) scores[j] += static_cast<double>(a(last, j));
                    ++count;
                }
            }
            for (double& s : scores) s /= static_cast<double>(count);
            return scores;
        }
        case BaselineMethod::attention_last: {
            const auto& heads = trace.attn[L - 1];
            for (const auto& a : heads) {
                for (std::size_t j = 0; j < N; ++j) scores[j] += static_cast<double>(a(last, j));
            }
            for (double& s : scores) s /= static_cast<double>(heads.size());
            return scores;
        }
        case BaselineMethod::attention_rollout: {
            Matrix<double> r(N, N);
            for (std::size_t l = 0; l < L; ++l) {
                Matrix<double> a = detail::head_mean_attention(trace.attn[l]);
                for (std::size_t i = 0; i < N; ++i) {
                    double sum = 0.0;
                    for (std::size_t j = 0; j < N; ++j) {
                        a(i, j) = 0.5 * (a(i, j) + (i == j ? 1.0 : 0.0));
                        sum += a(i, j);
                    }
                    for (std::size_t j = 0; j < N; ++j) a(i, j) /= sum;
                }
                if (l == 0) {
                    r = a;
                } else {
                    r = matmul(a, r);
                }
            }
            for (std::size_t j = 0; j < N; ++j) scores[j] = r(last, j);
            return scores;
        }
    }
    throw UsageError("unknown baseline");
}

/// Token-wise decomposed contribution of every input token to the target
/// logit at the last position.
template <typename T>
std::vector<double> depass_token_scores(const WeightSet<T>& ws, const ForwardTrace<T>& trace, TokenId target,
                                        ApportionRule rule = ApportionRule::softmax) {
    InitSpec<T> spec;
    spec.kind = InitKind::token_wise;
    RunOptions opts;
    opts.rule = rule;
    DecomposedRun<T> run = run_decomposed(ws, trace, spec, opts);
    Matrix<double> scores = logit_attribution(run.final_normed, ws, target);
    const std::size_t last = trace.seq_len() - 1;
    return std::vector<double>(scores.row(last), scores.row(last) + scores.cols());
}

// ---- faithfulness protocol ----

struct FaithfulnessCurve {
    std::string method;
    std::string kind;
    std::vector<double> k_grid;
    std::vector<double> mean;                     // per K
    std::vector<std::vector<double>> per_example; // [K][example]
    std::size_t n_examples = 0;
};

/// Keeps only examples whose greedy next token equals the stated target.
template <typename T>
std::vector<EvalExample> filter_correct(const WeightSet<T>& ws, const std::vector<EvalExample>& dataset) {
    std::vector<EvalExample> kept;
    for (const auto& ex : dataset) {
        ForwardTrace<T> trace = forward(ws, ex.tokens);
        if (greedy_argmax(trace) == ex.target) kept.push_back(ex);
    }
    return kept;
}

template <typename T>
using TokenScorer = std::function<std::vector<double>(const ForwardTrace<T>&, TokenId)>;

template <typename T>
FaithfulnessCurve run_faithfulness(const WeightSet<T>& ws, const std::vector<EvalExample>& dataset,
                                   const std::string& method_name, const TokenScorer<T>& scorer,
                                   InterventionKind kind, const std::vector<double>& k_grid,
                                   bool keep_bos = true) {
    std::vector<EvalExample> kept = filter_correct(ws, dataset);
    if (kept.empty()) throw InputError("no examples survive the correct-prediction filter");

    FaithfulnessCurve curve;
    curve.method = method_name;
    curve.kind = to_string(kind);
    curve.k_grid = k_grid;
    curve.n_examples = kept.size();
    curve.per_example.assign(k_grid.size(), {});

    for (const auto& ex : kept) {
        ForwardTrace<T> trace = forward(ws, ex.tokens);
        double p_orig = next_token_distribution(trace)[ex.target];
        std::vector<double> scores = scorer(trace, ex.target);
        for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
            InterventionSpec spec{kind, k_grid[ki], keep_bos};
            std::vector<TokenId> perturbed = apply_token_intervention(ex.tokens, scores, spec);
            ForwardTrace<T> pert = forward(ws, perturbed);
            double p_pert = next_token_distribution(pert)[ex.target];
            curve.per_example[ki].push_back(delta_p(p_orig, p_pert));
        }
    }
    for (const auto& row : curve.per_example) {
        curve.mean.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
    }
    return curve;
}

// ---- component masking protocol ----

/// Maps decomposition components onto the standard pass's mask. The residual
/// component has no weight to zero and is rejected.
template <typename T>
ForwardMask components_to_mask(const ModelConfig& c, const InitSpec<T>& spec,
                               const std::vector<std::size_t>& components) {
    ForwardMask mask;
    if (spec.kind == InitKind::attention_heads) {
        for (std::size_t m : components) {
            if (m >= c.num_heads) throw UsageError("the residual component cannot be ablated");
            mask.heads.insert({spec.layer, m});
        }
    } else if (spec.kind == InitKind::mlp_neurons) {
        auto groups = spec.groups.empty() ? detail::singleton_groups(c.d_mlp) : spec.groups;
        for (std::size_t m : components) {
            if (m >= groups.size()) throw UsageError("the residual component cannot be ablated");
            for (std::size_t k : groups[m]) mask.neurons.insert({spec.layer, k});
        }
    } else {
        throw UsageError("only head or neuron components can be ablated");
    }
    return mask;
}

struct MaskingCurve {
    std::string method;
    std::string kind;  // top_k or bottom_k
    std::vector<std::size_t> k_grid;
    std::vector<double> accuracy;                // per k
    std::vector<std::vector<int>> per_example;   // [k][example], 1 = prediction retained
    std::size_t n_examples = 0;
    std::vector<std::string> warnings;
};

template <typename T>
MaskingCurve run_component_masking(const WeightSet<T>& ws, const std::vector<EvalExample>& dataset,
                                   const InitSpec<T>& spec, ImportanceMethod method, bool top_k,
                                   const std::vector<std::size_t>& k_grid,
                                   ApportionRule rule = ApportionRule::softmax) {
    const ModelConfig& c = ws.config;
    std::vector<EvalExample> kept = filter_correct(ws, dataset);
    if (kept.empty()) throw InputError("no examples survive the correct-prediction filter");

    MaskingCurve curve;
    curve.method = to_string(method);
    curve.kind = top_k ? "top_k" : "bottom_k";
    curve.k_grid = k_grid;
    curve.n_examples = kept.size();
    curve.per_example.assign(k_grid.size(), {});

    for (const auto& ex : kept) {
        ForwardTrace<T> trace = forward(ws, ex.tokens);
        const std::size_t pos = ex.tokens.size() - 1;

        DecomposedState<T> init_state = init_decomposition(ws, trace, spec);
        Tensor3<T> final_normed;
        if (method == ImportanceMethod::depass || method == ImportanceMethod::depass_abs) {
            RunOptions opts;
            opts.rule = rule;
            DecomposedRun<T> run = run_decomposed(ws, trace, spec, opts);
            final_normed = std::move(run.final_normed);
        }
        std::vector<double> scores =
            component_importance(ws, trace, spec, init_state, final_normed, method, ex.target, pos);

        const std::size_t ablatable = init_state.components() - 1;  // residual excluded
        std::vector<std::size_t> order(ablatable);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) return top_k ? scores[a] > scores[b] : scores[a] < scores[b];
            return a < b;
        });

        for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
            std::size_t k = k_grid[ki];
            if (k > ablatable) {
                if (curve.warnings.empty()) {
                    curve.warnings.push_back("k clamped to " + std::to_string(ablatable) +
                                             " ablatable components");
                }
                k = ablatable;
            }
            std::vector<std::size_t> chosen(order.begin(), order.begin() + k);
            ForwardMask mask = components_to_mask(c, spec, chosen);
            ForwardTrace<T> masked = forward(ws, ex.tokens, &mask);
            curve.per_example[ki].push_back(greedy_argmax(masked) == ex.target ? 1 : 0);
        }
    }
    for (const auto& row : curve.per_example) {
        curve.accuracy.push_back(std::accumulate(row.begin(), row.end(), 0) /
                                 static_cast<double>(row.size()));
    }
    return curve;
}

// ---- probe-guided token masking ----

enum class BudgetBasis { all_tokens, flagged_tokens };

struct SubspaceMaskResult {
    std::vector<double> mean_flag_prob;     // per token
    std::vector<std::size_t> flagged;       // mean > 0.5
    std::vector<std::size_t> flag_mask;     // flag-based removal set (budget-capped)
    std::vector<std::size_t> depass_mask;   // contribution-ranked removal set, same size
    std::vector<double> contribution;       // per input token, averaged over band and flags
    std::vector<TokenId> masked_tokens;     // prompt with depass_mask removed
};

/// Flags suspicious tokens with the probe band, attributes their flagged-side
/// activation back to input tokens token-wise, and removes the strongest
/// contributors. The removal count always matches the flag-based mask.
template <typename T>
SubspaceMaskResult depass_subspace_masking(const WeightSet<T>& ws, const ForwardTrace<T>& trace,
                                           const std::vector<LinearProbe>& probes, double budget = 1.0,
                                           std::size_t flag_class = 1,
                                           BudgetBasis basis = BudgetBasis::all_tokens,
                                           std::size_t band_start = static_cast<std::size_t>(-1),
                                           bool keep_bos = true,
                                           ApportionRule rule = ApportionRule::softmax) {
    if (!(budget > 0.0 && budget <= 1.0)) throw ConfigError("budget must be in (0, 1]");
    const ModelConfig& c = ws.config;
    if (band_start == static_cast<std::size_t>(-1)) band_start = default_band_start(c.num_layers);

    SubspaceMaskResult res;
    res.mean_flag_prob = mean_flag_probability(trace, probes, band_start, flag_class);
    res.flagged = flagged_tokens(res.mean_flag_prob);
    res.masked_tokens = trace.tokens;
    res.contribution.assign(trace.seq_len(), 0.0);
    if (res.flagged.empty()) return res;

    const bool bos_exempt = keep_bos && trace.tokens[0] == kBosId;
    std::vector<std::size_t> maskable_flags;
    for (std::size_t p : res.flagged) {
        if (!(bos_exempt && p == 0)) maskable_flags.push_back(p);
    }
    if (maskable_flags.empty()) return res;

    std::size_t basis_count = basis == BudgetBasis::all_tokens
                                  ? trace.seq_len() - (bos_exempt ? 1 : 0)
                                  : maskable_flags.size();
    std::size_t cap = detail::ceil_fraction(budget, basis_count);
    std::sort(maskable_flags.begin(), maskable_flags.end(), [&](std::size_t a, std::size_t b) {
        if (res.mean_flag_prob[a] != res.mean_flag_prob[b]) {
            return res.mean_flag_prob[a] > res.mean_flag_prob[b];
        }
        return a < b;
    });
    res.flag_mask.assign(maskable_flags.begin(),
                         maskable_flags.begin() + std::min(cap, maskable_flags.size()));
    std::sort(res.flag_mask.begin(), res.flag_mask.end());

    // Token-wise run with snapshots at every probe layer in the band.
    InitSpec<T> spec;
    spec.kind = InitKind::token_wise;
    RunOptions opts;
    opts.rule = rule;
    std::vector<const LinearProbe*> band;
    for (const auto& probe : probes) {
        if (probe.layer >= band_start) {
            band.push_back(&probe);
            opts.snapshot_layers.insert(probe.layer);
        }
    }
    DecomposedRun<T> run = run_decomposed(ws, trace, spec, opts);

    std::size_t terms = 0;
    for (const LinearProbe* probe : band) {
        if (probe->num_classes() != 2) {
            throw UsageError("flagged-direction masking needs binary probes");
        }
        std::vector<double> dir(probe->width());
        for (std::size_t d = 0; d < dir.size(); ++d) {
            dir[d] = probe->w(flag_class, d) - probe->w(1 - flag_class, d);
        }
        Matrix<double> attr = direction_attribution(run.snapshots.at(probe->layer), dir);
        for (std::size_t p : res.flagged) {
            for (std::size_t m = 0; m < trace.seq_len(); ++m) res.contribution[m] += attr(p, m);
            ++terms;
        }
    }
    for (double& v : res.contribution) v /= static_cast<double>(terms);

    std::vector<std::size_t> eligible;
    for (std::size_t i = bos_exempt ? 1 : 0; i < trace.seq_len(); ++i) eligible.push_back(i);
    res.depass_mask = detail::top_positions(eligible, res.contribution, res.flag_mask.size());
    std::sort(res.depass_mask.begin(), res.depass_mask.end());

    res.masked_tokens.clear();
    std::vector<char> removed(trace.seq_len(), 0);
    for (std::size_t p : res.depass_mask) removed[p] = 1;
    for (std::size_t i = 0; i < trace.seq_len(); ++i) {
        if (!removed[i]) res.masked_tokens.push_back(trace.tokens[i]);
    }
    return res;
}

// ---- ablation oracle and benchmark ----

/// One fresh forward per neuron; score = drop in the target logit.
template <typename T>
std::vector<double> ablation_oracle_neurons(const WeightSet<T>& ws, const std::vector<TokenId>& tokens,
                                            std::size_t layer, TokenId target, double base_logit) {
    const ModelConfig& c = ws.config;
    if (layer >= c.num_layers) throw InputError("layer out of range");
    const std::size_t last = tokens.size() - 1;
    std::vector<double> scores(c.d_mlp);
    for (std::size_t k = 0; k < c.d_mlp; ++k) {
        ForwardMask mask;
        mask.neurons.insert({layer, k});
        ForwardTrace<T> masked = forward(ws, tokens, &mask);
        scores[k] = base_logit - static_cast<double>(masked.logits(last, target));
    }
    return scores;
}

struct BenchResult {
    double t_depass = 0.0;    // seconds: forward + decomposed run + attribution
    double t_ablation = 0.0;  // seconds: one fresh forward per neuron
    double ratio = 0.0;       // t_ablation / t_depass
    std::vector<double> depass_scores;
    std::vector<double> oracle_scores;
};

template <typename T>
BenchResult bench_depass_vs_ablation(const WeightSet<T>& ws, const std::vector<TokenId>& tokens,
                                     std::size_t layer, TokenId target,
                                     ApportionRule rule = ApportionRule::softmax) {
    using clock = std::chrono::steady_clock;
    const ModelConfig& c = ws.config;
    const std::size_t last = tokens.size() - 1;
    BenchResult res;

    auto t0 = clock::now();
    ForwardTrace<T> trace = forward(ws, tokens);
    InitSpec<T> spec;
    spec.kind = InitKind::mlp_neurons;
    spec.layer = layer;
    RunOptions opts;
    opts.rule = rule;
    DecomposedRun<T> run = run_decomposed(ws, trace, spec, opts);
    Matrix<double> attr = logit_attribution(run.final_normed, ws, target);
    res.depass_scores.assign(attr.row(last), attr.row(last) + c.d_mlp);  // residual slot dropped
    auto t1 = clock::now();

    double base_logit = static_cast<double>(trace.logits(last, target));
    auto t2 = clock::now();
    res.oracle_scores = ablation_oracle_neurons(ws, tokens, layer, target, base_logit);
    auto t3 = clock::now();

    res.t_depass = std::chrono::duration<double>(t1 - t0).count();
    res.t_ablation = std::chrono::duration<double>(t3 - t2).count();
    res.ratio = res.t_ablation / res.t_depass;
    return res;
}

// ---- curve serialization ----

inline std::string curves_to_csv(const std::vector<FaithfulnessCurve>& curves) {
    std::string s = "method,K_or_k,mean_metric,n_examples\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.k_grid.size(); ++i) {
            s += csv_field(c.method + ":" + c.kind) + "," + json_number(c.k_grid[i]) + "," +
                 json_number(c.mean[i]) + "," + std::to_string(c.n_examples) + "\n";
        }
    }
    return s;
}

inline std::string curves_to_json(const std::vector<FaithfulnessCurve>& curves) {
    std::string s = "[\n";
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const auto& c = curves[ci];
        if (ci) s += ",\n";
        s += "  {\"method\": \"" + json_escape(c.method) + "\", \"kind\": \"" + json_escape(c.kind) +
             "\", \"n_examples\": " + std::to_string(c.n_examples) + ",\n   \"k_grid\": [";
        for (std::size_t i = 0; i < c.k_grid.size(); ++i) {
            if (i) s += ", ";
            s += json_number(c.k_grid[i]);
        }
        s += "],\n   \"mean\": [";
        for (std::size_t i = 0; i < c.mean.size(); ++i) {
            if (i) s += ", ";
            s += json_number(c.mean[i]);
        }
        s += "],\n   \"per_example\": [";
        for (std::size_t i = 0; i < c.per_example.size(); ++i) {
            if (i) s += ", ";
            s += "[";
            for (std::size_t j = 0; j < c.per_example[i].size(); ++j) {
                if (j) s += ", ";
                s += json_number(c.per_example[i][j]);
            }
            s += "]";
        }
        s += "]}";
    }
    s += "\n]\n";
    return s;
}

inline std::string masking_to_csv(const std::vector<MaskingCurve>& curves) {
    std::string s = "method,K_or_k,mean_metric,n_examples\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.k_grid.size(); ++i) {
            s += csv_field(c.method + ":" + c.kind) + "," + std::to_string(c.k_grid[i]) + "," +
                 json_number(c.accuracy[i]) + "," + std::to_string(c.n_examples) + "\n";
        }
    }
    return s;
}

inline std::string masking_to_json(const std::vector<MaskingCurve>& curves) {
    std::string s = "[\n";
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const auto& c = curves[ci];
        if (ci) s += ",\n";
        s += "  {\"method\": \"" + json_escape(c.method) + "\", \"kind\": \"" + json_escape(c.kind) +
             "\", \"n_examples\": " + std::to_string(c.n_examples) + ",\n   \"k_grid\": [";
        for (std::size_t i = 0; i < c.k_grid.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(c.k_grid[i]);
        }
        s += "],\n   \"accuracy\": [";
        for (std::size_t i = 0; i < c.accuracy.size(); ++i) {
            if (i) s += ", ";
            s += json_number(c.accuracy[i]);
        }
        s += "],\n   \"per_example\": [";
        for (std::size_t i = 0; i < c.per_example.size(); ++i) {
            if (i) s += ", ";
            s += "[";
            for (std::size_t j = 0; j < c.per_example[i].size(); ++j) {
                if (j) s += ", ";
                s += std::to_string(c.per_example[i][j]);
            }
            s += "]";
        }
        s += "]";
        if (!c.warnings.empty()) {
            s += ",\n   \"warnings\": [";
            for (std::size_t i = 0; i < c.warnings.size(); ++i) {
                if (i) s += ", ";
                s += "\"" + json_escape(c.warnings[i]) + "\"";
            }
            s += "]";
        }
        s += "}";
    }
    s += "\n]\n";
    return s;
}

}  // namespace depass
