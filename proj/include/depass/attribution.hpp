#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "depass/decompose.hpp"
#include "depass/errors.hpp"
#include "depass/forward.hpp"
#include "depass/model.hpp"
#include "depass/tensor.hpp"

namespace depass {

/// Per-position projection of every component onto a direction, in double.
template <typename T>
Matrix<double> project_components(const Tensor3<T>& dec, const std::vector<double>& v) {
    if (v.size() != dec.dim2()) throw InputError("direction width does not match components");
    Matrix<double> out(dec.dim0(), dec.dim1());
    for (std::size_t i = 0; i < dec.dim0(); ++i) {
        for (std::size_t m = 0; m < dec.dim1(); ++m) {
            const T* part = dec.at(i, m);
            double acc = 0.0;
            for (std::size_t d = 0; d < v.size(); ++d) acc += v[d] * static_cast<double>(part[d]);
            out(i, m) = acc;
        }
    }
    return out;
}

/// score_m = w_y . dec[i,m,:] over the post-final-norm components. The sum
/// over m recovers the full logit for token y.
template <typename T>
Matrix<double> logit_attribution(const Tensor3<T>& dec_final_normed, const WeightSet<T>& ws, TokenId y) {
    if (y >= ws.config.vocab_size) throw InputError("target token id out of range");
    std::vector<double> w(ws.config.d_model);
    const T* row = ws.lm_head.row(y);
    for (std::size_t d = 0; d < w.size(); ++d) w[d] = static_cast<double>(row[d]);
    return project_components(dec_final_normed, w);
}

template <typename T>
Matrix<double> direction_attribution(const Tensor3<T>& dec_at_layer, const std::vector<double>& v) {
    return project_components(dec_at_layer, v);
}

inline std::vector<double> normalized_scores(const double* scores, std::size_t m) {
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) denom += std::abs(scores[j]);
    std::vector<double> out(m, 0.0);
    if (denom > 0.0) {
        for (std::size_t j = 0; j < m; ++j) out[j] = scores[j] / denom;
    }
    return out;
}

enum class ImportanceMethod { depass, depass_abs, norm, coef };

inline std::string to_string(ImportanceMethod m) {
    switch (m) {
        case ImportanceMethod::depass: return "depass";
        case ImportanceMethod::depass_abs: return "depass_abs";
        case ImportanceMethod::norm: return "norm";
        default: return "coef";
    }
}

inline ImportanceMethod importance_from_string(const std::string& s) {
    if (s == "depass") return ImportanceMethod::depass;
    if (s == "depass_abs" || s == "depass-abs") return ImportanceMethod::depass_abs;
    if (s == "norm") return ImportanceMethod::norm;
    if (s == "coef") return ImportanceMethod::coef;
    throw ConfigError("unknown importance method '" + s + "'");
}

/// Importance of each component at one query position. depass variants read
/// the propagated post-final-norm tensor; norm reads the init-point tensor;
/// coef sums |activation| per neuron group straight from the trace.
template <typename T>
std::vector<double> component_importance(const WeightSet<T>& ws, const ForwardTrace<T>& trace,
                                         const InitSpec<T>& spec, const DecomposedState<T>& init_state,
                                         const Tensor3<T>& final_normed, ImportanceMethod method,
                                         TokenId target, std::size_t pos) {
    const std::size_t M = init_state.components();
    if (pos >= init_state.positions()) throw InputError("query position out of range");
    switch (method) {
        case ImportanceMethod::depass:
        case ImportanceMethod::depass_abs: {
            Matrix<double> s = logit_attribution(final_normed, ws, target);
            std::vector<double> out(s.row(pos), s.row(pos) + M);
            if (method == ImportanceMethod::depass_abs) {
                for (double& v : out) v = std::abs(v);
            }
            return out;
        }
        case ImportanceMethod::norm: {
            std::vector<double> out(M);
            for (std::size_t m = 0; m < M; ++m) {
                const T* part = init_state.data.at(pos, m);
                double acc = 0.0;
                for (std::size_t d = 0; d < init_state.width(); ++d) {
                    acc += static_cast<double>(part[d]) * static_cast<double>(part[d]);
                }
                out[m] = std::sqrt(acc);
            }
            return out;
        }
        case ImportanceMethod::coef: {
            if (spec.kind != InitKind::mlp_neurons) {
                throw UsageError("coef scores only apply to neuron decompositions");
            }
            auto groups = spec.groups.empty() ? detail::singleton_groups(ws.config.d_mlp) : spec.groups;
            const Matrix<T>& m = trace.mlp_act[spec.layer];
            std::vector<double> out(groups.size() + 1, 0.0);
            for (std::size_t g = 0; g < groups.size(); ++g) {
                for (std::size_t k : groups[g]) out[g] += std::abs(static_cast<double>(m(pos, k)));
            }
            return out;  // residual slot stays 0; it has no activation coefficient
        }
    }
    throw UsageError("unknown importance method");
}

struct AttributionReport {
    std::string target;  // "logit:<id>" or "direction@<layer>"
    std::string method;
    std::string model_fingerprint;
    std::vector<std::string> labels;
    std::vector<TokenId> token_ids;
    std::vector<std::size_t> positions;  // row index -> query position
    Matrix<double> scores;               // positions x M
    Matrix<double> normalized;           // same shape, scores / sum |scores| per row
};

/// Completeness gate: each emitted row must sum back to the reference value
/// (the traced logit or projection) within 1e-4 relative.
inline void check_completeness(const Matrix<double>& scores, const std::vector<double>& reference,
                               const std::string& what) {
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t m = 0; m < scores.cols(); ++m) sum += scores(r, m);
        double rel = std::abs(sum - reference[r]) / (std::abs(reference[r]) + 1e-30);
        if (!(rel <= 1e-4)) {
            throw ConsistencyError(what + " scores do not sum to the full value (rel err " +
                                   std::to_string(rel) + ")");
        }
    }
}

namespace detail {

inline Matrix<double> rows_at(const Matrix<double>& all, const std::vector<std::size_t>& positions) {
    Matrix<double> out(positions.size(), all.cols());
    for (std::size_t r = 0; r < positions.size(); ++r) {
        std::copy(all.row(positions[r]), all.row(positions[r]) + all.cols(), out.row(r));
    }
    return out;
}

inline Matrix<double> normalize_rows(const Matrix<double>& scores) {
    Matrix<double> out(scores.rows(), scores.cols());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        std::vector<double> n = normalized_scores(scores.row(r), scores.cols());
        std::copy(n.begin(), n.end(), out.row(r));
    }
    return out;
}

}  // namespace detail

template <typename T>
AttributionReport make_logit_report(const WeightSet<T>& ws, const ForwardTrace<T>& trace,
                                    const DecomposedRun<T>& run, TokenId y,
                                    std::vector<std::size_t> positions = {}) {
    if (positions.empty()) positions = {trace.seq_len() - 1};
    for (std::size_t p : positions) {
        if (p >= trace.seq_len()) throw InputError("query position out of range");
    }
    Matrix<double> all = logit_attribution(run.final_normed, ws, y);
    AttributionReport rep;
    rep.target = "logit:" + std::to_string(y);
    rep.method = "depass";
    rep.model_fingerprint = model_fingerprint(ws);
    rep.labels = run.state.component_labels;
    rep.token_ids = trace.tokens;
    rep.positions = positions;
    rep.scores = detail::rows_at(all, positions);
    rep.normalized = detail::normalize_rows(rep.scores);
    std::vector<double> reference(positions.size());
    for (std::size_t r = 0; r < positions.size(); ++r) {
        reference[r] = static_cast<double>(trace.logits(positions[r], y));
    }
    check_completeness(rep.scores, reference, "logit attribution");
    return rep;
}

template <typename T>
AttributionReport make_direction_report(const WeightSet<T>& ws, const ForwardTrace<T>& trace,
                                        const DecomposedRun<T>& run, std::size_t layer,
                                        const std::vector<double>& v,
                                        std::vector<std::size_t> positions = {}) {
    auto it = run.snapshots.find(layer);
    if (it == run.snapshots.end()) {
        throw UsageError("layer " + std::to_string(layer) + " was not snapshotted during the decomposed run");
    }
    if (positions.empty()) positions = {trace.seq_len() - 1};
    for (std::size_t p : positions) {
        if (p >= trace.seq_len()) throw InputError("query position out of range");
    }
    Matrix<double> all = direction_attribution(it->second, v);
    AttributionReport rep;
    rep.target = "direction@" + std::to_string(layer);
    rep.method = "depass";
    rep.model_fingerprint = model_fingerprint(ws);
    rep.labels = run.state.component_labels;
    rep.token_ids = trace.tokens;
    rep.positions = positions;
    rep.scores = detail::rows_at(all, positions);
    rep.normalized = detail::normalize_rows(rep.scores);
    std::vector<double> reference(positions.size());
    for (std::size_t r = 0; r < positions.size(); ++r) {
        const Matrix<T>& h = trace.hidden[layer];
        double acc = 0.0;
        for (std::size_t d = 0; d < h.cols(); ++d) {
            acc += v[d] * static_cast<double>(h.row(positions[r])[d]);
        }
        reference[r] = acc;
    }
    check_completeness(rep.scores, reference, "direction attribution");
    return rep;
}

// ---- report serialization ----

inline std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (char ch : s) {
        switch (ch) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(ch) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", ch);
                    out += buf;
                } else {
                    out += ch;
                }
        }
    }
    return out;
}

inline std::string json_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string export_report_json(const AttributionReport& rep) {
    std::string s = "{\n";
    s += "  \"target\": \"" + json_escape(rep.target) + "\",\n";
    s += "  \"method\": \"" + json_escape(rep.method) + "\",\n";
    s += "  \"model_fingerprint\": \"" + json_escape(rep.model_fingerprint) + "\",\n";
    s += "  \"labels\": [";
    for (std::size_t m = 0; m < rep.labels.size(); ++m) {
        if (m) s += ", ";
        s += "\"" + json_escape(rep.labels[m]) + "\"";
    }
    s += "],\n  \"token_ids\": [";
    for (std::size_t i = 0; i < rep.token_ids.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(rep.token_ids[i]);
    }
    s += "],\n  \"positions\": [";
    for (std::size_t r = 0; r < rep.positions.size(); ++r) {
        if (r) s += ", ";
        s += std::to_string(rep.positions[r]);
    }
    auto emit_matrix = [&](const Matrix<double>& m) {
        if (m.rows() == 1) {
            s += "[";
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (j) s += ", ";
                s += json_number(m(0, j));
            }
            s += "]";
            return;
        }
        s += "[";
        for (std::size_t r = 0; r < m.rows(); ++r) {
            if (r) s += ", ";
            s += "[";
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (j) s += ", ";
                s += json_number(m(r, j));
            }
            s += "]";
        }
        s += "]";
    };
    s += "],\n  \"scores\": ";
    emit_matrix(rep.scores);
    s += ",\n  \"normalized\": ";
    emit_matrix(rep.normalized);
    s += "\n}\n";
    return s;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    out += "\"";
    return out;
}

inline std::string export_report_csv(const AttributionReport& rep) {
    std::string s = "position,component,label,score,normalized\n";
    for (std::size_t r = 0; r < rep.scores.rows(); ++r) {
        for (std::size_t m = 0; m < rep.scores.cols(); ++m) {
            s += std::to_string(rep.positions[r]) + "," + std::to_string(m) + "," +
                 csv_field(rep.labels[m]) + "," + json_number(rep.scores(r, m)) + "," +
                 json_number(rep.normalized(r, m)) + "\n";
        }
    }
    return s;
}

/// Five shading levels assigned by quantile; tied scores share a level.
inline std::vector<int> quantile_levels(const std::vector<double>& scores) {
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> levels(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        std::size_t rank =
            std::lower_bound(sorted.begin(), sorted.end(), scores[i]) - sorted.begin();
        levels[i] = static_cast<int>(rank * 5 / scores.size());
        if (levels[i] > 4) levels[i] = 4;
    }
    return levels;
}

inline std::string render_heatmap_text(const AttributionReport& rep,
                                       const std::vector<std::string>& token_texts = {}) {
    static const char* shades[5] = {".....", ":::::", "+++++", "#####", "@@@@@"};
    std::string out;
    for (std::size_t r = 0; r < rep.scores.rows(); ++r) {
        out += "position " + std::to_string(rep.positions[r]) + " (" + rep.target + ", " + rep.method + ")\n";
        std::vector<double> row(rep.scores.row(r), rep.scores.row(r) + rep.scores.cols());
        std::vector<int> levels = quantile_levels(row);
        std::size_t width = 0;
        for (const auto& l : rep.labels) width = std::max(width, l.size());
        for (std::size_t m = 0; m < row.size(); ++m) {
            std::string name = rep.labels[m];
            if (m < token_texts.size() && !token_texts[m].empty()) name += " '" + token_texts[m] + "'";
            out += "  " + name;
            out.append(width + 12 > name.size() ? width + 12 - name.size() : 1, ' ');
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%12.5g  ", row[m]);
            out += buf;
            out += shades[levels[m]];
            out += '\n';
        }
    }
    return out;
}

}  // namespace depass
