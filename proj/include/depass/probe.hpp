#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "depass/archive.hpp"
#include "depass/errors.hpp"
#include "depass/forward.hpp"
#include "depass/tensor.hpp"

namespace depass {

struct ProbeHyperparams {
    double lr = 0.01;
    std::size_t steps = 1000;
    double l2 = 1e-4;
    std::uint64_t seed = 0;  // recorded for provenance; full-batch training is order-free
};

struct LinearProbe {
    Matrix<double> w;  // C x D
    std::vector<double> b;
    std::size_t layer = 0;  // which hidden state the probe reads
    std::vector<std::string> class_names;
    ProbeHyperparams hp;
    double final_loss = 0.0;
    double train_accuracy = 0.0;

    std::size_t num_classes() const { return w.rows(); }
    std::size_t width() const { return w.cols(); }
};

inline std::vector<double> probe_predict(const LinearProbe& probe, const double* x, std::size_t d) {
    if (d != probe.width()) throw InputError("feature width does not match the probe");
    const std::size_t C = probe.num_classes();
    std::vector<double> z(C);
    for (std::size_t c = 0; c < C; ++c) z[c] = dot(probe.w.row(c), x, d) + probe.b[c];
    double mx = z[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        z[c] = std::exp(z[c] - mx);
        sum += z[c];
    }
    for (std::size_t c = 0; c < C; ++c) z[c] /= sum;
    return z;
}

inline std::vector<double> probe_predict(const LinearProbe& probe, const std::vector<double>& x) {
    return probe_predict(probe, x.data(), x.size());
}

namespace detail {

inline double probe_loss_and_grad(const Matrix<double>& features, const std::vector<std::size_t>& labels,
                                  const LinearProbe& probe, double l2, Matrix<double>& gw,
                                  std::vector<double>& gb) {
    const std::size_t K = features.rows();
    const std::size_t C = probe.num_classes();
    const std::size_t D = probe.width();
    gw.fill(0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
        std::vector<double> p = probe_predict(probe, features.row(i), D);
        loss -= std::log(std::max(p[labels[i]], 1e-300));
        for (std::size_t c = 0; c < C; ++c) {
            double g = p[c] - (c == labels[i] ? 1.0 : 0.0);
            axpy(g, features.row(i), gw.row(c), D);
            gb[c] += g;
        }
    }
    loss /= static_cast<double>(K);
    double penalty = 0.0;
    for (std::size_t i = 0; i < probe.w.size(); ++i) {
        penalty += probe.w.data()[i] * probe.w.data()[i];
        gw.data()[i] = gw.data()[i] / static_cast<double>(K) + l2 * probe.w.data()[i];
    }
    for (std::size_t c = 0; c < C; ++c) gb[c] /= static_cast<double>(K);
    return loss + 0.5 * l2 * penalty;
}

}  // namespace detail

/// Full-batch gradient descent on multinomial cross-entropy with an L2
/// penalty on the weights (not the bias). Zero init, so the result is a
/// deterministic function of the data and hyperparameters.
inline LinearProbe train_probe(const Matrix<double>& features, const std::vector<std::size_t>& labels,
                               const ProbeHyperparams& hp = {}) {
    const std::size_t K = features.rows();
    const std::size_t D = features.cols();
    if (K == 0 || labels.size() != K) throw InputError("label count does not match feature count");
    std::size_t C = 0;
    for (std::size_t y : labels) C = std::max(C, y + 1);
    if (C < 2) throw InputError("probe training needs at least two classes");
    std::vector<std::size_t> counts(C, 0);
    for (std::size_t y : labels) ++counts[y];
    for (std::size_t c = 0; c < C; ++c) {
        if (counts[c] == 0) throw InputError("class " + std::to_string(c) + " has no examples");
    }
    if (K < C) throw InputError("fewer examples than classes");

    LinearProbe probe;
    probe.w = Matrix<double>(C, D);
    probe.w.fill(0.0);
    probe.b.assign(C, 0.0);
    probe.hp = hp;

    Matrix<double> gw(C, D);
    std::vector<double> gb(C);
    for (std::size_t step = 0; step < hp.steps; ++step) {
        probe.final_loss = detail::probe_loss_and_grad(features, labels, probe, hp.l2, gw, gb);
        for (std::size_t i = 0; i < probe.w.size(); ++i) probe.w.data()[i] -= hp.lr * gw.data()[i];
        for (std::size_t c = 0; c < C; ++c) probe.b[c] -= hp.lr * gb[c];
    }
    probe.final_loss = detail::probe_loss_and_grad(features, labels, probe, hp.l2, gw, gb);

    std::size_t correct = 0;
    for (std::size_t i = 0; i < K; ++i) {
        std::vector<double> p = probe_predict(probe, features.row(i), D);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (p[c] > p[arg]) arg = c;
        }
        if (arg == labels[i]) ++correct;
    }
    probe.train_accuracy = static_cast<double>(correct) / static_cast<double>(K);
    return probe;
}

/// Band start for layer averaging: 10 where the stack is that deep,
/// otherwise half the depth rounded up.
inline std::size_t default_band_start(std::size_t num_layers) {
    return num_layers >= 10 ? 10 : (num_layers + 1) / 2;
}

/// Per-token mean of the flagged-class probability across all probes whose
/// layer is at or above the band start.
template <typename T>
std::vector<double> mean_flag_probability(const ForwardTrace<T>& trace, const std::vector<LinearProbe>& probes,
                                          std::size_t band_start, std::size_t flag_class) {
    const std::size_t N = trace.seq_len();
    std::vector<double> mean(N, 0.0);
    std::size_t used = 0;
    for (const LinearProbe& probe : probes) {
        if (probe.layer < band_start) continue;
        if (probe.layer >= trace.hidden.size()) throw InputError("probe layer exceeds trace depth");
        if (flag_class >= probe.num_classes()) throw InputError("flag class out of range for probe");
        const Matrix<T>& h = trace.hidden[probe.layer];
        if (h.cols() != probe.width()) throw InputError("probe width does not match hidden state");
        ++used;
        std::vector<double> x(h.cols());
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t d = 0; d < h.cols(); ++d) x[d] = static_cast<double>(h.row(i)[d]);
            mean[i] += probe_predict(probe, x)[flag_class];
        }
    }
    if (used == 0) throw InputError("no probes at or above the band start layer");
    for (double& v : mean) v /= static_cast<double>(used);
    return mean;
}

inline std::vector<std::size_t> flagged_tokens(const std::vector<double>& means, double threshold = 0.5) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < means.size(); ++i) {
        if (means[i] > threshold) out.push_back(i);
    }
    return out;
}

inline TensorArchive probe_to_archive(const LinearProbe& probe) {
    TensorArchive a;
    a.meta["probe.layer"] = std::to_string(probe.layer);
    a.meta["probe.lr"] = ModelConfig::format_double(probe.hp.lr);
    a.meta["probe.steps"] = std::to_string(probe.hp.steps);
    a.meta["probe.l2"] = ModelConfig::format_double(probe.hp.l2);
    a.meta["probe.seed"] = std::to_string(probe.hp.seed);
    a.meta["probe.final_loss"] = ModelConfig::format_double(probe.final_loss);
    a.meta["probe.train_accuracy"] = ModelConfig::format_double(probe.train_accuracy);
    for (std::size_t c = 0; c < probe.class_names.size(); ++c) {
        a.meta["probe.class." + std::to_string(c)] = probe.class_names[c];
    }
    a.add("weights", probe.w);
    a.add("bias", probe.b);
    return a;
}

inline LinearProbe probe_from_archive(const TensorArchive& a) {
    LinearProbe probe;
    probe.w = a.matrix<double>("weights");
    probe.b = a.values<double>("bias");
    if (probe.b.size() != probe.w.rows()) throw ArchiveError("probe bias length does not match weight rows");
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = a.meta.find(k);
        if (it == a.meta.end()) throw ArchiveError("probe archive missing key '" + k + "'");
        return it->second;
    };
    probe.layer = std::stoul(get("probe.layer"));
    probe.hp.lr = std::stod(get("probe.lr"));
    probe.hp.steps = std::stoul(get("probe.steps"));
    probe.hp.l2 = std::stod(get("probe.l2"));
    probe.hp.seed = std::stoull(get("probe.seed"));
    probe.final_loss = std::stod(get("probe.final_loss"));
    probe.train_accuracy = std::stod(get("probe.train_accuracy"));
    for (std::size_t c = 0;; ++c) {
        auto it = a.meta.find("probe.class." + std::to_string(c));
        if (it == a.meta.end()) break;
        probe.class_names.push_back(it->second);
    }
    return probe;
}

}  // namespace depass
