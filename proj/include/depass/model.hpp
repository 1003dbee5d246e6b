#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "depass/archive.hpp"
#include "depass/config.hpp"
#include "depass/rng.hpp"
#include "depass/tensor.hpp"

namespace depass {

/// Per-layer projections. wq/wo are D x D, wk/wv map into the kv width.
/// w_up and w_gate hold subkey rows (d_mlp x D); w_down holds subvalue
/// columns (D x d_mlp). Bias-free throughout.
template <typename T>
struct LayerWeights {
    Matrix<T> wq, wk, wv, wo;
    std::vector<T> attn_norm_gain;
    std::vector<T> mlp_norm_gain;
    Matrix<T> w_gate;  // gated only
    Matrix<T> w_up;
    Matrix<T> w_down;
};

template <typename T>
struct WeightSet {
    ModelConfig config;
    Matrix<T> token_embeddings;  // V x D
    std::vector<LayerWeights<T>> layers;
    std::vector<T> final_norm_gain;
    Matrix<T> lm_head;  // V x D, row y is the readout direction for token y
};

namespace detail {

template <typename T>
struct WeightRef {
    std::string name;
    std::vector<std::size_t> shape;
    bool drawn;  // norm gains are all-ones and consume no randomness
    T* data;
    std::size_t numel;
};

template <typename T>
std::vector<WeightRef<T>> weight_manifest(WeightSet<T>& ws) {
    const ModelConfig& c = ws.config;
    std::vector<WeightRef<T>> refs;
    auto mat = [&](const std::string& name, Matrix<T>& m, std::size_t r, std::size_t cols, bool drawn) {
        if (m.rows() != r || m.cols() != cols) m = Matrix<T>(r, cols);
        refs.push_back({name, {r, cols}, drawn, m.data(), m.size()});
    };
    auto vec = [&](const std::string& name, std::vector<T>& v, std::size_t n, bool drawn) {
        if (v.size() != n) v.assign(n, T(0));
        refs.push_back({name, {n}, drawn, v.data(), n});
    };

    ws.layers.resize(c.num_layers);
    mat("tok_embeddings", ws.token_embeddings, c.vocab_size, c.d_model, true);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights<T>& lw = ws.layers[l];
        vec(p + "attn_norm.gain", lw.attn_norm_gain, c.d_model, false);
        mat(p + "attn.wq", lw.wq, c.d_model, c.d_model, true);
        mat(p + "attn.wk", lw.wk, c.d_model, c.kv_dim(), true);
        mat(p + "attn.wv", lw.wv, c.d_model, c.kv_dim(), true);
        mat(p + "attn.wo", lw.wo, c.d_model, c.d_model, true);
        vec(p + "mlp_norm.gain", lw.mlp_norm_gain, c.d_model, false);
        if (c.mlp_kind == MlpKind::gated) mat(p + "mlp.w_gate", lw.w_gate, c.d_mlp, c.d_model, true);
        mat(p + "mlp.w_up", lw.w_up, c.d_mlp, c.d_model, true);
        mat(p + "mlp.w_down", lw.w_down, c.d_model, c.d_mlp, true);
    }
    vec("final_norm.gain", ws.final_norm_gain, c.d_model, false);
    mat("lm_head", ws.lm_head, c.vocab_size, c.d_model, true);
    return refs;
}

}  // namespace detail

/// All drawn weights are i.i.d. uniform on [-1/sqrt(D), +1/sqrt(D)], one
/// splitmix64 draw per element in manifest order; gains are all-ones.
template <typename T>
WeightSet<T> generate_random_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    WeightSet<T> ws;
    ws.config = config;
    SplitMix64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    for (auto& ref : detail::weight_manifest(ws)) {
        if (ref.drawn) {
            for (std::size_t i = 0; i < ref.numel; ++i) {
                ref.data[i] = static_cast<T>(rng.next_range(-bound, bound));
            }
        } else {
            for (std::size_t i = 0; i < ref.numel; ++i) ref.data[i] = T(1);
        }
    }
    return ws;
}

template <typename T>
TensorArchive weights_to_archive(const WeightSet<T>& ws) {
    TensorArchive a;
    a.meta = ws.config.to_meta();
    auto refs = detail::weight_manifest(const_cast<WeightSet<T>&>(ws));
    for (const auto& ref : refs) a.add(ref.name, ref.shape, ref.data);
    return a;
}

template <typename T>
void save_weights(const WeightSet<T>& ws, const std::string& path) {
    weights_to_archive(ws).save(path);
}

template <typename T>
WeightSet<T> weights_from_archive(const TensorArchive& a) {
    ModelConfig config = ModelConfig::from_meta(a.meta);
    if (config.precision != (dtype_of<T>() == Dtype::f32 ? Precision::f32 : Precision::f64)) {
        throw ConfigError("archive precision is " + to_string(config.precision) +
                          ", loader instantiated for the other width");
    }
    WeightSet<T> ws;
    ws.config = config;
    for (auto& ref : detail::weight_manifest(ws)) {
        const TensorEntry& e = a.tensor(ref.name);
        if (e.shape != ref.shape) {
            throw ConfigError("tensor '" + ref.name + "' shape is inconsistent with the model config");
        }
        std::vector<T> v = a.values<T>(ref.name);
        std::copy(v.begin(), v.end(), ref.data);
    }
    return ws;
}

inline Precision archive_precision(const std::string& path) {
    TensorArchive a = TensorArchive::load(path);
    return ModelConfig::from_meta(a.meta).precision;
}

template <typename T>
std::pair<ModelConfig, WeightSet<T>> load_weights(const std::string& path) {
    TensorArchive a = TensorArchive::load(path);
    WeightSet<T> ws = weights_from_archive<T>(a);
    return {ws.config, std::move(ws)};
}

/// FNV-1a over the canonical config text plus every weight byte in manifest
/// order. Reports embed this so stale trace/report pairs fail fast.
template <typename T>
std::string model_fingerprint(const WeightSet<T>& ws) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [k, v] : ws.config.to_meta()) {
        mix(k.data(), k.size());
        mix(v.data(), v.size());
    }
    auto refs = detail::weight_manifest(const_cast<WeightSet<T>&>(ws));
    for (const auto& ref : refs) mix(ref.data, ref.numel * sizeof(T));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace depass
