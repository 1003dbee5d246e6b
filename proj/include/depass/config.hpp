#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "depass/errors.hpp"

namespace depass {

enum class MlpKind { plain, gated };
enum class Activation { gelu, silu };
enum class Precision { f32, f64 };

inline std::string to_string(MlpKind k) { return k == MlpKind::plain ? "plain" : "gated"; }
inline std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "silu"; }
inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline MlpKind mlp_kind_from_string(const std::string& s) {
    if (s == "plain") return MlpKind::plain;
    if (s == "gated") return MlpKind::gated;
    throw ConfigError("unknown mlp_kind: " + s);
}
inline Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "silu") return Activation::silu;
    throw ConfigError("unknown activation: " + s);
}
inline Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision: " + s);
}

struct ModelConfig {
    std::size_t num_layers = 1;
    std::size_t num_heads = 1;
    std::size_t num_kv_heads = 1;
    std::size_t d_model = 8;
    std::size_t d_mlp = 16;
    std::size_t vocab_size = 16;
    std::size_t max_seq_len = 64;
    MlpKind mlp_kind = MlpKind::plain;
    Activation activation = Activation::gelu;
    bool rope = false;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;
    Precision precision = Precision::f32;

    std::size_t head_dim() const { return d_model / num_heads; }
    std::size_t kv_dim() const { return num_kv_heads * head_dim(); }
    /// Query-head group g shares kv head g / (H / num_kv_heads).
    std::size_t kv_head_of(std::size_t head) const { return head / (num_heads / num_kv_heads); }

    void validate() const {
        if (num_layers < 1 || num_heads < 1 || num_kv_heads < 1 || d_model < 1 || d_mlp < 1 ||
            vocab_size < 1 || max_seq_len < 1) {
            throw ConfigError("all model dimensions must be >= 1");
        }
        if (d_model % num_heads != 0) throw ConfigError("d_model must be divisible by num_heads");
        if (num_kv_heads > num_heads || num_heads % num_kv_heads != 0) {
            throw ConfigError("num_kv_heads must divide num_heads");
        }
        if (norm_eps < 0.0) throw ConfigError("norm_eps must be non-negative");
        if (rope_theta <= 0.0) throw ConfigError("rope_theta must be positive");
    }

    std::map<std::string, std::string> to_meta() const {
        std::map<std::string, std::string> m;
        m["config.num_layers"] = std::to_string(num_layers);
        m["config.num_heads"] = std::to_string(num_heads);
        m["config.num_kv_heads"] = std::to_string(num_kv_heads);
        m["config.d_model"] = std::to_string(d_model);
        m["config.d_mlp"] = std::to_string(d_mlp);
        m["config.vocab_size"] = std::to_string(vocab_size);
        m["config.max_seq_len"] = std::to_string(max_seq_len);
        m["config.mlp_kind"] = to_string(mlp_kind);
        m["config.activation"] = to_string(activation);
        m["config.rope"] = rope ? "1" : "0";
        m["config.rope_theta"] = format_double(rope_theta);
        m["config.norm_eps"] = format_double(norm_eps);
        m["config.precision"] = to_string(precision);
        return m;
    }

    static ModelConfig from_meta(const std::map<std::string, std::string>& m) {
        ModelConfig c;
        c.num_layers = parse_size(m, "config.num_layers");
        c.num_heads = parse_size(m, "config.num_heads");
        c.num_kv_heads = parse_size(m, "config.num_kv_heads");
        c.d_model = parse_size(m, "config.d_model");
        c.d_mlp = parse_size(m, "config.d_mlp");
        c.vocab_size = parse_size(m, "config.vocab_size");
        c.max_seq_len = parse_size(m, "config.max_seq_len");
        c.mlp_kind = mlp_kind_from_string(get(m, "config.mlp_kind"));
        c.activation = activation_from_string(get(m, "config.activation"));
        c.rope = get(m, "config.rope") == "1";
        c.rope_theta = std::stod(get(m, "config.rope_theta"));
        c.norm_eps = std::stod(get(m, "config.norm_eps"));
        c.precision = precision_from_string(get(m, "config.precision"));
        c.validate();
        return c;
    }

    /// Round-trippable decimal form, used in archive metadata and fingerprints.
    static std::string format_double(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

private:
    static const std::string& get(const std::map<std::string, std::string>& m, const std::string& key) {
        auto it = m.find(key);
        if (it == m.end()) throw ConfigError("archive metadata missing key: " + key);
        return it->second;
    }
    static std::size_t parse_size(const std::map<std::string, std::string>& m, const std::string& key) {
        return static_cast<std::size_t>(std::stoull(get(m, key)));
    }
};

}  // namespace depass
