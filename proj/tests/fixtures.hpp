#pragma once

#include <vector>

#include "depass/depass.hpp"

namespace fixtures {

inline depass::ModelConfig small_config(depass::Precision prec = depass::Precision::f64) {
    depass::ModelConfig c;
    c.num_layers = 4;
    c.num_heads = 4;
    c.num_kv_heads = 4;
    c.d_model = 64;
    c.d_mlp = 128;
    c.vocab_size = 97;
    c.max_seq_len = 32;
    c.mlp_kind = depass::MlpKind::plain;
    c.activation = depass::Activation::silu;
    c.rope = true;
    c.precision = prec;
    return c;
}

inline depass::ModelConfig gqa_gated_config(depass::Precision prec = depass::Precision::f64) {
    depass::ModelConfig c;
    c.num_layers = 2;
    c.num_heads = 4;
    c.num_kv_heads = 2;
    c.d_model = 32;
    c.d_mlp = 48;
    c.vocab_size = 31;
    c.max_seq_len = 16;
    c.mlp_kind = depass::MlpKind::gated;
    c.activation = depass::Activation::gelu;
    c.rope = true;
    c.precision = prec;
    return c;
}

inline std::vector<depass::TokenId> prompt(std::size_t len, std::size_t vocab,
                                           std::uint64_t seed = 1234) {
    depass::SplitMix64 rng(seed);
    std::vector<depass::TokenId> toks;
    toks.push_back(depass::kBosId);
    while (toks.size() < len) toks.push_back(depass::TokenId(rng.next_u64() % vocab));
    return toks;
}

template <typename T>
std::pair<depass::WeightSet<T>, depass::ForwardTrace<T>> small_model_and_trace(
    std::size_t prompt_len = 12, std::uint64_t seed = 42) {
    auto prec = std::is_same_v<T, float> ? depass::Precision::f32 : depass::Precision::f64;
    auto ws = depass::generate_random_model<T>(small_config(prec), seed);
    auto toks = prompt(prompt_len, ws.config.vocab_size);
    auto trace = depass::forward(ws, toks);
    return {std::move(ws), std::move(trace)};
}

}  // namespace fixtures
