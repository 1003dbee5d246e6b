#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "depass/depass.hpp"
#include "fixtures.hpp"

using namespace depass;

namespace {

template <typename T>
InitSpec<T> spec_of(InitKind kind, std::size_t layer = 2) {
    InitSpec<T> s;
    s.kind = kind;
    s.layer = layer;
    return s;
}

Matrix<double> random_directions(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Matrix<double> w(rows, cols);
    SplitMix64 r(seed);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = r.next_range(-1.0, 1.0);
    return w;
}

}  // namespace

TEST_CASE("partitions must be disjoint and exhaustive") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);

    InitSpec<double> s;
    s.kind = InitKind::token_wise;

    s.groups = {{0, 1, 2, 3, 4, 5}, {}};
    CHECK_THROWS_AS(init_decomposition(ws, trace, s), InputError);

    s.groups = {{0, 1, 2}, {3, 4, 5, 99}};
    CHECK_THROWS_AS(init_decomposition(ws, trace, s), InputError);

    s.groups = {{0, 1, 2, 3}, {3, 4, 5}};
    CHECK_THROWS_AS(init_decomposition(ws, trace, s), InputError);

    s.groups = {{0, 1, 2}, {4, 5}};
    CHECK_THROWS_AS(init_decomposition(ws, trace, s), InputError);

    s.groups = {{0, 1, 2}, {3, 4, 5}};
    CHECK_NOTHROW(init_decomposition(ws, trace, s));

    InitSpec<double> n = spec_of<double>(InitKind::mlp_neurons, 1);
    n.groups = {{0, 1}, {2}};
    CHECK_THROWS_AS(init_decomposition(ws, trace, n), InputError);
}

TEST_CASE("init layers must exist") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(5);
    for (InitKind kind : {InitKind::attention_heads, InitKind::mlp_neurons, InitKind::subspace}) {
        auto s = spec_of<double>(kind, ws.config.num_layers);
        if (kind == InitKind::subspace)
            s.projector = projector_as<double>(projection_from_directions(random_directions(2, 64, 3)));
        CHECK_THROWS_AS(init_decomposition(ws, trace, s), InputError);
    }
}

TEST_CASE("token-wise init places each embedding in its own component") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    auto dec = init_decomposition(ws, trace, spec_of<double>(InitKind::token_wise));

    REQUIRE(dec.components() == 6);
    CHECK(dec.component_labels[0] == "pos:0");
    CHECK(dec.component_labels[5] == "pos:5");
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t m = 0; m < 6; ++m) {
            for (std::size_t d = 0; d < ws.config.d_model; ++d) {
                double expect = m == i ? trace.hidden[0](i, d) : 0.0;
                REQUIRE(dec.data(i, m, d) == expect);
            }
        }
    }
}

TEST_CASE("grouped token-wise init uses range labels") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    InitSpec<double> s;
    s.kind = InitKind::token_wise;
    s.groups = {{0, 1, 2}, {3, 5}, {4}};
    auto dec = init_decomposition(ws, trace, s);
    CHECK(dec.component_labels[0] == "pos:0-2");
    CHECK(dec.component_labels[1] == "pos:3,5");
    CHECK(dec.component_labels[2] == "pos:4");
}

TEST_CASE("head init labels components and keeps the residual last") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    auto dec = init_decomposition(ws, trace, spec_of<double>(InitKind::attention_heads, 2));
    REQUIRE(dec.components() == ws.config.num_heads + 1);
    CHECK(dec.component_labels[0] == "L2.h0");
    CHECK(dec.component_labels[3] == "L2.h3");
    CHECK(dec.component_labels[4] == "residual");

    // residual component carries the pre-attention state
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t d = 0; d < ws.config.d_model; ++d)
            REQUIRE(dec.data(i, 4, d) == trace.hidden[2](i, d));

    // components sum to the post-attention state
    CHECK(reconstruction_error(dec.data, trace.x_attn[2]) < tau_rec<double>);
}

TEST_CASE("subspace init splits into projection and complement") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    auto s = spec_of<double>(InitKind::subspace, 1);
    s.projector = projector_as<double>(projection_from_directions(random_directions(3, 64, 9)));
    auto dec = init_decomposition(ws, trace, s);
    REQUIRE(dec.components() == 2);
    CHECK(dec.component_labels[0] == "subspace");
    CHECK(dec.component_labels[1] == "complement");
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t d = 0; d < ws.config.d_model; ++d)
            CHECK_THAT(dec.data(i, 0, d) + dec.data(i, 1, d),
                       Catch::Matchers::WithinAbs(trace.hidden[1](i, d), 1e-12));
}

TEST_CASE("decomposed runs reconstruct the trace at every stage") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(8);
    for (InitKind kind : {InitKind::token_wise, InitKind::attention_heads, InitKind::mlp_neurons,
                          InitKind::subspace}) {
        auto s = spec_of<double>(kind, 2);
        if (kind == InitKind::subspace)
            s.projector = projector_as<double>(projection_from_directions(random_directions(3, 64, 5)));
        auto run = run_decomposed(ws, trace, s);
        INFO("kind " << to_string(kind));
        CHECK(run.max_recon_error < tau_rec<double>);
        CHECK(reconstruction_error(run.final_normed, trace.final_normed) < tau_rec<double>);
        CHECK(run.warnings.empty());
    }
}

TEST_CASE("rmsnorm propagation scales every component by the full-state scale") {
    Tensor3<double> dec(1, 2, 2);
    dec(0, 0, 0) = 1.0;
    dec(0, 0, 1) = 0.0;
    dec(0, 1, 0) = 2.0;
    dec(0, 1, 1) = 4.0;
    Matrix<double> full(1, 2);
    full(0, 0) = 3.0;
    full(0, 1) = 4.0;
    std::vector<double> gain{1.0, 1.0};

    auto out = propagate_rmsnorm(dec, full, gain, 0.0);
    const double s = 1.0 / std::sqrt(12.5);
    CHECK_THAT(out(0, 0, 0), Catch::Matchers::WithinRel(1.0 * s, 1e-15));
    CHECK_THAT(out(0, 1, 0), Catch::Matchers::WithinRel(2.0 * s, 1e-15));
    CHECK_THAT(out(0, 1, 1), Catch::Matchers::WithinRel(4.0 * s, 1e-15));
}

TEST_CASE("rmsnorm propagation rejects a drifted component sum") {
    Tensor3<double> dec(1, 2, 2);
    dec(0, 0, 0) = 1.0;
    dec(0, 1, 0) = 2.0;
    Matrix<double> full(1, 2);
    full(0, 0) = 100.0;
    full(0, 1) = 0.0;
    std::vector<double> gain{1.0, 1.0};
    CHECK_THROWS_AS(propagate_rmsnorm(dec, full, gain, 0.0), ConsistencyError);
}

TEST_CASE("single-component runs carry the full state through") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(7);
    InitSpec<double> s;
    s.kind = InitKind::token_wise;
    s.groups = {{0, 1, 2, 3, 4, 5, 6}};
    auto run = run_decomposed(ws, trace, s);
    REQUIRE(run.state.components() == 1);
    CHECK(run.max_recon_error < tau_rec<double>);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t d = 0; d < ws.config.d_model; ++d)
            CHECK_THAT(run.final_normed(i, 0, d),
                       Catch::Matchers::WithinAbs(double(trace.final_normed(i, d)), 1e-10));
}

TEST_CASE("snapshots capture the hidden state between layers") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    RunOptions opts;
    opts.snapshot_layers = {0, 2, 4};
    auto run = run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), opts);
    REQUIRE(run.snapshots.size() == 3);
    for (std::size_t l : {0u, 2u, 4u}) {
        auto full = reconstruct(run.snapshots.at(l));
        double worst = 0.0;
        for (std::size_t i = 0; i < full.rows(); ++i)
            for (std::size_t d = 0; d < full.cols(); ++d)
                worst = std::max(worst, std::abs(full(i, d) - trace.hidden[l](i, d)));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("snapshots before the init point are rejected") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(5);
    RunOptions opts;
    opts.snapshot_layers = {1};
    CHECK_THROWS_AS(run_decomposed(ws, trace, spec_of<double>(InitKind::attention_heads, 2), opts),
                    UsageError);
    opts.snapshot_layers = {99};
    CHECK_THROWS_AS(run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), opts), UsageError);
}

TEST_CASE("oversized decompositions hit the memory guard") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    RunOptions opts;
    opts.memory_budget_bytes = 64;
    CHECK_THROWS_AS(run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), opts), UsageError);
}

TEST_CASE("component order does not affect values") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(8);
    InitSpec<double> a;
    a.kind = InitKind::token_wise;
    a.groups = {{0, 1, 2, 3}, {4, 5, 6, 7}};
    InitSpec<double> b = a;
    b.groups = {{4, 5, 6, 7}, {0, 1, 2, 3}};

    auto ra = run_decomposed(ws, trace, a);
    auto rb = run_decomposed(ws, trace, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t d = 0; d < ws.config.d_model; ++d) {
            worst = std::max(worst, std::abs(ra.final_normed(i, 0, d) - rb.final_normed(i, 1, d)));
            worst = std::max(worst, std::abs(ra.final_normed(i, 1, d) - rb.final_normed(i, 0, d)));
        }
    CHECK(worst < 1e-12);
}

TEST_CASE("merging components adds their outputs under the weighted rule") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(8);
    RunOptions opts;
    opts.rule = ApportionRule::linear_weighted;

    auto singles = run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), opts);

    InitSpec<double> grouped;
    grouped.kind = InitKind::token_wise;
    grouped.groups = {{0, 1, 2}, {3, 4, 5, 6, 7}};
    auto merged = run_decomposed(ws, trace, grouped, opts);

    double worst = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t d = 0; d < ws.config.d_model; ++d) {
            double sum0 = 0.0, sum1 = 0.0;
            for (std::size_t m = 0; m < 3; ++m) sum0 += singles.final_normed(i, m, d);
            for (std::size_t m = 3; m < 8; ++m) sum1 += singles.final_normed(i, m, d);
            worst = std::max(worst, std::abs(sum0 - merged.final_normed(i, 0, d)));
            worst = std::max(worst, std::abs(sum1 - merged.final_normed(i, 1, d)));
        }
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("the batching knob never changes results") {
    auto [ws, trace] = fixtures::small_model_and_trace<double>(6);
    RunOptions a, b;
    a.component_batch = 0;
    b.component_batch = 1;
    auto ra = run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), a);
    auto rb = run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise), b);
    for (std::size_t i = 0; i < ra.final_normed.size(); ++i)
        REQUIRE(ra.final_normed.data()[i] == rb.final_normed.data()[i]);
}

TEST_CASE("gated models apportion with the configured subkey source") {
    auto ws = generate_random_model<double>(fixtures::gqa_gated_config(), 7);
    auto toks = fixtures::prompt(6, ws.config.vocab_size);
    auto trace = forward(ws, toks);
    for (SubkeySource src : {SubkeySource::gate, SubkeySource::up, SubkeySource::gate_plus_up}) {
        RunOptions opts;
        opts.gated_subkey = src;
        auto run = run_decomposed(ws, trace, spec_of<double>(InitKind::token_wise, 0), opts);
        CHECK(run.max_recon_error < tau_rec<double>);
    }
}
