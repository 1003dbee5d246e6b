#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "depass/depass.hpp"
#include "oracles.hpp"

using namespace depass;

namespace {

Matrix<double> from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix<double> m(rows.size(), rows.begin()->size());
    std::size_t i = 0;
    for (const auto& r : rows) {
        std::size_t j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

double max_abs_diff(const Matrix<double>& a, const oracle::Mat& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            worst = std::max(worst, std::abs(a(i, j) - b[i][j]));
    return worst;
}

oracle::Mat to_oracle(const Matrix<double>& m) {
    oracle::Mat out = oracle::zeros(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
}

}  // namespace

TEST_CASE("axis-aligned directions give diagonal projectors") {
    auto proj = projection_from_directions(from_rows({{1.0, 0.0, 0.0, 0.0}}));
    CHECK(proj.rank == 1);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK_THAT(proj.p(i, j),
                       Catch::Matchers::WithinAbs(i == 0 && j == 0 ? 1.0 : 0.0, 1e-14));
}

TEST_CASE("duplicate and scaled directions do not inflate the rank") {
    auto proj = projection_from_directions(
        from_rows({{1.0, 2.0, 0.0}, {2.0, 4.0, 0.0}, {-0.5, -1.0, 0.0}}));
    CHECK(proj.rank == 1);
    double tr = 0.0;
    for (std::size_t i = 0; i < 3; ++i) tr += proj.p(i, i);
    CHECK_THAT(tr, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("projectors are symmetric idempotent with trace equal to rank") {
    SplitMix64 rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t d = 6 + (rng.next_u64() % 10);
        std::size_t c = 1 + (rng.next_u64() % 5);
        Matrix<double> w(c, d);
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.next_range(-1.0, 1.0);
        auto proj = projection_from_directions(w);

        double tr = 0.0;
        for (std::size_t i = 0; i < d; ++i) tr += proj.p(i, i);
        CHECK_THAT(tr, Catch::Matchers::WithinAbs(double(proj.rank), 1e-10));

        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                REQUIRE_THAT(proj.p(i, j), Catch::Matchers::WithinAbs(proj.p(j, i), 1e-12));
                double pp = 0.0;
                for (std::size_t k = 0; k < d; ++k) pp += proj.p(i, k) * proj.p(k, j);
                REQUIRE_THAT(pp, Catch::Matchers::WithinAbs(proj.p(i, j), 1e-10));
            }
        }
    }
}

TEST_CASE("projection fixes spanned vectors and kills orthogonal ones") {
    auto proj = projection_from_directions(from_rows({{1.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}}));
    REQUIRE(proj.rank == 2);

    std::vector<double> inside{2.0, 2.0, -3.0, 0.0};
    std::vector<double> outside{1.0, -1.0, 0.0, 5.0};

    auto [pin, pin_rest] = split_subspace(inside, proj);
    auto [pout, pout_rest] = split_subspace(outside, proj);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK_THAT(pin[j], Catch::Matchers::WithinAbs(inside[j], 1e-12));
        CHECK_THAT(pin_rest[j], Catch::Matchers::WithinAbs(0.0, 1e-12));
        CHECK_THAT(pout[j], Catch::Matchers::WithinAbs(0.0, 1e-12));
        CHECK_THAT(pout_rest[j], Catch::Matchers::WithinAbs(outside[j], 1e-12));
    }

    CHECK_THROWS_AS(split_subspace(std::vector<double>{1.0}, proj), InputError);
}

TEST_CASE("degenerate all-zero directions are rejected") {
    Matrix<double> w(2, 5);
    w.fill(0.0);
    CHECK_THROWS_AS(projection_from_directions(w), NumericError);
}

TEST_CASE("pivoted QR agrees with an SVD-built projector") {
    SplitMix64 rng(404);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t d = 5 + (rng.next_u64() % 12);
        std::size_t c = 1 + (rng.next_u64() % 6);
        Matrix<double> w(c, d);
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.next_range(-2.0, 2.0);
        if (trial % 3 == 0 && c > 1) {
            // plant an exact linear dependency
            for (std::size_t j = 0; j < d; ++j) w(c - 1, j) = 0.5 * w(0, j);
        }

        auto proj = projection_from_directions(w);
        auto ref = oracle::svd_projector(to_oracle(w));
        INFO("trial " << trial << " d=" << d << " c=" << c);
        CHECK(proj.rank == oracle::svd_rank(to_oracle(w)));
        CHECK(max_abs_diff(proj.p, ref) < 1e-8);
    }
}

TEST_CASE("projectors cast to single precision on demand") {
    auto proj = projection_from_directions(from_rows({{3.0, 4.0}}));
    auto pf = projector_as<float>(proj);
    CHECK(pf(0, 0) == float(proj.p(0, 0)));
    CHECK(pf(1, 0) == float(proj.p(1, 0)));
}
