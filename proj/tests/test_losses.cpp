#include <doctest.h>

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "oracles.hpp"
#include "taxcl/losses.hpp"

using namespace taxcl;

namespace {

const LossVariant kAll[] = {LossVariant::supcon, LossVariant::taxcl_sup, LossVariant::taxcl_unsup,
                            LossVariant::suphcl, LossVariant::combined};

LossResult run(const LabeledBatch& b, LossConfig c, LossVariant v) {
    c.variant = v;
    return compute_loss(b, c);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
    return m;
}

}  // namespace

TEST_CASE("supcon hand calculation") {
    LabeledBatch b;
    b.embeddings = Matrix{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
    b.y_gt = {0, 0, 1, 1};
    b.y_tax = {0, 0, 1, 1};
    LossConfig c;
    c.tau = 1.0;
    const auto r = supcon(b, decompose_supervised(b), c);
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(expect == doctest::Approx(0.55144).epsilon(1e-5));
    for (double t : r.per_anchor) CHECK(std::abs(t - expect) <= 1e-15);
    CHECK(std::abs(r.value - expect) <= 1e-15);
}

TEST_CASE("tax_term hand cases") {
    LossConfig c;
    c.q_mode = QMode::identity;
    const double u1[] = {2, 3};
    auto t = tax_term(1.0, u1, c);
    CHECK(t.term == 5.0);
    CHECK(t.q == 1.0);

    c.q_mode = QMode::importance;
    const double u2[] = {1, 3};
    t = tax_term(1.0, u2, c);
    CHECK(t.term == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(t.term == doctest::Approx(2.0 * (1 + 9) / 4.0).epsilon(1e-15));

    const double u3[] = {0.7, 0.7, 0.7};
    t = tax_term(1.0, u3, c);
    CHECK(t.term == doctest::Approx(2.1).epsilon(1e-15));
    CHECK(t.q == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("debiased tax_term: subtraction, clamp and the alternatives") {
    LossConfig c;  // importance_debiased, tau 0.2, tau_plus 0.1
    const double u[] = {1.0, 3.0};
    const double importance = 5.0;
    auto t = tax_term(2.0, u, c);
    CHECK(t.term == doctest::Approx((importance - 2 * 0.1 * 2.0) / 0.9).epsilon(1e-14));
    CHECK_FALSE(t.clamped);

    t = tax_term(100.0, u, c);  // correction exceeds the weighted sum
    CHECK(t.clamped);
    CHECK(t.term == doctest::Approx(2.0 * std::exp(-1.0 / 0.2)).epsilon(1e-14));
    for (double g : t.d_term_d_u) CHECK(g == 0.0);

    c.debias_sign = DebiasSign::add;
    t = tax_term(2.0, u, c);
    CHECK(t.term == doctest::Approx((importance + 2 * 0.1 * 2.0) / 0.9).epsilon(1e-14));

    c.debias_sign = DebiasSign::subtract;
    c.positive_scale = PositiveScale::batch;
    t = tax_term(2.0, u, c, 0.0, 10);
    CHECK(t.term == doctest::Approx((importance - 10 * 0.1 * 2.0) / 0.9).epsilon(1e-14));
    CHECK_THROWS(tax_term(1.0, std::span<const double>{}, c));
}

TEST_CASE("importance term grows under a mean-preserving spread") {
    LossConfig c;
    c.q_mode = QMode::importance;
    const double flat[] = {2, 2, 2, 2};
    const double spread[] = {1, 3, 1.5, 2.5};
    CHECK(tax_term(1.0, spread, c).term > tax_term(1.0, flat, c).term);
}

TEST_CASE("every loss matches the naive oracle") {
    SeededRng rng(101);
    for (int rep = 0; rep < 10; ++rep) {
        const auto b = fixtures::random_batch(16, 6, rng);
        for (auto q : {QMode::identity, QMode::importance, QMode::importance_debiased})
            for (auto red : {Reduction::mean, Reduction::sum}) {
                LossConfig c;
                c.q_mode = q;
                c.reduction = red;
                for (auto v : kAll)
                    CHECK(std::abs(run(b, c, v).value - oracle::loss(b, c, v)) <= 1e-12);
            }
        LossConfig c;
        c.debias_sign = DebiasSign::add;
        c.positive_scale = PositiveScale::batch;
        c.normalization = SimilarityNormalization::affine;
        for (auto v : kAll) CHECK(std::abs(run(b, c, v).value - oracle::loss(b, c, v)) <= 1e-12);
    }
}

TEST_CASE("identity q-mode reduces to supcon") {
    SeededRng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        const auto b = fixtures::random_batch(12, 5, rng);
        LossConfig c;
        c.q_mode = QMode::identity;
        const auto base = run(b, c, LossVariant::supcon);
        for (auto v : {LossVariant::taxcl_sup, LossVariant::suphcl}) {
            const auto r = run(b, c, v);
            CHECK(std::abs(r.value - base.value) <= 1e-12);
            CHECK(max_abs_diff(r.grad, base.grad) <= 1e-12);
        }
    }
}

TEST_CASE("empty taxonomic sets reduce to supcon") {
    SeededRng rng(3);
    auto b = fixtures::random_batch(10, 4, rng, 5, 1);  // one class per taxonomy
    for (std::size_t i = 0; i < 10; ++i) b.y_tax[i] = b.y_gt[i];
    LossConfig c;
    CHECK(std::abs(run(b, c, LossVariant::taxcl_sup).value -
                   run(b, c, LossVariant::supcon).value) <= 1e-12);
}

TEST_CASE("suphcl equals taxcl when one taxonomy covers the batch") {
    SeededRng rng(4);
    auto b = fixtures::random_batch(12, 4, rng);
    std::fill(b.y_tax.begin(), b.y_tax.end(), 0);
    LossConfig c;
    CHECK(std::abs(run(b, c, LossVariant::suphcl).value -
                   run(b, c, LossVariant::taxcl_sup).value) <= 1e-12);
}

TEST_CASE("unsupervised loss at epsilon 1 is the plain single-positive loss") {
    SeededRng rng(12);
    const auto b = fixtures::random_batch(10, 4, rng);
    LossConfig c;
    c.epsilon = 1.0;
    const auto r = run(b, c, LossVariant::taxcl_unsup);
    double total = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        const std::size_t j = *b.view_pair[i];
        double denom = 0.0;
        for (std::size_t a = 0; a < 10; ++a)
            if (a != i) denom += std::exp(oracle::sim(b, i, a) / c.tau);
        total += -std::log(std::exp(oracle::sim(b, i, j) / c.tau) / denom);
    }
    CHECK(std::abs(r.value - total / 10.0) <= 1e-12);
}

TEST_CASE("unsupervised loss of a lone pair is zero") {
    LabeledBatch b;
    b.embeddings = Matrix{{1, 0}, {0.6, 0.8}};
    b.y_gt = {0, 0};
    b.y_tax = {0, 0};
    b.view_pair = {1, 0};
    LossConfig c;
    CHECK(run(b, c, LossVariant::taxcl_unsup).value == 0.0);
}

TEST_CASE("combined loss endpoints and midpoint") {
    SeededRng rng(19);
    const auto b = fixtures::random_batch(16, 6, rng);
    LossConfig c;
    const auto sc = run(b, c, LossVariant::supcon);
    const auto tx = run(b, c, LossVariant::taxcl_sup);
    c.alpha = 0.0;
    auto r = run(b, c, LossVariant::combined);
    CHECK(r.value == sc.value);
    CHECK(r.grad == sc.grad);
    c.alpha = 1.0;
    r = run(b, c, LossVariant::combined);
    CHECK(r.value == tx.value);
    CHECK(r.grad == tx.grad);
    c.alpha = 0.5;
    r = run(b, c, LossVariant::combined);
    CHECK(std::abs(r.value - (sc.value + tx.value) / 2.0) <= 1e-15);
    CHECK(r.supcon_value == sc.value);
    CHECK(r.taxcl_value == tx.value);
}

TEST_CASE("per-anchor terms are non-negative and skipped anchors are reported") {
    SeededRng rng(23);
    auto b = fixtures::random_batch(9, 3, rng);
    b.y_gt[8] = 1000;  // singleton class
    LossConfig c;
    for (auto v : {LossVariant::supcon, LossVariant::taxcl_sup, LossVariant::suphcl}) {
        const auto r = run(b, c, v);
        CHECK(r.skipped_anchors == 1);
        CHECK(r.valid_anchors == 8);
        CHECK(r.diagnostics[8].skipped);
        for (double t : r.per_anchor) CHECK(t >= 0.0);
    }
    LabeledBatch lone;
    lone.embeddings = Matrix{{1, 0}, {0, 1}};
    lone.y_gt = {0, 1};
    lone.y_tax = {0, 0};
    CHECK_THROWS_AS(run(lone, c, LossVariant::supcon), LossError);
}

TEST_CASE("permuting rows permutes per-anchor terms and gradient rows") {
    SeededRng rng(31);
    const auto b = fixtures::random_batch(12, 4, rng);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<std::size_t> inv(12);
    for (std::size_t k = 0; k < 12; ++k) inv[perm[k]] = k;
    LabeledBatch p = b;
    for (std::size_t k = 0; k < 12; ++k) {
        for (std::size_t c = 0; c < 4; ++c) p.embeddings(k, c) = b.embeddings(perm[k], c);
        p.y_gt[k] = b.y_gt[perm[k]];
        p.y_tax[k] = b.y_tax[perm[k]];
        p.view_pair[k] = inv[*b.view_pair[perm[k]]];
    }
    LossConfig c;
    for (auto v : kAll) {
        const auto r = run(b, c, v);
        const auto rp = run(p, c, v);
        CHECK(std::abs(r.value - rp.value) <= 1e-12);
        for (std::size_t k = 0; k < 12; ++k) {
            CHECK(std::abs(rp.per_anchor[k] - r.per_anchor[perm[k]]) <= 1e-12);
            for (std::size_t col = 0; col < 4; ++col)
                CHECK(std::abs(rp.grad(k, col) - r.grad(perm[k], col)) <= 1e-12);
        }
    }
}

TEST_CASE("finite differences agree with every analytic gradient") {
    SeededRng rng(41);
    for (int rep = 0; rep < 3; ++rep) {
        const auto b = fixtures::random_batch(8, 4, rng);
        for (auto v : kAll) {
            const auto rep_ = finite_diff_check(v, b, LossConfig{}, 1e-5);
            CHECK(rep_.max_rel_err < 1e-6);
        }
    }
}

TEST_CASE("gradient with the clamp active") {
    SeededRng rng(43);
    const auto b = fixtures::clamp_batch(rng);
    LossConfig c;
    c.variant = LossVariant::taxcl_sup;
    const auto r = compute_loss(b, c);
    std::size_t clamped = 0;
    for (const auto& d : r.diagnostics) clamped += d.clamped;
    CHECK(clamped > 0);
    CHECK(finite_diff_check(LossVariant::taxcl_sup, b, c, 1e-5).max_rel_err < 1e-6);
    CHECK(finite_diff_check(LossVariant::suphcl, b, c, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("gradient translation sum") {
    SeededRng rng(47);
    const auto b = fixtures::random_batch(10, 4, rng);
    LossConfig c;
    c.variant = LossVariant::taxcl_sup;
    const auto r = compute_loss(b, c);
    std::vector<double> v(4);
    for (auto& x : v) x = rng.next_gaussian();
    double analytic = 0.0;
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t k = 0; k < 4; ++k) analytic += r.grad(i, k) * v[k];
    const double h = 1e-5;
    auto shifted = [&](double t) {
        LabeledBatch p = b;
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t k = 0; k < 4; ++k) p.embeddings(i, k) += t * v[k];
        return compute_loss(p, c).value;
    };
    const double numeric = (shifted(h) - shifted(-h)) / (2 * h);
    CHECK(std::abs(numeric - analytic) <= 1e-6 * std::max(1.0, std::abs(analytic)));
}

TEST_CASE("finite_diff_check rejects out-of-range steps") {
    SeededRng rng(1);
    const auto b = fixtures::random_batch(4, 2, rng);
    CHECK_THROWS(finite_diff_check(LossVariant::supcon, b, LossConfig{}, 1e-2));
    CHECK_THROWS(finite_diff_check(LossVariant::supcon, b, LossConfig{}, 1e-9));
}

TEST_CASE("no overflow at small temperature") {
    SeededRng rng(53);
    const auto b = fixtures::random_batch(16, 4, rng);
    LossConfig c;
    c.tau = 0.05;
    for (auto v : kAll) {
        const auto r = run(b, c, v);
        CHECK(std::isfinite(r.value));
        CHECK(r.grad.all_finite());
    }
}

TEST_CASE("diagnostics JSON schema") {
    SeededRng rng(2);
    const auto b = fixtures::random_batch(8, 3, rng);
    LossConfig c;
    c.variant = LossVariant::combined;
    const auto j = nlohmann::json::parse(loss_diagnostics_json(compute_loss(b, c)));
    for (const char* key : {"variant", "value", "per_anchor", "q_values", "clamp_flags",
                            "skipped_anchors", "supcon_value", "taxcl_value"})
        CHECK(j.contains(key));
    CHECK(j["per_anchor"].size() == 8);
}

TEST_CASE("config validation and names") {
    LossConfig c;
    c.tau = 0.0;
    CHECK_THROWS(c.validate());
    c = LossConfig{};
    c.tau_plus = 1.0;
    CHECK_THROWS(c.validate());
    for (auto v : kAll) CHECK(parse_loss_variant(to_string(v)) == v);
    for (auto q : {QMode::identity, QMode::importance, QMode::importance_debiased})
        CHECK(parse_q_mode(to_string(q)) == q);
    CHECK_THROWS(parse_loss_variant("nope"));
}
