#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "taxcl/analysis.hpp"

using namespace taxcl;

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
}

TaxonomyDataset tiny_dataset() {
    GenSpec g;
    g.superclasses = 2;
    g.subclasses = 2;
    g.n_per_class = 12;
    g.dim = 6;
    return generate(g);
}

MlpSpec tiny_spec() {
    MlpSpec s;
    s.input_dim = 6;
    s.encoder_widths = {8, 6};
    s.projection_widths = {6, 4};
    return s;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 8;
    c.warmup_epochs = 1;
    return c;
}

ProbeConfig tiny_probe() {
    ProbeConfig p;
    p.epochs = 5;
    p.milestones = {3};
    return p;
}

}  // namespace

TEST_CASE("orthonormal rows give a flat spectrum") {
    const Matrix r = Matrix::identity(5);
    const std::vector<int> y(5, 0);
    SeededRng rng(0);
    const auto reps = spectrum(r, y, SubsetSelector::all(), false, rng);
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].subset == "all");
    CHECK(reps[0].size == 5);
    for (double e : reps[0].eigenvalues) CHECK(e == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(reps[0].trace == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical rows give a rank-one spectrum") {
    Matrix r(6, 3);
    for (std::size_t i = 0; i < 6; ++i) r.row(i)[0] = 1.0, r.row(i)[1] = 2.0, r.row(i)[2] = -1.0;
    const std::vector<int> y(6, 0);
    SeededRng rng(0);
    const auto e = spectrum(r, y, SubsetSelector::all(), false, rng)[0].eigenvalues;
    CHECK(e[0] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(e[1] / e[0] < 1e-9);
    // centering removes the only direction
    const auto c = spectrum(r, y, SubsetSelector::all(), false, rng, true)[0].eigenvalues;
    CHECK(std::abs(c[0]) < 1e-12);
}

TEST_CASE("spectrum trace equals the mean squared row norm of the subset") {
    SeededRng gen(4);
    Matrix r = fixtures::random_unit_rows(40, 7, gen);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) y[i] = static_cast<int>(i % 3);
    for (double& v : r.data()) v *= 1.7;
    SeededRng rng(9);
    const auto reps = spectrum(r, y, SubsetSelector::of_taxonomy(1), true, rng);
    REQUIRE(reps.size() == 2);
    CHECK(reps[0].subset == "taxonomy:1");
    CHECK(reps[1].subset == "random");
    CHECK(reps[1].size == reps[0].size);
    CHECK(reps[1].seed.has_value());
    for (const auto& rep : reps) {
        const double sum = std::accumulate(rep.eigenvalues.begin(), rep.eigenvalues.end(), 0.0);
        CHECK(sum == doctest::Approx(1.7 * 1.7).epsilon(1e-10));
        CHECK(std::is_sorted(rep.eigenvalues.rbegin(), rep.eigenvalues.rend()));
    }
    // the random subset is reproducible from the same stream
    SeededRng again(9);
    const auto reps2 = spectrum(r, y, SubsetSelector::of_taxonomy(1), true, again);
    CHECK(reps2[1].eigenvalues == reps[1].eigenvalues);
}

TEST_CASE("spectrum rejects empty and single-row subsets") {
    const Matrix r = Matrix::identity(4);
    const std::vector<int> y{0, 0, 1, 1};
    SeededRng rng(0);
    CHECK_THROWS(spectrum(r, y, SubsetSelector::of_taxonomy(7), false, rng));
    CHECK_THROWS(spectrum(r, y, SubsetSelector::of_rows({2}), false, rng));
    CHECK_NOTHROW(spectrum(r, y, SubsetSelector::of_rows({0, 2}), false, rng));
}

TEST_CASE("cosine gap on block-orthogonal taxonomies") {
    // taxonomy 0 lives on e0, taxonomy 1 on e1; classes within a taxonomy coincide
    Matrix x{{1, 0}, {1, 0}, {2, 0}, {0, 1}, {0, 3}, {0, 1}};
    const std::vector<int> y_gt{0, 0, 1, 2, 2, 3};
    const std::vector<int> y_tax{0, 0, 0, 1, 1, 1};
    const auto rep = cosine_gap(x, y_gt, y_tax);
    CHECK(rep.tax_mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(rep.reg_mean) < 1e-12);
    CHECK(rep.gap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.tax_anchors == 6);
    CHECK(rep.reg_anchors == 6);
}

TEST_CASE("cosine gap matches a double-loop oracle") {
    SeededRng rng(12);
    for (int rep = 0; rep < 5; ++rep) {
        Matrix x(16, 5);
        for (auto& v : x.data()) v = rng.next_gaussian();
        std::vector<int> y_gt(16), y_tax(16);
        for (std::size_t i = 0; i < 16; ++i) {
            y_gt[i] = static_cast<int>(rng.next_below(6));
            y_tax[i] = y_gt[i] / 2;
        }
        y_gt[0] = 0, y_gt[1] = 2;  // at least two taxonomies
        y_tax[0] = 0, y_tax[1] = 1;
        const auto got = cosine_gap(x, y_gt, y_tax);
        double tsum = 0.0, rsum = 0.0;
        int tn = 0, rn = 0;
        for (std::size_t i = 0; i < 16; ++i) {
            double ts = 0.0, rs = 0.0;
            int tc = 0, rc = 0;
            for (std::size_t j = 0; j < 16; ++j) {
                if (j == i || y_gt[j] == y_gt[i]) continue;
                const double c = cosine(x.row(i), x.row(j));
                if (y_tax[j] == y_tax[i]) ts += c, ++tc;
                else rs += c, ++rc;
            }
            if (tc) tsum += ts / tc, ++tn;
            if (rc) rsum += rs / rc, ++rn;
            CHECK(got.anchor_tax_mean[i].has_value() == (tc > 0));
            if (tc) CHECK(std::abs(*got.anchor_tax_mean[i] - ts / tc) < 1e-12);
        }
        REQUIRE(tn > 0);
        CHECK(std::abs(got.tax_mean - tsum / tn) < 1e-12);
        CHECK(std::abs(got.reg_mean - (rn ? rsum / rn : 0.0)) < 1e-12);
    }
}

TEST_CASE("cosine gap vanishes on average under a label permutation null") {
    // random directions carry no taxonomy information
    SeededRng rng(30);
    double total = 0.0;
    const int reps = 40;
    for (int r = 0; r < reps; ++r) {
        Matrix x(40, 8);
        for (auto& v : x.data()) v = rng.next_gaussian();
        std::vector<int> y_gt(40), y_tax(40);
        for (std::size_t i = 0; i < 40; ++i) {
            y_gt[i] = static_cast<int>(i % 8);
            y_tax[i] = y_gt[i] / 2;
        }
        rng.shuffle(y_gt);
        for (std::size_t i = 0; i < 40; ++i) y_tax[i] = y_gt[i] / 2;
        total += cosine_gap(x, y_gt, y_tax).gap;
    }
    CHECK(std::abs(total / reps) < 0.02);
}

TEST_CASE("cosine gap needs two taxonomies") {
    Matrix x{{1, 0}, {0, 1}, {1, 1}};
    CHECK_THROWS(cosine_gap(x, {0, 1, 2}, {0, 0, 0}));
}

TEST_CASE("retrieval finds a duplicated row first and breaks ties by index") {
    Matrix z{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
    const std::vector<int> y{0, 1, 2, 0, 1};
    const auto s = retrieve(z, y, 3);
    CHECK(s.records[0].neighbors[0] == 3);
    CHECK(s.records[0].similarities[0] == doctest::Approx(1.0));
    // the remaining candidates tie at 0
    CHECK(s.records[0].neighbors[1] == 1);
    CHECK(s.records[0].neighbors[2] == 2);
    CHECK(s.records[2].neighbors == std::vector<std::size_t>{0, 1, 3});
    CHECK(s.records[0].same_tax_hits == 1);
}

TEST_CASE("retrieval matches a full-sort oracle") {
    SeededRng rng(2);
    auto b = fixtures::random_batch(24, 5, rng);
    const auto s = retrieve(b.embeddings, b.y_tax, 4, b.view_pair);
    REQUIRE(s.records.size() == 24);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 24; ++i) {
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t j = 0; j < 24; ++j)
            if (j != i && j != *b.view_pair[i])
                all.emplace_back(-cosine(b.embeddings.row(i), b.embeddings.row(j)), j);
        std::sort(all.begin(), all.end());
        for (std::size_t r = 0; r < 4; ++r) {
            CHECK(s.records[i].neighbors[r] == all[r].second);
            CHECK(s.records[i].neighbor_tax[r] == b.y_tax[all[r].second]);
            if (b.y_tax[all[r].second] == b.y_tax[i]) ++hits;
        }
        for (auto n : s.records[i].neighbors) CHECK(n != *b.view_pair[i]);
    }
    CHECK(s.hit_rate == doctest::Approx(static_cast<double>(hits) / 96.0));
}

TEST_CASE("retrieval argument checks") {
    Matrix z = Matrix::identity(4);
    const std::vector<int> y{0, 0, 1, 1};
    CHECK_THROWS(retrieve(z, y, 0));
    CHECK_THROWS(retrieve(z, y, 3));
    CHECK_NOTHROW(retrieve(z, y, 2));
    CHECK_THROWS(retrieve(z, {0, 1}, 1));
}

TEST_CASE("sweep endpoints reproduce the standalone pipelines") {
    const auto data = tiny_dataset();
    const auto spec = tiny_spec();
    const auto base = tiny_config();
    const auto probe = tiny_probe();
    const auto rows = alpha_sweep(data, spec, base, probe, {0.0, 1.0}, {4});
    REQUIRE(rows.size() == 2);

    for (auto [variant, row] : {std::pair{LossVariant::supcon, rows[0]},
                                std::pair{LossVariant::taxcl_sup, rows[1]}}) {
        TrainConfig cfg = base;
        cfg.loss.variant = variant;
        cfg.seed = 4;
        ProbeConfig p = probe;
        p.seed = 4;
        const auto pre = pretrain(data, spec, cfg);
        const auto res = linear_probe(pre.checkpoint, data, p);
        CHECK(row.final_loss == pre.epoch_losses.back());
        CHECK(row.accuracy == res.test_accuracy);
        CHECK(row.train_accuracy == res.train_accuracy);
        CHECK(row.seed == 4);
    }
}

TEST_CASE("sweep grid validation and row layout") {
    CHECK_THROWS(validate_sweep_grid({}, {0}));
    CHECK_THROWS(validate_sweep_grid({0.0, 1.0}, {}));
    CHECK_THROWS(validate_sweep_grid({0.0, 0.5}, {0}));
    CHECK_THROWS(validate_sweep_grid({0.0, 1.5}, {0}));
    CHECK_NOTHROW(validate_sweep_grid({0.5}, {0}, SweepOptions{false}));

    const auto rows = alpha_sweep(tiny_dataset(), tiny_spec(), tiny_config(), tiny_probe(),
                                  {0.0, 0.5, 1.0}, {0, 1});
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].alpha == 0.0);
    CHECK(rows[1].alpha == 0.0);
    CHECK(rows[1].seed == 1);
    CHECK(rows[2].alpha == 0.5);
    for (const auto& r : rows) {
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(std::isfinite(r.final_loss));
        CHECK(r.cell_config.find("\"alpha\"") != std::string::npos);
    }
    std::ostringstream os;
    write_sweep_csv(os, rows);
    const std::string csv = os.str();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(csv.rfind("alpha,seed,accuracy,train_accuracy,final_loss,config_hash", 0) == 0);
}

TEST_CASE("writers emit headers and one line per record") {
    const Matrix r = Matrix::identity(3);
    const std::vector<int> y{0, 0, 1};
    SeededRng rng(0);
    const auto reps = spectrum(r, y, SubsetSelector::all(), false, rng);
    std::ostringstream s;
    write_spectrum_csv(s, reps);
    const std::string spec_csv = s.str();
    CHECK(spec_csv.rfind("subset,index,eigenvalue\n", 0) == 0);
    CHECK(std::count(spec_csv.begin(), spec_csv.end(), '\n') == 4);
    CHECK(spectrum_summary_json(reps).find("\"spectra\"") != std::string::npos);

    const auto sum = retrieve(r, y, 1);
    std::ostringstream rs;
    write_retrieval_csv(rs, sum);
    const std::string ret_csv = rs.str();
    CHECK(std::count(ret_csv.begin(), ret_csv.end(), '\n') == 4);
    CHECK(retrieval_summary_json(sum).find("\"hit_rate\"") != std::string::npos);
}
