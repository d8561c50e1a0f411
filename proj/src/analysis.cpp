#include "taxcl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace taxcl {

using nlohmann::json;

std::string SubsetSelector::describe() const {
    switch (kind) {
        case Kind::all: return "all";
        case Kind::taxonomy: return "taxonomy:" + std::to_string(taxonomy);
        case Kind::indices: return "rows";
    }
    return "?";
}

namespace {

SpectrumReport spectrum_of(const Matrix& rows, std::string label, bool centered) {
    const Matrix c = covariance(rows, centered);
    SpectrumReport rep;
    rep.subset = std::move(label);
    rep.size = rows.rows();
    rep.centered = centered;
    for (std::size_t k = 0; k < c.rows(); ++k) rep.trace += c(k, k);
    rep.eigenvalues = sym_eig(c).eigenvalues;
    return rep;
}

}  // namespace

std::vector<SpectrumReport> spectrum(const Matrix& r, std::span<const int> y_tax,
                                     const SubsetSelector& selector, bool matched_random,
                                     SeededRng& rng, bool centered) {
    std::vector<std::size_t> rows;
    switch (selector.kind) {
        case SubsetSelector::Kind::all:
            rows.resize(r.rows());
            std::iota(rows.begin(), rows.end(), std::size_t{0});
            break;
        case SubsetSelector::Kind::taxonomy:
            if (y_tax.size() != r.rows())
                throw std::invalid_argument("spectrum: taxonomy labels do not match row count");
            for (std::size_t k = 0; k < r.rows(); ++k)
                if (y_tax[k] == selector.taxonomy) rows.push_back(k);
            break;
        case SubsetSelector::Kind::indices:
            rows = selector.rows;
            break;
    }
    if (rows.empty())
        throw std::invalid_argument("spectrum: subset '" + selector.describe() + "' is empty");
    if (rows.size() < 2)
        throw std::invalid_argument("spectrum: subset '" + selector.describe() +
                                    "' has a single row; a spectrum needs at least two");

    std::vector<SpectrumReport> out;
    out.push_back(spectrum_of(r.select_rows(rows), selector.describe(), centered));
    if (matched_random) {
        const auto seed = rng.state().seed;
        const auto picks = sample_without_replacement(r.rows(), rows.size(), rng);
        out.push_back(spectrum_of(r.select_rows(picks), "random", centered));
        out.back().seed = seed;
    }
    return out;
}

CosineReport cosine_gap(const Matrix& x, const std::vector<int>& y_gt,
                        const std::vector<int>& y_tax) {
    {
        std::vector<int> t(y_tax);
        std::sort(t.begin(), t.end());
        if (t.empty() || t.front() == t.back())
            throw std::invalid_argument("cosine_gap: need at least two distinct taxonomies");
    }
    LabeledBatch batch;
    batch.embeddings = l2_normalize_rows(x).rows;
    batch.y_gt = y_gt;
    batch.y_tax = y_tax;
    const Decomposition decomp = decompose_supervised(batch);
    const Matrix& z = batch.embeddings;

    CosineReport rep;
    const std::size_t m = z.rows();
    rep.anchor_tax_mean.resize(m);
    rep.anchor_reg_mean.resize(m);
    double tax_total = 0.0;
    double reg_total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const auto& sets = decomp[i];
        auto mean_sim = [&](const std::vector<std::size_t>& idx) {
            double s = 0.0;
            for (auto a : idx) s += dot(z.row(i), z.row(a));
            return s / static_cast<double>(idx.size());
        };
        if (!sets.taxonomic.empty()) {
            rep.anchor_tax_mean[i] = mean_sim(sets.taxonomic);
            tax_total += *rep.anchor_tax_mean[i];
            ++rep.tax_anchors;
        }
        if (!sets.regular.empty()) {
            rep.anchor_reg_mean[i] = mean_sim(sets.regular);
            reg_total += *rep.anchor_reg_mean[i];
            ++rep.reg_anchors;
        }
    }
    if (rep.tax_anchors == 0)
        throw std::invalid_argument("cosine_gap: no anchor has a taxonomic negative");
    rep.tax_mean = tax_total / static_cast<double>(rep.tax_anchors);
    rep.reg_mean = rep.reg_anchors ? reg_total / static_cast<double>(rep.reg_anchors) : 0.0;
    rep.gap = rep.tax_mean - rep.reg_mean;
    return rep;
}

RetrievalSummary retrieve(const Matrix& z, const std::vector<int>& y_tax, std::size_t k,
                          const std::vector<std::optional<std::size_t>>& view_pair) {
    const std::size_t m = z.rows();
    if (k < 1) throw std::invalid_argument("retrieve: k must be >= 1");
    if (m < 2 || k > m - 2)
        throw std::invalid_argument("retrieve: k = " + std::to_string(k) + " exceeds M - 2 = " +
                                    std::to_string(m < 2 ? 0 : m - 2));
    if (y_tax.size() != m) throw std::invalid_argument("retrieve: label count mismatch");
    if (!view_pair.empty() && view_pair.size() != m)
        throw std::invalid_argument("retrieve: view_pair length mismatch");

    const Matrix u = l2_normalize_rows(z).rows;
    const Matrix s = gram(u);
    RetrievalSummary out;
    std::size_t hits = 0;
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < m; ++i) {
        cand.clear();
        const std::size_t partner =
            view_pair.empty() ? m : view_pair[i].value_or(m);
        for (std::size_t a = 0; a < m; ++a)
            if (a != i && a != partner) cand.push_back(a);
        const std::size_t take = std::min(k, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (s(i, a) != s(i, b)) return s(i, a) > s(i, b);
                              return a < b;
                          });
        RetrievalRecord rec;
        rec.anchor = i;
        for (std::size_t n = 0; n < take; ++n) {
            rec.neighbors.push_back(cand[n]);
            rec.similarities.push_back(s(i, cand[n]));
            rec.neighbor_tax.push_back(y_tax[cand[n]]);
            if (y_tax[cand[n]] == y_tax[i]) ++rec.same_tax_hits;
        }
        hits += rec.same_tax_hits;
        out.records.push_back(std::move(rec));
    }
    out.hit_rate = static_cast<double>(hits) / static_cast<double>(m * k);
    return out;
}

void validate_sweep_grid(const std::vector<double>& alpha_grid,
                         const std::vector<std::uint64_t>& seeds, const SweepOptions& opts) {
    if (alpha_grid.empty()) throw std::invalid_argument("alpha_sweep: empty alpha grid");
    if (seeds.empty()) throw std::invalid_argument("alpha_sweep: need at least one seed");
    for (double a : alpha_grid)
        if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("alpha_sweep: alpha outside [0, 1]");
    if (opts.require_endpoints) {
        const bool has0 = std::find(alpha_grid.begin(), alpha_grid.end(), 0.0) != alpha_grid.end();
        const bool has1 = std::find(alpha_grid.begin(), alpha_grid.end(), 1.0) != alpha_grid.end();
        if (!has0 || !has1)
            throw std::invalid_argument("alpha_sweep: grid must include the endpoints 0 and 1");
    }
}

std::vector<SweepRow> alpha_sweep(const TaxonomyDataset& data, const MlpSpec& spec,
                                  const TrainConfig& base, const ProbeConfig& probe,
                                  const std::vector<double>& alpha_grid,
                                  const std::vector<std::uint64_t>& seeds,
                                  const SweepOptions& opts) {
    validate_sweep_grid(alpha_grid, seeds, opts);

    std::vector<SweepRow> rows;
    for (double alpha : alpha_grid) {
        for (auto seed : seeds) {
            TrainConfig cfg = base;
            cfg.loss.variant = LossVariant::combined;
            cfg.loss.alpha = alpha;
            cfg.seed = seed;
            ProbeConfig pc = probe;
            pc.seed = seed;
            const PretrainResult trained = pretrain(data, spec, cfg);
            const ProbeResult pr = linear_probe(trained.checkpoint, data, pc);
            SweepRow row;
            row.alpha = alpha;
            row.seed = seed;
            row.accuracy = pr.test_accuracy;
            row.train_accuracy = pr.train_accuracy;
            row.final_loss = trained.epoch_losses.back();
            json cell = json::parse(to_json(cfg));
            cell["mlp"] = json::parse(to_json(spec));
            cell["probe"] = json::parse(to_json(pc));
            row.cell_config = cell.dump();
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// --- writers ---------------------------------------------------------------

void write_spectrum_csv(std::ostream& os, const std::vector<SpectrumReport>& reports) {
    os << "subset,index,eigenvalue\n";
    for (const auto& r : reports)
        for (std::size_t k = 0; k < r.eigenvalues.size(); ++k)
            os << r.subset << ',' << k << ',' << format_double(r.eigenvalues[k]) << '\n';
}

void write_cosine_csv(std::ostream& os, const CosineReport& rep) {
    os << "anchor,tax_mean,reg_mean\n";
    auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; };
    for (std::size_t i = 0; i < rep.anchor_tax_mean.size(); ++i)
        os << i << ',' << cell(rep.anchor_tax_mean[i]) << ',' << cell(rep.anchor_reg_mean[i]) << '\n';
}

void write_retrieval_csv(std::ostream& os, const RetrievalSummary& summary) {
    os << "anchor,neighbors,neighbor_tax,similarities,same_tax_hits\n";
    auto join = [](const auto& v, auto fmt) {
        std::string s;
        for (std::size_t k = 0; k < v.size(); ++k) {
            if (k) s += ' ';
            s += fmt(v[k]);
        }
        return s;
    };
    for (const auto& r : summary.records) {
        os << r.anchor << ',' << join(r.neighbors, [](std::size_t x) { return std::to_string(x); })
           << ',' << join(r.neighbor_tax, [](int x) { return std::to_string(x); }) << ','
           << join(r.similarities, [](double x) { return format_double(x); }) << ','
           << r.same_tax_hits << '\n';
    }
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows,
                     const std::vector<std::string>& hashes) {
    os << "alpha,seed,accuracy,train_accuracy,final_loss,config_hash\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& r = rows[k];
        os << format_double(r.alpha) << ',' << r.seed << ',' << format_double(r.accuracy) << ','
           << format_double(r.train_accuracy) << ',' << format_double(r.final_loss) << ','
           << (k < hashes.size() ? hashes[k] : std::string{}) << '\n';
    }
}

std::string spectrum_summary_json(const std::vector<SpectrumReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports) {
        json j = {{"subset", r.subset},
                  {"size", r.size},
                  {"centered", r.centered},
                  {"trace", r.trace},
                  {"eigenvalues", r.eigenvalues}};
        if (r.seed) j["seed"] = *r.seed;
        arr.push_back(std::move(j));
    }
    return json{{"spectra", arr}}.dump(2);
}

std::string cosine_summary_json(const CosineReport& rep) {
    return json{{"tax_mean", rep.tax_mean},
                {"reg_mean", rep.reg_mean},
                {"gap", rep.gap},
                {"tax_anchors", rep.tax_anchors},
                {"reg_anchors", rep.reg_anchors}}
        .dump(2);
}

std::string retrieval_summary_json(const RetrievalSummary& s) {
    const std::size_t k = s.records.empty() ? 0 : s.records.front().neighbors.size();
    return json{{"records", s.records.size()}, {"k", k}, {"hit_rate", s.hit_rate}}.dump(2);
}

}  // namespace taxcl
