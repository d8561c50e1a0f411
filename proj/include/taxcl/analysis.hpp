#pragma once

// Representation diagnostics: covariance spectra of row subsets, cosine
// similarity of anchors to taxonomic vs regular negatives, top-k cosine
// retrieval, and the alpha sweep of the combined loss.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taxcl/data.hpp"
#include "taxcl/losses.hpp"
#include "taxcl/model.hpp"
#include "taxcl/numerics.hpp"

namespace taxcl {

struct SubsetSelector {
    enum class Kind { all, taxonomy, indices };
    Kind kind = Kind::all;
    int taxonomy = 0;
    std::vector<std::size_t> rows;

    static SubsetSelector all() { return {}; }
    static SubsetSelector of_taxonomy(int t) { return {Kind::taxonomy, t, {}}; }
    static SubsetSelector of_rows(std::vector<std::size_t> r) {
        return {Kind::indices, 0, std::move(r)};
    }
    std::string describe() const;
};

struct SpectrumReport {
    std::string subset;  // "all", "taxonomy:<t>", "rows", "random"
    std::vector<double> eigenvalues;  // descending
    double trace = 0.0;
    std::size_t size = 0;  // rows used
    bool centered = false;
    std::optional<std::uint64_t> seed;  // random subsets only
};

// Eigenvalues of the covariance of the selected rows. With `matched_random`
// a second report covers an equal-size subset drawn uniformly without
// replacement from all rows, using `rng`.
std::vector<SpectrumReport> spectrum(const Matrix& r, std::span<const int> y_tax,
                                     const SubsetSelector& selector, bool matched_random,
                                     SeededRng& rng, bool centered = false);

struct CosineReport {
    std::vector<std::optional<double>> anchor_tax_mean;  // mean cosine to T(i)
    std::vector<std::optional<double>> anchor_reg_mean;  // mean cosine to regular negatives
    double tax_mean = 0.0;  // over anchors with nonempty T(i)
    double reg_mean = 0.0;  // over anchors with nonempty regular set
    double gap = 0.0;       // tax_mean - reg_mean
    std::size_t tax_anchors = 0;
    std::size_t reg_anchors = 0;
};

// Rows are unit-normalized internally; T(i)/regular sets come from
// decompose_supervised.
CosineReport cosine_gap(const Matrix& x, const std::vector<int>& y_gt,
                        const std::vector<int>& y_tax);

struct RetrievalRecord {
    std::size_t anchor = 0;
    std::vector<std::size_t> neighbors;  // best first
    std::vector<double> similarities;
    std::vector<int> neighbor_tax;
    std::size_t same_tax_hits = 0;
};

struct RetrievalSummary {
    std::vector<RetrievalRecord> records;
    double hit_rate = 0.0;  // same-taxonomy hits / (M k)
};

// Exact top-k by cosine similarity, ties to the lower index. The anchor and
// its view partner (when `view_pair` is given) are never returned.
RetrievalSummary retrieve(const Matrix& z, const std::vector<int>& y_tax, std::size_t k,
                          const std::vector<std::optional<std::size_t>>& view_pair = {});

struct SweepRow {
    double alpha = 0.0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;        // test-split probe accuracy
    double train_accuracy = 0.0;  // train-split probe accuracy
    double final_loss = 0.0;      // mean loss of the last pretraining epoch
    std::string cell_config;      // JSON of the cell's resolved train config
};

struct SweepOptions {
    // Refuse grids that do not bracket pure SupCon (0) and pure TaxCL (1).
    bool require_endpoints = true;
};

// Throws std::invalid_argument for an empty or out-of-range grid, a grid
// missing a required endpoint, or no seeds.
void validate_sweep_grid(const std::vector<double>& alpha_grid,
                         const std::vector<std::uint64_t>& seeds, const SweepOptions& opts = {});

// For every (alpha, seed): pretrain with the combined loss, probe, record.
// Rows come out alpha-major in grid order.
std::vector<SweepRow> alpha_sweep(const TaxonomyDataset& data, const MlpSpec& spec,
                                  const TrainConfig& base, const ProbeConfig& probe,
                                  const std::vector<double>& alpha_grid,
                                  const std::vector<std::uint64_t>& seeds,
                                  const SweepOptions& opts = {});

// Plot-ready CSV writers.
void write_spectrum_csv(std::ostream& os, const std::vector<SpectrumReport>& reports);
void write_cosine_csv(std::ostream& os, const CosineReport& report);
void write_retrieval_csv(std::ostream& os, const RetrievalSummary& summary);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows,
                     const std::vector<std::string>& config_hashes = {});

std::string spectrum_summary_json(const std::vector<SpectrumReport>& reports);
std::string cosine_summary_json(const CosineReport& report);
std::string retrieval_summary_json(const RetrievalSummary& summary);

}  // namespace taxcl
