#pragma once

// Per-anchor partition of a batch into positives P(i), taxonomic negatives
// T(i) and regular negatives. Supervised mode reads the class/taxonomy
// labels; unsupervised mode thresholds normalized anchor similarities.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "taxcl/numerics.hpp"

namespace taxcl {

struct LabeledBatch {
    Matrix embeddings;                                   // M rows
    std::vector<int> y_gt;                               // class label per row
    std::vector<int> y_tax;                              // taxonomy label per row
    std::vector<std::optional<std::size_t>> view_pair;   // j(i); empty vector = no pairing

    std::size_t size() const noexcept { return embeddings.rows(); }
    bool has_labels() const noexcept;
    bool has_view_pairs() const noexcept;
    // Throws std::invalid_argument when shapes or the pairing are inconsistent.
    void validate() const;
};

struct AnchorSets {
    std::vector<std::size_t> positives;
    std::vector<std::size_t> taxonomic;
    std::vector<std::size_t> regular;
    bool degenerate = false;  // unsupervised: constant similarities, nothing thresholded

    friend bool operator==(const AnchorSets&, const AnchorSets&) = default;
};

struct Decomposition {
    std::vector<AnchorSets> anchors;

    std::size_t size() const noexcept { return anchors.size(); }
    const AnchorSets& operator[](std::size_t i) const { return anchors[i]; }

    friend bool operator==(const Decomposition&, const Decomposition&) = default;
};

Decomposition decompose_supervised(const LabeledBatch& batch);

// Maps one anchor's negative similarities onto [0, 1].
enum class SimilarityNormalization {
    min_max,  // (s - min) / (max - min)
    affine,   // (s + 1) / 2, assumes cosine similarities in [-1, 1]
};

struct NormalizedSimilarities {
    std::vector<double> values;
    bool degenerate = false;  // max - min < 1e-12 under min_max; values all 0
};

NormalizedSimilarities normalize_similarities(
    const std::vector<double>& sims,
    SimilarityNormalization mode = SimilarityNormalization::min_max);

// P(i) = {j(i)}; every other row whose normalized similarity to the anchor is
// strictly greater than epsilon goes to T(i).
Decomposition decompose_unsupervised(
    const LabeledBatch& batch, double epsilon,
    SimilarityNormalization mode = SimilarityNormalization::min_max);

// One JSON object per anchor and line: {"anchor":i,"positives":[..],...}.
std::string decomposition_to_jsonl(const Decomposition& d);

}  // namespace taxcl
