#include "taxcl/batchdecomp.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

namespace taxcl {

bool LabeledBatch::has_labels() const noexcept {
    return y_gt.size() == size() && y_tax.size() == size();
}

bool LabeledBatch::has_view_pairs() const noexcept {
    return view_pair.size() == size() &&
           std::all_of(view_pair.begin(), view_pair.end(),
                       [](const auto& j) { return j.has_value(); });
}

void LabeledBatch::validate() const {
    const std::size_t m = size();
    if (m < 2) throw std::invalid_argument("batch needs at least 2 rows");
    if (!y_gt.empty() && y_gt.size() != m)
        throw std::invalid_argument("y_gt length does not match batch size");
    if (!y_tax.empty() && y_tax.size() != m)
        throw std::invalid_argument("y_tax length does not match batch size");
    for (int y : y_gt)
        if (y < 0) throw std::invalid_argument("negative y_gt label");
    for (int y : y_tax)
        if (y < 0) throw std::invalid_argument("negative y_tax label");
    if (!view_pair.empty()) {
        if (view_pair.size() != m)
            throw std::invalid_argument("view_pair length does not match batch size");
        for (std::size_t i = 0; i < m; ++i) {
            if (!view_pair[i]) continue;
            const std::size_t j = *view_pair[i];
            if (j >= m || j == i) throw std::invalid_argument("view_pair index out of range");
            if (!view_pair[j] || *view_pair[j] != i)
                throw std::invalid_argument("view_pair is not an involution at row " +
                                            std::to_string(i));
        }
    }
}

Decomposition decompose_supervised(const LabeledBatch& batch) {
    batch.validate();
    if (!batch.has_labels())
        throw std::invalid_argument("supervised decomposition needs y_gt and y_tax for every row");
    const std::size_t m = batch.size();
    Decomposition d;
    d.anchors.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        auto& sets = d.anchors[i];
        for (std::size_t a = 0; a < m; ++a) {
            if (a == i) continue;
            if (batch.y_gt[a] == batch.y_gt[i])
                sets.positives.push_back(a);
            else if (batch.y_tax[a] == batch.y_tax[i])
                sets.taxonomic.push_back(a);
            else
                sets.regular.push_back(a);
        }
    }
    return d;
}

NormalizedSimilarities normalize_similarities(const std::vector<double>& sims,
                                              SimilarityNormalization mode) {
    if (sims.empty()) throw std::invalid_argument("normalize_similarities: empty list");
    NormalizedSimilarities out;
    out.values.resize(sims.size());
    if (mode == SimilarityNormalization::affine) {
        for (std::size_t k = 0; k < sims.size(); ++k) out.values[k] = 0.5 * (sims[k] + 1.0);
        return out;
    }
    const auto [lo, hi] = std::minmax_element(sims.begin(), sims.end());
    const double range = *hi - *lo;
    if (range < 1e-12) {
        out.degenerate = true;
        return out;  // all zeros
    }
    for (std::size_t k = 0; k < sims.size(); ++k) out.values[k] = (sims[k] - *lo) / range;
    return out;
}

Decomposition decompose_unsupervised(const LabeledBatch& batch, double epsilon,
                                     SimilarityNormalization mode) {
    batch.validate();
    if (!batch.has_view_pairs())
        throw std::invalid_argument("unsupervised decomposition needs a view pair for every row");
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
        throw std::invalid_argument("epsilon must lie in [0, 1]");

    const Matrix& z = batch.embeddings;
    const std::size_t m = batch.size();
    Decomposition d;
    d.anchors.resize(m);
    std::vector<std::size_t> candidates;
    std::vector<double> sims;
    for (std::size_t i = 0; i < m; ++i) {
        auto& sets = d.anchors[i];
        const std::size_t partner = *batch.view_pair[i];
        sets.positives.push_back(partner);

        candidates.clear();
        sims.clear();
        for (std::size_t a = 0; a < m; ++a) {
            if (a == i || a == partner) continue;
            candidates.push_back(a);
            sims.push_back(dot(z.row(i), z.row(a)));
        }
        if (candidates.empty()) continue;

        const auto normalized = normalize_similarities(sims, mode);
        sets.degenerate = normalized.degenerate;
        for (std::size_t k = 0; k < candidates.size(); ++k) {
            if (!normalized.degenerate && normalized.values[k] > epsilon)
                sets.taxonomic.push_back(candidates[k]);
            else
                sets.regular.push_back(candidates[k]);
        }
    }
    return d;
}

std::string decomposition_to_jsonl(const Decomposition& d) {
    std::string out;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& a = d[i];
        nlohmann::json rec = {{"anchor", i},
                              {"positives", a.positives},
                              {"taxonomic", a.taxonomic},
                              {"regular", a.regular},
                              {"degenerate", a.degenerate}};
        out += rec.dump();
        out += '\n';
    }
    return out;
}

}  // namespace taxcl
