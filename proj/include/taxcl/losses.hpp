#pragma once

// Contrastive losses over unit-norm embeddings and their exact gradients:
// SupCon, the taxonomy-reweighted loss (supervised and thresholded
// unsupervised), the hard-negative baseline that reweights every negative,
// and the alpha-blend of SupCon with the taxonomy loss.
//
// Every loss has the per-anchor form
//
//   l_i = -(1/|P(i)|) sum_{p in P(i)} log( exp(s_ip/tau) / D(i) )
//
// where s_ia = z_i . z_a and D(i) sums exp(s_ia/tau) over all a != i, except
// that the taxonomic negatives T(i) contribute a reweighted term instead of
// their plain sum.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "taxcl/batchdecomp.hpp"
#include "taxcl/numerics.hpp"

namespace taxcl {

enum class QMode {
    identity,             // plain sum, reduces to SupCon
    importance,           // sum_t beta_t u_t with beta_t = u_t / mean(u)
    importance_debiased,  // importance minus the tau_+ positive term, clamped to a floor
};

enum class LossVariant { supcon, taxcl_sup, taxcl_unsup, suphcl, combined };

enum class Reduction { mean, sum };

// Whether the tau_+ positive correction is subtracted from or added to the
// reweighted taxonomic sum.
enum class DebiasSign { subtract, add };

// What "multiplied by the batch size" scales the positive correction by.
enum class PositiveScale { taxonomic_set, batch };

struct LossConfig {
    double tau = 0.2;
    double tau_plus = 0.1;
    double alpha = 0.5;
    double epsilon = 0.5;
    QMode q_mode = QMode::importance_debiased;
    LossVariant variant = LossVariant::supcon;
    Reduction reduction = Reduction::mean;
    DebiasSign debias_sign = DebiasSign::subtract;
    PositiveScale positive_scale = PositiveScale::taxonomic_set;
    SimilarityNormalization normalization = SimilarityNormalization::min_max;

    void validate() const;
};

struct AnchorDiagnostics {
    bool skipped = false;  // empty P(i)
    std::size_t taxonomic_count = 0;
    std::optional<double> q;  // undefined when T(i) is empty or not reweighted
    bool clamped = false;
};

struct LossResult {
    LossVariant variant = LossVariant::supcon;
    double value = 0.0;
    Matrix grad;                     // dL/dz, same shape as the embeddings
    std::vector<double> per_anchor;  // l_i; 0 for skipped anchors
    std::vector<AnchorDiagnostics> diagnostics;
    std::size_t valid_anchors = 0;
    std::size_t skipped_anchors = 0;
    Reduction reduction = Reduction::mean;
    // combined only
    std::optional<double> supcon_value;
    std::optional<double> taxcl_value;
};

class LossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TaxTerm {
    double term = 0.0;
    double q = 1.0;  // term / sum(u)
    bool clamped = false;
    std::vector<double> d_term_d_u;  // partials w.r.t. each u_tax entry
    double d_term_d_pos_mean = 0.0;
};

// Reweighted contribution of one anchor's taxonomic negatives to D(i).
// `u_tax` holds exp(s_it/tau) values, `u_pos_mean` the mean of exp(s_ip/tau)
// over the positives. Inputs may be scaled by a common factor exp(-shift/tau);
// passing that shift keeps the clamp floor in the same units.
// `batch_size` is used only with PositiveScale::batch.
TaxTerm tax_term(double u_pos_mean, std::span<const double> u_tax, const LossConfig& cfg,
                 double log_shift = 0.0, std::size_t batch_size = 0);

LossResult supcon(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg);
LossResult taxcl_supervised(const LabeledBatch& batch, const Decomposition& decomp,
                            const LossConfig& cfg);
LossResult taxcl_unsupervised(const LabeledBatch& batch, const LossConfig& cfg);
LossResult suphcl(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg);
LossResult combined(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg);

// Dispatch on cfg.variant; builds the decomposition the variant needs.
LossResult compute_loss(const LabeledBatch& batch, const LossConfig& cfg);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t argmax_row = 0;
    std::size_t argmax_col = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central differences of f at x against `analytic`, error metric
// |a - b| / max(1, |a|, |b|).
GradCheckReport finite_diff_check(const std::function<double(const Matrix&)>& f, const Matrix& x,
                                  const Matrix& analytic, double h);

GradCheckReport finite_diff_check(LossVariant variant, const LabeledBatch& batch, LossConfig cfg,
                                  double h);

// {variant, value, per_anchor[], q_values[], clamp_flags[], skipped_anchors, ...}
std::string loss_diagnostics_json(const LossResult& result);

std::string to_string(QMode m);
std::string to_string(LossVariant v);
std::string to_string(Reduction r);
std::string to_string(DebiasSign s);
std::string to_string(PositiveScale s);
std::string to_string(SimilarityNormalization n);
QMode parse_q_mode(std::string_view s);
LossVariant parse_loss_variant(std::string_view s);
Reduction parse_reduction(std::string_view s);
DebiasSign parse_debias_sign(std::string_view s);
PositiveScale parse_positive_scale(std::string_view s);
SimilarityNormalization parse_similarity_normalization(std::string_view s);

}  // namespace taxcl
