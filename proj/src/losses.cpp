#include "taxcl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace taxcl {

void LossConfig::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("tau must be > 0");
    if (!(tau_plus >= 0.0 && tau_plus < 1.0))
        throw std::invalid_argument("tau_plus must lie in [0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
        throw std::invalid_argument("epsilon must lie in [0, 1]");
}

TaxTerm tax_term(double u_pos_mean, std::span<const double> u_tax, const LossConfig& cfg,
                 double log_shift, std::size_t batch_size) {
    if (u_tax.empty()) throw std::invalid_argument("tax_term: empty taxonomic set");
    const double n = static_cast<double>(u_tax.size());
    double s1 = 0.0;
    double s2 = 0.0;
    for (double u : u_tax) {
        s1 += u;
        s2 += u * u;
    }

    TaxTerm out;
    out.d_term_d_u.assign(u_tax.size(), 1.0);
    if (cfg.q_mode == QMode::identity) {
        out.term = s1;
        out.q = 1.0;
        return out;
    }

    // sum_t beta_t u_t with beta_t = u_t / mean(u)
    const double importance = n * s2 / s1;
    for (std::size_t k = 0; k < u_tax.size(); ++k)
        out.d_term_d_u[k] = n * (2.0 * u_tax[k] * s1 - s2) / (s1 * s1);

    if (cfg.q_mode == QMode::importance) {
        out.term = importance;
        out.q = importance / s1;
        return out;
    }

    const double scale = cfg.positive_scale == PositiveScale::batch
                             ? static_cast<double>(batch_size)
                             : n;
    const double sign = cfg.debias_sign == DebiasSign::subtract ? -1.0 : 1.0;
    const double inv = 1.0 / (1.0 - cfg.tau_plus);
    const double raw = (importance + sign * scale * cfg.tau_plus * u_pos_mean) * inv;
    const double floor = n * std::exp((-1.0 - log_shift) / cfg.tau);
    if (raw < floor) {
        out.term = floor;
        out.clamped = true;
        std::fill(out.d_term_d_u.begin(), out.d_term_d_u.end(), 0.0);
        out.d_term_d_pos_mean = 0.0;
    } else {
        out.term = raw;
        for (double& g : out.d_term_d_u) g *= inv;
        out.d_term_d_pos_mean = sign * scale * cfg.tau_plus * inv;
    }
    out.q = out.term / s1;
    return out;
}

namespace {

// Shared engine. With `reweight` the anchor's T(i) set enters D(i) through
// tax_term; otherwise every non-anchor row contributes its plain exponential
// and the T/regular split is ignored. Identity q_mode takes the plain path so
// that it reproduces SupCon bit for bit.
LossResult contrastive_engine(const Matrix& z, const Decomposition& decomp, const LossConfig& cfg,
                              bool reweight, LossVariant tag) {
    cfg.validate();
    const std::size_t m = z.rows();
    if (decomp.size() != m) throw std::invalid_argument("decomposition size does not match batch");
    const Matrix s = gram(z);
    const double tau = cfg.tau;

    LossResult res;
    res.variant = tag;
    res.reduction = cfg.reduction;
    res.per_anchor.assign(m, 0.0);
    res.diagnostics.resize(m);

    Matrix coef(m, m);  // coef(i, a) = d l_i / d s_ia
    std::vector<double> u(m);
    std::vector<char> in_tax(m);
    std::vector<double> u_tax;

    for (std::size_t i = 0; i < m; ++i) {
        const AnchorSets& sets = decomp[i];
        auto& diag = res.diagnostics[i];
        diag.taxonomic_count = sets.taxonomic.size();
        if (sets.positives.empty()) {
            diag.skipped = true;
            ++res.skipped_anchors;
            continue;
        }
        ++res.valid_anchors;

        double shift = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < m; ++a)
            if (a != i) shift = std::max(shift, s(i, a));
        for (std::size_t a = 0; a < m; ++a) u[a] = a == i ? 0.0 : std::exp((s(i, a) - shift) / tau);

        const bool use_term =
            reweight && cfg.q_mode != QMode::identity && !sets.taxonomic.empty();
        std::fill(in_tax.begin(), in_tax.end(), 0);
        if (use_term)
            for (std::size_t t : sets.taxonomic) in_tax[t] = 1;

        double denom = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            if (a != i && !in_tax[a]) denom += u[a];

        const double n_pos = static_cast<double>(sets.positives.size());
        TaxTerm term;
        if (use_term) {
            u_tax.clear();
            for (std::size_t t : sets.taxonomic) u_tax.push_back(u[t]);
            double pos_mean = 0.0;
            for (std::size_t p : sets.positives) pos_mean += u[p];
            pos_mean /= n_pos;
            term = tax_term(pos_mean, u_tax, cfg, shift, m);
            denom += term.term;
            diag.q = term.q;
            diag.clamped = term.clamped;
        } else if (reweight && !sets.taxonomic.empty()) {
            diag.q = 1.0;
        }

        double pos_logit = 0.0;
        for (std::size_t p : sets.positives) pos_logit += (s(i, p) - shift) / tau;
        pos_logit /= n_pos;
        res.per_anchor[i] = std::log(denom) - pos_logit;

        // d l_i / d s_ia = (u_a / tau) (dD/du_a) / D - [a in P] / (|P| tau)
        const double inv_tau_denom = 1.0 / (tau * denom);
        for (std::size_t a = 0; a < m; ++a)
            if (a != i && !in_tax[a]) coef(i, a) = u[a] * inv_tau_denom;
        if (use_term) {
            for (std::size_t k = 0; k < sets.taxonomic.size(); ++k) {
                const std::size_t t = sets.taxonomic[k];
                coef(i, t) = term.d_term_d_u[k] * u[t] * inv_tau_denom;
            }
            const double via_mean = term.d_term_d_pos_mean / n_pos;
            for (std::size_t p : sets.positives) coef(i, p) += via_mean * u[p] * inv_tau_denom;
        }
        for (std::size_t p : sets.positives) coef(i, p) -= 1.0 / (n_pos * tau);
    }

    if (res.valid_anchors == 0) throw LossError("no valid anchors");

    const double weight =
        cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(res.valid_anchors) : 1.0;
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) total += res.per_anchor[i];
    res.value = total * weight;

    const std::size_t d = z.cols();
    res.grad = Matrix(m, d);
    for (std::size_t i = 0; i < m; ++i) {
        auto gi = res.grad.row(i);
        for (std::size_t a = 0; a < m; ++a) {
            if (a == i) continue;
            const double c = weight * (coef(i, a) + coef(a, i));
            if (c == 0.0) continue;
            const auto za = z.row(a);
            for (std::size_t k = 0; k < d; ++k) gi[k] += c * za[k];
        }
    }
    return res;
}

Decomposition all_negatives_taxonomic(const Decomposition& decomp) {
    Decomposition out = decomp;
    for (auto& sets : out.anchors) {
        sets.taxonomic.insert(sets.taxonomic.end(), sets.regular.begin(), sets.regular.end());
        std::sort(sets.taxonomic.begin(), sets.taxonomic.end());
        sets.regular.clear();
    }
    return out;
}

}  // namespace

LossResult supcon(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg) {
    return contrastive_engine(batch.embeddings, decomp, cfg, false, LossVariant::supcon);
}

LossResult taxcl_supervised(const LabeledBatch& batch, const Decomposition& decomp,
                            const LossConfig& cfg) {
    return contrastive_engine(batch.embeddings, decomp, cfg, true, LossVariant::taxcl_sup);
}

LossResult taxcl_unsupervised(const LabeledBatch& batch, const LossConfig& cfg) {
    cfg.validate();
    const Decomposition decomp = decompose_unsupervised(batch, cfg.epsilon, cfg.normalization);
    return contrastive_engine(batch.embeddings, decomp, cfg, true, LossVariant::taxcl_unsup);
}

LossResult suphcl(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg) {
    return contrastive_engine(batch.embeddings, all_negatives_taxonomic(decomp), cfg, true,
                              LossVariant::suphcl);
}

LossResult combined(const LabeledBatch& batch, const Decomposition& decomp, const LossConfig& cfg) {
    const LossResult base = supcon(batch, decomp, cfg);
    LossResult tax = taxcl_supervised(batch, decomp, cfg);
    const double a = cfg.alpha;
    const double b = 1.0 - a;

    LossResult out = std::move(tax);
    out.variant = LossVariant::combined;
    out.supcon_value = base.value;
    out.taxcl_value = out.value;
    out.value = b * base.value + a * out.value;
    for (std::size_t k = 0; k < out.per_anchor.size(); ++k)
        out.per_anchor[k] = b * base.per_anchor[k] + a * out.per_anchor[k];
    auto& g = out.grad.data();
    const auto& g0 = base.grad.data();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = b * g0[k] + a * g[k];
    return out;
}

LossResult compute_loss(const LabeledBatch& batch, const LossConfig& cfg) {
    if (cfg.variant == LossVariant::taxcl_unsup) return taxcl_unsupervised(batch, cfg);
    const Decomposition decomp = decompose_supervised(batch);
    switch (cfg.variant) {
        case LossVariant::supcon: return supcon(batch, decomp, cfg);
        case LossVariant::taxcl_sup: return taxcl_supervised(batch, decomp, cfg);
        case LossVariant::suphcl: return suphcl(batch, decomp, cfg);
        case LossVariant::combined: return combined(batch, decomp, cfg);
        case LossVariant::taxcl_unsup: break;
    }
    throw std::logic_error("unreachable loss variant");
}

GradCheckReport finite_diff_check(const std::function<double(const Matrix&)>& f, const Matrix& x,
                                  const Matrix& analytic, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("finite_diff_check: h outside [1e-7, 1e-3]");
    if (analytic.rows() != x.rows() || analytic.cols() != x.cols())
        throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
    GradCheckReport rep;
    Matrix probe = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double orig = probe(r, c);
            probe(r, c) = orig + h;
            const double up = f(probe);
            probe(r, c) = orig - h;
            const double down = f(probe);
            probe(r, c) = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic(r, c);
            const double err =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > rep.max_rel_err || (r == 0 && c == 0)) {
                rep.max_rel_err = err;
                rep.argmax_row = r;
                rep.argmax_col = c;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

GradCheckReport finite_diff_check(LossVariant variant, const LabeledBatch& batch, LossConfig cfg,
                                  double h) {
    cfg.variant = variant;
    const LossResult base = compute_loss(batch, cfg);
    LabeledBatch work = batch;
    auto f = [&](const Matrix& z) {
        work.embeddings = z;
        return compute_loss(work, cfg).value;
    };
    return finite_diff_check(f, batch.embeddings, base.grad, h);
}

std::string loss_diagnostics_json(const LossResult& r) {
    nlohmann::json q = nlohmann::json::array();
    nlohmann::json clamp = nlohmann::json::array();
    nlohmann::json tax_counts = nlohmann::json::array();
    for (const auto& d : r.diagnostics) {
        q.push_back(d.q ? nlohmann::json(*d.q) : nlohmann::json(nullptr));
        clamp.push_back(d.clamped);
        tax_counts.push_back(d.taxonomic_count);
    }
    nlohmann::json j = {{"variant", to_string(r.variant)},
                        {"value", r.value},
                        {"reduction", to_string(r.reduction)},
                        {"per_anchor", r.per_anchor},
                        {"q_values", q},
                        {"clamp_flags", clamp},
                        {"taxonomic_counts", tax_counts},
                        {"valid_anchors", r.valid_anchors},
                        {"skipped_anchors", r.skipped_anchors}};
    if (r.supcon_value) j["supcon_value"] = *r.supcon_value;
    if (r.taxcl_value) j["taxcl_value"] = *r.taxcl_value;
    return j.dump();
}

// --- names -----------------------------------------------------------------

std::string to_string(QMode m) {
    switch (m) {
        case QMode::identity: return "identity";
        case QMode::importance: return "importance";
        case QMode::importance_debiased: return "importance-debiased";
    }
    return "?";
}

std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::supcon: return "supcon";
        case LossVariant::taxcl_sup: return "taxcl";
        case LossVariant::taxcl_unsup: return "taxcl-unsup";
        case LossVariant::suphcl: return "suphcl";
        case LossVariant::combined: return "combined";
    }
    return "?";
}

std::string to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }
std::string to_string(DebiasSign s) { return s == DebiasSign::subtract ? "subtract" : "add"; }
std::string to_string(PositiveScale s) {
    return s == PositiveScale::taxonomic_set ? "taxonomic-set" : "batch";
}
std::string to_string(SimilarityNormalization n) {
    return n == SimilarityNormalization::min_max ? "min-max" : "affine";
}

namespace {

[[noreturn]] void bad_name(std::string_view what, std::string_view s) {
    throw std::invalid_argument("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

}  // namespace

QMode parse_q_mode(std::string_view s) {
    if (s == "identity") return QMode::identity;
    if (s == "importance") return QMode::importance;
    if (s == "importance-debiased" || s == "importance_debiased") return QMode::importance_debiased;
    bad_name("q-mode", s);
}

LossVariant parse_loss_variant(std::string_view s) {
    if (s == "supcon") return LossVariant::supcon;
    if (s == "taxcl" || s == "taxcl-sup" || s == "taxcl_sup") return LossVariant::taxcl_sup;
    if (s == "taxcl-unsup" || s == "taxcl_unsup") return LossVariant::taxcl_unsup;
    if (s == "suphcl") return LossVariant::suphcl;
    if (s == "combined") return LossVariant::combined;
    bad_name("loss variant", s);
}

Reduction parse_reduction(std::string_view s) {
    if (s == "mean") return Reduction::mean;
    if (s == "sum") return Reduction::sum;
    bad_name("reduction", s);
}

DebiasSign parse_debias_sign(std::string_view s) {
    if (s == "subtract") return DebiasSign::subtract;
    if (s == "add") return DebiasSign::add;
    bad_name("debias sign", s);
}

PositiveScale parse_positive_scale(std::string_view s) {
    if (s == "taxonomic-set" || s == "taxonomic_set") return PositiveScale::taxonomic_set;
    if (s == "batch") return PositiveScale::batch;
    bad_name("positive scale", s);
}

SimilarityNormalization parse_similarity_normalization(std::string_view s) {
    if (s == "min-max" || s == "min_max") return SimilarityNormalization::min_max;
    if (s == "affine") return SimilarityNormalization::affine;
    bad_name("similarity normalization", s);
}

}  // namespace taxcl
