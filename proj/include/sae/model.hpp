#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sae/direct.hpp"
#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/link.hpp"

namespace sae {

enum class Family { gaussian, poisson, binomial, negative_binomial, beta_binomial };

inline std::string to_string(Family f) {
    switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::poisson: return "poisson";
    case Family::binomial: return "binomial";
    case Family::negative_binomial: return "negative_binomial";
    case Family::beta_binomial: return "beta_binomial";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    if (s == "gaussian" || s == "fay_herriot" || s == "gaussian-fixed-variance") return Family::gaussian;
    if (s == "poisson") return Family::poisson;
    if (s == "binomial") return Family::binomial;
    if (s == "negative_binomial" || s == "nbinomial" || s == "negbin") return Family::negative_binomial;
    if (s == "beta_binomial" || s == "betabinomial") return Family::beta_binomial;
    throw std::invalid_argument("unknown family '" + s + "'");
}

inline bool has_overdispersion(Family f) {
    return f == Family::negative_binomial || f == Family::beta_binomial;
}

/// One (latent cell, weight) pair of a population-weighted aggregation row.
struct AggTerm {
    std::size_t cell = 0;
    double weight = 0.0;
};

/// A single likelihood contribution. With `terms` empty the observation is
/// indexed directly at latent cell `cell`; otherwise its predictor is the
/// link of the weighted average of the terms' natural-scale means.
struct Observation {
    std::size_t cell = 0;
    std::vector<AggTerm> terms;
    double y = 0.0;
    double exposure = 1.0; // exposure (poisson, negative binomial) or trials (binomial types)
    double variance = 0.0; // sampling variance for the gaussian family

    bool aggregated() const { return !terms.empty(); }
};

enum class FactorCoding { fixed, random };

/// A categorical grouping factor entering the cell predictors additively.
struct GroupFactor {
    std::string name;
    std::vector<std::string> levels;
    FactorCoding coding = FactorCoding::fixed;
};

/// Largest level count coded as fixed effects under automatic coding.
inline constexpr std::size_t kMaxFixedLevels = 6;

struct LatentFieldSpec {
    bool intercept = true;
    std::vector<std::string> covariate_names;
    /// Raw covariates, one row per subarea (hierarchy order).
    Eigen::MatrixXd covariates;
    bool bym2 = true;
    std::shared_ptr<const ScaledStructure> structure;
    std::size_t n_subareas = 0;
    /// Group labels; latent cells are (subarea, group) in subarea-major order.
    std::vector<std::string> groups{"all"};
    std::vector<GroupFactor> factors;
    /// group_levels[g][f]: level index of factor f for group g.
    std::vector<std::vector<std::size_t>> group_levels;

    std::size_t n_groups() const { return groups.size(); }
    std::size_t n_cells() const { return n_subareas * groups.size(); }
    std::size_t cell(std::size_t subarea, std::size_t group) const { return subarea * groups.size() + group; }
};

struct PriorSettings {
    double fixed_effect_precision = 0.001;
    double pc_sigma_u = 1.0;       // Pr(sigma_b > u) = alpha
    double pc_sigma_alpha = 0.01;
    double pc_kappa_u = 0.5;       // Pr(kappa > u) = alpha
    double pc_kappa_alpha = 0.5;
    double pc_phi_u = 1.0;         // Pr(1/phi > u) = alpha
    double pc_phi_alpha = 0.01;
    double pc_group_u = 1.0;       // Pr(sigma_f > u) = alpha
    double pc_group_alpha = 0.01;
};

enum class HyperTreatment { fixed, optimized, grid };

inline HyperTreatment parse_treatment(const std::string& s) {
    if (s == "fixed") return HyperTreatment::fixed;
    if (s == "optimized" || s == "optimize" || s == "mode") return HyperTreatment::optimized;
    if (s == "grid") return HyperTreatment::grid;
    throw std::invalid_argument("unknown hyperparameter treatment '" + s + "'");
}

/// Hyperparameters on their natural scale.
struct HyperParams {
    double sigma_b = 0.5;
    double kappa = 0.5;
    double phi = 10.0;
    std::vector<double> group_sd; // one per random factor, in factor order
};

/// Which hyperparameters are held at their given values.
struct HyperFixed {
    bool sigma_b = false;
    bool kappa = false;
    bool phi = false;
    bool group = false;
};

struct ModelSpec {
    Family family = Family::gaussian;
    Link link = Link::logit;
    LatentFieldSpec latent;
    std::vector<Observation> observations;
    GeoLevel geo_level = GeoLevel::fine;
    /// Covariates were supplied per coarse area rather than per subarea.
    bool covariates_coarse = false;
    PriorSettings priors;
    HyperTreatment treatment = HyperTreatment::optimized;
    HyperParams hyper;
    HyperFixed fixed;

    bool has_aggregation() const {
        return std::any_of(observations.begin(), observations.end(), [](const Observation& o) { return o.aggregated(); });
    }
};

/// Applies every cross-field validity rule; throws ValidationError naming the
/// violated rule. Returns the spec unchanged when it passes.
inline const ModelSpec& validate(const ModelSpec& spec) {
    const bool agg = spec.has_aggregation();
    if (spec.link == Link::identity && spec.family != Family::gaussian) {
        if (agg)
            throw ValidationError("identity-link-aggregation",
                                  "identity link with aggregation is only valid for the gaussian family: "
                                  "linearizing the aggregated mean under an identity link breaks the "
                                  "positivity/validity of the linearized predictor; use the " +
                                      std::string(spec.family == Family::poisson ||
                                                          spec.family == Family::negative_binomial
                                                      ? "log"
                                                      : "logit") +
                                      " link");
        throw ValidationError("identity-link-family", "identity link requires the gaussian family");
    }
    if ((spec.family == Family::poisson || spec.family == Family::negative_binomial) && spec.link != Link::log)
        throw ValidationError("family-link", to_string(spec.family) + " requires the log link");
    if ((spec.family == Family::binomial || spec.family == Family::beta_binomial) && spec.link != Link::logit)
        throw ValidationError("family-link", to_string(spec.family) + " requires the logit link");
    if (agg && spec.covariates_coarse)
        throw ValidationError("coarse-covariates",
                              "disaggregation requires covariates indexed at the subarea level");
    const auto& lat = spec.latent;
    if (lat.n_subareas == 0) throw ValidationError("layout", "no subareas");
    if (lat.groups.empty()) throw ValidationError("layout", "no groups");
    if (lat.covariates.cols() != Eigen::Index(lat.covariate_names.size()))
        throw ValidationError("layout", "covariate names do not match covariate columns");
    if (lat.covariates.cols() > 0 && lat.covariates.rows() != Eigen::Index(lat.n_subareas))
        throw ValidationError("layout", "covariates must have one row per subarea");
    if (lat.bym2 && (!lat.structure || lat.structure->precision.rows() != Eigen::Index(lat.n_subareas)))
        throw ValidationError("layout", "BYM2 effect needs a scaled structure over the subareas");
    if (!lat.factors.empty()) {
        if (lat.group_levels.size() != lat.groups.size())
            throw ValidationError("layout", "group_levels must list every group");
        for (const auto& gl : lat.group_levels) {
            if (gl.size() != lat.factors.size()) throw ValidationError("layout", "group_levels arity mismatch");
            for (std::size_t f = 0; f < gl.size(); ++f)
                if (gl[f] >= lat.factors[f].levels.size())
                    throw ValidationError("layout", "group level out of range for factor " + lat.factors[f].name);
        }
    }
    const std::size_t ncell = lat.n_cells();
    for (std::size_t r = 0; r < spec.observations.size(); ++r) {
        const auto& o = spec.observations[r];
        const std::string where = "observation " + std::to_string(r);
        if (o.aggregated()) {
            double s = 0.0;
            for (const auto& t : o.terms) {
                if (t.cell >= ncell) throw ValidationError("aggregation-cell", where + ": cell out of range");
                if (!(t.weight >= 0.0)) throw ValidationError("aggregation-weights", where + ": negative weight");
                s += t.weight;
            }
            if (std::abs(s - 1.0) > 1e-12)
                throw ValidationError("aggregation-weights",
                                      where + ": aggregation weights sum to " + std::to_string(s) + ", not 1");
        } else if (o.cell >= ncell) {
            throw ValidationError("observation-cell", where + ": cell out of range");
        }
        switch (spec.family) {
        case Family::gaussian:
            if (!(o.variance > 0.0) || !std::isfinite(o.variance))
                throw ValidationError("gaussian-variance", where + ": sampling variance must be positive");
            break;
        case Family::poisson:
        case Family::negative_binomial:
            if (!(o.exposure > 0.0)) throw ValidationError("exposure", where + ": exposure must be positive");
            if (o.y < 0.0) throw ValidationError("count", where + ": negative count");
            break;
        case Family::binomial:
        case Family::beta_binomial:
            if (!(o.exposure > 0.0) || o.y < 0.0 || o.y > o.exposure)
                throw ValidationError("trials", where + ": need 0 <= y <= trials, trials > 0");
            break;
        }
    }
    if (has_overdispersion(spec.family) && !(spec.hyper.phi > 0.0))
        throw ValidationError("overdispersion", to_string(spec.family) + " requires phi > 0");
    return spec;
}

/// Column positions of the stacked latent vector
/// u = (intercept, covariates, BYM2 iid e, BYM2 ICAR S, factor effects).
struct LatentLayout {
    std::size_t dim = 0;
    std::optional<std::size_t> intercept;
    std::size_t cov_begin = 0, n_cov = 0;
    std::size_t e_begin = 0, s_begin = 0, n_spatial = 0;
    bool bym2 = false;
    struct FactorBlock {
        FactorCoding coding;
        std::size_t begin = 0;
        std::size_t n_cols = 0;
        std::size_t random_index = 0; // index into HyperParams::group_sd
    };
    std::vector<FactorBlock> factors;
    std::size_t n_random_factors = 0;
    /// Columns that carry the fixed-effect prior precision.
    std::vector<std::size_t> fixed_columns;
};

/// Scale that multiplies a design entry under given hyperparameters.
enum class EntryScale : unsigned char { one, iid, icar, factor };

struct DesignEntry {
    std::size_t col;
    double value;
    EntryScale scale;
    std::size_t factor = 0; // random-factor index when scale == factor
};

/// Hyperparameter-free description of A(theta): each cell's predictor is
/// sum(value * scale(theta) * u[col]).
struct Design {
    LatentLayout layout;
    std::vector<std::vector<DesignEntry>> rows;
    Eigen::VectorXd cov_mean, cov_sd; // standardization of the raw covariates
    SpMat prior_precision;            // theta-free by construction (non-centered effects)
    SpMat constraints;                // one sum-to-zero row per constrained ICAR component

    std::size_t n_cells() const { return rows.size(); }
    std::size_t dim() const { return layout.dim; }
};

inline double entry_scale(const DesignEntry& e, const HyperParams& th) {
    switch (e.scale) {
    case EntryScale::one: return 1.0;
    case EntryScale::iid: return th.sigma_b * std::sqrt(1.0 - th.kappa);
    case EntryScale::icar: return th.sigma_b * std::sqrt(th.kappa);
    case EntryScale::factor: return th.group_sd.at(e.factor);
    }
    return 1.0;
}

/// Builds the latent layout, design template, prior precision and constraints.
/// Covariates are centered and scaled internally.
inline Design build_design(const ModelSpec& spec) {
    const auto& lat = spec.latent;
    Design d;
    auto& L = d.layout;
    std::size_t col = 0;
    if (lat.intercept) {
        L.intercept = col++;
        L.fixed_columns.push_back(*L.intercept);
    }
    L.cov_begin = col;
    L.n_cov = std::size_t(lat.covariates.cols());
    col += L.n_cov;
    for (std::size_t k = 0; k < L.n_cov; ++k) L.fixed_columns.push_back(L.cov_begin + k);
    L.bym2 = lat.bym2;
    if (lat.bym2) {
        L.n_spatial = lat.n_subareas;
        L.e_begin = col;
        col += L.n_spatial;
        L.s_begin = col;
        col += L.n_spatial;
    }
    for (const auto& f : lat.factors) {
        LatentLayout::FactorBlock b;
        b.coding = f.coding;
        b.begin = col;
        if (f.coding == FactorCoding::fixed) {
            b.n_cols = f.levels.size() - 1;
            for (std::size_t k = 0; k < b.n_cols; ++k) L.fixed_columns.push_back(col + k);
        } else {
            b.n_cols = f.levels.size();
            b.random_index = L.n_random_factors++;
        }
        col += b.n_cols;
        L.factors.push_back(b);
    }
    L.dim = col;

    // Standardized covariates.
    const Eigen::Index p = lat.covariates.cols();
    d.cov_mean = Eigen::VectorXd::Zero(p);
    d.cov_sd = Eigen::VectorXd::Ones(p);
    Eigen::MatrixXd xs = lat.covariates;
    for (Eigen::Index k = 0; k < p; ++k) {
        for (Eigen::Index j = 0; j < xs.rows(); ++j)
            if (!std::isfinite(xs(j, k)))
                throw DataError("missing covariate '" + lat.covariate_names[k] + "' for subarea index " +
                                std::to_string(j));
        const double m = xs.col(k).mean();
        const double sd = std::sqrt((xs.col(k).array() - m).square().sum() / std::max<double>(1.0, double(xs.rows() - 1)));
        if (!(sd > 0.0)) throw DataError("covariate '" + lat.covariate_names[k] + "' is constant");
        d.cov_mean(k) = m;
        d.cov_sd(k) = sd;
        xs.col(k) = (xs.col(k).array() - m) / sd;
    }

    d.rows.resize(lat.n_cells());
    for (std::size_t j = 0; j < lat.n_subareas; ++j) {
        for (std::size_t g = 0; g < lat.n_groups(); ++g) {
            auto& row = d.rows[lat.cell(j, g)];
            if (L.intercept) row.push_back({*L.intercept, 1.0, EntryScale::one});
            for (std::size_t k = 0; k < L.n_cov; ++k)
                row.push_back({L.cov_begin + k, xs(Eigen::Index(j), Eigen::Index(k)), EntryScale::one});
            if (L.bym2) {
                row.push_back({L.e_begin + j, 1.0, EntryScale::iid});
                row.push_back({L.s_begin + j, 1.0, EntryScale::icar});
            }
            for (std::size_t f = 0; f < lat.factors.size(); ++f) {
                const std::size_t level = lat.group_levels[g][f];
                const auto& b = L.factors[f];
                if (b.coding == FactorCoding::fixed) {
                    if (level > 0) row.push_back({b.begin + level - 1, 1.0, EntryScale::one});
                } else {
                    row.push_back({b.begin + level, 1.0, EntryScale::factor, b.random_index});
                }
            }
        }
    }

    std::vector<Triplet> q;
    for (auto c : L.fixed_columns) q.emplace_back(c, c, spec.priors.fixed_effect_precision);
    if (L.bym2) {
        for (std::size_t j = 0; j < L.n_spatial; ++j) q.emplace_back(L.e_begin + j, L.e_begin + j, 1.0);
        const auto& s = *lat.structure;
        for (int k = 0; k < s.precision.outerSize(); ++k)
            for (SpMat::InnerIterator it(s.precision, k); it; ++it)
                q.emplace_back(L.s_begin + it.row(), L.s_begin + it.col(), it.value());
        for (std::size_t j = 0; j < L.n_spatial; ++j)
            if (s.singleton[j]) q.emplace_back(L.s_begin + j, L.s_begin + j, 1.0);
    }
    for (const auto& b : L.factors)
        if (b.coding == FactorCoding::random)
            for (std::size_t k = 0; k < b.n_cols; ++k) q.emplace_back(b.begin + k, b.begin + k, 1.0);
    d.prior_precision.resize(Eigen::Index(L.dim), Eigen::Index(L.dim));
    d.prior_precision.setFromTriplets(q.begin(), q.end());

    std::vector<Triplet> c;
    std::size_t nc = 0;
    if (L.bym2) {
        const auto& s = *lat.structure;
        for (auto comp : s.constrained_components()) {
            for (auto j : s.components[comp]) c.emplace_back(nc, L.s_begin + j, 1.0);
            ++nc;
        }
    }
    d.constraints.resize(Eigen::Index(nc), Eigen::Index(L.dim));
    d.constraints.setFromTriplets(c.begin(), c.end());
    return d;
}

/// A(theta): cells x latent dimension.
inline SpMat design_matrix(const Design& d, const HyperParams& th) {
    std::vector<Triplet> t;
    for (std::size_t r = 0; r < d.rows.size(); ++r)
        for (const auto& e : d.rows[r]) t.emplace_back(r, e.col, e.value * entry_scale(e, th));
    SpMat a(Eigen::Index(d.rows.size()), Eigen::Index(d.dim()));
    a.setFromTriplets(t.begin(), t.end());
    return a;
}

/// Cell predictors A(theta) u without materializing A.
inline Eigen::VectorXd cell_predictors(const Design& d, const HyperParams& th, const Eigen::VectorXd& u) {
    if (u.size() != Eigen::Index(d.dim())) throw std::invalid_argument("latent vector has wrong dimension");
    Eigen::VectorXd eta(Eigen::Index(d.rows.size()));
    for (std::size_t r = 0; r < d.rows.size(); ++r) {
        double s = 0.0;
        for (const auto& e : d.rows[r]) s += e.value * entry_scale(e, th) * u(Eigen::Index(e.col));
        eta(Eigen::Index(r)) = s;
    }
    return eta;
}

/// Lower clamp for aggregated logit means.
inline constexpr double kLogitClamp = 1e-12;

/// Observation predictor from cell predictors, plus (optionally) its
/// derivative weights d eta_obs / d eta_cell for the row.
inline double observation_predictor(const Observation& o, Link link, const Eigen::VectorXd& cell_eta,
                                    std::vector<double>* dweights = nullptr, std::size_t row = 0) {
    if (!o.aggregated() || (o.terms.size() == 1 && o.terms[0].weight == 1.0)) {
        const std::size_t c = o.aggregated() ? o.terms[0].cell : o.cell;
        const double v = cell_eta(Eigen::Index(c));
        if (!std::isfinite(v)) throw NumericError("non-finite predictor in observation " + std::to_string(row));
        if (dweights) dweights->assign(1, 1.0);
        return v;
    }
    const std::size_t n = o.terms.size();
    if (dweights) dweights->assign(n, 0.0);
    double out = 0.0;
    switch (link) {
    case Link::identity: {
        for (std::size_t k = 0; k < n; ++k) {
            out += o.terms[k].weight * cell_eta(Eigen::Index(o.terms[k].cell));
            if (dweights) (*dweights)[k] = o.terms[k].weight;
        }
        break;
    }
    case Link::log: {
        // log-sum-exp over positive-weight terms
        double m = -std::numeric_limits<double>::infinity();
        for (const auto& t : o.terms)
            if (t.weight > 0.0) m = std::max(m, cell_eta(Eigen::Index(t.cell)));
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const auto& t = o.terms[k];
            if (t.weight <= 0.0) continue;
            const double w = t.weight * std::exp(cell_eta(Eigen::Index(t.cell)) - m);
            s += w;
            if (dweights) (*dweights)[k] = w;
        }
        out = m + std::log(s);
        if (dweights)
            for (auto& w : *dweights) w /= s;
        break;
    }
    case Link::logit: {
        double mbar = 0.0;
        std::vector<double> dmu(n, 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            const auto& t = o.terms[k];
            if (t.weight <= 0.0) continue;
            double mu = std::clamp(expit(cell_eta(Eigen::Index(t.cell))), kLogitClamp, 1.0 - kLogitClamp);
            mbar += t.weight * mu;
            dmu[k] = t.weight * mu * (1.0 - mu);
        }
        mbar = std::clamp(mbar, kLogitClamp, 1.0 - kLogitClamp);
        out = logit(mbar);
        if (dweights) {
            const double denom = mbar * (1.0 - mbar);
            for (std::size_t k = 0; k < n; ++k) (*dweights)[k] = dmu[k] / denom;
        }
        break;
    }
    }
    if (!std::isfinite(out)) throw NumericError("non-finite aggregated predictor in observation " + std::to_string(row));
    return out;
}

/// eta-tilde for every observation given cell predictors.
inline Eigen::VectorXd predictor_eval(const ModelSpec& spec, const Eigen::VectorXd& cell_eta) {
    Eigen::VectorXd out(Eigen::Index(spec.observations.size()));
    for (std::size_t r = 0; r < spec.observations.size(); ++r)
        out(Eigen::Index(r)) = observation_predictor(spec.observations[r], spec.link, cell_eta, nullptr, r);
    return out;
}

/// eta-tilde(u) for a latent vector under hyperparameters theta.
inline Eigen::VectorXd predictor_eval(const ModelSpec& spec, const Design& d, const HyperParams& th,
                                      const Eigen::VectorXd& u) {
    return predictor_eval(spec, cell_predictors(d, th, u));
}

/// Derivative of the observation predictors with respect to the cell
/// predictors at `cell_eta` (observations x cells).
inline SpMat aggregation_jacobian(const ModelSpec& spec, const Eigen::VectorXd& cell_eta) {
    std::vector<Triplet> t;
    std::vector<double> w;
    for (std::size_t r = 0; r < spec.observations.size(); ++r) {
        const auto& o = spec.observations[r];
        observation_predictor(o, spec.link, cell_eta, &w, r);
        if (!o.aggregated()) {
            t.emplace_back(r, o.cell, 1.0);
            continue;
        }
        for (std::size_t k = 0; k < o.terms.size(); ++k)
            if (w[k] != 0.0) t.emplace_back(r, o.terms[k].cell, w[k]);
    }
    SpMat dm(Eigen::Index(spec.observations.size()), cell_eta.size());
    dm.setFromTriplets(t.begin(), t.end());
    return dm;
}

/// B = d eta-tilde / du at u0.
inline SpMat predictor_jacobian(const ModelSpec& spec, const Design& d, const HyperParams& th,
                                const Eigen::VectorXd& u0) {
    SpMat a = design_matrix(d, th);
    SpMat b = aggregation_jacobian(spec, a * u0) * a;
    b.makeCompressed();
    return b;
}

/// Whether any observation's predictor is a nonlinear function of the cells.
inline bool has_nonlinear_rows(const ModelSpec& spec) {
    if (spec.link == Link::identity) return false;
    for (const auto& o : spec.observations) {
        if (!o.aggregated()) continue;
        std::size_t positive = 0;
        for (const auto& t : o.terms) positive += t.weight > 0.0;
        if (positive > 1 || (o.terms.size() == 1 && o.terms[0].weight != 1.0)) return true;
    }
    return false;
}

/// Coefficients mapped back to the raw covariate scale.
struct FixedEffectSummary {
    double intercept = 0.0;
    std::vector<double> coefficients;
};

inline FixedEffectSummary original_scale_coefficients(const Design& d, const Eigen::VectorXd& u) {
    FixedEffectSummary s;
    const auto& L = d.layout;
    double a = L.intercept ? u(Eigen::Index(*L.intercept)) : 0.0;
    for (std::size_t k = 0; k < L.n_cov; ++k) {
        const double b = u(Eigen::Index(L.cov_begin + k)) / d.cov_sd(Eigen::Index(k));
        s.coefficients.push_back(b);
        a -= b * d.cov_mean(Eigen::Index(k));
    }
    s.intercept = a;
    return s;
}

/// Level-count rule for automatic factor coding.
inline FactorCoding auto_coding(std::size_t n_levels) {
    return n_levels <= kMaxFixedLevels ? FactorCoding::fixed : FactorCoding::random;
}

} // namespace sae
