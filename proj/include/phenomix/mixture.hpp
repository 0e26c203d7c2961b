// Gaussian finite mixtures with the ten volume/shape/orientation covariance
// parameterizations, EM estimation, BIC selection, and profile assignment.
//
// Each component covariance decomposes as
//     Sigma_g = volume_g * D_g * diag(shape_g) * D_g^T
// with det(diag(shape_g)) = 1 and D_g orthogonal. The family code fixes which
// factors are shared across components (E), free (V), or identity (I).
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "phenomix/common.hpp"
#include "phenomix/csv.hpp"

namespace phenomix {

enum class CovarianceFamily { EII, VII, EEI, VEI, EVI, VVI, EEE, EEV, VEV, VVV };

inline const std::vector<CovarianceFamily>& all_covariance_families() {
    static const std::vector<CovarianceFamily> fams = {
        CovarianceFamily::EII, CovarianceFamily::VII, CovarianceFamily::EEI, CovarianceFamily::VEI,
        CovarianceFamily::EVI, CovarianceFamily::VVI, CovarianceFamily::EEE, CovarianceFamily::EEV,
        CovarianceFamily::VEV, CovarianceFamily::VVV};
    return fams;
}

inline std::string to_string(CovarianceFamily f) {
    switch (f) {
        case CovarianceFamily::EII: return "EII";
        case CovarianceFamily::VII: return "VII";
        case CovarianceFamily::EEI: return "EEI";
        case CovarianceFamily::VEI: return "VEI";
        case CovarianceFamily::EVI: return "EVI";
        case CovarianceFamily::VVI: return "VVI";
        case CovarianceFamily::EEE: return "EEE";
        case CovarianceFamily::EEV: return "EEV";
        case CovarianceFamily::VEV: return "VEV";
        case CovarianceFamily::VVV: return "VVV";
    }
    return "EII";
}

inline CovarianceFamily covariance_family_from_string(const std::string& s) {
    for (auto f : all_covariance_families())
        if (to_string(f) == s) return f;
    throw ValidationError("unknown covariance family '" + s + "'");
}

enum class FamilyDistribution { spherical, diagonal, ellipsoidal };

struct FamilyAttributes {
    FamilyDistribution distribution;
    bool variable_volume;
    bool variable_shape;       // meaningless for spherical
    bool variable_orientation;  // meaningful for ellipsoidal only
};

inline FamilyAttributes family_attributes(CovarianceFamily f) {
    using D = FamilyDistribution;
    switch (f) {
        case CovarianceFamily::EII: return {D::spherical, false, false, false};
        case CovarianceFamily::VII: return {D::spherical, true, false, false};
        case CovarianceFamily::EEI: return {D::diagonal, false, false, false};
        case CovarianceFamily::VEI: return {D::diagonal, true, false, false};
        case CovarianceFamily::EVI: return {D::diagonal, false, true, false};
        case CovarianceFamily::VVI: return {D::diagonal, true, true, false};
        case CovarianceFamily::EEE: return {D::ellipsoidal, false, false, false};
        case CovarianceFamily::EEV: return {D::ellipsoidal, false, false, true};
        case CovarianceFamily::VEV: return {D::ellipsoidal, true, false, true};
        case CovarianceFamily::VVV: return {D::ellipsoidal, true, true, true};
    }
    return {D::spherical, false, false, false};
}

// Free parameters: G*d means, G-1 weights, plus the family's covariance count.
inline int free_parameter_count(CovarianceFamily family, int d, int G) {
    if (d < 1 || G < 1) throw ValidationError("free_parameter_count: d and G must be >= 1");
    const long long dd = d, GG = G;
    long long cov = 0;
    switch (family) {
        case CovarianceFamily::EII: cov = 1; break;
        case CovarianceFamily::VII: cov = GG; break;
        case CovarianceFamily::EEI: cov = dd; break;
        case CovarianceFamily::VEI: cov = GG + (dd - 1); break;
        case CovarianceFamily::EVI: cov = 1 + GG * (dd - 1); break;
        case CovarianceFamily::VVI: cov = GG * dd; break;
        case CovarianceFamily::EEE: cov = dd * (dd + 1) / 2; break;
        case CovarianceFamily::EEV: cov = 1 + (dd - 1) + GG * dd * (dd - 1) / 2; break;
        case CovarianceFamily::VEV: cov = GG + (dd - 1) + GG * dd * (dd - 1) / 2; break;
        case CovarianceFamily::VVV: cov = GG * dd * (dd + 1) / 2; break;
    }
    return static_cast<int>(GG * dd + (GG - 1) + cov);
}

struct MixtureModel {
    CovarianceFamily family = CovarianceFamily::EII;
    int G = 0;
    int d = 0;
    Eigen::VectorXd weights;                 // size G, sums to 1
    std::vector<Eigen::VectorXd> means;      // G x d
    std::vector<double> volumes;             // G
    std::vector<Eigen::VectorXd> shapes;     // G x d, det(diag(shape)) == 1
    std::vector<Eigen::MatrixXd> orientations;  // G x (d x d), orthogonal
    double loglik = -std::numeric_limits<double>::infinity();
    double bic = kNaN;
    int n_iter = 0;
    bool converged = false;
    bool failed = false;
    std::string fail_reason;
    std::uint64_t seed = 0;
    // Smallest per-iteration log-likelihood increment seen during the fit;
    // negative values beyond rounding noise indicate a broken M-step.
    double min_loglik_delta = std::numeric_limits<double>::infinity();

    Eigen::MatrixXd covariance(int g) const {
        const auto& D = orientations[static_cast<std::size_t>(g)];
        return volumes[static_cast<std::size_t>(g)] * D *
               shapes[static_cast<std::size_t>(g)].asDiagonal() * D.transpose();
    }
};

inline double bic(const MixtureModel& model, std::size_t n) {
    const int k = free_parameter_count(model.family, model.d, model.G);
    return 2.0 * model.loglik - static_cast<double>(k) * std::log(static_cast<double>(n));
}

// --- initialization -------------------------------------------------------------

struct KmeansInit {
    int restarts = 10;
    std::uint64_t seed = 0;
};

using EmInit = std::variant<KmeansInit, Eigen::MatrixXd>;  // matrix = explicit responsibilities

namespace detail {

inline std::vector<int> kmeans_pp_hard_labels(const Eigen::MatrixXd& X, int G, std::mt19937_64& rng) {
    const auto n = X.rows();
    std::vector<Eigen::VectorXd> centers;
    std::uniform_int_distribution<Eigen::Index> uni(0, n - 1);
    centers.push_back(X.row(uni(rng)).transpose());
    Eigen::VectorXd d2 = (X.rowwise() - centers[0].transpose()).rowwise().squaredNorm();
    while (static_cast<int>(centers.size()) < G) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        } else {
            pick = uni(rng);
        }
        centers.push_back(X.row(pick).transpose());
        d2 = d2.cwiseMin((X.rowwise() - centers.back().transpose()).rowwise().squaredNorm());
    }

    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 50; ++iter) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (X.row(i).transpose() - centers[0]).squaredNorm();
            for (int g = 1; g < G; ++g) {
                const double dist = (X.row(i).transpose() - centers[static_cast<std::size_t>(g)]).squaredNorm();
                if (dist < best_d) {
                    best_d = dist;
                    best = g;
                }
            }
            if (labels[static_cast<std::size_t>(i)] != best) {
                labels[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;
        std::vector<Eigen::VectorXd> sums(static_cast<std::size_t>(G), Eigen::VectorXd::Zero(X.cols()));
        std::vector<int> counts(static_cast<std::size_t>(G), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += X.row(i).transpose();
            ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
        }
        for (int g = 0; g < G; ++g) {
            if (counts[static_cast<std::size_t>(g)] > 0) {
                centers[static_cast<std::size_t>(g)] =
                    sums[static_cast<std::size_t>(g)] / counts[static_cast<std::size_t>(g)];
            } else {
                // Re-seed an emptied cluster at the point farthest from its center.
                Eigen::Index far = 0;
                double far_d = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const int li = labels[static_cast<std::size_t>(i)];
                    const double dist = (X.row(i).transpose() - centers[static_cast<std::size_t>(li)]).squaredNorm();
                    if (dist > far_d) {
                        far_d = dist;
                        far = i;
                    }
                }
                centers[static_cast<std::size_t>(g)] = X.row(far).transpose();
            }
        }
    }
    return labels;
}

inline double geometric_mean_clamped(const Eigen::VectorXd& v) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < v.size(); ++j) s += std::log(std::max(v[j], 1e-300));
    return std::exp(s / static_cast<double>(v.size()));
}

struct MStepScratch {
    Eigen::VectorXd ng;                      // effective counts
    std::vector<Eigen::MatrixXd> scatter;    // W_g
    Eigen::VectorXd prev_shared_shape;       // warm start for VEI/VEV inner loops
};

// Constrained covariance updates. Scatter matrices W_g and counts n_g are in
// scratch; results land in the model. Returns false on component collapse.
inline bool covariance_mstep(MixtureModel& m, MStepScratch& s) {
    const int G = m.G, d = m.d;
    const double n = s.ng.sum();
    const auto attr = family_attributes(m.family);
    const auto gs = [](int g) { return static_cast<std::size_t>(g); };

    for (int g = 0; g < G; ++g) {
        m.shapes[gs(g)] = Eigen::VectorXd::Ones(d);
        m.orientations[gs(g)] = Eigen::MatrixXd::Identity(d, d);
    }

    if (attr.distribution == FamilyDistribution::spherical) {
        if (!attr.variable_volume) {
            double tr = 0.0;
            for (int g = 0; g < G; ++g) tr += s.scatter[gs(g)].trace();
            const double lam = tr / (n * d);
            for (int g = 0; g < G; ++g) m.volumes[gs(g)] = lam;
        } else {
            for (int g = 0; g < G; ++g) m.volumes[gs(g)] = s.scatter[gs(g)].trace() / (s.ng[g] * d);
        }
        return true;
    }

    if (attr.distribution == FamilyDistribution::diagonal) {
        std::vector<Eigen::VectorXd> diag(static_cast<std::size_t>(G));
        for (int g = 0; g < G; ++g) diag[gs(g)] = s.scatter[gs(g)].diagonal().cwiseMax(0.0);

        if (!attr.variable_volume & !attr.variable_shape) {  // EEI
            Eigen::VectorXd B = Eigen::VectorXd::Zero(d);
            for (int g = 0; g < G; ++g) B += diag[gs(g)];
            B /= n;
            const double lam = geometric_mean_clamped(B);
            const Eigen::VectorXd A = B / lam;
            for (int g = 0; g < G; ++g) {
                m.volumes[gs(g)] = lam;
                m.shapes[gs(g)] = A;
            }
        } else if (attr.variable_volume && !attr.variable_shape) {  // VEI, inner fixed point
            Eigen::VectorXd A = s.prev_shared_shape.size() == d ? s.prev_shared_shape : Eigen::VectorXd::Ones(d);
            Eigen::VectorXd lam(G);
            for (int inner = 0; inner < 20; ++inner) {
                for (int g = 0; g < G; ++g)
                    lam[g] = (diag[gs(g)].array() / A.array()).sum() / (s.ng[g] * d);
                Eigen::VectorXd B = Eigen::VectorXd::Zero(d);
                for (int g = 0; g < G; ++g) B += diag[gs(g)] / std::max(lam[g], 1e-300);
                Eigen::VectorXd A_new = B / geometric_mean_clamped(B);
                const double delta = (A_new - A).cwiseAbs().maxCoeff() / std::max(1.0, A.cwiseAbs().maxCoeff());
                A = A_new;
                if (delta < 1e-8) break;
            }
            for (int g = 0; g < G; ++g) {
                m.volumes[gs(g)] = lam[g];
                m.shapes[gs(g)] = A;
            }
            s.prev_shared_shape = A;
        } else if (!attr.variable_volume && attr.variable_shape) {  // EVI
            double lam = 0.0;
            for (int g = 0; g < G; ++g) {
                const double c = geometric_mean_clamped(diag[gs(g)]);
                m.shapes[gs(g)] = diag[gs(g)] / std::max(c, 1e-300);
                lam += c;
            }
            lam /= n;
            for (int g = 0; g < G; ++g) m.volumes[gs(g)] = lam;
        } else {  // VVI
            for (int g = 0; g < G; ++g) {
                const Eigen::VectorXd S = diag[gs(g)] / s.ng[g];
                const double lam = geometric_mean_clamped(S);
                m.volumes[gs(g)] = lam;
                m.shapes[gs(g)] = S / std::max(lam, 1e-300);
            }
        }
        return true;
    }

    // Ellipsoidal families.
    if (m.family == CovarianceFamily::EEE) {
        Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d, d);
        for (int g = 0; g < G; ++g) W += s.scatter[gs(g)];
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W / n);
        if (es.info() != Eigen::Success) return false;
        Eigen::VectorXd ev = es.eigenvalues().reverse().cwiseMax(0.0);
        Eigen::MatrixXd D = es.eigenvectors().rowwise().reverse();
        const double lam = geometric_mean_clamped(ev);
        const Eigen::VectorXd A = ev / std::max(lam, 1e-300);
        for (int g = 0; g < G; ++g) {
            m.volumes[gs(g)] = lam;
            m.shapes[gs(g)] = A;
            m.orientations[gs(g)] = D;
        }
        return true;
    }

    if (m.family == CovarianceFamily::VVV) {
        for (int g = 0; g < G; ++g) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s.scatter[gs(g)] / s.ng[g]);
            if (es.info() != Eigen::Success) return false;
            Eigen::VectorXd ev = es.eigenvalues().reverse().cwiseMax(0.0);
            const double lam = geometric_mean_clamped(ev);
            m.volumes[gs(g)] = lam;
            m.shapes[gs(g)] = ev / std::max(lam, 1e-300);
            m.orientations[gs(g)] = es.eigenvectors().rowwise().reverse();
        }
        return true;
    }

    // EEV / VEV: per-component orientations from the scatter eigenvectors,
    // shared shape (and shared volume for EEV).
    std::vector<Eigen::VectorXd> omega(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s.scatter[gs(g)]);
        if (es.info() != Eigen::Success) return false;
        omega[gs(g)] = es.eigenvalues().reverse().cwiseMax(0.0);
        m.orientations[gs(g)] = es.eigenvectors().rowwise().reverse();
    }
    if (m.family == CovarianceFamily::EEV) {
        Eigen::VectorXd S = Eigen::VectorXd::Zero(d);
        for (int g = 0; g < G; ++g) S += omega[gs(g)];
        const double gm = geometric_mean_clamped(S);
        const Eigen::VectorXd A = S / std::max(gm, 1e-300);
        const double lam = gm / n;
        for (int g = 0; g < G; ++g) {
            m.volumes[gs(g)] = lam;
            m.shapes[gs(g)] = A;
        }
    } else {  // VEV
        Eigen::VectorXd A = s.prev_shared_shape.size() == d ? s.prev_shared_shape : Eigen::VectorXd::Ones(d);
        Eigen::VectorXd lam(G);
        for (int inner = 0; inner < 20; ++inner) {
            for (int g = 0; g < G; ++g) lam[g] = (omega[gs(g)].array() / A.array()).sum() / (s.ng[g] * d);
            Eigen::VectorXd S = Eigen::VectorXd::Zero(d);
            for (int g = 0; g < G; ++g) S += omega[gs(g)] / std::max(lam[g], 1e-300);
            Eigen::VectorXd A_new = S / geometric_mean_clamped(S);
            const double delta = (A_new - A).cwiseAbs().maxCoeff() / std::max(1.0, A.cwiseAbs().maxCoeff());
            A = A_new;
            if (delta < 1e-8) break;
        }
        for (int g = 0; g < G; ++g) {
            m.volumes[gs(g)] = lam[g];
            m.shapes[gs(g)] = A;
        }
        s.prev_shared_shape = A;
    }
    return true;
}

// Log-density of every row under every component, plus mixture loglik and
// responsibilities via log-sum-exp.
inline double estep(const MixtureModel& m, const Eigen::MatrixXd& X, Eigen::MatrixXd& resp) {
    const auto n = X.rows();
    const int G = m.G, d = m.d;
    Eigen::MatrixXd logdens(n, G);
    const double c0 = -0.5 * d * std::log(2.0 * M_PI);
    const bool rotated = family_attributes(m.family).distribution == FamilyDistribution::ellipsoidal;
    for (int g = 0; g < G; ++g) {
        const auto gs = static_cast<std::size_t>(g);
        double logdet = d * std::log(m.volumes[gs]);
        for (Eigen::Index j = 0; j < d; ++j) logdet += std::log(m.shapes[gs][j]);
        Eigen::VectorXd inv = (m.volumes[gs] * m.shapes[gs].array()).inverse().matrix();
        Eigen::MatrixXd Y = X.rowwise() - m.means[gs].transpose();
        if (rotated) Y = Y * m.orientations[gs];
        Eigen::VectorXd quad = Y.array().square().matrix() * inv;
        logdens.col(g) = (std::log(m.weights[g]) + c0 - 0.5 * logdet) - 0.5 * quad.array();
    }
    Eigen::VectorXd rowmax = logdens.rowwise().maxCoeff();
    Eigen::MatrixXd shifted = (logdens.colwise() - rowmax).array().exp();
    Eigen::VectorXd rowsum = shifted.rowwise().sum();
    resp = shifted.array().colwise() / rowsum.array();
    return (rowmax.array() + rowsum.array().log()).sum();
}

inline void relabel_by_weight(MixtureModel& m, Eigen::MatrixXd* resp = nullptr) {
    std::vector<int> order(static_cast<std::size_t>(m.G));
    for (int g = 0; g < m.G; ++g) order[static_cast<std::size_t>(g)] = g;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (m.weights[a] != m.weights[b]) return m.weights[a] > m.weights[b];
        for (int j = 0; j < m.d; ++j) {
            const double ma = m.means[static_cast<std::size_t>(a)][j];
            const double mb = m.means[static_cast<std::size_t>(b)][j];
            if (ma != mb) return ma < mb;
        }
        return a < b;
    });
    MixtureModel out = m;
    Eigen::MatrixXd r2;
    if (resp) r2.resize(resp->rows(), resp->cols());
    for (int g = 0; g < m.G; ++g) {
        const auto src = static_cast<std::size_t>(order[static_cast<std::size_t>(g)]);
        out.weights[g] = m.weights[static_cast<Eigen::Index>(src)];
        out.means[static_cast<std::size_t>(g)] = m.means[src];
        out.volumes[static_cast<std::size_t>(g)] = m.volumes[src];
        out.shapes[static_cast<std::size_t>(g)] = m.shapes[src];
        out.orientations[static_cast<std::size_t>(g)] = m.orientations[src];
        if (resp) r2.col(g) = resp->col(static_cast<Eigen::Index>(src));
    }
    m = std::move(out);
    if (resp) *resp = std::move(r2);
}

inline MixtureModel em_fit_single(const Eigen::MatrixXd& X, int G, CovarianceFamily family,
                                  Eigen::MatrixXd resp, double tol, int max_iter, double floor_var,
                                  std::uint64_t seed) {
    const auto n = X.rows();
    const int d = static_cast<int>(X.cols());
    MixtureModel m;
    m.family = family;
    m.G = G;
    m.d = d;
    m.seed = seed;
    m.weights = Eigen::VectorXd::Constant(G, 1.0 / G);
    m.means.assign(static_cast<std::size_t>(G), Eigen::VectorXd::Zero(d));
    m.volumes.assign(static_cast<std::size_t>(G), 1.0);
    m.shapes.assign(static_cast<std::size_t>(G), Eigen::VectorXd::Ones(d));
    m.orientations.assign(static_cast<std::size_t>(G), Eigen::MatrixXd::Identity(d, d));

    MStepScratch scratch;
    scratch.scatter.assign(static_cast<std::size_t>(G), Eigen::MatrixXd::Zero(d, d));

    const auto attr = family_attributes(family);
    double prev_ll = -std::numeric_limits<double>::infinity();
    int consecutive_clamps = 0;

    for (int iter = 1; iter <= max_iter; ++iter) {
        // M-step
        scratch.ng = resp.colwise().sum();
        for (int g = 0; g < G; ++g) {
            if (scratch.ng[g] < 1.0 || scratch.ng[g] / n < 1e-10) {
                m.failed = true;
                m.fail_reason = "component collapse: component " + std::to_string(g + 1) +
                                " has effective size " + format_double(scratch.ng[g]);
                m.n_iter = iter;
                return m;
            }
        }
        m.weights = scratch.ng / static_cast<double>(n);
        for (int g = 0; g < G; ++g) {
            const auto gs = static_cast<std::size_t>(g);
            m.means[gs] = (resp.col(g).transpose() * X).transpose() / scratch.ng[g];
            Eigen::MatrixXd Xc = X.rowwise() - m.means[gs].transpose();
            scratch.scatter[gs] = Xc.transpose() * resp.col(g).asDiagonal() * Xc;
        }
        if (!covariance_mstep(m, scratch)) {
            m.failed = true;
            m.fail_reason = "covariance update failed (eigendecomposition error)";
            m.n_iter = iter;
            return m;
        }

        // Variance floor: inflate volumes so no covariance eigenvalue sits
        // below the floor; shared volumes are inflated together to keep the
        // family constraint exact.
        bool clamped = false;
        if (attr.variable_volume) {
            for (int g = 0; g < G; ++g) {
                const auto gs = static_cast<std::size_t>(g);
                const double mineig = m.volumes[gs] * m.shapes[gs].minCoeff();
                if (mineig < floor_var) {
                    m.volumes[gs] *= floor_var / std::max(mineig, 1e-300);
                    clamped = true;
                }
            }
        } else {
            double mineig = std::numeric_limits<double>::infinity();
            for (int g = 0; g < G; ++g)
                mineig = std::min(mineig, m.volumes[static_cast<std::size_t>(g)] *
                                              m.shapes[static_cast<std::size_t>(g)].minCoeff());
            if (mineig < floor_var) {
                const double factor = floor_var / std::max(mineig, 1e-300);
                for (int g = 0; g < G; ++g) m.volumes[static_cast<std::size_t>(g)] *= factor;
                clamped = true;
            }
        }
        if (clamped) {
            if (++consecutive_clamps >= 2) {
                m.failed = true;
                m.fail_reason = "covariance floor reached on consecutive iterations (degenerate component)";
                m.n_iter = iter;
                return m;
            }
        } else {
            consecutive_clamps = 0;
        }

        // E-step
        const double ll = estep(m, X, resp);
        m.n_iter = iter;
        if (!std::isfinite(ll)) {
            m.failed = true;
            m.fail_reason = "non-finite log-likelihood";
            return m;
        }
        if (iter > 1 && !clamped) m.min_loglik_delta = std::min(m.min_loglik_delta, ll - prev_ll);
        m.loglik = ll;
        if (iter > 1 && std::fabs(ll - prev_ll) < tol * (1.0 + std::fabs(ll))) {
            m.converged = true;
            break;
        }
        prev_ll = ll;
    }

    relabel_by_weight(m, &resp);
    m.bic = bic(m, static_cast<std::size_t>(n));
    return m;
}

}  // namespace detail

struct EmOptions {
    double tol = 1e-8;
    int max_iter = 500;
};

inline MixtureModel em_fit(const Eigen::MatrixXd& X, int G, CovarianceFamily family, const EmInit& init,
                           const EmOptions& opts = {}) {
    const auto n = X.rows();
    const int d = static_cast<int>(X.cols());
    if (G < 1) throw ValidationError("em_fit: G must be >= 1");
    if (n <= G) throw ValidationError("em_fit: need more rows than components (n > G)");
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j)
            if (std::isnan(X(i, j))) throw ValidationError("em_fit: matrix contains NaN; impute first");

    // Degeneracy floor relative to the average per-coordinate spread of X.
    const Eigen::RowVectorXd mu = X.colwise().mean();
    const double total_var = (X.rowwise() - mu).squaredNorm() / static_cast<double>(n);
    const double floor_var = 1e-6 * std::max(total_var / d, 1e-300);

    if (std::holds_alternative<Eigen::MatrixXd>(init)) {
        const Eigen::MatrixXd& resp = std::get<Eigen::MatrixXd>(init);
        if (resp.rows() != n || resp.cols() != G)
            throw ValidationError("em_fit: responsibility matrix shape mismatch");
        return detail::em_fit_single(X, G, family, resp, opts.tol, opts.max_iter, floor_var, 0);
    }

    const KmeansInit& km = std::get<KmeansInit>(init);
    if (km.restarts < 1) throw ValidationError("em_fit: restarts must be >= 1");
    MixtureModel best;
    bool have_best = false;
    for (int r = 0; r < km.restarts; ++r) {
        const std::uint64_t rseed = derive_seed(km.seed, static_cast<std::uint64_t>(r));
        auto rng = make_rng(rseed);
        const std::vector<int> labels = detail::kmeans_pp_hard_labels(X, G, rng);
        Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, G);
        for (Eigen::Index i = 0; i < n; ++i) resp(i, labels[static_cast<std::size_t>(i)]) = 1.0;
        MixtureModel m = detail::em_fit_single(X, G, family, std::move(resp), opts.tol, opts.max_iter,
                                               floor_var, rseed);
        if (m.failed) {
            if (!have_best && r == km.restarts - 1 && !best.G) best = m;
            continue;
        }
        if (!have_best || m.loglik > best.loglik) {
            best = m;
            have_best = true;
        }
    }
    if (!have_best && best.G == 0) {
        // every restart failed before producing a model; rerun one restart to
        // surface its reason
        const std::uint64_t rseed = derive_seed(km.seed, 0);
        auto rng = make_rng(rseed);
        const std::vector<int> labels = detail::kmeans_pp_hard_labels(X, G, rng);
        Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, G);
        for (Eigen::Index i = 0; i < n; ++i) resp(i, labels[static_cast<std::size_t>(i)]) = 1.0;
        best = detail::em_fit_single(X, G, family, std::move(resp), opts.tol, opts.max_iter, floor_var, rseed);
    }
    return best;
}

inline Eigen::MatrixXd posterior(const MixtureModel& model, const Eigen::MatrixXd& X, bool force = false) {
    if (model.failed) throw std::logic_error("posterior: model fit failed (" + model.fail_reason + ")");
    if (!model.converged && !force)
        throw std::logic_error("posterior: model did not converge; pass force=true to override");
    Eigen::MatrixXd resp;
    detail::estep(model, X, resp);
    return resp;
}

inline std::vector<int> assign_profiles(const MixtureModel& model, const Eigen::MatrixXd& X, bool force = false) {
    const Eigen::MatrixXd resp = posterior(model, X, force);
    std::vector<int> labels(static_cast<std::size_t>(X.rows()), 1);
    for (Eigen::Index i = 0; i < resp.rows(); ++i) {
        int best = 0;
        for (int g = 1; g < model.G; ++g)
            if (resp(i, g) > resp(i, best)) best = g;  // ties keep the lower index
        labels[static_cast<std::size_t>(i)] = best + 1;
    }
    return labels;
}

// --- model selection --------------------------------------------------------------

struct GridCell {
    CovarianceFamily family;
    int G = 0;
    bool ok = false;
    double bic = kNaN;
    double loglik = kNaN;
    int n_iter = 0;
    std::string status;  // "ok" or the failure reason
};

struct SelectionGrid {
    std::vector<GridCell> cells;
    int best_index = -1;
    MixtureModel best_model;
};

inline SelectionGrid model_select(const Eigen::MatrixXd& X, const std::vector<int>& G_range,
                                  const std::vector<CovarianceFamily>& families, const KmeansInit& init,
                                  const EmOptions& opts = {}) {
    if (G_range.empty()) throw ValidationError("model_select: empty G range");
    if (families.empty()) throw ValidationError("model_select: empty family list");
    SelectionGrid grid;
    for (std::size_t fi = 0; fi < families.size(); ++fi) {
        for (int G : G_range) {
            GridCell cell;
            cell.family = families[fi];
            cell.G = G;
            KmeansInit cell_init = init;
            cell_init.seed = derive_seed(init.seed, fi, static_cast<std::uint64_t>(G));
            try {
                MixtureModel m = em_fit(X, G, families[fi], cell_init, opts);
                if (m.failed) {
                    cell.status = m.fail_reason;
                } else {
                    cell.ok = true;
                    cell.status = "ok";
                    cell.bic = m.bic;
                    cell.loglik = m.loglik;
                    cell.n_iter = m.n_iter;
                    if (grid.best_index < 0 || cell.bic > grid.cells[static_cast<std::size_t>(grid.best_index)].bic) {
                        grid.best_index = static_cast<int>(grid.cells.size());
                        grid.best_model = std::move(m);
                    }
                }
            } catch (const std::exception& e) {
                cell.status = e.what();
            }
            grid.cells.push_back(std::move(cell));
        }
    }
    if (grid.best_index < 0) {
        std::string msg = "model_select: all grid cells failed:";
        for (const auto& c : grid.cells)
            msg += "\n  " + to_string(c.family) + " G=" + std::to_string(c.G) + ": " + c.status;
        throw std::runtime_error(msg);
    }
    return grid;
}

inline void write_selection_grid_csv(const SelectionGrid& grid, const std::string& path,
                                     const std::string& config_hash = "") {
    CsvWriter w(path);
    if (!config_hash.empty()) w.comment("config_hash=" + config_hash);
    w.row({"family", "G", "BIC", "status"});
    for (const auto& c : grid.cells)
        w.row({to_string(c.family), std::to_string(c.G), c.ok ? format_double(c.bic) : std::string(), c.status});
}

// --- serialization -----------------------------------------------------------------

inline nlohmann::json mixture_model_to_json(const MixtureModel& m) {
    nlohmann::json j;
    j["family"] = to_string(m.family);
    j["G"] = m.G;
    j["d"] = m.d;
    j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size());
    auto vec2json = [](const Eigen::VectorXd& v) {
        return std::vector<double>(v.data(), v.data() + v.size());
    };
    j["means"] = nlohmann::json::array();
    j["shapes"] = nlohmann::json::array();
    j["orientations"] = nlohmann::json::array();
    for (int g = 0; g < m.G; ++g) {
        const auto gs = static_cast<std::size_t>(g);
        j["means"].push_back(vec2json(m.means[gs]));
        j["shapes"].push_back(vec2json(m.shapes[gs]));
        nlohmann::json rows = nlohmann::json::array();
        for (int r = 0; r < m.d; ++r) rows.push_back(vec2json(m.orientations[gs].row(r).transpose()));
        j["orientations"].push_back(rows);
    }
    j["volumes"] = m.volumes;
    j["loglik"] = m.loglik;
    j["bic"] = std::isnan(m.bic) ? nlohmann::json() : nlohmann::json(m.bic);
    j["n_iter"] = m.n_iter;
    j["converged"] = m.converged;
    j["seed"] = m.seed;
    return j;
}

inline MixtureModel mixture_model_from_json(const nlohmann::json& j) {
    MixtureModel m;
    m.family = covariance_family_from_string(j.at("family").get<std::string>());
    m.G = j.at("G").get<int>();
    m.d = j.at("d").get<int>();
    const auto w = j.at("weights").get<std::vector<double>>();
    m.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    for (const auto& e : j.at("means")) {
        const auto v = e.get<std::vector<double>>();
        m.means.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& e : j.at("shapes")) {
        const auto v = e.get<std::vector<double>>();
        m.shapes.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& e : j.at("orientations")) {
        Eigen::MatrixXd D(m.d, m.d);
        for (int r = 0; r < m.d; ++r) {
            const auto v = e.at(r).get<std::vector<double>>();
            D.row(r) = Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        }
        m.orientations.push_back(D);
    }
    m.volumes = j.at("volumes").get<std::vector<double>>();
    m.loglik = j.at("loglik").get<double>();
    m.bic = j.at("bic").is_null() ? kNaN : j.at("bic").get<double>();
    m.n_iter = j.at("n_iter").get<int>();
    m.converged = j.at("converged").get<bool>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

}  // namespace phenomix
