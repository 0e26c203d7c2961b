// Power transforms and standardization applied ahead of mixture fitting.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenomix/common.hpp"
#include "phenomix/features.hpp"

namespace phenomix {

// Branch guards: lambda within 1e-8 of 0 (or 2) uses the log branch, which
// keeps the map continuous across the boundary.
inline double yeo_johnson(double x, double lambda) {
    constexpr double kBranchEps = 1e-8;
    if (x >= 0.0) {
        if (std::fabs(lambda) < kBranchEps) return std::log1p(x);
        return (std::pow(x + 1.0, lambda) - 1.0) / lambda;
    }
    const double two_minus = 2.0 - lambda;
    if (std::fabs(two_minus) < kBranchEps) return -std::log1p(-x);
    return -(std::pow(1.0 - x, two_minus) - 1.0) / two_minus;
}

struct YeoJohnsonFit {
    double lambda = 1.0;
    double loglik = 0.0;
};

namespace detail {

// Gaussian profile log-likelihood of the transformed sample, Jacobian included.
// The Jacobian reduces to (lambda-1) * sum(sign(x) * ln(|x|+1)).
inline double yj_profile_loglik(std::span<const double> xs, double lambda, double jacobian_sum) {
    const auto n = static_cast<double>(xs.size());
    double m = 0.0;
    for (double x : xs) m += yeo_johnson(x, lambda);
    m /= n;
    double var = 0.0;
    for (double x : xs) {
        const double y = yeo_johnson(x, lambda) - m;
        var += y * y;
    }
    var /= n;
    if (!(var > 0.0) || !std::isfinite(var)) return -std::numeric_limits<double>::infinity();
    return -0.5 * n * (std::log(2.0 * M_PI * var) + 1.0) + (lambda - 1.0) * jacobian_sum;
}

}  // namespace detail

// Maximum-likelihood lambda over [-5, 5]: coarse scan to bracket the optimum,
// then golden-section refinement to 1e-6.
inline YeoJohnsonFit fit_yeo_johnson(std::span<const double> xs) {
    if (xs.size() < 3) throw ValidationError("fit_yeo_johnson: need at least 3 values");
    const double first = xs[0];
    bool constant = true;
    for (double x : xs)
        if (x != first) {
            constant = false;
            break;
        }
    if (constant) throw std::runtime_error("fit_yeo_johnson: degenerate sample (zero variance)");

    double jac = 0.0;
    for (double x : xs) jac += (x >= 0.0 ? 1.0 : -1.0) * std::log1p(std::fabs(x));

    auto obj = [&](double lam) { return detail::yj_profile_loglik(xs, lam, jac); };

    constexpr double kLo = -5.0, kHi = 5.0;
    constexpr int kScan = 201;
    double best_lambda = kLo, best_val = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < kScan; ++i) {
        const double lam = kLo + (kHi - kLo) * i / (kScan - 1);
        const double v = obj(lam);
        if (v > best_val) {
            best_val = v;
            best_lambda = lam;
        }
    }
    const double step = (kHi - kLo) / (kScan - 1);
    double a = std::max(kLo, best_lambda - step);
    double b = std::min(kHi, best_lambda + step);

    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - phi * (b - a);
    double d = a + phi * (b - a);
    double fc = obj(c), fd = obj(d);
    while (b - a > 1e-6) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = obj(d);
        }
    }
    YeoJohnsonFit fit;
    fit.lambda = 0.5 * (a + b);
    fit.loglik = obj(fit.lambda);
    return fit;
}

// --- per-feature transform specs ------------------------------------------------

enum class TransformKind { identity, yeo_johnson, log10, log_e };

inline std::string to_string(TransformKind k) {
    switch (k) {
        case TransformKind::identity: return "identity";
        case TransformKind::yeo_johnson: return "yeo_johnson";
        case TransformKind::log10: return "log10";
        case TransformKind::log_e: return "log_e";
    }
    return "identity";
}

inline TransformKind transform_kind_from_string(const std::string& s) {
    if (s == "identity") return TransformKind::identity;
    if (s == "yeo_johnson") return TransformKind::yeo_johnson;
    if (s == "log10") return TransformKind::log10;
    if (s == "log_e") return TransformKind::log_e;
    throw ValidationError("unknown transform kind '" + s + "'");
}

struct FeatureTransform {
    std::string feature;
    TransformKind kind = TransformKind::yeo_johnson;
    double lambda = 1.0;     // yeo_johnson only
    double fit_loglik = 0.0;
    double center = 0.0;     // standardization, applied after the transform
    double scale = 1.0;
};

struct TransformSpec {
    std::vector<FeatureTransform> features;
    bool standardized = false;

    const FeatureTransform* find(const std::string& name) const {
        for (const auto& f : features)
            if (f.feature == name) return &f;
        return nullptr;
    }
};

inline double apply_feature_transform(const FeatureTransform& t, double x) {
    double y = x;
    switch (t.kind) {
        case TransformKind::identity: break;
        case TransformKind::yeo_johnson: y = yeo_johnson(x, t.lambda); break;
        case TransformKind::log10: y = std::log10(x); break;
        case TransformKind::log_e: y = std::log(x); break;
    }
    return (y - t.center) / t.scale;
}

// Fits per-column transforms on a fully imputed matrix. Log kinds require
// strictly positive columns.
inline TransformSpec fit_transform_spec(const FeatureMatrix& m,
                                        const std::map<std::string, TransformKind>& kinds,
                                        bool standardize) {
    TransformSpec spec;
    spec.standardized = standardize;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const std::string& name = m.feature_names[static_cast<std::size_t>(j)];
        FeatureTransform t;
        t.feature = name;
        auto it = kinds.find(name);
        t.kind = it != kinds.end() ? it->second : TransformKind::yeo_johnson;
        std::vector<double> col(m.values.col(j).data(), m.values.col(j).data() + m.rows());
        for (double v : col)
            if (std::isnan(v)) throw ValidationError("fit_transform_spec: matrix contains masked cells; impute first");
        if (t.kind == TransformKind::log10 || t.kind == TransformKind::log_e) {
            for (double v : col)
                if (v <= 0.0)
                    throw ValidationError("log transform requires strictly positive values for feature '" + name + "'");
        }
        if (t.kind == TransformKind::yeo_johnson) {
            bool constant = true;
            for (double v : col)
                if (v != col[0]) {
                    constant = false;
                    break;
                }
            if (constant) {
                // A constant column carries no information for the fit; keep it
                // at identity lambda rather than failing the whole spec.
                t.lambda = 1.0;
                t.fit_loglik = kNaN;
            } else {
                auto fit = fit_yeo_johnson(col);
                t.lambda = fit.lambda;
                t.fit_loglik = fit.loglik;
            }
        }
        if (standardize) {
            std::vector<double> transformed;
            transformed.reserve(col.size());
            FeatureTransform raw = t;
            raw.center = 0.0;
            raw.scale = 1.0;
            for (double v : col) transformed.push_back(apply_feature_transform(raw, v));
            t.center = mean(transformed);
            const double sd = stddev(transformed);
            t.scale = (std::isnan(sd) || sd <= 0.0) ? 1.0 : sd;
        }
        spec.features.push_back(t);
    }
    return spec;
}

inline FeatureMatrix apply_transform_spec(const FeatureMatrix& m, const TransformSpec& spec) {
    FeatureMatrix out = m;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const FeatureTransform* t = spec.find(m.feature_names[static_cast<std::size_t>(j)]);
        if (!t) throw ValidationError("transform spec has no entry for feature '" +
                                      m.feature_names[static_cast<std::size_t>(j)] + "'");
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            if (!m.is_masked(i, j)) out.values(i, j) = apply_feature_transform(*t, m.values(i, j));
    }
    return out;
}

inline nlohmann::json transform_spec_to_json(const TransformSpec& spec) {
    nlohmann::json j;
    j["standardized"] = spec.standardized;
    j["features"] = nlohmann::json::array();
    for (const auto& f : spec.features) {
        nlohmann::json e;
        e["feature"] = f.feature;
        e["kind"] = to_string(f.kind);
        e["lambda"] = f.lambda;
        e["fit_loglik"] = std::isnan(f.fit_loglik) ? nlohmann::json() : nlohmann::json(f.fit_loglik);
        e["center"] = f.center;
        e["scale"] = f.scale;
        j["features"].push_back(e);
    }
    return j;
}

inline TransformSpec transform_spec_from_json(const nlohmann::json& j) {
    TransformSpec spec;
    spec.standardized = j.at("standardized").get<bool>();
    for (const auto& e : j.at("features")) {
        FeatureTransform f;
        f.feature = e.at("feature").get<std::string>();
        f.kind = transform_kind_from_string(e.at("kind").get<std::string>());
        f.lambda = e.at("lambda").get<double>();
        f.fit_loglik = e.at("fit_loglik").is_null() ? kNaN : e.at("fit_loglik").get<double>();
        f.center = e.at("center").get<double>();
        f.scale = e.at("scale").get<double>();
        spec.features.push_back(f);
    }
    return spec;
}

}  // namespace phenomix
