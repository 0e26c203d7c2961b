// Windowed feature extraction, missingness profiling, and median imputation.
#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phenomix/cohort.hpp"
#include "phenomix/common.hpp"
#include "phenomix/csv.hpp"

namespace phenomix {

enum class Window { h6, h12, h24, whole_los, post_onset };

inline std::string to_string(Window w) {
    switch (w) {
        case Window::h6: return "6h";
        case Window::h12: return "12h";
        case Window::h24: return "24h";
        case Window::whole_los: return "whole_los";
        case Window::post_onset: return "post_onset";
    }
    return "whole_los";
}

inline Window window_from_string(const std::string& s) {
    if (s == "6h") return Window::h6;
    if (s == "12h") return Window::h12;
    if (s == "24h") return Window::h24;
    if (s == "whole_los" || s == "whole_LOS") return Window::whole_los;
    if (s == "post_onset") return Window::post_onset;
    throw ValidationError("unknown window '" + s + "' (expected 6h|12h|24h|whole_los|post_onset)");
}

struct FeatureSpec {
    std::vector<std::string> names;
    std::map<std::string, Aggregation> aggregation_override;  // default comes from the dictionary
};

struct FeatureMatrix {
    std::vector<std::string> feature_names;
    std::vector<std::string> encounter_ids;  // row order
    Eigen::MatrixXd values;                  // masked slots hold NaN
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;  // 1 = missing
    Window window = Window::whole_los;
    std::map<std::string, Aggregation> aggregation;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index cols() const { return values.cols(); }
    bool is_masked(Eigen::Index i, Eigen::Index j) const { return mask(i, j) != 0; }
    int column(const std::string& name) const {
        for (std::size_t j = 0; j < feature_names.size(); ++j)
            if (feature_names[j] == name) return static_cast<int>(j);
        return -1;
    }
    std::vector<double> observed_column(Eigen::Index j) const {
        std::vector<double> out;
        for (Eigen::Index i = 0; i < rows(); ++i)
            if (!is_masked(i, j)) out.push_back(values(i, j));
        return out;
    }
};

namespace detail {

inline double aggregate(std::vector<double>& vals, Aggregation agg) {
    switch (agg) {
        case Aggregation::median: {
            std::sort(vals.begin(), vals.end());
            return median_sorted(vals);
        }
        case Aggregation::min: return *std::min_element(vals.begin(), vals.end());
        case Aggregation::max: return *std::max_element(vals.begin(), vals.end());
    }
    return kNaN;
}

}  // namespace detail

// onset_hours is required for (and only used by) Window::post_onset: rows
// without an onset entry come out fully masked.
inline FeatureMatrix extract_features(const Cohort& cohort, Window window, const FeatureSpec& spec,
                                      const std::map<std::string, double>* onset_hours = nullptr,
                                      std::vector<std::string>* warnings = nullptr) {
    if (spec.names.empty()) throw ValidationError("feature spec is empty");
    for (const auto& name : spec.names)
        if (!cohort.schema.knows_feature(name))
            throw ValidationError("unknown feature '" + name + "' in feature spec");
    if (window == Window::post_onset && onset_hours == nullptr)
        throw ValidationError("post_onset window requires onset hours");

    const auto n = static_cast<Eigen::Index>(cohort.encounters.size());
    const auto d = static_cast<Eigen::Index>(spec.names.size());
    FeatureMatrix m;
    m.feature_names = spec.names;
    m.window = window;
    m.values = Eigen::MatrixXd::Constant(n, d, kNaN);
    m.mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, d, 1);
    m.encounter_ids.reserve(cohort.encounters.size());

    std::vector<Aggregation> agg(d);
    std::vector<const FeatureDef*> defs(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        defs[j] = cohort.schema.find(spec.names[j]);
        auto it = spec.aggregation_override.find(spec.names[j]);
        agg[j] = it != spec.aggregation_override.end() ? it->second : defs[j]->default_aggregation;
        m.aggregation[spec.names[j]] = agg[j];
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        const Encounter& e = cohort.encounters[static_cast<std::size_t>(i)];
        m.encounter_ids.push_back(e.encounter_id);
        double lo = 0.0, hi = e.los_hours;
        bool window_defined = true;
        switch (window) {
            case Window::h6: hi = std::min(hi, 6.0); break;
            case Window::h12: hi = std::min(hi, 12.0); break;
            case Window::h24: hi = std::min(hi, 24.0); break;
            case Window::whole_los: break;
            case Window::post_onset: {
                auto it = onset_hours->find(e.encounter_id);
                if (it == onset_hours->end()) window_defined = false;
                else lo = it->second;
                break;
            }
        }
        for (Eigen::Index j = 0; j < d; ++j) {
            if (defs[j]->from_encounter_age) {
                m.values(i, j) = e.age_years;
                m.mask(i, j) = 0;
                continue;
            }
            if (!window_defined) continue;
            std::vector<double> in_window;
            for (const auto& o : e.observations)
                if (o.feature == spec.names[j] && o.hours >= lo && o.hours <= hi) in_window.push_back(o.value);
            if (in_window.empty()) continue;
            m.values(i, j) = detail::aggregate(in_window, agg[j]);
            m.mask(i, j) = 0;
        }
    }

    if (warnings) {
        for (Eigen::Index j = 0; j < d; ++j) {
            bool any = false;
            for (Eigen::Index i = 0; i < n && !any; ++i) any = !m.is_masked(i, j);
            if (!any && n > 0)
                warnings->push_back("feature '" + spec.names[static_cast<std::size_t>(j)] +
                                    "' has no in-window observations for any encounter (column fully masked)");
        }
    }
    return m;
}

// --- missingness profile ------------------------------------------------------

struct FeatureProfile {
    std::string feature;
    double pct_missing = 0.0;  // already rounded to one decimal
    double mean = kNaN;
    double sd = kNaN;
    double min = kNaN;
    double median = kNaN;
    double max = kNaN;
};

inline std::vector<FeatureProfile> missingness_profile(const FeatureMatrix& m) {
    if (m.rows() == 0) throw ValidationError("missingness_profile: empty matrix");
    std::vector<FeatureProfile> out;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        FeatureProfile p;
        p.feature = m.feature_names[static_cast<std::size_t>(j)];
        std::vector<double> obs = m.observed_column(j);
        const double n = static_cast<double>(m.rows());
        p.pct_missing = std::round((n - static_cast<double>(obs.size())) / n * 1000.0) / 10.0;
        if (!obs.empty()) {
            std::sort(obs.begin(), obs.end());
            p.mean = mean(obs);
            p.sd = obs.size() >= 2 ? stddev(obs) : kNaN;
            p.min = obs.front();
            p.median = median_sorted(obs);
            p.max = obs.back();
        }
        out.push_back(p);
    }
    return out;
}

// Table-1-style rendering, one decimal throughout.
inline void write_missingness_csv(const std::vector<FeatureProfile>& profiles, const std::string& path,
                                  const std::string& config_hash = "") {
    CsvWriter w(path);
    if (!config_hash.empty()) w.comment("config_hash=" + config_hash);
    w.row({"feature", "pct_missing", "mean", "sd", "min", "median", "max"});
    for (const auto& p : profiles)
        w.row({p.feature, format_fixed(p.pct_missing, 1), format_fixed(p.mean, 1), format_fixed(p.sd, 1),
               format_fixed(p.min, 1), format_fixed(p.median, 1), format_fixed(p.max, 1)});
}

// --- imputation ---------------------------------------------------------------

struct MedianSource {
    // Empty map means "self": medians computed on the matrix being imputed.
    std::map<std::string, double> medians;
    bool self() const { return medians.empty(); }
};

struct ImputeResult {
    FeatureMatrix matrix;
    std::map<std::string, std::size_t> imputed_per_column;
    std::vector<std::string> dropped_columns;
    std::map<std::string, double> medians_used;
};

inline ImputeResult impute_median(const FeatureMatrix& m, const MedianSource& source,
                                  const std::set<std::string>& drop_if_all_missing = {}) {
    ImputeResult res;
    const bool self = source.self();

    std::vector<bool> drop(static_cast<std::size_t>(m.cols()), false);
    std::vector<double> med(static_cast<std::size_t>(m.cols()), kNaN);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const std::string& name = m.feature_names[static_cast<std::size_t>(j)];
        if (self) {
            std::vector<double> obs = m.observed_column(j);
            if (obs.empty()) {
                if (drop_if_all_missing.count(name)) {
                    drop[static_cast<std::size_t>(j)] = true;
                    res.dropped_columns.push_back(name);
                    continue;
                }
                throw std::runtime_error("impute_median: column '" + name +
                                         "' is fully missing and not listed in drop_if_all_missing");
            }
            med[static_cast<std::size_t>(j)] = median(std::move(obs));
        } else {
            auto it = source.medians.find(name);
            if (it == source.medians.end() || std::isnan(it->second)) {
                if (drop_if_all_missing.count(name)) {
                    drop[static_cast<std::size_t>(j)] = true;
                    res.dropped_columns.push_back(name);
                    continue;
                }
                throw std::runtime_error("impute_median: no median available for column '" + name + "'");
            }
            med[static_cast<std::size_t>(j)] = it->second;
        }
        res.medians_used[name] = med[static_cast<std::size_t>(j)];
    }

    FeatureMatrix& out = res.matrix;
    out.window = m.window;
    Eigen::Index kept = 0;
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (!drop[static_cast<std::size_t>(j)]) ++kept;
    out.values.resize(m.rows(), kept);
    out.mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(m.rows(), kept);
    out.encounter_ids = m.encounter_ids;
    Eigen::Index jj = 0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (drop[static_cast<std::size_t>(j)]) continue;
        const std::string& name = m.feature_names[static_cast<std::size_t>(j)];
        out.feature_names.push_back(name);
        out.aggregation[name] = m.aggregation.count(name) ? m.aggregation.at(name) : Aggregation::median;
        std::size_t count = 0;
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            if (m.is_masked(i, j)) {
                out.values(i, jj) = med[static_cast<std::size_t>(j)];
                ++count;
            } else {
                out.values(i, jj) = m.values(i, j);
            }
        }
        res.imputed_per_column[name] = count;
        ++jj;
    }
    return res;
}

// --- matrix serialization -------------------------------------------------------

inline void write_feature_matrix_csv(const FeatureMatrix& m, const std::string& path,
                                     const std::string& config_hash = "") {
    CsvWriter w(path);
    if (!config_hash.empty()) w.comment("config_hash=" + config_hash);
    std::vector<std::string> header = {"encounter_id"};
    header.insert(header.end(), m.feature_names.begin(), m.feature_names.end());
    w.row(header);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<std::string> row = {m.encounter_ids[static_cast<std::size_t>(i)]};
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row.push_back(m.is_masked(i, j) ? std::string() : format_double(m.values(i, j)));
        w.row(row);
    }
}

inline FeatureMatrix read_feature_matrix_csv(const std::string& path, Window window) {
    CsvTable t = read_csv(path);
    if (t.header.empty() || t.header[0] != "encounter_id")
        throw ValidationError("feature matrix CSV must start with encounter_id column: " + path);
    FeatureMatrix m;
    m.window = window;
    m.feature_names.assign(t.header.begin() + 1, t.header.end());
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    const auto d = static_cast<Eigen::Index>(m.feature_names.size());
    m.values = Eigen::MatrixXd::Constant(n, d, kNaN);
    m.mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, d, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = t.rows[static_cast<std::size_t>(i)];
        if (row.size() != m.feature_names.size() + 1)
            throw ValidationError("bad field count at line " +
                                  std::to_string(t.line_numbers[static_cast<std::size_t>(i)]) + " in " + path);
        m.encounter_ids.push_back(row[0]);
        for (Eigen::Index j = 0; j < d; ++j) {
            const std::string& cell = row[static_cast<std::size_t>(j) + 1];
            if (cell.empty()) continue;
            auto v = parse_double(cell);
            if (!v) throw ValidationError("bad numeric cell in " + path);
            m.values(i, j) = *v;
            m.mask(i, j) = 0;
        }
    }
    return m;
}

}  // namespace phenomix
