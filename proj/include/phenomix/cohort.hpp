// Cohort ingestion: the five tabular inputs become immutable Encounter
// records with observation times normalized to hours since admission.
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phenomix/common.hpp"
#include "phenomix/csv.hpp"

namespace phenomix {

enum class Aggregation { median, min, max };

inline std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::median: return "median";
        case Aggregation::min: return "min";
        case Aggregation::max: return "max";
    }
    return "median";
}

inline Aggregation aggregation_from_string(const std::string& s) {
    if (s == "median") return Aggregation::median;
    if (s == "min") return Aggregation::min;
    if (s == "max") return Aggregation::max;
    throw ValidationError("unknown aggregation '" + s + "' (expected median|min|max)");
}

// A dictionary entry describes one named clinical feature. Most come from
// observation rows; "encounter_age" features are read off the encounter.
struct FeatureDef {
    std::string name;
    Aggregation default_aggregation = Aggregation::median;
    bool from_encounter_age = false;
};

struct SchemaConfig {
    std::vector<FeatureDef> dictionary;
    std::set<std::string> vasopressor_drugs = {"dopamine", "epinephrine", "norepinephrine",
                                               "phenylephrine", "vasopressin"};

    bool knows_feature(const std::string& name) const {
        for (const auto& d : dictionary)
            if (d.name == name) return true;
        return false;
    }
    const FeatureDef* find(const std::string& name) const {
        for (const auto& d : dictionary)
            if (d.name == name) return &d;
        return nullptr;
    }
};

struct Observation {
    std::string feature;
    double hours = 0.0;  // since admission
    double value = 0.0;
    bool operator==(const Observation&) const = default;
};

struct VasopressorEvent {
    std::string drug;
    double hours = 0.0;
    bool operator==(const VasopressorEvent&) const = default;
};

struct Encounter {
    std::string encounter_id;
    double age_years = 0.0;
    double admit_epoch_hours = 0.0;  // absolute admit time, hours since 1970-01-01
    double los_hours = 0.0;
    std::vector<Observation> observations;  // sorted by (feature, hours)
    std::vector<std::string> diagnosis_codes;
    std::vector<std::string> procedure_codes;
    std::vector<VasopressorEvent> vasopressor_events;
    bool died = false;
    bool operator==(const Encounter&) const = default;
};

struct FileLoadStats {
    std::size_t rows_read = 0;
    std::size_t rows_dropped = 0;
};

struct LoadReport {
    std::map<std::string, FileLoadStats> files;  // keyed by logical file name
    std::size_t duplicate_timestamp_merges = 0;
    std::vector<std::string> warnings;

    void warn(std::string msg) { warnings.push_back(std::move(msg)); }
};

struct Cohort {
    std::vector<Encounter> encounters;  // sorted by encounter_id
    SchemaConfig schema;
    LoadReport report;

    const Encounter* find(const std::string& id) const {
        auto it = std::lower_bound(encounters.begin(), encounters.end(), id,
                                   [](const Encounter& e, const std::string& k) { return e.encounter_id < k; });
        if (it != encounters.end() && it->encounter_id == id) return &*it;
        return nullptr;
    }
};

// --- timestamp handling ------------------------------------------------------

namespace detail {

// Days since 1970-01-01 for a civil date (Hinnant's algorithm).
inline long long days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const long long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

inline std::optional<double> parse_datetime_epoch_hours(std::string_view s) {
    // "YYYY-MM-DD HH:MM[:SS]" or with 'T' separator; seconds optional.
    if (s.size() < 16 || s[4] != '-' || s[7] != '-') return std::nullopt;
    if (s[10] != ' ' && s[10] != 'T') return std::nullopt;
    auto num = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
        int v = 0;
        for (std::size_t i = pos; i < pos + len; ++i) {
            if (i >= s.size() || s[i] < '0' || s[i] > '9') return std::nullopt;
            v = v * 10 + (s[i] - '0');
        }
        return v;
    };
    auto y = num(0, 4), mo = num(5, 2), d = num(8, 2), h = num(11, 2), mi = num(14, 2);
    if (!y || !mo || !d || !h || !mi) return std::nullopt;
    int sec = 0;
    if (s.size() >= 19 && s[16] == ':') {
        auto se = num(17, 2);
        if (!se) return std::nullopt;
        sec = *se;
    }
    if (*mo < 1 || *mo > 12 || *d < 1 || *d > 31 || *h > 23 || *mi > 59 || sec > 60) return std::nullopt;
    const long long days = days_from_civil(*y, static_cast<unsigned>(*mo), static_cast<unsigned>(*d));
    return static_cast<double>(days) * 24.0 + *h + *mi / 60.0 + sec / 3600.0;
}

inline std::string format_epoch_hours(double epoch_hours) {
    // Inverse of parse_datetime_epoch_hours, to the nearest second.
    long long total_sec = static_cast<long long>(std::llround(epoch_hours * 3600.0));
    long long days = total_sec / 86400;
    long long rem = total_sec % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    // civil_from_days (Hinnant)
    long long z = days + 719468;
    const long long era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long long y = static_cast<long long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02u %02lld:%02lld:%02lld", y + (m <= 2), m, d, rem / 3600,
                  (rem % 3600) / 60, rem % 60);
    return std::string(buf);
}

}  // namespace detail

// Time fields accept either an absolute timestamp ("YYYY-MM-DD HH:MM:SS") or
// a plain number. For admit_time a number is epoch hours; for event rows a
// number is hours since admission.
inline std::optional<double> parse_admit_time(const std::string& s) {
    if (auto dt = detail::parse_datetime_epoch_hours(s)) return dt;
    return parse_double(s);
}

inline std::optional<double> parse_event_hours(const std::string& s, double admit_epoch_hours) {
    if (auto dt = detail::parse_datetime_epoch_hours(s)) return *dt - admit_epoch_hours;
    return parse_double(s);
}

// --- loading -----------------------------------------------------------------

namespace detail {

inline bool parse_bool_flag(const std::string& s, bool& out) {
    if (s == "0" || s == "false" || s == "False" || s == "FALSE") {
        out = false;
        return true;
    }
    if (s == "1" || s == "true" || s == "True" || s == "TRUE") {
        out = true;
        return true;
    }
    return false;
}

// Average observations of the same feature at exactly the same timestamp.
// Duplicate resolution is reported so the choice is visible downstream.
inline void merge_duplicate_timestamps(Encounter& e, LoadReport& report) {
    std::sort(e.observations.begin(), e.observations.end(), [](const Observation& a, const Observation& b) {
        if (a.feature != b.feature) return a.feature < b.feature;
        if (a.hours != b.hours) return a.hours < b.hours;
        return a.value < b.value;
    });
    std::vector<Observation> merged;
    merged.reserve(e.observations.size());
    std::size_t i = 0;
    while (i < e.observations.size()) {
        std::size_t j = i + 1;
        double sum = e.observations[i].value;
        while (j < e.observations.size() && e.observations[j].feature == e.observations[i].feature &&
               e.observations[j].hours == e.observations[i].hours) {
            sum += e.observations[j].value;
            ++j;
        }
        Observation o = e.observations[i];
        if (j - i > 1) {
            o.value = sum / static_cast<double>(j - i);
            report.duplicate_timestamp_merges += j - i - 1;
        }
        merged.push_back(o);
        i = j;
    }
    e.observations = std::move(merged);
}

}  // namespace detail

inline Cohort load_cohort(const std::string& encounters_path, const std::string& observations_path,
                          const std::string& diagnoses_path, const std::string& procedures_path,
                          const std::string& meds_path, const SchemaConfig& schema) {
    Cohort cohort;
    cohort.schema = schema;
    LoadReport& report = cohort.report;

    std::map<std::string, Encounter> by_id;

    {
        CsvTable t = read_csv(encounters_path);
        const int c_id = t.require_column("encounter_id", encounters_path);
        const int c_age = t.require_column("age_years", encounters_path);
        const int c_admit = t.require_column("admit_time", encounters_path);
        const int c_los = t.require_column("los_hours", encounters_path);
        const int c_died = t.require_column("died", encounters_path);
        auto& stats = report.files["encounters"];
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            ++stats.rows_read;
            const auto& row = t.rows[r];
            const std::string id = row[c_id];
            auto age = parse_double(row[c_age]);
            auto admit = parse_admit_time(row[c_admit]);
            auto los = parse_double(row[c_los]);
            bool died = false;
            if (id.empty() || !age || *age < 0.0 || !admit || !los || *los <= 0.0 ||
                !detail::parse_bool_flag(row[c_died], died)) {
                ++stats.rows_dropped;
                report.warn("encounters line " + std::to_string(t.line_numbers[r]) + ": unparseable row skipped");
                continue;
            }
            if (by_id.count(id)) throw ValidationError("duplicate encounter_id '" + id + "' in " + encounters_path);
            if (*age > 18.0)
                report.warn("encounters line " + std::to_string(t.line_numbers[r]) + ": age " + format_double(*age) +
                            " exceeds pediatric range (accepted)");
            Encounter e;
            e.encounter_id = id;
            e.age_years = *age;
            e.admit_epoch_hours = *admit;
            e.los_hours = *los;
            e.died = died;
            by_id.emplace(id, std::move(e));
        }
    }

    {
        CsvTable t = read_csv(observations_path);
        const int c_id = t.require_column("encounter_id", observations_path);
        const int c_feat = t.require_column("feature", observations_path);
        const int c_time = t.require_column("time", observations_path);
        const int c_value = t.require_column("value", observations_path);
        auto& stats = report.files["observations"];
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            ++stats.rows_read;
            const auto& row = t.rows[r];
            auto it = by_id.find(row[c_id]);
            const std::string line = std::to_string(t.line_numbers[r]);
            if (it == by_id.end()) {
                ++stats.rows_dropped;
                report.warn("observations line " + line + ": unknown encounter_id, row skipped");
                continue;
            }
            if (!schema.knows_feature(row[c_feat])) {
                ++stats.rows_dropped;
                report.warn("observations line " + line + ": feature '" + row[c_feat] +
                            "' not in dictionary, row skipped");
                continue;
            }
            auto hours = parse_event_hours(row[c_time], it->second.admit_epoch_hours);
            auto value = parse_double(row[c_value]);
            if (!hours || !value) {
                ++stats.rows_dropped;
                report.warn("observations line " + line + ": unparseable row skipped");
                continue;
            }
            if (*hours < 0.0 || *hours > it->second.los_hours) {
                ++stats.rows_dropped;
                report.warn("observations line " + line + ": timestamp outside stay, row dropped");
                continue;
            }
            it->second.observations.push_back({row[c_feat], *hours, *value});
        }
    }

    auto load_codes = [&](const std::string& path, const char* logical, const std::string& code_col,
                          std::vector<std::string> Encounter::* field) {
        CsvTable t = read_csv(path);
        const int c_id = t.require_column("encounter_id", path);
        const int c_ver = t.require_column("icd_version", path);
        const int c_code = t.require_column(code_col, path);
        auto& stats = report.files[logical];
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            ++stats.rows_read;
            const auto& row = t.rows[r];
            auto it = by_id.find(row[c_id]);
            if (it == by_id.end() || row[c_code].empty() || row[c_ver].empty()) {
                ++stats.rows_dropped;
                report.warn(std::string(logical) + " line " + std::to_string(t.line_numbers[r]) + ": row skipped");
                continue;
            }
            (it->second.*field).push_back(row[c_code]);
        }
    };
    load_codes(diagnoses_path, "diagnoses", "code", &Encounter::diagnosis_codes);
    load_codes(procedures_path, "procedures", "code", &Encounter::procedure_codes);

    {
        CsvTable t = read_csv(meds_path);
        const int c_id = t.require_column("encounter_id", meds_path);
        const int c_drug = t.require_column("drug", meds_path);
        const int c_time = t.require_column("time", meds_path);
        auto& stats = report.files["meds"];
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            ++stats.rows_read;
            const auto& row = t.rows[r];
            auto it = by_id.find(row[c_id]);
            const std::string line = std::to_string(t.line_numbers[r]);
            if (it == by_id.end()) {
                ++stats.rows_dropped;
                report.warn("meds line " + line + ": unknown encounter_id, row skipped");
                continue;
            }
            std::string drug = row[c_drug];
            std::transform(drug.begin(), drug.end(), drug.begin(), [](unsigned char c) { return std::tolower(c); });
            if (!schema.vasopressor_drugs.count(drug)) {
                ++stats.rows_dropped;
                continue;  // non-vasopressor medication, outside scope
            }
            auto hours = parse_event_hours(row[c_time], it->second.admit_epoch_hours);
            if (!hours || *hours < 0.0 || *hours > it->second.los_hours) {
                ++stats.rows_dropped;
                report.warn("meds line " + line + ": bad or out-of-stay timestamp, row dropped");
                continue;
            }
            it->second.vasopressor_events.push_back({drug, *hours});
        }
    }

    cohort.encounters.reserve(by_id.size());
    for (auto& [id, e] : by_id) {
        detail::merge_duplicate_timestamps(e, report);
        std::sort(e.diagnosis_codes.begin(), e.diagnosis_codes.end());
        std::sort(e.procedure_codes.begin(), e.procedure_codes.end());
        std::sort(e.vasopressor_events.begin(), e.vasopressor_events.end(),
                  [](const VasopressorEvent& a, const VasopressorEvent& b) {
                      return a.hours != b.hours ? a.hours < b.hours : a.drug < b.drug;
                  });
        cohort.encounters.push_back(std::move(e));
    }
    return cohort;
}

// Canonical re-serialization: event times as plain hours since admission,
// admit_time as a datetime string. load(save(load(x))) == load(x).
inline void save_cohort(const Cohort& cohort, const std::string& encounters_path,
                        const std::string& observations_path, const std::string& diagnoses_path,
                        const std::string& procedures_path, const std::string& meds_path) {
    CsvWriter enc(encounters_path);
    enc.row({"encounter_id", "age_years", "admit_time", "los_hours", "died"});
    CsvWriter obs(observations_path);
    obs.row({"encounter_id", "feature", "time", "value"});
    CsvWriter dx(diagnoses_path);
    dx.row({"encounter_id", "icd_version", "code"});
    CsvWriter px(procedures_path);
    px.row({"encounter_id", "icd_version", "code"});
    CsvWriter meds(meds_path);
    meds.row({"encounter_id", "drug", "time"});
    for (const auto& e : cohort.encounters) {
        enc.row({e.encounter_id, format_double(e.age_years), detail::format_epoch_hours(e.admit_epoch_hours),
                 format_double(e.los_hours), e.died ? "1" : "0"});
        for (const auto& o : e.observations)
            obs.row({e.encounter_id, o.feature, format_double(o.hours), format_double(o.value)});
        for (const auto& c : e.diagnosis_codes) dx.row({e.encounter_id, "9", c});
        for (const auto& c : e.procedure_codes) px.row({e.encounter_id, "9", c});
        for (const auto& v : e.vasopressor_events) meds.row({e.encounter_id, v.drug, format_double(v.hours)});
    }
}

inline Cohort subset_cohort(const Cohort& cohort, const std::vector<std::string>& ids) {
    Cohort out;
    out.schema = cohort.schema;
    for (const auto& id : ids) {
        const Encounter* e = cohort.find(id);
        if (e) out.encounters.push_back(*e);
    }
    std::sort(out.encounters.begin(), out.encounters.end(),
              [](const Encounter& a, const Encounter& b) { return a.encounter_id < b.encounter_id; });
    return out;
}

}  // namespace phenomix
