// Sepsis case definition and onset detection: ICD infection screen plus
// organ-dysfunction codes, then earliest abnormal SOFA-component time.
#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "phenomix/cohort.hpp"
#include "phenomix/common.hpp"
#include "phenomix/csv.hpp"

namespace phenomix {

// Codes compare period-free: "287.5" and "2875" are the same code.
inline std::string normalize_code(std::string_view code) {
    std::string out;
    out.reserve(code.size());
    for (char c : code) {
        if (c == '.' || c == ' ' || c == '\t') continue;
        out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

struct CodeScreenConfig {
    // Infection prefixes keyed by prefix length. Defaults hold lengths 3/4/5;
    // merged ICD-10 equivalents may add other lengths.
    std::map<std::size_t, std::set<std::string>> infection_prefixes;
    std::set<std::string> organ_dysfunction_codes;
    std::set<std::string> mech_vent_procedure_codes;

    static CodeScreenConfig defaults();

    // Merge a user-supplied ICD-10 equivalence table: an ICD-10 code whose
    // ICD-9 equivalent screens positive is added to the matching set.
    void merge_icd10_map(const std::vector<std::pair<std::string, std::string>>& pairs);
};

inline CodeScreenConfig CodeScreenConfig::defaults() {
    CodeScreenConfig c;
    c.infection_prefixes[3] = {
        "001", "002", "003", "004", "005", "008", "009", "010", "011", "012", "013", "014", "015", "016",
        "017", "018", "020", "021", "022", "023", "024", "025", "026", "027", "030", "031", "032", "033",
        "034", "035", "036", "037", "038", "039", "040", "041", "090", "091", "092", "093", "094", "095",
        "096", "097", "098", "100", "101", "102", "103", "104", "110", "111", "112", "114", "115", "116",
        "117", "118", "320", "322", "324", "325", "420", "421", "451", "461", "462", "463", "464", "465",
        "481", "482", "485", "486", "494", "510", "513", "540", "541", "542", "566", "567", "590", "597",
        "601", "614", "615", "616", "681", "682", "683", "686", "730"};
    c.infection_prefixes[4] = {"5695", "5720", "5721", "5750", "5990", "7110", "7907", "9966", "9985", "9993"};
    c.infection_prefixes[5] = {"49121", "56201", "56203", "56211", "56213", "56983"};
    c.organ_dysfunction_codes = {"2875", "4589", "570",   "5849",  "3481", "78559",
                                 "34830", "2939", "28749", "2869", "2866", "5734"};
    c.mech_vent_procedure_codes = {"9670", "9671", "9672"};
    return c;
}

inline bool match_infection(std::span<const std::string> diagnosis_codes, const CodeScreenConfig& cfg) {
    for (const auto& raw : diagnosis_codes) {
        const std::string code = normalize_code(raw);
        for (const auto& [len, prefixes] : cfg.infection_prefixes) {
            if (code.size() < len) continue;
            if (prefixes.count(code.substr(0, len))) return true;
        }
    }
    return false;
}

inline bool match_organ_dysfunction(std::span<const std::string> diagnosis_codes,
                                    std::span<const std::string> procedure_codes, const CodeScreenConfig& cfg) {
    for (const auto& raw : diagnosis_codes)
        if (cfg.organ_dysfunction_codes.count(normalize_code(raw))) return true;
    for (const auto& raw : procedure_codes)
        if (cfg.mech_vent_procedure_codes.count(normalize_code(raw))) return true;
    return false;
}

inline bool label_sepsis(const Encounter& e, const CodeScreenConfig& cfg) {
    return match_infection(e.diagnosis_codes, cfg) && match_organ_dysfunction(e.diagnosis_codes, e.procedure_codes, cfg);
}

inline void CodeScreenConfig::merge_icd10_map(const std::vector<std::pair<std::string, std::string>>& pairs) {
    CodeScreenConfig probe = *this;
    for (const auto& [icd10_raw, icd9_raw] : pairs) {
        const std::string icd10 = normalize_code(icd10_raw);
        const std::string icd9 = normalize_code(icd9_raw);
        if (icd10.empty() || icd9.empty()) continue;
        const std::vector<std::string> one = {icd9};
        if (match_infection(one, probe)) infection_prefixes[icd10.size()].insert(icd10);
        if (probe.organ_dysfunction_codes.count(icd9)) organ_dysfunction_codes.insert(icd10);
        if (probe.mech_vent_procedure_codes.count(icd9)) mech_vent_procedure_codes.insert(icd10);
    }
}

inline std::vector<std::pair<std::string, std::string>> load_icd10_map_csv(const std::string& path) {
    CsvTable t = read_csv(path);
    const int c10 = t.require_column("icd10_code", path);
    const int c9 = t.require_column("icd9_equivalent", path);
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& row : t.rows) out.emplace_back(row[c10], row[c9]);
    return out;
}

// --- age-adjusted SOFA component thresholds -----------------------------------

enum class SofaComponent { respiratory, coagulation, liver, cardiovascular, neurological, renal };

inline std::string to_string(SofaComponent c) {
    switch (c) {
        case SofaComponent::respiratory: return "respiratory";
        case SofaComponent::coagulation: return "coagulation";
        case SofaComponent::liver: return "liver";
        case SofaComponent::cardiovascular: return "cardiovascular";
        case SofaComponent::neurological: return "neurological";
        case SofaComponent::renal: return "renal";
    }
    return "respiratory";
}

inline SofaComponent sofa_component_from_string(const std::string& s) {
    if (s == "respiratory") return SofaComponent::respiratory;
    if (s == "coagulation") return SofaComponent::coagulation;
    if (s == "liver") return SofaComponent::liver;
    if (s == "cardiovascular") return SofaComponent::cardiovascular;
    if (s == "neurological") return SofaComponent::neurological;
    if (s == "renal") return SofaComponent::renal;
    throw ValidationError("unknown SOFA component '" + s + "'");
}

enum class Comparator { lt, le, gt, ge };

inline std::string to_string(Comparator c) {
    switch (c) {
        case Comparator::lt: return "<";
        case Comparator::le: return "<=";
        case Comparator::gt: return ">";
        case Comparator::ge: return ">=";
    }
    return "<";
}

inline Comparator comparator_from_string(const std::string& s) {
    if (s == "<") return Comparator::lt;
    if (s == "<=") return Comparator::le;
    if (s == ">") return Comparator::gt;
    if (s == ">=") return Comparator::ge;
    throw ValidationError("unknown comparator '" + s + "' (expected <|<=|>|>=)");
}

inline bool compare(double x, Comparator c, double v) {
    switch (c) {
        case Comparator::lt: return x < v;
        case Comparator::le: return x <= v;
        case Comparator::gt: return x > v;
        case Comparator::ge: return x >= v;
    }
    return false;
}

struct SofaRule {
    SofaComponent component;
    double age_lo = 0.0;  // years, inclusive
    double age_hi = 18.0;  // exclusive, except the final band which includes 18
    std::string measurement;
    Comparator comparator = Comparator::lt;
    double value = 0.0;
};

// Fully config-driven abnormality thresholds. The shipped defaults are a
// provisional table adapted from published pediatric SOFA cutoffs (score>=1
// boundaries) and are meant to be replaced by a site-specific CSV.
struct SofaThresholds {
    std::vector<SofaRule> rules;

    static SofaThresholds defaults();
    void validate() const;

    bool rule_applies(const SofaRule& r, double age) const {
        if (age >= r.age_lo && age < r.age_hi) return true;
        return age == 18.0 && r.age_hi == 18.0;  // close the last band at 18
    }
};

inline SofaThresholds SofaThresholds::defaults() {
    using C = SofaComponent;
    SofaThresholds t;
    t.rules = {
        {C::respiratory, 0.0, 18.0, "pao2", Comparator::lt, 60.0},
        {C::coagulation, 0.0, 18.0, "platelet", Comparator::lt, 100.0},
        {C::liver, 0.0, 18.0, "bilirubin", Comparator::ge, 1.2},
        {C::cardiovascular, 0.0, 1.0, "map", Comparator::lt, 55.0},
        {C::cardiovascular, 1.0, 2.0, "map", Comparator::lt, 60.0},
        {C::cardiovascular, 2.0, 5.0, "map", Comparator::lt, 62.0},
        {C::cardiovascular, 5.0, 12.0, "map", Comparator::lt, 65.0},
        {C::cardiovascular, 12.0, 18.0, "map", Comparator::lt, 67.0},
        {C::neurological, 0.0, 18.0, "gcs", Comparator::lt, 15.0},
        {C::renal, 0.0, 1.0, "creatinine", Comparator::ge, 0.3},
        {C::renal, 1.0, 2.0, "creatinine", Comparator::ge, 0.4},
        {C::renal, 2.0, 5.0, "creatinine", Comparator::ge, 0.6},
        {C::renal, 5.0, 12.0, "creatinine", Comparator::ge, 0.7},
        {C::renal, 12.0, 18.0, "creatinine", Comparator::ge, 1.0},
    };
    return t;
}

inline void SofaThresholds::validate() const {
    if (rules.empty()) throw ValidationError("SOFA threshold table is empty");
    // Bands of each (component, measurement) pair must partition [0, 18].
    std::map<std::pair<std::string, std::string>, std::vector<const SofaRule*>> groups;
    for (const auto& r : rules) {
        if (r.age_lo < 0.0 || r.age_hi <= r.age_lo)
            throw ValidationError("SOFA rule with invalid age band for measurement '" + r.measurement + "'");
        groups[{to_string(r.component), r.measurement}].push_back(&r);
    }
    for (auto& [key, rs] : groups) {
        std::sort(rs.begin(), rs.end(), [](const SofaRule* a, const SofaRule* b) { return a->age_lo < b->age_lo; });
        if (rs.front()->age_lo != 0.0)
            throw ValidationError("SOFA bands for " + key.first + "/" + key.second + " do not start at age 0");
        for (std::size_t i = 1; i < rs.size(); ++i)
            if (rs[i]->age_lo != rs[i - 1]->age_hi)
                throw ValidationError("SOFA bands for " + key.first + "/" + key.second + " have a gap or overlap");
        if (rs.back()->age_hi != 18.0)
            throw ValidationError("SOFA bands for " + key.first + "/" + key.second + " do not end at age 18");
    }
}

inline SofaThresholds load_sofa_thresholds_csv(const std::string& path) {
    CsvTable t = read_csv(path);
    const int c_comp = t.require_column("component", path);
    const int c_lo = t.require_column("age_lo", path);
    const int c_hi = t.require_column("age_hi", path);
    const int c_meas = t.require_column("measurement", path);
    const int c_cmp = t.require_column("comparator", path);
    const int c_val = t.require_column("value", path);
    SofaThresholds out;
    for (const auto& row : t.rows) {
        SofaRule r;
        r.component = sofa_component_from_string(row[c_comp]);
        auto lo = parse_double(row[c_lo]), hi = parse_double(row[c_hi]), v = parse_double(row[c_val]);
        if (!lo || !hi || !v) throw ValidationError("bad numeric field in SOFA threshold CSV: " + path);
        r.age_lo = *lo;
        r.age_hi = *hi;
        r.measurement = row[c_meas];
        r.comparator = comparator_from_string(row[c_cmp]);
        r.value = *v;
        out.rules.push_back(r);
    }
    out.validate();
    return out;
}

inline void save_sofa_thresholds_csv(const SofaThresholds& t, const std::string& path) {
    CsvWriter w(path);
    w.row({"component", "age_lo", "age_hi", "measurement", "comparator", "value"});
    for (const auto& r : t.rules)
        w.row({to_string(r.component), format_double(r.age_lo), format_double(r.age_hi), r.measurement,
               to_string(r.comparator), format_double(r.value)});
}

// --- component evaluation and onset -------------------------------------------

struct ComponentFlag {
    double hours = 0.0;
    bool abnormal = false;
};

// Flags are evaluated at observation timestamps only (no interpolation).
// Vasopressor administration forces the cardiovascular component abnormal
// at the event time.
inline std::map<SofaComponent, std::vector<ComponentFlag>> sofa_components(const Encounter& e,
                                                                           const SofaThresholds& thresholds) {
    std::map<SofaComponent, std::vector<ComponentFlag>> out;
    for (const auto& rule : thresholds.rules) {
        if (!thresholds.rule_applies(rule, e.age_years)) continue;
        auto& series = out[rule.component];
        for (const auto& o : e.observations) {
            if (o.feature != rule.measurement) continue;
            series.push_back({o.hours, compare(o.value, rule.comparator, rule.value)});
        }
    }
    auto& cardio = out[SofaComponent::cardiovascular];
    for (const auto& v : e.vasopressor_events) cardio.push_back({v.hours, true});
    for (auto& [comp, series] : out)
        std::sort(series.begin(), series.end(),
                  [](const ComponentFlag& a, const ComponentFlag& b) { return a.hours < b.hours; });
    return out;
}

struct OnsetResult {
    std::optional<double> onset_hours;
    bool screening_inconsistency = false;  // sepsis by codes, no abnormal component
};

inline OnsetResult detect_onset(const Encounter& e, const CodeScreenConfig& codes, const SofaThresholds& thresholds) {
    if (!label_sepsis(e, codes))
        throw std::logic_error("detect_onset called on encounter that does not meet the sepsis case definition");
    auto components = sofa_components(e, thresholds);
    std::optional<double> earliest;
    for (const auto& [comp, series] : components)
        for (const auto& flag : series)
            if (flag.abnormal && (!earliest || flag.hours < *earliest)) earliest = flag.hours;
    OnsetResult r;
    r.onset_hours = earliest;
    r.screening_inconsistency = !earliest.has_value();
    return r;
}

}  // namespace phenomix
