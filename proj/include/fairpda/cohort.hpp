#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairpda/common.hpp"

namespace fairpda {

enum class ClassLabel { HC = 0, PD = 1, ALS = 2 };
enum class Gender { M = 0, F = 1 };
enum class MedicationFlag { standard, non_standard, missing };
enum class CohortRole { source, target };

constexpr int kNumClasses = 3;

inline std::string to_string(ClassLabel c) {
    switch (c) {
        case ClassLabel::HC: return "HC";
        case ClassLabel::PD: return "PD";
        case ClassLabel::ALS: return "ALS";
    }
    throw ValidationError("bad class label");
}

inline ClassLabel parse_class_label(const std::string& s) {
    if (s == "HC") return ClassLabel::HC;
    if (s == "PD") return ClassLabel::PD;
    if (s == "ALS") return ClassLabel::ALS;
    throw ValidationError("invalid class_label '" + s + "' (expected HC|PD|ALS)");
}

inline std::string to_string(Gender g) { return g == Gender::M ? "M" : "F"; }

inline Gender parse_gender(const std::string& s) {
    if (s == "M") return Gender::M;
    if (s == "F") return Gender::F;
    throw ValidationError("invalid gender '" + s + "' (expected M|F)");
}

// An empty CSV field means "missing", matching the manifest schema.
inline std::string to_string(MedicationFlag m) {
    switch (m) {
        case MedicationFlag::standard: return "standard";
        case MedicationFlag::non_standard: return "non_standard";
        case MedicationFlag::missing: return "";
    }
    throw ValidationError("bad medication flag");
}

inline MedicationFlag parse_medication_flag(const std::string& s) {
    if (s.empty() || s == "missing") return MedicationFlag::missing;
    if (s == "standard") return MedicationFlag::standard;
    if (s == "non_standard") return MedicationFlag::non_standard;
    throw ValidationError("invalid medication_flag '" + s + "'");
}

struct PatientRecord {
    std::string patient_id;
    std::string dataset_id;
    ClassLabel class_label = ClassLabel::HC;
    Gender gender = Gender::M;
    int age = 0;
    std::set<std::string> exclusion_codes;
    MedicationFlag medication_flag = MedicationFlag::missing;
};

struct RecordingRecord {
    std::string recording_id;
    std::string patient_id;
    std::string audio_path;
};

struct CohortManifest {
    std::vector<PatientRecord> patients;
    std::vector<RecordingRecord> recordings;
    CohortRole role = CohortRole::source;

    std::set<ClassLabel> label_space() const {
        std::set<ClassLabel> s;
        for (const auto& p : patients) s.insert(p.class_label);
        return s;
    }

    const PatientRecord& patient(const std::string& id) const {
        for (const auto& p : patients)
            if (p.patient_id == id) return p;
        throw ValidationError("unknown patient id: " + id);
    }

    std::set<std::string> dataset_ids() const {
        std::set<std::string> s;
        for (const auto& p : patients) s.insert(p.dataset_id);
        return s;
    }
};

struct FilterConfig {
    int min_age = 34;
    int max_age = 80;
    std::set<std::string> excluded_codes;
    bool require_medication_standard = false;

    // Non-authoritative default list of speech-affecting conditions; the
    // authoritative clinical exclusion list is a deployment config concern.
    static std::set<std::string> default_excluded_codes() {
        return {"stroke", "laryngeal_surgery", "head_neck_cancer", "cleft_palate",
                "vocal_fold_paralysis", "multiple_sclerosis", "cerebral_palsy"};
    }
};

struct SplitPlan {
    struct Fold {
        std::vector<std::string> train;
        std::vector<std::string> test;
    };
    std::vector<Fold> cv_folds;
    std::vector<std::string> uda_adaptation;
    std::vector<std::string> uda_external_eval;
    uint64_t seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json folds = nlohmann::json::array();
        for (const auto& f : cv_folds)
            folds.push_back({{"train", f.train}, {"test", f.test}});
        return {{"seed", seed},
                {"folds", folds},
                {"uda_adaptation", uda_adaptation},
                {"uda_external_eval", uda_external_eval}};
    }

    static SplitPlan from_json(const nlohmann::json& j) {
        SplitPlan p;
        p.seed = j.at("seed").get<uint64_t>();
        for (const auto& f : j.at("folds")) {
            Fold fold;
            fold.train = f.at("train").get<std::vector<std::string>>();
            fold.test = f.at("test").get<std::vector<std::string>>();
            p.cv_folds.push_back(std::move(fold));
        }
        p.uda_adaptation = j.at("uda_adaptation").get<std::vector<std::string>>();
        p.uda_external_eval = j.at("uda_external_eval").get<std::vector<std::string>>();
        return p;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace detail

inline const char* kManifestHeader =
    "patient_id,dataset_id,class_label,gender,age,exclusion_codes,"
    "medication_flag,recording_id,audio_path";

// Manifest CSV: one row per recording, patient fields repeated.
inline CohortManifest load_manifest(const std::string& path,
                                    CohortRole role = CohortRole::source) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(is, line)) throw ValidationError(path + ": empty manifest");
    // tolerate trailing \r from CRLF files
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
        throw ValidationError(path + ": bad header, expected '" +
                              std::string(kManifestHeader) + "'");

    CohortManifest m;
    m.role = role;
    std::map<std::string, PatientRecord> patients;  // keyed dataset|patient
    std::set<std::string> recording_ids;
    size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 9)
            throw ValidationError(path + ":" + std::to_string(lineno) +
                                  ": expected 9 fields, got " + std::to_string(f.size()));
        try {
            PatientRecord p;
            p.patient_id = f[0];
            p.dataset_id = f[1];
            if (p.patient_id.empty() || p.dataset_id.empty())
                throw ValidationError("missing patient_id or dataset_id");
            p.class_label = parse_class_label(f[2]);
            p.gender = parse_gender(f[3]);
            p.age = std::stoi(f[4]);
            if (p.age < 0) throw ValidationError("negative age");
            std::stringstream codes(f[5]);
            std::string code;
            while (std::getline(codes, code, ';'))
                if (!code.empty()) p.exclusion_codes.insert(code);
            if (f[6].empty())
                p.medication_flag = MedicationFlag::missing;
            else if (f[6] == "standard")
                p.medication_flag = MedicationFlag::standard;
            else if (f[6] == "non_standard")
                p.medication_flag = MedicationFlag::non_standard;
            else
                throw ValidationError("invalid medication_flag '" + f[6] + "'");

            const std::string key = p.dataset_id + "|" + p.patient_id;
            auto it = patients.find(key);
            if (it == patients.end()) {
                patients.emplace(key, p);
            } else {
                const auto& q = it->second;
                if (q.class_label != p.class_label || q.gender != p.gender || q.age != p.age)
                    throw ValidationError("patient '" + p.patient_id +
                                          "' has inconsistent fields across rows");
            }

            RecordingRecord r;
            r.recording_id = f[7];
            r.patient_id = p.patient_id;
            r.audio_path = f[8];
            if (r.recording_id.empty()) throw ValidationError("missing recording_id");
            if (!recording_ids.insert(r.recording_id).second)
                throw ValidationError("duplicate recording_id '" + r.recording_id + "'");
            m.recordings.push_back(std::move(r));
        } catch (const ValidationError& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const std::exception& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed row (" +
                                  e.what() + ")");
        }
    }
    for (auto& [key, p] : patients) m.patients.push_back(std::move(p));
    // patient uniqueness per dataset is enforced by the map key; check id
    // collisions across datasets are allowed but recordings must resolve
    std::set<std::string> patient_ids;
    for (const auto& p : m.patients) patient_ids.insert(p.patient_id);
    for (const auto& r : m.recordings)
        if (!patient_ids.count(r.patient_id))
            throw ValidationError(path + ": recording '" + r.recording_id +
                                  "' references unknown patient '" + r.patient_id + "'");
    return m;
}

inline void save_manifest(const std::string& path, const CohortManifest& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << kManifestHeader << "\n";
    std::map<std::string, const PatientRecord*> by_id;
    for (const auto& p : m.patients) by_id[p.patient_id] = &p;
    for (const auto& r : m.recordings) {
        const auto* p = by_id.at(r.patient_id);
        std::string codes;
        for (const auto& c : p->exclusion_codes) {
            if (!codes.empty()) codes += ';';
            codes += c;
        }
        std::string med;
        switch (p->medication_flag) {
            case MedicationFlag::standard: med = "standard"; break;
            case MedicationFlag::non_standard: med = "non_standard"; break;
            case MedicationFlag::missing: med = ""; break;
        }
        os << p->patient_id << ',' << p->dataset_id << ',' << to_string(p->class_label)
           << ',' << to_string(p->gender) << ',' << p->age << ',' << codes << ',' << med
           << ',' << r.recording_id << ',' << r.audio_path << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

inline CohortManifest apply_filters(const CohortManifest& m, const FilterConfig& f) {
    if (f.min_age > f.max_age) throw ValidationError("filter: min_age > max_age");
    CohortManifest out;
    out.role = m.role;
    std::set<std::string> kept;
    for (const auto& p : m.patients) {
        if (p.age < f.min_age || p.age > f.max_age) continue;
        bool excluded = false;
        for (const auto& c : p.exclusion_codes)
            if (f.excluded_codes.count(c)) { excluded = true; break; }
        if (excluded) continue;
        if (f.require_medication_standard && p.medication_flag != MedicationFlag::standard)
            continue;
        out.patients.push_back(p);
        kept.insert(p.patient_id);
    }
    if (out.patients.empty()) throw ValidationError("empty cohort after filtering");
    for (const auto& r : m.recordings)
        if (kept.count(r.patient_id)) out.recordings.push_back(r);
    return out;
}

// Patient-level k-fold CV stratified by (dataset_id, class_label). Strata
// smaller than k degrade to round-robin assignment.
// Combines per-dataset manifests (e.g. the two source cohorts) into one.
// Patient and recording ids must be globally unique across inputs.
inline CohortManifest merge_manifests(const std::vector<CohortManifest>& parts,
                                      CohortRole role) {
    if (parts.empty()) throw ValidationError("merge_manifests: no inputs");
    CohortManifest out;
    out.role = role;
    std::set<std::string> seen_p, seen_r;
    for (const auto& m : parts) {
        for (const auto& p : m.patients) {
            if (!seen_p.insert(p.patient_id).second)
                throw ValidationError("merge_manifests: duplicate patient id '" +
                                      p.patient_id + "'");
            out.patients.push_back(p);
        }
        for (const auto& r : m.recordings) {
            if (!seen_r.insert(r.recording_id).second)
                throw ValidationError("merge_manifests: duplicate recording id '" +
                                      r.recording_id + "'");
            out.recordings.push_back(r);
        }
    }
    return out;
}

inline SplitPlan make_cv_splits(const CohortManifest& m, int k, uint64_t seed) {
    if (k < 2) throw ValidationError("make_cv_splits: k must be >= 2");
    if (static_cast<size_t>(k) > m.patients.size())
        throw ValidationError("make_cv_splits: k exceeds patient count");

    std::map<std::string, std::vector<std::string>> strata;
    for (const auto& p : m.patients)
        strata[p.dataset_id + "|" + to_string(p.class_label)].push_back(p.patient_id);

    SplitPlan plan;
    plan.seed = seed;
    plan.cv_folds.resize(static_cast<size_t>(k));
    std::vector<std::vector<std::string>> test_sets(static_cast<size_t>(k));

    Rng rng(Rng::derive(seed, "cv"));
    for (auto& [key, ids] : strata) {
        std::sort(ids.begin(), ids.end());
        rng.shuffle(ids);
        // deal round-robin: per-stratum fold sizes differ by at most 1
        for (size_t i = 0; i < ids.size(); ++i)
            test_sets[i % static_cast<size_t>(k)].push_back(ids[i]);
    }

    std::vector<std::string> all_ids;
    for (const auto& p : m.patients) all_ids.push_back(p.patient_id);
    std::sort(all_ids.begin(), all_ids.end());

    for (size_t fi = 0; fi < static_cast<size_t>(k); ++fi) {
        auto& fold = plan.cv_folds[fi];
        fold.test = test_sets[fi];
        std::sort(fold.test.begin(), fold.test.end());
        std::set<std::string> test_set(fold.test.begin(), fold.test.end());
        for (const auto& id : all_ids)
            if (!test_set.count(id)) fold.train.push_back(id);
    }
    return plan;
}

// Per target dataset: floor(fraction*n), at least 1, patients go to the
// adaptation set; the remainder is the external evaluation set.
inline SplitPlan make_uda_split(const CohortManifest& m, double fraction, uint64_t seed) {
    if (m.role != CohortRole::target)
        throw ValidationError("make_uda_split: manifest role must be target");
    if (fraction <= 0.0 || fraction >= 1.0)
        throw ValidationError("make_uda_split: fraction must be in (0,1)");

    SplitPlan plan;
    plan.seed = seed;
    std::map<std::string, std::map<ClassLabel, std::vector<std::string>>> by_ds_class;
    for (const auto& p : m.patients)
        by_ds_class[p.dataset_id][p.class_label].push_back(p.patient_id);

    for (auto& [ds, classes] : by_ds_class) {
        size_t n = 0;
        for (auto& [c, ids] : classes) n += ids.size();
        size_t n_adapt = static_cast<size_t>(std::floor(fraction * static_cast<double>(n)));
        if (n_adapt < 1) n_adapt = 1;
        if (n_adapt >= n)
            throw ValidationError("make_uda_split: dataset '" + ds +
                                  "' would have an empty external eval set");
        // stratified by class: fill by largest fractional remainder order,
        // deterministic via sorted class keys
        Rng rng(Rng::derive(seed, "uda|" + ds));
        size_t taken = 0;
        std::vector<std::pair<ClassLabel, std::vector<std::string>>> ordered(classes.begin(),
                                                                             classes.end());
        for (auto& [c, ids] : ordered) {
            std::sort(ids.begin(), ids.end());
            rng.shuffle(ids);
        }
        // proportional take per class, then round-robin top-up
        std::vector<size_t> take(ordered.size(), 0);
        for (size_t i = 0; i < ordered.size(); ++i) {
            take[i] = static_cast<size_t>(std::floor(
                fraction * static_cast<double>(ordered[i].second.size())));
            take[i] = std::min(take[i], ordered[i].second.size());
            taken += take[i];
        }
        size_t i = 0;
        while (taken < n_adapt) {
            if (take[i] < ordered[i].second.size()) { ++take[i]; ++taken; }
            i = (i + 1) % ordered.size();
        }
        while (taken > n_adapt) {
            if (take[i] > 0) { --take[i]; --taken; }
            i = (i + 1) % ordered.size();
        }
        for (size_t ci = 0; ci < ordered.size(); ++ci) {
            const auto& ids = ordered[ci].second;
            for (size_t j = 0; j < ids.size(); ++j) {
                if (j < take[ci])
                    plan.uda_adaptation.push_back(ids[j]);
                else
                    plan.uda_external_eval.push_back(ids[j]);
            }
        }
    }
    std::sort(plan.uda_adaptation.begin(), plan.uda_adaptation.end());
    std::sort(plan.uda_external_eval.begin(), plan.uda_external_eval.end());
    return plan;
}

inline void save_split_plan(const std::string& path, const SplitPlan& plan) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << plan.to_json().dump(2) << "\n";
}

inline SplitPlan load_split_plan(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    nlohmann::json j;
    is >> j;
    return SplitPlan::from_json(j);
}

}  // namespace fairpda
