#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairpda/cohort.hpp"
#include "fairpda/common.hpp"

namespace fairpda {

struct PatientPrediction {
    std::string patient_id;
    std::vector<double> pooled_probs;
    int predicted_class = 0;
    int true_class = 0;
    Gender gender = Gender::M;
};

/// Soft voting: arithmetic mean of segment probability vectors; argmax with
// lowest-index tie-break.
inline PatientPrediction pool_patient(const std::vector<std::vector<double>>& segment_probs) {
    if (segment_probs.empty()) throw ValidationError("pool_patient: no segments");
    const size_t k = segment_probs.front().size();
    PatientPrediction p;
    p.pooled_probs.assign(k, 0.0);
    for (const auto& s : segment_probs) {
        if (s.size() != k) throw ValidationError("pool_patient: inconsistent class counts");
        for (size_t j = 0; j < k; ++j) p.pooled_probs[j] += s[j];
    }
    for (auto& v : p.pooled_probs) v /= static_cast<double>(segment_probs.size());
    p.predicted_class = 0;
    for (size_t j = 1; j < k; ++j)
        if (p.pooled_probs[j] > p.pooled_probs[static_cast<size_t>(p.predicted_class)])
            p.predicted_class = static_cast<int>(j);
    return p;
}

struct ConfusionMetrics {
    double balacc = 0.0;    // [0,100]
    double mcc = 0.0;       // [-1,1]
    double macro_f1 = 0.0;  // [0,100]
};

inline std::vector<std::vector<size_t>> confusion_matrix(const std::vector<int>& preds,
                                                         const std::vector<int>& truths,
                                                         int k) {
    std::vector<std::vector<size_t>> c(static_cast<size_t>(k),
                                       std::vector<size_t>(static_cast<size_t>(k), 0));
    for (size_t i = 0; i < preds.size(); ++i)
        ++c[static_cast<size_t>(truths[i])][static_cast<size_t>(preds[i])];
    return c;
}

// BalAcc = 100 * mean per-class recall over classes present in truth;
// macro-F1 excludes absent classes; MCC is the multiclass (Gorodkin)
// generalization from the confusion matrix.
inline ConfusionMetrics confusion_metrics(const std::vector<int>& preds,
                                          const std::vector<int>& truths,
                                          int k = kNumClasses) {
    if (preds.empty() || preds.size() != truths.size())
        throw ValidationError("confusion_metrics: empty or mismatched inputs");
    const auto c = confusion_matrix(preds, truths, k);
    ConfusionMetrics out;

    double recall_sum = 0.0, f1_sum = 0.0;
    size_t present = 0;
    for (size_t t = 0; t < static_cast<size_t>(k); ++t) {
        size_t truth_count = 0, pred_count = 0;
        for (size_t j = 0; j < static_cast<size_t>(k); ++j) {
            truth_count += c[t][j];
            pred_count += c[j][t];
        }
        if (truth_count == 0) continue;
        ++present;
        const auto tp = static_cast<double>(c[t][t]);
        recall_sum += tp / static_cast<double>(truth_count);
        const double denom = static_cast<double>(truth_count + pred_count);
        f1_sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    out.balacc = 100.0 * recall_sum / static_cast<double>(present);
    out.macro_f1 = 100.0 * f1_sum / static_cast<double>(present);

    double trace = 0.0, total = 0.0;
    std::vector<double> truth_marg(static_cast<size_t>(k), 0.0);
    std::vector<double> pred_marg(static_cast<size_t>(k), 0.0);
    for (size_t i = 0; i < static_cast<size_t>(k); ++i) {
        trace += static_cast<double>(c[i][i]);
        for (size_t j = 0; j < static_cast<size_t>(k); ++j) {
            total += static_cast<double>(c[i][j]);
            truth_marg[i] += static_cast<double>(c[i][j]);
            pred_marg[j] += static_cast<double>(c[i][j]);
        }
    }
    double dot = 0.0, t2 = 0.0, p2 = 0.0;
    for (size_t i = 0; i < static_cast<size_t>(k); ++i) {
        dot += truth_marg[i] * pred_marg[i];
        t2 += truth_marg[i] * truth_marg[i];
        p2 += pred_marg[i] * pred_marg[i];
    }
    const double denom = std::sqrt((total * total - p2) * (total * total - t2));
    out.mcc = denom > 0.0 ? (trace * total - dot) / denom : 0.0;
    return out;
}

enum class GapReduction { macro, per_class_max };

struct FairnessGaps {
    std::optional<double> eod;
    std::optional<double> eog;
    std::vector<std::string> warnings;
};

// Gender TPR/FPR gaps with one-vs-rest reduction. A gender group absent
// from the eval set yields explicit nulls, never a silent 0.
inline FairnessGaps fairness_gaps(const std::vector<int>& preds,
                                  const std::vector<int>& truths,
                                  const std::vector<Gender>& genders, int k = kNumClasses,
                                  GapReduction reduction = GapReduction::macro) {
    if (preds.size() != truths.size() || preds.size() != genders.size() || preds.empty())
        throw ValidationError("fairness_gaps: mismatched or empty inputs");
    FairnessGaps out;

    // per-gender, per-class one-vs-rest TPR and FPR (nullopt when undefined)
    auto group_rates = [&](Gender g) {
        std::vector<std::optional<double>> tpr(static_cast<size_t>(k));
        std::vector<std::optional<double>> fpr(static_cast<size_t>(k));
        bool any = false;
        for (int c = 0; c < k; ++c) {
            size_t tp = 0, fn = 0, fp = 0, tn = 0;
            for (size_t i = 0; i < preds.size(); ++i) {
                if (genders[i] != g) continue;
                any = true;
                const bool truth_pos = truths[i] == c;
                const bool pred_pos = preds[i] == c;
                if (truth_pos && pred_pos) ++tp;
                else if (truth_pos) ++fn;
                else if (pred_pos) ++fp;
                else ++tn;
            }
            if (tp + fn > 0)
                tpr[static_cast<size_t>(c)] =
                    static_cast<double>(tp) / static_cast<double>(tp + fn);
            if (fp + tn > 0)
                fpr[static_cast<size_t>(c)] =
                    static_cast<double>(fp) / static_cast<double>(fp + tn);
        }
        return std::make_tuple(any, tpr, fpr);
    };

    const auto [has_m, tpr_m, fpr_m] = group_rates(Gender::M);
    const auto [has_f, tpr_f, fpr_f] = group_rates(Gender::F);
    if (!has_m || !has_f) {
        out.warnings.push_back(
            "fairness gaps undefined: a gender group is absent from the eval set");
        return out;
    }

    auto macro_mean = [](const std::vector<std::optional<double>>& v) -> std::optional<double> {
        double s = 0.0;
        size_t n = 0;
        for (const auto& x : v)
            if (x) { s += *x; ++n; }
        if (n == 0) return std::nullopt;
        return s / static_cast<double>(n);
    };

    if (reduction == GapReduction::macro) {
        const auto tm = macro_mean(tpr_m), tf = macro_mean(tpr_f);
        const auto fm = macro_mean(fpr_m), ff = macro_mean(fpr_f);
        if (!tm || !tf) {
            out.warnings.push_back("fairness gaps undefined: no TPR-defined class in a group");
            return out;
        }
        out.eod = std::abs(*tm - *tf);
        const double fpr_gap = fm && ff ? std::abs(*fm - *ff) : 0.0;
        out.eog = std::max(*out.eod, fpr_gap);
    } else {
        double tpr_gap = 0.0, fpr_gap = 0.0;
        bool any_tpr = false;
        for (int c = 0; c < k; ++c) {
            const auto& a = tpr_m[static_cast<size_t>(c)];
            const auto& b = tpr_f[static_cast<size_t>(c)];
            if (a && b) {
                tpr_gap = std::max(tpr_gap, std::abs(*a - *b));
                any_tpr = true;
            }
            const auto& fa = fpr_m[static_cast<size_t>(c)];
            const auto& fb = fpr_f[static_cast<size_t>(c)];
            if (fa && fb) fpr_gap = std::max(fpr_gap, std::abs(*fa - *fb));
        }
        if (!any_tpr) {
            out.warnings.push_back("fairness gaps undefined: no shared TPR-defined class");
            return out;
        }
        out.eod = tpr_gap;
        out.eog = std::max(tpr_gap, fpr_gap);
    }
    return out;
}

// Two-sided paired permutation test via sign flips of per-patient 0/1
// correctness differences.
inline double paired_test(const std::vector<std::string>& patient_ids_a,
                          const std::vector<int>& correct_a,
                          const std::vector<std::string>& patient_ids_b,
                          const std::vector<int>& correct_b, size_t n_resamples = 10000,
                          uint64_t seed = 0) {
    if (patient_ids_a.size() != correct_a.size() || patient_ids_b.size() != correct_b.size())
        throw ValidationError("paired_test: size mismatch");
    std::map<std::string, int> b_map;
    for (size_t i = 0; i < patient_ids_b.size(); ++i) b_map[patient_ids_b[i]] = correct_b[i];
    if (b_map.size() != patient_ids_a.size())
        throw ValidationError("paired_test: patient sets are not aligned");
    std::vector<double> diffs;
    for (size_t i = 0; i < patient_ids_a.size(); ++i) {
        auto it = b_map.find(patient_ids_a[i]);
        if (it == b_map.end())
            throw ValidationError("paired_test: patient '" + patient_ids_a[i] +
                                  "' missing from run B");
        diffs.push_back(static_cast<double>(correct_a[i] - it->second));
    }
    double observed = 0.0;
    for (double d : diffs) observed += d;
    observed = std::abs(observed / static_cast<double>(diffs.size()));

    Rng rng(Rng::derive(seed, "paired_test"));
    size_t at_least = 0;
    for (size_t r = 0; r < n_resamples; ++r) {
        double s = 0.0;
        for (double d : diffs) s += rng.bernoulli(0.5) ? d : -d;
        if (std::abs(s / static_cast<double>(diffs.size())) >= observed - 1e-12) ++at_least;
    }
    return static_cast<double>(at_least + 1) / static_cast<double>(n_resamples + 1);
}

struct FoldMetrics {
    double int_balacc = 0.0, int_mcc = 0.0, int_macro_f1 = 0.0;
    double ext_balacc = 0.0, ext_mcc = 0.0, ext_macro_f1 = 0.0;
    std::optional<double> eod, eog;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"int_balacc", int_balacc}, {"int_mcc", int_mcc},
                            {"int_macro_f1", int_macro_f1}, {"ext_balacc", ext_balacc},
                            {"ext_mcc", ext_mcc}, {"ext_macro_f1", ext_macro_f1}};
        j["eod"] = eod ? nlohmann::json(*eod) : nlohmann::json(nullptr);
        j["eog"] = eog ? nlohmann::json(*eog) : nlohmann::json(nullptr);
        return j;
    }
};

struct MetricsReport {
    std::vector<FoldMetrics> folds;
    std::map<std::string, double> p_values;  // vs named baseline runs
    std::vector<std::string> warnings;

    static std::pair<double, double> mean_std(const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s2 = 0.0;
        for (double x : v) s2 += (x - m) * (x - m);
        const double sd = v.size() > 1 ? std::sqrt(s2 / static_cast<double>(v.size() - 1))
                                       : 0.0;
        return {m, sd};
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = 1;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& f : folds) rows.push_back(f.to_json());
        j["folds"] = rows;
        nlohmann::json agg;
        auto collect = [&](const char* key, auto getter) {
            std::vector<double> v;
            for (const auto& f : folds) {
                auto x = getter(f);
                if (x) v.push_back(*x);
            }
            if (!v.empty()) {
                auto [m, s] = mean_std(v);
                agg[key] = {{"mean", m}, {"std", s}};
            } else {
                agg[key] = nullptr;
            }
        };
        using F = const FoldMetrics&;
        collect("int_balacc", [](F f) { return std::optional<double>(f.int_balacc); });
        collect("int_mcc", [](F f) { return std::optional<double>(f.int_mcc); });
        collect("int_macro_f1", [](F f) { return std::optional<double>(f.int_macro_f1); });
        collect("ext_balacc", [](F f) { return std::optional<double>(f.ext_balacc); });
        collect("ext_mcc", [](F f) { return std::optional<double>(f.ext_mcc); });
        collect("ext_macro_f1", [](F f) { return std::optional<double>(f.ext_macro_f1); });
        collect("eod", [](F f) { return f.eod; });
        collect("eog", [](F f) { return f.eog; });
        j["aggregate"] = agg;
        j["p_values"] = p_values;
        j["warnings"] = warnings;
        return j;
    }

    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        for (const auto& row : j.at("folds")) {
            FoldMetrics f;
            f.int_balacc = row.at("int_balacc").get<double>();
            f.int_mcc = row.at("int_mcc").get<double>();
            f.int_macro_f1 = row.at("int_macro_f1").get<double>();
            f.ext_balacc = row.at("ext_balacc").get<double>();
            f.ext_mcc = row.at("ext_mcc").get<double>();
            f.ext_macro_f1 = row.at("ext_macro_f1").get<double>();
            if (!row.at("eod").is_null()) f.eod = row.at("eod").get<double>();
            if (!row.at("eog").is_null()) f.eog = row.at("eog").get<double>();
            r.folds.push_back(f);
        }
        if (j.contains("p_values"))
            r.p_values = j.at("p_values").get<std::map<std::string, double>>();
        if (j.contains("warnings"))
            r.warnings = j.at("warnings").get<std::vector<std::string>>();
        return r;
    }
};

/// Table-style CSV: one row per run with mean +/- std columns, plus
// significance annotations at the two shading thresholds.
inline std::string report_csv_row(const std::string& name, const MetricsReport& r,
                                  const std::optional<double>& p_value = std::nullopt) {
    const auto j = r.to_json()["aggregate"];
    auto fmt = [&](const char* key) -> std::string {
        if (j[key].is_null()) return "n/a";
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.2f +/- %.2f", j[key]["mean"].get<double>(),
                      j[key]["std"].get<double>());
        return buf;
    };
    std::string sig;
    if (p_value) {
        if (*p_value < 0.05) sig = "p<0.05";
        else if (*p_value < 0.1) sig = "p<0.1";
        else sig = "ns";
    }
    return name + "," + fmt("int_balacc") + "," + fmt("ext_balacc") + "," + fmt("int_mcc") +
           "," + fmt("ext_mcc") + "," + fmt("eod") + "," + fmt("eog") + "," + sig;
}

inline const char* kReportCsvHeader =
    "method,int_balacc,ext_balacc,int_mcc,ext_mcc,eod,eog,significance";

}  // namespace fairpda
