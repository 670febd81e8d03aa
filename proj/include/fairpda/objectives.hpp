#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fairpda/common.hpp"
#include "fairpda/nn.hpp"
#include "fairpda/tensor.hpp"

namespace fairpda {

// Segment counts per patient over the whole training split. Counting
// globally (not per batch) keeps the loss independent of the sampler.
struct PatientWeightTable {
    std::map<std::string, size_t> n_segments;

    double weight(const std::string& patient_id) const {
        auto it = n_segments.find(patient_id);
        if (it == n_segments.end())
            throw ValidationError("patient '" + patient_id + "' missing from weight table");
        if (it->second == 0)
            throw ValidationError("patient '" + patient_id + "' has zero segments");
        return 1.0 / static_cast<double>(it->second);
    }
};

struct GammaWeights {
    std::vector<double> gamma;  // size K, in [0,1], sums to 1 for valid prob inputs
};

struct ScheduleConfig {
    double lambda_d_max = 1.0;
    double lambda_fair_max = 1.0;
    double warmup_fraction = 0.2;
    size_t total_steps = 0;
    bool warmup_enabled = true;
};

// Probabilities are clamped before logs so component losses stay finite.
constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

// Weighted mean of per-segment losses with w_j = 1/n_{patient(j)},
// normalized by the weight sum. With full patients in batch this equals
// the mean over patients of each patient's mean segment loss.
inline double patient_normalized_ce(const std::vector<double>& losses,
                                    const std::vector<std::string>& patient_ids,
                                    const PatientWeightTable& table) {
    if (losses.empty()) throw ValidationError("patient_normalized_ce: empty batch");
    if (losses.size() != patient_ids.size())
        throw ValidationError("patient_normalized_ce: losses/ids size mismatch");
    double num = 0.0, den = 0.0;
    for (size_t j = 0; j < losses.size(); ++j) {
        const double w = table.weight(patient_ids[j]);
        num += w * losses[j];
        den += w;
    }
    return num / den;
}

// Eq. 1: column means of the target batch's predicted class probabilities.
inline GammaWeights class_importance_weights(const Tensor& target_probs) {
    if (target_probs.ndim() != 2 || target_probs.dim(0) == 0)
        throw ValidationError("class_importance_weights: empty target batch");
    const size_t n = target_probs.dim(0), k = target_probs.dim(1);
    GammaWeights g;
    g.gamma.assign(k, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < k; ++j) g.gamma[j] += target_probs.data[i * k + j];
    for (auto& v : g.gamma) v /= static_cast<double>(n);
    return g;
}

// Eq. 2: L_d = -mean_s[gamma(y_s) ln D(h_s)] - mean_t[ln(1 - D(h_t))],
// on discriminator probabilities (already through the sigmoid).
inline double domain_adversarial_loss(const std::vector<double>& source_probs,
                                      const std::vector<int>& source_labels,
                                      const std::vector<double>& target_probs,
                                      const GammaWeights& g) {
    if (source_probs.empty() || target_probs.empty())
        throw ValidationError("domain_adversarial_loss: empty source or target side");
    if (source_probs.size() != source_labels.size())
        throw ValidationError("domain_adversarial_loss: source size mismatch");
    double ls = 0.0;
    for (size_t i = 0; i < source_probs.size(); ++i) {
        const auto y = static_cast<size_t>(source_labels[i]);
        if (y >= g.gamma.size())
            throw ValidationError("domain_adversarial_loss: label out of range");
        ls += g.gamma[y] * -std::log(clamp_prob(source_probs[i]));
    }
    double lt = 0.0;
    for (double p : target_probs) lt += -std::log(clamp_prob(1.0 - p));
    return ls / static_cast<double>(source_probs.size()) +
           lt / static_cast<double>(target_probs.size());
}

// Mean 2-class cross-entropy of the gender discriminator.
inline double fairness_loss(const Tensor& gender_logits, const std::vector<int>& genders) {
    if (gender_logits.ndim() != 2 || gender_logits.dim(1) != 2)
        throw ValidationError("fairness_loss: expected N x 2 logits");
    if (gender_logits.dim(0) != genders.size() || genders.empty())
        throw ValidationError("fairness_loss: batch with missing gender labels");
    const Tensor p = nn::softmax_rows(gender_logits);
    double acc = 0.0;
    for (size_t i = 0; i < genders.size(); ++i) {
        const int g = genders[i];
        if (g != 0 && g != 1) throw ValidationError("fairness_loss: gender must be 0 or 1");
        acc += -std::log(clamp_prob(p.data[i * 2 + static_cast<size_t>(g)]));
    }
    return acc / static_cast<double>(genders.size());
}

// ||C_s - C_t||_F^2 / (4 D^2) with unbiased empirical covariances.
// Optionally produces the gradients w.r.t. both feature batches.
inline double coral_loss(const Tensor& fs, const Tensor& ft, Tensor* grad_s = nullptr,
                         Tensor* grad_t = nullptr) {
    if (fs.ndim() != 2 || ft.ndim() != 2 || fs.dim(1) != ft.dim(1))
        throw ValidationError("coral_loss: feature dims mismatch");
    const size_t ns = fs.dim(0), nt = ft.dim(0), d = fs.dim(1);
    if (ns < 2 || nt < 2) throw ValidationError("coral_loss: need >= 2 samples per side");

    auto covariance = [d](const Tensor& x, std::vector<double>& centered) {
        const size_t n = x.dim(0);
        std::vector<double> mean(d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) mean[j] += x.data[i * d + j];
        for (auto& m : mean) m /= static_cast<double>(n);
        centered.resize(n * d);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) centered[i * d + j] = x.data[i * d + j] - mean[j];
        std::vector<double> c(d * d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t a = 0; a < d; ++a)
                for (size_t b = 0; b < d; ++b)
                    c[a * d + b] += centered[i * d + a] * centered[i * d + b];
        for (auto& v : c) v /= static_cast<double>(n - 1);
        return c;
    };

    std::vector<double> xs, xt;
    const auto cs = covariance(fs, xs);
    const auto ct = covariance(ft, xt);
    double loss = 0.0;
    std::vector<double> diff(d * d);
    for (size_t i = 0; i < d * d; ++i) {
        diff[i] = cs[i] - ct[i];
        loss += diff[i] * diff[i];
    }
    loss /= 4.0 * static_cast<double>(d) * static_cast<double>(d);

    auto fill_grad = [&](Tensor& g, const std::vector<double>& centered, size_t n,
                         double sign) {
        g = Tensor({n, d});
        const double scale =
            sign / (static_cast<double>(d) * static_cast<double>(d) *
                    static_cast<double>(n - 1));
        // dL/dXc = Xc (Cs - Ct) * scale, then re-center through the mean
        for (size_t i = 0; i < n; ++i)
            for (size_t b = 0; b < d; ++b) {
                double acc = 0.0;
                for (size_t a = 0; a < d; ++a) acc += centered[i * d + a] * diff[a * d + b];
                g.data[i * d + b] = acc * scale;
            }
        std::vector<double> colmean(d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t b = 0; b < d; ++b) colmean[b] += g.data[i * d + b];
        for (auto& m : colmean) m /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i)
            for (size_t b = 0; b < d; ++b) g.data[i * d + b] -= colmean[b];
    };
    if (grad_s) fill_grad(*grad_s, xs, ns, 1.0);
    if (grad_t) fill_grad(*grad_t, xt, nt, -1.0);
    return loss;
}

// Linear warm-up to (lambda_d_max, lambda_fair_max).
inline std::pair<double, double> lambda_schedule(size_t step, const ScheduleConfig& cfg) {
    if (!cfg.warmup_enabled)
        return {cfg.lambda_d_max, cfg.lambda_fair_max};
    const double warmup_steps = cfg.warmup_fraction * static_cast<double>(cfg.total_steps);
    double frac = 1.0;
    if (warmup_steps >= 1.0)
        frac = std::min(1.0, static_cast<double>(step) / warmup_steps);
    return {cfg.lambda_d_max * frac, cfg.lambda_fair_max * frac};
}

// Eq. 4 composition; the optimization contract itself lives in the GRL
// wiring, this is the reported scalar.
inline double total_objective(double l_y, double l_d, double l_fair, double lambda_d,
                              double lambda_fair) {
    if (!std::isfinite(l_y) || !std::isfinite(l_d) || !std::isfinite(l_fair))
        throw NumericError("total_objective: non-finite loss component");
    return l_y - lambda_d * l_d - lambda_fair * l_fair;
}

// --- fused loss helpers used by the trainer (loss + gradient wrt logits) ---

struct TaskLossResult {
    double loss = 0.0;
    Tensor d_logits;  // N x K
};

// Cross-entropy over source rows, optionally patient-normalized. Rows whose
// patient id is empty (target rows) contribute nothing.
inline TaskLossResult task_ce_loss(const Tensor& probs, const std::vector<int>& labels,
                                   const std::vector<std::string>& patient_ids,
                                   const PatientWeightTable* table) {
    const size_t n = probs.dim(0), k = probs.dim(1);
    TaskLossResult out;
    out.d_logits = Tensor({n, k});
    std::vector<double> w(n, 0.0);
    double wsum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) continue;  // unlabeled (target) row
        w[i] = table ? table->weight(patient_ids[i]) : 1.0;
        wsum += w[i];
    }
    if (wsum <= 0.0) throw ValidationError("task_ce_loss: no labeled rows in batch");
    for (size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) continue;
        const auto y = static_cast<size_t>(labels[i]);
        out.loss += w[i] / wsum * -std::log(clamp_prob(probs.data[i * k + y]));
        for (size_t j = 0; j < k; ++j) {
            const double onehot = j == y ? 1.0 : 0.0;
            out.d_logits.data[i * k + j] = w[i] / wsum * (probs.data[i * k + j] - onehot);
        }
    }
    return out;
}

struct DomainLossResult {
    double loss = 0.0;
    Tensor d_logits;  // N x 1, gradient of L_d wrt discriminator logits
    std::vector<double> disc_probs;
};

// BCE-with-logits form of Eq. 2 over a mixed batch: is_source marks side,
// gamma weights source rows by class (detached). Gradients are zero where
// the clamp is active.
inline DomainLossResult domain_loss_from_logits(const Tensor& logits,
                                                const std::vector<bool>& is_source,
                                                const std::vector<int>& labels,
                                                const GammaWeights& g) {
    const size_t n = logits.dim(0);
    if (n != is_source.size()) throw ValidationError("domain_loss: size mismatch");
    size_t ns = 0, nt = 0;
    for (bool s : is_source) s ? ++ns : ++nt;
    if (ns == 0 || nt == 0)
        throw ValidationError("domain_loss: empty source or target side");
    DomainLossResult out;
    out.d_logits = Tensor({n, size_t{1}});
    out.disc_probs.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const double d = 1.0 / (1.0 + std::exp(-logits.data[i]));
        out.disc_probs[i] = d;
        const bool clamped = d < kProbClamp || d > 1.0 - kProbClamp;
        if (is_source[i]) {
            const auto y = static_cast<size_t>(labels[i]);
            const double gam = y < g.gamma.size() ? g.gamma[y] : 1.0;
            out.loss += gam * -std::log(clamp_prob(d)) / static_cast<double>(ns);
            if (!clamped)
                out.d_logits.data[i] = gam * (d - 1.0) / static_cast<double>(ns);
        } else {
            out.loss += -std::log(clamp_prob(1.0 - d)) / static_cast<double>(nt);
            if (!clamped) out.d_logits.data[i] = d / static_cast<double>(nt);
        }
    }
    return out;
}

struct GenderLossResult {
    double loss = 0.0;
    Tensor d_logits;  // N x 2
};

inline GenderLossResult gender_loss_from_logits(const Tensor& logits,
                                                const std::vector<int>& genders) {
    const size_t n = logits.dim(0);
    GenderLossResult out;
    out.loss = fairness_loss(logits, genders);
    const Tensor p = nn::softmax_rows(logits);
    out.d_logits = Tensor({n, size_t{2}});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < 2; ++j) {
            const double onehot = static_cast<size_t>(genders[i]) == j ? 1.0 : 0.0;
            out.d_logits.data[i * 2 + j] = (p.data[i * 2 + j] - onehot) / static_cast<double>(n);
        }
    return out;
}

}  // namespace fairpda
