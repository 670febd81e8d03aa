#include <doctest.h>

#include <cmath>

#include "fairpda/objectives.hpp"

using namespace fairpda;

namespace {

Tensor random_probs(size_t n, size_t k, Rng& rng) {
    Tensor t({n, k});
    for (size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (size_t j = 0; j < k; ++j) {
            t.data[i * k + j] = rng.uniform() + 1e-3;
            sum += t.data[i * k + j];
        }
        for (size_t j = 0; j < k; ++j) t.data[i * k + j] /= sum;
    }
    return t;
}

// independent scalar oracle for Eq. 2, written directly from the formula
double eq2_oracle(const std::vector<double>& sp, const std::vector<int>& sy,
                  const std::vector<double>& tp, const std::vector<double>& gamma) {
    double ls = 0.0;
    for (size_t i = 0; i < sp.size(); ++i) ls += gamma[static_cast<size_t>(sy[i])] * -std::log(sp[i]);
    double lt = 0.0;
    for (double p : tp) lt += -std::log(1.0 - p);
    return ls / static_cast<double>(sp.size()) + lt / static_cast<double>(tp.size());
}

}  // namespace

TEST_CASE("gamma (Eq. 1) equals the column-mean oracle on random batches") {
    Rng rng(11);
    for (int c = 0; c < 1000; ++c) {
        const size_t n = 1 + rng.uniform_int(16), k = 2 + rng.uniform_int(4);
        const Tensor p = random_probs(n, k, rng);
        const auto g = class_importance_weights(p);
        double total = 0.0;
        for (size_t j = 0; j < k; ++j) {
            double col = 0.0;
            for (size_t i = 0; i < n; ++i) col += p.data[i * k + j];
            col /= static_cast<double>(n);
            CHECK(std::abs(g.gamma[j] - col) < 1e-12);
            total += g.gamma[j];
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("gamma suppresses classes absent from the target batch") {
    // every row assigns mass <= eps to class 2 -> gamma(2) <= eps exactly
    const double eps = 1e-3;
    Tensor p({size_t{4}, size_t{3}});
    Rng rng(5);
    for (size_t i = 0; i < 4; ++i) {
        const double m2 = rng.uniform() * eps;
        const double rest = 1.0 - m2;
        const double a = rng.uniform();
        p.data[i * 3 + 0] = rest * a;
        p.data[i * 3 + 1] = rest * (1.0 - a);
        p.data[i * 3 + 2] = m2;
    }
    const auto g = class_importance_weights(p);
    CHECK(g.gamma[2] <= eps);
}

TEST_CASE("gamma rejects an empty target batch") {
    CHECK_THROWS_AS(class_importance_weights(Tensor({size_t{0}, size_t{3}})),
                    ValidationError);
}

TEST_CASE("domain adversarial loss (Eq. 2) matches the hand-computed example") {
    // one source sample D=0.8 with gamma=0.5, one target D=0.6
    GammaWeights g;
    g.gamma = {0.5, 0.5};
    const double l = domain_adversarial_loss({0.8}, {0}, {0.6}, g);
    CHECK(std::abs(l - 1.0279) < 1e-4);
    CHECK(std::abs(l - (0.5 * -std::log(0.8) - std::log(0.4))) < 1e-12);
}

TEST_CASE("domain adversarial loss matches the scalar oracle on random cases") {
    Rng rng(23);
    for (int c = 0; c < 100; ++c) {
        const size_t ns = 1 + rng.uniform_int(8), nt = 1 + rng.uniform_int(8), k = 3;
        std::vector<double> sp(ns), tp(nt), gamma(k);
        std::vector<int> sy(ns);
        for (auto& v : sp) v = 0.05 + 0.9 * rng.uniform();
        for (auto& v : tp) v = 0.05 + 0.9 * rng.uniform();
        for (auto& v : gamma) v = rng.uniform();
        for (auto& y : sy) y = static_cast<int>(rng.uniform_int(k));
        GammaWeights g;
        g.gamma = gamma;
        CHECK(std::abs(domain_adversarial_loss(sp, sy, tp, g) -
                       eq2_oracle(sp, sy, tp, gamma)) < 1e-9);
    }
}

TEST_CASE("gamma == 1 reduces Eq. 2 to standard BCE") {
    Rng rng(31);
    const size_t ns = 6, nt = 5;
    std::vector<double> sp(ns), tp(nt);
    std::vector<int> sy(ns, 1);
    for (auto& v : sp) v = 0.1 + 0.8 * rng.uniform();
    for (auto& v : tp) v = 0.1 + 0.8 * rng.uniform();
    GammaWeights ones;
    ones.gamma = {1.0, 1.0, 1.0};
    double bce = 0.0;
    for (double p : sp) bce += -std::log(p) / static_cast<double>(ns);
    for (double p : tp) bce += -std::log(1.0 - p) / static_cast<double>(nt);
    CHECK(std::abs(domain_adversarial_loss(sp, sy, tp, ones) - bce) < 1e-12);
}

TEST_CASE("zero gamma annihilates the source term") {
    GammaWeights zero;
    zero.gamma = {0.0, 0.0};
    const double l = domain_adversarial_loss({0.9, 0.2}, {0, 1}, {0.3}, zero);
    CHECK(std::abs(l - (-std::log(0.7))) < 1e-12);
}

TEST_CASE("domain adversarial loss rejects empty sides") {
    GammaWeights g;
    g.gamma = {1.0};
    CHECK_THROWS_AS(domain_adversarial_loss({}, {}, {0.5}, g), ValidationError);
    CHECK_THROWS_AS(domain_adversarial_loss({0.5}, {0}, {}, g), ValidationError);
}

TEST_CASE("CE+PN equals mean of per-patient mean losses on full-patient batches") {
    Rng rng(7);
    for (int c = 0; c < 200; ++c) {
        const size_t n_patients = 1 + rng.uniform_int(6);
        PatientWeightTable table;
        std::vector<double> losses;
        std::vector<std::string> ids;
        std::vector<double> patient_means;
        for (size_t p = 0; p < n_patients; ++p) {
            const std::string id = "p" + std::to_string(p);
            const size_t n_seg = 1 + rng.uniform_int(5);
            table.n_segments[id] = n_seg;
            double mean = 0.0;
            for (size_t s = 0; s < n_seg; ++s) {
                const double l = rng.uniform() * 3.0;
                losses.push_back(l);
                ids.push_back(id);
                mean += l;
            }
            patient_means.push_back(mean / static_cast<double>(n_seg));
        }
        double oracle = 0.0;
        for (double m : patient_means) oracle += m;
        oracle /= static_cast<double>(n_patients);
        CHECK(std::abs(patient_normalized_ce(losses, ids, table) - oracle) < 1e-10);
    }
}

TEST_CASE("CE+PN with equal segment counts reduces to the plain mean") {
    PatientWeightTable table;
    table.n_segments = {{"a", 2}, {"b", 2}};
    const std::vector<double> losses = {1.0, 2.0, 3.0, 4.0};
    const std::vector<std::string> ids = {"a", "a", "b", "b"};
    CHECK(std::abs(patient_normalized_ce(losses, ids, table) - 2.5) < 1e-12);
}

TEST_CASE("CE+PN is invariant to duplicating a segment with updated counts") {
    PatientWeightTable t1;
    t1.n_segments = {{"a", 2}, {"b", 1}};
    const double base =
        patient_normalized_ce({1.0, 3.0, 5.0}, {"a", "a", "b"}, t1);
    // duplicate patient b's one segment; n_b becomes 2 and both rows present
    PatientWeightTable t2;
    t2.n_segments = {{"a", 2}, {"b", 2}};
    const double dup =
        patient_normalized_ce({1.0, 3.0, 5.0, 5.0}, {"a", "a", "b", "b"}, t2);
    CHECK(std::abs(base - dup) < 1e-12);
}

TEST_CASE("CE+PN errors on a patient missing from the weight table") {
    PatientWeightTable table;
    table.n_segments = {{"a", 1}};
    CHECK_THROWS_AS(patient_normalized_ce({1.0}, {"ghost"}, table), ValidationError);
}

TEST_CASE("coral loss matches a hand covariance computation and is symmetric-zero") {
    // 2-D toy: columns with known covariance
    Tensor fs({size_t{3}, size_t{2}});
    fs.data = {1.0, 2.0, 3.0, 4.0, 5.0, 0.0};
    Tensor ft({size_t{3}, size_t{2}});
    ft.data = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
    auto cov = [](const Tensor& x) {
        const size_t n = x.dim(0), d = x.dim(1);
        std::vector<double> mu(d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) mu[j] += x.data[i * d + j] / static_cast<double>(n);
        std::vector<double> c(d * d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t a = 0; a < d; ++a)
                for (size_t b = 0; b < d; ++b)
                    c[a * d + b] += (x.data[i * d + a] - mu[a]) * (x.data[i * d + b] - mu[b]) /
                                    static_cast<double>(n - 1);
        return c;
    };
    const auto cs = cov(fs), ct = cov(ft);
    double fro = 0.0;
    for (size_t i = 0; i < 4; ++i) fro += (cs[i] - ct[i]) * (cs[i] - ct[i]);
    CHECK(std::abs(coral_loss(fs, ft) - fro / 16.0) < 1e-12);
    CHECK(std::abs(coral_loss(fs, fs)) < 1e-15);  // identical batches -> exactly zero
}

TEST_CASE("coral gradient matches central finite differences") {
    Rng rng(41);
    Tensor fs({size_t{4}, size_t{3}}), ft({size_t{5}, size_t{3}});
    for (auto& v : fs.data) v = rng.normal(0.0, 1.0);
    for (auto& v : ft.data) v = rng.normal(0.0, 1.0);
    Tensor gs, gt;
    coral_loss(fs, ft, &gs, &gt);
    const double h = 1e-6;
    for (size_t i = 0; i < fs.data.size(); ++i) {
        Tensor a = fs, b = fs;
        a.data[i] += h;
        b.data[i] -= h;
        const double fd = (coral_loss(a, ft) - coral_loss(b, ft)) / (2.0 * h);
        CHECK(std::abs(fd - gs.data[i]) < 1e-6);
    }
    for (size_t i = 0; i < ft.data.size(); ++i) {
        Tensor a = ft, b = ft;
        a.data[i] += h;
        b.data[i] -= h;
        const double fd = (coral_loss(fs, a) - coral_loss(fs, b)) / (2.0 * h);
        CHECK(std::abs(fd - gt.data[i]) < 1e-6);
    }
}

TEST_CASE("lambda schedule warms up linearly then saturates") {
    ScheduleConfig cfg;
    cfg.lambda_d_max = 0.8;
    cfg.lambda_fair_max = 0.4;
    cfg.warmup_fraction = 0.2;
    cfg.total_steps = 100;  // warmup over the first 20 steps
    auto [d0, f0] = lambda_schedule(0, cfg);
    CHECK(d0 == doctest::Approx(0.0));
    CHECK(f0 == doctest::Approx(0.0));
    auto [d10, f10] = lambda_schedule(10, cfg);
    CHECK(d10 == doctest::Approx(0.4));
    CHECK(f10 == doctest::Approx(0.2));
    auto [d20, _] = lambda_schedule(20, cfg);
    CHECK(d20 == doctest::Approx(0.8));
    auto [d99, f99] = lambda_schedule(99, cfg);
    CHECK(d99 == doctest::Approx(0.8));
    CHECK(f99 == doctest::Approx(0.4));

    cfg.warmup_enabled = false;
    auto [dd, ff] = lambda_schedule(0, cfg);
    CHECK(dd == doctest::Approx(0.8));
    CHECK(ff == doctest::Approx(0.4));
}

TEST_CASE("total objective composes Eq. 4 and rejects non-finite inputs") {
    CHECK(total_objective(1.0, 2.0, 3.0, 0.5, 0.25) == doctest::Approx(1.0 - 1.0 - 0.75));
    CHECK_THROWS_AS(total_objective(std::nan(""), 0.0, 0.0, 1.0, 1.0), NumericError);
}

TEST_CASE("task CE gradient matches finite differences through the softmax") {
    Rng rng(53);
    const size_t n = 5, k = 3;
    Tensor logits({n, k});
    for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
    const std::vector<int> labels = {0, 2, -1, 1, 2};  // one unlabeled target row
    const std::vector<std::string> ids = {"a", "a", "t", "b", "b"};
    PatientWeightTable table;
    table.n_segments = {{"a", 2}, {"b", 2}};

    auto loss_of = [&](const Tensor& lg) {
        return task_ce_loss(nn::softmax_rows(lg), labels, ids, &table).loss;
    };
    const auto res = task_ce_loss(nn::softmax_rows(logits), labels, ids, &table);
    const double h = 1e-6;
    for (size_t i = 0; i < logits.data.size(); ++i) {
        Tensor a = logits, b = logits;
        a.data[i] += h;
        b.data[i] -= h;
        const double fd = (loss_of(a) - loss_of(b)) / (2.0 * h);
        CHECK(std::abs(fd - res.d_logits.data[i]) < 1e-6);
    }
    // unlabeled rows contribute no gradient at all
    for (size_t j = 0; j < k; ++j) CHECK(res.d_logits.data[2 * k + j] == 0.0);
}

TEST_CASE("domain loss gradient matches finite differences through the sigmoid") {
    Rng rng(59);
    const size_t n = 6;
    Tensor logits({n, size_t{1}});
    for (auto& v : logits.data) v = rng.normal(0.0, 1.5);
    const std::vector<bool> is_source = {true, true, true, false, false, false};
    const std::vector<int> labels = {0, 1, 2, 0, 0, 0};
    GammaWeights g;
    g.gamma = {0.3, 0.5, 0.2};

    auto loss_of = [&](const Tensor& lg) {
        return domain_loss_from_logits(lg, is_source, labels, g).loss;
    };
    const auto res = domain_loss_from_logits(logits, is_source, labels, g);
    const double h = 1e-6;
    for (size_t i = 0; i < n; ++i) {
        Tensor a = logits, b = logits;
        a.data[i] += h;
        b.data[i] -= h;
        const double fd = (loss_of(a) - loss_of(b)) / (2.0 * h);
        CHECK(std::abs(fd - res.d_logits.data[i]) < 1e-6);
    }
}

TEST_CASE("gender loss gradient matches finite differences") {
    Rng rng(61);
    const size_t n = 4;
    Tensor logits({n, size_t{2}});
    for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
    const std::vector<int> genders = {0, 1, 1, 0};
    const auto res = gender_loss_from_logits(logits, genders);
    CHECK(std::abs(res.loss - fairness_loss(logits, genders)) < 1e-12);
    const double h = 1e-6;
    for (size_t i = 0; i < logits.data.size(); ++i) {
        Tensor a = logits, b = logits;
        a.data[i] += h;
        b.data[i] -= h;
        const double fd =
            (fairness_loss(a, genders) - fairness_loss(b, genders)) / (2.0 * h);
        CHECK(std::abs(fd - res.d_logits.data[i]) < 1e-6);
    }
}

TEST_CASE("fairness loss equals the mean of per-sample CE computed independently") {
    Rng rng(67);
    Tensor logits({size_t{8}, size_t{2}});
    for (auto& v : logits.data) v = rng.normal(0.0, 2.0);
    std::vector<int> genders(8);
    for (auto& g : genders) g = rng.uniform_int(2) ? 1 : 0;
    double oracle = 0.0;
    for (size_t i = 0; i < 8; ++i) {
        const double a = logits.data[i * 2], b = logits.data[i * 2 + 1];
        const double m = std::max(a, b);
        const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        oracle += -(genders[i] == 0 ? a : b) + lse;
    }
    oracle /= 8.0;
    CHECK(std::abs(fairness_loss(logits, genders) - oracle) < 1e-10);
}

TEST_CASE("fairness loss rejects batches with missing gender labels") {
    Tensor logits({size_t{2}, size_t{2}});
    CHECK_THROWS_AS(fairness_loss(logits, {0}), ValidationError);
}
