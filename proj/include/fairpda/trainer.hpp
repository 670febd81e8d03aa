#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairpda/cache.hpp"
#include "fairpda/metrics.hpp"
#include "fairpda/model.hpp"
#include "fairpda/objectives.hpp"

namespace fairpda {

struct TrainProtocol {
    enum class Mode { DG, UDA };
    Mode mode = Mode::UDA;
    bool patient_norm = true;  // CE+PN when true, plain CE otherwise
    AlignMode align_mode = AlignMode::partial_cdan;
    bool no_warmup = false;
    bool no_mixstyle = false;
    bool no_fairness = false;
    double window_s = 2.0;
    int epochs = 8;
    size_t batch_size = 16;
    double learning_rate = 1e-3;
    double lambda_d_max = 0.3;
    double lambda_fair_max = 0.3;
    double warmup_fraction = 0.2;
    uint64_t seed = 0;
    BackboneConfig backbone;
    HeadsConfig heads;

    std::string mode_str() const { return mode == Mode::DG ? "DG" : "UDA"; }
};

struct SegmentData {
    SegmentMeta meta;
    Tensor features;  // n_mels (or n_mfcc) x n_frames
};

inline std::vector<SegmentData> load_segments(const FeatureCache& cache) {
    std::vector<SegmentData> out;
    out.reserve(cache.entries().size());
    for (const auto& m : cache.entries()) out.push_back({m, cache.load_segment(m)});
    return out;
}

inline std::vector<const SegmentData*> select_by_patients(
    const std::vector<SegmentData>& segs, const std::set<std::string>& patients) {
    std::vector<const SegmentData*> out;
    for (const auto& s : segs)
        if (patients.count(s.meta.patient_id)) out.push_back(&s);
    return out;
}

// A training batch. Target rows carry label -1: class labels of the
// unlabeled adaptation set never enter the batch at all.
struct Batch {
    Tensor x;  // N x 1 x H x W
    std::vector<int> labels;
    std::vector<std::string> patient_ids;
    std::vector<int> genders;       // 0 = M, 1 = F
    std::vector<bool> is_source;    // alignment side per row
    size_t n_source = 0, n_target = 0;
};

inline Tensor stack_features(const std::vector<const SegmentData*>& segs) {
    if (segs.empty()) throw ValidationError("stack_features: empty batch");
    const auto& d0 = segs.front()->features.dims;
    Tensor x({segs.size(), 1, d0[0], d0[1]});
    for (size_t i = 0; i < segs.size(); ++i) {
        if (segs[i]->features.dims != d0)
            throw ValidationError("stack_features: inconsistent feature shapes");
        std::copy(segs[i]->features.data.begin(), segs[i]->features.data.end(),
                  x.data.begin() + static_cast<long>(i * d0[0] * d0[1]));
    }
    return x;
}

// Deterministic batch stream for one epoch. UDA pairs each source batch
// with an equally sized target batch (cycled with reshuffling); DG yields
// source-only batches whose alignment sides come from the dataset id.
class BatchBuilder {
public:
    BatchBuilder(std::vector<const SegmentData*> source,
                 std::vector<const SegmentData*> target, const TrainProtocol& proto)
        : source_(std::move(source)), target_(std::move(target)), proto_(proto) {
        if (source_.empty()) throw ValidationError("build_batches: no source segments");
        if (proto_.mode == TrainProtocol::Mode::UDA && target_.empty())
            throw ValidationError("build_batches: UDA requires target adaptation segments");
        source_datasets_ = source_dataset_list();
        target_rng_ = Rng(Rng::derive(proto_.seed, "target_cycle"));
        reshuffle_target();
    }

    size_t steps_per_epoch() const {
        return std::max<size_t>(1, source_.size() / proto_.batch_size);
    }

    std::vector<Batch> epoch_batches(int epoch) {
        std::vector<size_t> order(source_.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(Rng::derive(proto_.seed, "epoch" + std::to_string(epoch)));
        rng.shuffle(order);

        std::vector<Batch> out;
        const size_t steps = steps_per_epoch();
        const size_t bs = std::min(proto_.batch_size, source_.size());
        for (size_t s = 0; s < steps; ++s) {
            std::vector<const SegmentData*> rows;
            for (size_t i = 0; i < bs; ++i) rows.push_back(source_[order[s * bs + i]]);
            Batch b;
            b.n_source = rows.size();
            if (proto_.mode == TrainProtocol::Mode::UDA) {
                for (size_t i = 0; i < bs; ++i) rows.push_back(next_target());
                b.n_target = bs;
            }
            b.x = stack_features(rows);
            for (size_t i = 0; i < rows.size(); ++i) {
                const bool src = i < b.n_source;
                b.labels.push_back(src ? static_cast<int>(rows[i]->meta.label) : -1);
                b.patient_ids.push_back(rows[i]->meta.patient_id);
                b.genders.push_back(static_cast<int>(rows[i]->meta.gender));
                if (proto_.mode == TrainProtocol::Mode::UDA) {
                    b.is_source.push_back(src);
                } else {
                    // DG: the adversary discriminates between the source
                    // datasets themselves
                    b.is_source.push_back(rows[i]->meta.dataset_id == source_datasets_.front());
                }
            }
            out.push_back(std::move(b));
        }
        return out;
    }

private:
    std::vector<std::string> source_dataset_list() const {
        std::set<std::string> s;
        for (const auto* seg : source_) s.insert(seg->meta.dataset_id);
        return {s.begin(), s.end()};
    }

    void reshuffle_target() {
        target_order_.resize(target_.size());
        for (size_t i = 0; i < target_.size(); ++i) target_order_[i] = i;
        target_rng_.shuffle(target_order_);
        target_pos_ = 0;
    }

    const SegmentData* next_target() {
        if (target_pos_ >= target_order_.size()) reshuffle_target();
        return target_[target_order_[target_pos_++]];
    }

    std::vector<const SegmentData*> source_;
    std::vector<const SegmentData*> target_;
    TrainProtocol proto_;
    std::vector<std::string> source_datasets_;
    std::vector<size_t> target_order_;
    size_t target_pos_ = 0;
    Rng target_rng_{0};
};

inline PatientWeightTable build_weight_table(const std::vector<const SegmentData*>& train) {
    PatientWeightTable t;
    for (const auto* s : train) ++t.n_segments[s->meta.patient_id];
    return t;
}

struct StepLosses {
    double task = 0.0, domain = 0.0, fairness = 0.0, total = 0.0;
    double lambda_d = 0.0, lambda_fair = 0.0;
};

struct TrainResult {
    std::vector<StepLosses> history;
    size_t final_step = 0;
};

// One optimization step: forward, compose Eq. 4 through the GRL wiring,
// single optimizer update.
inline StepLosses train_step(FairPDAModel& model, nn::RmsProp& opt, const Batch& batch,
                             const TrainProtocol& proto, const PatientWeightTable& weights,
                             double lambda_d, double lambda_fair) {
    StepLosses out;
    out.lambda_d = lambda_d;
    out.lambda_fair = lambda_fair;

    const ForwardOutput fwd = model.forward(batch.x, true);
    const auto task = task_ce_loss(fwd.p, batch.labels, batch.patient_ids,
                                   proto.patient_norm ? &weights : nullptr);
    out.task = task.loss;

    const Tensor* d_domain = nullptr;
    const Tensor* d_gender = nullptr;
    const Tensor* d_f_extra = nullptr;
    Tensor d_domain_store, d_gender_store, d_f_store;

    const bool adversarial = proto.align_mode == AlignMode::dann ||
                             proto.align_mode == AlignMode::cdan ||
                             proto.align_mode == AlignMode::partial_cdan;
    bool align_possible = false;
    if (proto.align_mode != AlignMode::none) {
        size_t ns = 0, nt = 0;
        for (bool s : batch.is_source) s ? ++ns : ++nt;
        align_possible = ns > 0 && nt > 0;
    }

    if (adversarial && align_possible) {
        GammaWeights gamma;
        const auto k = static_cast<size_t>(model.heads_config().num_classes);
        if (proto.align_mode == AlignMode::partial_cdan) {
            // gamma over the "target side" rows' current predictions
            size_t nt = 0;
            for (bool s : batch.is_source)
                if (!s) ++nt;
            Tensor tp({nt, k});
            size_t r = 0;
            for (size_t i = 0; i < batch.is_source.size(); ++i)
                if (!batch.is_source[i]) {
                    for (size_t j = 0; j < k; ++j)
                        tp.data[r * k + j] = fwd.p.data[i * k + j];
                    ++r;
                }
            gamma = class_importance_weights(tp);
        } else {
            gamma.gamma.assign(k, 1.0);
        }
        const Tensor dlogits = model.domain_forward(true);
        // side labels for the loss: true class where known, otherwise the
        // argmax prediction (DG-mode source rows always carry labels)
        std::vector<int> side_labels = batch.labels;
        for (size_t i = 0; i < side_labels.size(); ++i)
            if (side_labels[i] < 0) side_labels[i] = 0;  // gamma ignored on target side
        const auto dom = domain_loss_from_logits(dlogits, batch.is_source, side_labels, gamma);
        out.domain = dom.loss;
        d_domain_store = dom.d_logits;
        d_domain = &d_domain_store;
    } else if (proto.align_mode == AlignMode::coral && align_possible) {
        const auto d = static_cast<size_t>(model.backbone_config().feature_dim);
        size_t ns = 0, nt = 0;
        for (bool s : batch.is_source) s ? ++ns : ++nt;
        if (ns >= 2 && nt >= 2) {
            Tensor fs({ns, d}), ft({nt, d});
            size_t rs = 0, rt = 0;
            for (size_t i = 0; i < batch.is_source.size(); ++i) {
                auto* dst = batch.is_source[i] ? &fs : &ft;
                const size_t row = batch.is_source[i] ? rs++ : rt++;
                for (size_t j = 0; j < d; ++j)
                    dst->data[row * d + j] = fwd.f.data[i * d + j];
            }
            Tensor gs, gt;
            out.domain = coral_loss(fs, ft, &gs, &gt);
            // CORAL is minimized jointly with the task loss (no reversal)
            d_f_store = Tensor({batch.is_source.size(), d});
            rs = rt = 0;
            for (size_t i = 0; i < batch.is_source.size(); ++i) {
                const Tensor& g = batch.is_source[i] ? gs : gt;
                const size_t row = batch.is_source[i] ? rs++ : rt++;
                for (size_t j = 0; j < d; ++j)
                    d_f_store.data[i * d + j] = lambda_d * g.data[row * d + j];
            }
            d_f_extra = &d_f_store;
        }
    }

    if (!proto.no_fairness) {
        const Tensor glogits = model.gender_forward(true);
        const auto gen = gender_loss_from_logits(glogits, batch.genders);
        out.fairness = gen.loss;
        d_gender_store = gen.d_logits;
        d_gender = &d_gender_store;
    }

    out.total = total_objective(out.task, adversarial ? out.domain : 0.0, out.fairness,
                                lambda_d, lambda_fair);
    if (proto.align_mode == AlignMode::coral) out.total = out.task + lambda_d * out.domain;
    if (!std::isfinite(out.task) || !std::isfinite(out.domain) ||
        !std::isfinite(out.fairness))
        throw NumericError("train_step: non-finite loss component");
    if (out.task > 1e4) throw NumericError("train_step: task loss diverged");

    model.zero_grad();
    model.backward(&task.d_logits, d_domain, d_gender, d_f_extra, lambda_d, lambda_fair);
    auto params = model.params();
    opt.step(params);
    return out;
}

// Everything needed for bit-exact resume: model weights + config, optimizer
// accumulators, step counter, and the model's MixStyle RNG state (stored as
// raw u64 bit patterns inside f64 tensors; no arithmetic ever touches them).
inline void save_train_state(const std::string& path, FairPDAModel& model,
                             nn::RmsProp& opt, size_t step) {
    std::map<std::string, Tensor> extra;
    Tensor st({size_t{1}});
    st.data[0] = static_cast<double>(step);
    extra["step"] = std::move(st);
    const auto rs = model.rng().state();
    Tensor rt({size_t{4}});
    static_assert(sizeof(double) == sizeof(uint64_t));
    for (size_t i = 0; i < 4; ++i) std::memcpy(&rt.data[i], &rs[i], sizeof(double));
    extra["rng_state"] = std::move(rt);
    auto& v = opt.state();
    for (size_t i = 0; i < v.size(); ++i) {
        Tensor t({v[i].size()});
        t.data = v[i];
        extra["opt_v_" + std::to_string(i)] = std::move(t);
    }
    model.save_checkpoint(path, &extra);
}

inline FairPDAModel load_train_state(const std::string& path, nn::RmsProp& opt,
                                     size_t& step) {
    std::map<std::string, Tensor> extra;
    FairPDAModel model = FairPDAModel::load_checkpoint(path, &extra);
    auto need = [&](const std::string& k) -> Tensor& {
        auto it = extra.find(k);
        if (it == extra.end()) throw IoError("checkpoint missing train state '" + k + "'");
        return it->second;
    };
    step = static_cast<size_t>(need("step").data.at(0));
    std::vector<uint64_t> rs(4);
    Tensor& rt = need("rng_state");
    if (rt.numel() != 4) throw IoError("checkpoint rng_state malformed");
    for (size_t i = 0; i < 4; ++i) std::memcpy(&rs[i], &rt.data[i], sizeof(uint64_t));
    model.rng().set_state(rs);
    auto& v = opt.state();
    v.clear();
    for (size_t i = 0;; ++i) {
        auto it = extra.find("opt_v_" + std::to_string(i));
        if (it == extra.end()) break;
        v.push_back(it->second.data);
    }
    return model;
}

struct FoldData {
    std::vector<const SegmentData*> train_source;
    std::vector<const SegmentData*> target_adapt;  // empty in DG mode
};

// Full training run over one fold. start_step > 0 resumes a run whose
// model/optimizer/rng state has already been restored; the batch order is a
// pure function of (seed, epoch) so the stream realigns exactly.
inline TrainResult train(FairPDAModel& model, nn::RmsProp& opt, const FoldData& data,
                         const TrainProtocol& proto, size_t start_step = 0,
                         size_t stop_after_step = SIZE_MAX) {
    model.set_mixstyle_active(!proto.no_mixstyle && model.backbone_config().mixstyle_active);
    BatchBuilder builder(data.train_source, data.target_adapt, proto);
    const size_t steps_per_epoch = builder.steps_per_epoch();
    const size_t total_steps = steps_per_epoch * static_cast<size_t>(proto.epochs);

    ScheduleConfig sched;
    sched.lambda_d_max = proto.lambda_d_max;
    sched.lambda_fair_max = proto.lambda_fair_max;
    sched.warmup_fraction = proto.warmup_fraction;
    sched.total_steps = total_steps;
    sched.warmup_enabled = !proto.no_warmup;

    const PatientWeightTable weights = build_weight_table(data.train_source);

    TrainResult result;
    size_t step = 0;
    for (int epoch = 0; epoch < proto.epochs; ++epoch) {
        // Batches are built even for epochs before the resume point so the
        // target-cycling RNG advances identically to the original run.
        auto batches = builder.epoch_batches(epoch);
        for (auto& b : batches) {
            if (step < start_step) {
                ++step;
                continue;
            }
            const auto [ld, lf] = lambda_schedule(step, sched);
            result.history.push_back(train_step(model, opt, b, proto, weights, ld, lf));
            ++step;
            if (step >= stop_after_step) {
                result.final_step = step;
                return result;
            }
        }
    }
    result.final_step = step;
    return result;
}

// Eval-mode patient predictions with soft voting over segments.
inline std::vector<PatientPrediction> predict_patients(
    FairPDAModel& model, const std::vector<const SegmentData*>& segs,
    size_t batch_size = 32) {
    if (segs.empty()) throw ValidationError("predict_patients: no segments");
    std::map<std::string, std::vector<std::vector<double>>> probs_by_patient;
    std::map<std::string, const SegmentData*> sample_of;
    const auto k = static_cast<size_t>(model.heads_config().num_classes);
    for (size_t off = 0; off < segs.size(); off += batch_size) {
        const size_t end = std::min(segs.size(), off + batch_size);
        std::vector<const SegmentData*> rows(segs.begin() + static_cast<long>(off),
                                             segs.begin() + static_cast<long>(end));
        const Tensor x = stack_features(rows);
        const ForwardOutput fwd = model.forward(x, false);
        for (size_t i = 0; i < rows.size(); ++i) {
            std::vector<double> p(k);
            for (size_t j = 0; j < k; ++j) p[j] = fwd.p.data[i * k + j];
            probs_by_patient[rows[i]->meta.patient_id].push_back(std::move(p));
            sample_of[rows[i]->meta.patient_id] = rows[i];
        }
    }
    std::vector<PatientPrediction> out;
    for (auto& [pid, plist] : probs_by_patient) {
        PatientPrediction pp = pool_patient(plist);
        pp.patient_id = pid;
        pp.true_class = static_cast<int>(sample_of[pid]->meta.label);
        pp.gender = sample_of[pid]->meta.gender;
        out.push_back(std::move(pp));
    }
    return out;
}

inline FoldMetrics evaluate_fold(const std::vector<PatientPrediction>& internal,
                                 const std::vector<PatientPrediction>& external,
                                 std::vector<std::string>* warnings = nullptr,
                                 GapReduction reduction = GapReduction::macro) {
    auto unpack = [](const std::vector<PatientPrediction>& v) {
        std::vector<int> preds, truths;
        std::vector<Gender> genders;
        for (const auto& p : v) {
            preds.push_back(p.predicted_class);
            truths.push_back(p.true_class);
            genders.push_back(p.gender);
        }
        return std::make_tuple(preds, truths, genders);
    };
    FoldMetrics f;
    {
        const auto [preds, truths, genders] = unpack(internal);
        const auto m = confusion_metrics(preds, truths);
        f.int_balacc = m.balacc;
        f.int_mcc = m.mcc;
        f.int_macro_f1 = m.macro_f1;
    }
    {
        const auto [preds, truths, genders] = unpack(external);
        const auto m = confusion_metrics(preds, truths);
        f.ext_balacc = m.balacc;
        f.ext_mcc = m.mcc;
        f.ext_macro_f1 = m.macro_f1;
        const auto gaps = fairness_gaps(preds, truths, genders, kNumClasses, reduction);
        f.eod = gaps.eod;
        f.eog = gaps.eog;
        if (warnings)
            warnings->insert(warnings->end(), gaps.warnings.begin(), gaps.warnings.end());
    }
    return f;
}

struct ExperimentResult {
    MetricsReport report;
    // per fold: external patient predictions, for paired significance tests
    std::vector<std::vector<PatientPrediction>> external_preds;
    std::vector<TrainResult> fold_training;
};

inline nlohmann::json loss_history_json(const TrainResult& r) {
    nlohmann::json steps = nlohmann::json::array();
    for (size_t i = 0; i < r.history.size(); ++i) {
        const auto& s = r.history[i];
        steps.push_back({{"step", i},
                         {"task", s.task},
                         {"domain", s.domain},
                         {"fairness", s.fairness},
                         {"total", s.total},
                         {"lambda_d", s.lambda_d},
                         {"lambda_fair", s.lambda_fair}});
    }
    return {{"final_step", r.final_step}, {"steps", steps}};
}

inline nlohmann::json predictions_json(
    const std::vector<std::vector<PatientPrediction>>& folds) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& fold : folds) {
        nlohmann::json f = nlohmann::json::array();
        for (const auto& p : fold)
            f.push_back({{"patient_id", p.patient_id},
                         {"true_class", p.true_class},
                         {"predicted_class", p.predicted_class},
                         {"gender", to_string(p.gender)},
                         {"pooled_probs", p.pooled_probs}});
        out.push_back(std::move(f));
    }
    return out;
}

inline std::vector<std::vector<PatientPrediction>> predictions_from_json(
    const nlohmann::json& j) {
    std::vector<std::vector<PatientPrediction>> out;
    for (const auto& fold : j) {
        std::vector<PatientPrediction> f;
        for (const auto& row : fold) {
            PatientPrediction p;
            p.patient_id = row.at("patient_id").get<std::string>();
            p.true_class = row.at("true_class").get<int>();
            p.predicted_class = row.at("predicted_class").get<int>();
            p.gender = parse_gender(row.at("gender").get<std::string>());
            p.pooled_probs = row.at("pooled_probs").get<std::vector<double>>();
            f.push_back(std::move(p));
        }
        out.push_back(std::move(f));
    }
    return out;
}

// The fold protocol: per CV fold, train on fold-train source patients
// (plus the unlabeled target adaptation set in UDA), evaluate internally on
// the fold's held-out source patients and externally on the target
// external-eval patients.
inline ExperimentResult run_experiment(const TrainProtocol& proto,
                                       const std::vector<SegmentData>& source_segments,
                                       const std::vector<SegmentData>& target_segments,
                                       const SplitPlan& plan,
                                       const std::string& run_dir = "",
                                       GapReduction reduction = GapReduction::macro) {
    if (plan.cv_folds.empty()) throw ValidationError("run_experiment: split plan has no folds");
    const std::set<std::string> adapt_ids(plan.uda_adaptation.begin(),
                                          plan.uda_adaptation.end());
    const std::set<std::string> ext_ids(plan.uda_external_eval.begin(),
                                        plan.uda_external_eval.end());
    ExperimentResult result;
    for (size_t fi = 0; fi < plan.cv_folds.size(); ++fi) {
        const auto& fold = plan.cv_folds[fi];
        FoldData data;
        data.train_source = select_by_patients(
            source_segments, {fold.train.begin(), fold.train.end()});
        if (proto.mode == TrainProtocol::Mode::UDA)
            data.target_adapt = select_by_patients(target_segments, adapt_ids);

        TrainProtocol fold_proto = proto;
        fold_proto.seed = Rng::derive(proto.seed, "fold" + std::to_string(fi));
        FairPDAModel model(proto.backbone, proto.heads, proto.align_mode, fold_proto.seed);
        nn::RmsProp opt(proto.learning_rate);
        TrainResult tr = train(model, opt, data, fold_proto);

        const auto internal_segs = select_by_patients(
            source_segments, {fold.test.begin(), fold.test.end()});
        const auto external_segs = select_by_patients(target_segments, ext_ids);
        const auto internal = predict_patients(model, internal_segs);
        const auto external = predict_patients(model, external_segs);
        result.report.folds.push_back(
            evaluate_fold(internal, external, &result.report.warnings, reduction));
        result.external_preds.push_back(external);

        if (!run_dir.empty()) {
            namespace fs = std::filesystem;
            fs::create_directories(run_dir);
            const std::string tag = "fold_" + std::to_string(fi);
            save_train_state((fs::path(run_dir) / (tag + ".ckpt")).string(), model, opt,
                             tr.final_step);
            std::ofstream os((fs::path(run_dir) / ("loss_" + tag + ".json")).string());
            if (!os) throw IoError("cannot write loss curve in " + run_dir);
            os << loss_history_json(tr).dump(2) << "\n";
        }
        result.fold_training.push_back(std::move(tr));
    }
    if (!run_dir.empty()) {
        namespace fs = std::filesystem;
        std::ofstream os((fs::path(run_dir) / "predictions.json").string());
        if (!os) throw IoError("cannot write predictions in " + run_dir);
        os << predictions_json(result.external_preds).dump(2) << "\n";
    }
    return result;
}

}  // namespace fairpda
