// fairpda: command-line driver for the voice-biomarker domain adaptation
// pipeline. Subcommands cover the whole workflow: synth -> prep -> split ->
// train -> eval -> report.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fairpda/config.hpp"
#include "fairpda/synth.hpp"
#include "fairpda/trainer.hpp"

namespace fs = std::filesystem;
using namespace fairpda;

namespace {

nlohmann::json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    nlohmann::json j;
    is >> j;
    return j;
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

CohortManifest load_merged(const std::vector<std::string>& paths, CohortRole role) {
    std::vector<CohortManifest> parts;
    for (const auto& p : paths) parts.push_back(load_manifest(p, role));
    return merge_manifests(parts, role);
}

std::vector<SegmentData> load_caches(const std::vector<std::string>& dirs) {
    std::vector<SegmentData> all;
    for (const auto& d : dirs) {
        auto segs = load_segments(FeatureCache::load(d));
        std::move(segs.begin(), segs.end(), std::back_inserter(all));
    }
    return all;
}

// Minimal SVG line chart: one polyline per loss series.
void write_loss_svg(const std::string& path, const nlohmann::json& curve) {
    const auto& steps = curve.at("steps");
    if (steps.empty()) throw ValidationError("loss curve has no steps");
    const int w = 640, h = 360, pad = 40;
    struct Series {
        const char* key;
        const char* color;
    };
    const Series series[] = {{"task", "#1f77b4"}, {"domain", "#d62728"},
                             {"fairness", "#2ca02c"}, {"total", "#333333"}};
    double lo = 1e300, hi = -1e300;
    for (const auto& s : steps)
        for (const auto& sr : series) {
            const double v = s.at(sr.key).get<double>();
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi <= lo) hi = lo + 1.0;
    const double n = static_cast<double>(steps.size());
    auto px = [&](size_t i) {
        return pad + (w - 2 * pad) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5);
    };
    auto py = [&](double v) { return h - pad - (h - 2 * pad) * (v - lo) / (hi - lo); };

    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
       << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    os << "<line x1='" << pad << "' y1='" << h - pad << "' x2='" << w - pad << "' y2='"
       << h - pad << "' stroke='black'/>\n";
    os << "<line x1='" << pad << "' y1='" << pad << "' x2='" << pad << "' y2='" << h - pad
       << "' stroke='black'/>\n";
    int legend_y = pad;
    for (const auto& sr : series) {
        os << "<polyline fill='none' stroke='" << sr.color << "' stroke-width='1.5' points='";
        for (size_t i = 0; i < steps.size(); ++i)
            os << px(i) << "," << py(steps[i].at(sr.key).get<double>()) << " ";
        os << "'/>\n";
        os << "<text x='" << w - pad - 70 << "' y='" << legend_y << "' fill='" << sr.color
           << "' font-size='12'>" << sr.key << "</text>\n";
        legend_y += 14;
    }
    os << "<text x='" << w / 2 << "' y='" << h - 8
       << "' font-size='12' text-anchor='middle'>step</text>\n";
    os << "<text x='12' y='" << pad - 8 << "' font-size='12'>loss</text>\n</svg>\n";
}

int cmd_synth(const std::string& out_dir, uint64_t seed) {
    SynthSpec spec = SynthSpec::default_spec();
    spec.seed = seed;
    const auto out = synth::build_synth_benchmark(spec, out_dir);
    for (const auto& [name, m] : out.manifests)
        std::cout << name << ": " << m.patients.size() << " patients, "
                  << m.recordings.size() << " recordings\n";
    return 0;
}

int cmd_prep(const std::vector<std::string>& manifests, const std::string& role_str,
             const std::string& audio_root, const std::string& cache_dir,
             const RunConfig& cfg) {
    const CohortRole role = role_str == "target" ? CohortRole::target : CohortRole::source;
    CohortManifest m = load_merged(manifests, role);
    FilterConfig filt;
    filt.min_age = cfg.min_age;
    filt.max_age = cfg.max_age;
    filt.excluded_codes = FilterConfig::default_excluded_codes();
    m = apply_filters(m, filt);

    // pass 1: preprocess everything to compute per-dataset level statistics
    std::map<std::string, const PatientRecord*> by_id;
    for (const auto& p : m.patients) by_id[p.patient_id] = &p;
    std::map<std::string, std::vector<std::vector<double>>> pre;
    for (const auto& rec : m.recordings) {
        try {
            const Wave raw = wavio::read((fs::path(audio_root) / rec.audio_path).string());
            pre[by_id.at(rec.patient_id)->dataset_id].push_back(
                dsp::preprocess_recording(raw, cfg.prep).samples);
        } catch (const std::exception& e) {
            std::cerr << "warning: level-stats pass skipped " << rec.recording_id << ": "
                      << e.what() << "\n";
        }
    }
    std::map<std::string, std::vector<const std::vector<double>*>> by_ds;
    for (const auto& [ds, recs] : pre)
        for (const auto& r : recs) by_ds[ds].push_back(&r);
    std::vector<std::string> warnings;
    const LevelStats stats = dsp::compute_level_stats(by_ds, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    FeatureCache cache(cache_dir);
    cache.set_provenance(config_echo(cfg)["prep"]);
    const PrepReport rep = prep_manifest(m, audio_root, stats, cfg.prep, cfg.features, cache);
    cache.save_index();
    std::cout << "prepped: " << rep.recordings_ok << " ok, " << rep.recordings_skipped
              << " cached, " << rep.recordings_failed << " failed, "
              << cache.entries().size() << " segments\n";
    for (const auto& f : rep.failures) std::cerr << "failed: " << f << "\n";
    return 0;
}

int cmd_split(const std::vector<std::string>& source_manifests,
              const std::vector<std::string>& target_manifests, int folds,
              double uda_fraction, uint64_t seed, const std::string& out_path,
              const RunConfig& cfg) {
    FilterConfig filt;
    filt.min_age = cfg.min_age;
    filt.max_age = cfg.max_age;
    filt.excluded_codes = FilterConfig::default_excluded_codes();

    CohortManifest src = apply_filters(load_merged(source_manifests, CohortRole::source), filt);
    SplitPlan plan = make_cv_splits(src, folds, seed);
    if (!target_manifests.empty()) {
        CohortManifest tgt =
            apply_filters(load_merged(target_manifests, CohortRole::target), filt);
        const SplitPlan uda = make_uda_split(tgt, uda_fraction, seed);
        plan.uda_adaptation = uda.uda_adaptation;
        plan.uda_external_eval = uda.uda_external_eval;
    }
    save_split_plan(out_path, plan);
    std::cout << "split plan: " << plan.cv_folds.size() << " folds, "
              << plan.uda_adaptation.size() << " adaptation patients, "
              << plan.uda_external_eval.size() << " external-eval patients -> " << out_path
              << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::vector<std::string>& source_caches,
              const std::vector<std::string>& target_caches, const std::string& plan_path) {
    cfg.validate();
    if (cfg.mode == TrainProtocol::Mode::UDA && target_caches.empty())
        throw ValidationError("train: UDA mode requires --target-cache");
    const SplitPlan plan = load_split_plan(plan_path);
    const auto source = load_caches(source_caches);
    const auto target = target_caches.empty() ? std::vector<SegmentData>{}
                                              : load_caches(target_caches);
    fs::create_directories(cfg.run_dir);
    write_json((fs::path(cfg.run_dir) / "config.json").string(), config_echo(cfg));
    save_split_plan((fs::path(cfg.run_dir) / "plan.json").string(), plan);

    const GapReduction red = cfg.gap_reduction == "per_class_max"
                                 ? GapReduction::per_class_max
                                 : GapReduction::macro;
    const ExperimentResult res =
        run_experiment(cfg.protocol(), source, target, plan, cfg.run_dir, red);
    write_json((fs::path(cfg.run_dir) / "metrics.json").string(), res.report.to_json());
    const auto agg = res.report.to_json()["aggregate"];
    std::cout << "run complete: " << res.report.folds.size() << " folds\n";
    for (const char* k : {"int_balacc", "ext_balacc", "ext_mcc", "eod", "eog"}) {
        if (agg[k].is_null())
            std::cout << "  " << k << ": n/a\n";
        else
            std::cout << "  " << k << ": " << agg[k]["mean"].get<double>() << " +/- "
                      << agg[k]["std"].get<double>() << "\n";
    }
    for (const auto& w : res.report.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

// Pool per-fold correctness, pairing patients within each fold.
void correctness(const std::vector<std::vector<PatientPrediction>>& folds,
                 std::vector<std::string>& ids, std::vector<int>& correct) {
    for (size_t f = 0; f < folds.size(); ++f)
        for (const auto& p : folds[f]) {
            ids.push_back(p.patient_id + "#fold" + std::to_string(f));
            correct.push_back(p.predicted_class == p.true_class ? 1 : 0);
        }
}

int cmd_eval(const std::string& run_dir, const std::string& baseline_run,
             const std::string& baseline_name, size_t resamples, uint64_t seed) {
    MetricsReport report =
        MetricsReport::from_json(read_json((fs::path(run_dir) / "metrics.json").string()));
    if (!baseline_run.empty()) {
        const auto a = predictions_from_json(
            read_json((fs::path(run_dir) / "predictions.json").string()));
        const auto b = predictions_from_json(
            read_json((fs::path(baseline_run) / "predictions.json").string()));
        std::vector<std::string> ids_a, ids_b;
        std::vector<int> cor_a, cor_b;
        correctness(a, ids_a, cor_a);
        correctness(b, ids_b, cor_b);
        const double p = paired_test(ids_a, cor_a, ids_b, cor_b, resamples, seed);
        report.p_values[baseline_name.empty() ? "baseline" : baseline_name] = p;
        write_json((fs::path(run_dir) / "metrics.json").string(), report.to_json());
        std::cout << "p-value vs " << (baseline_name.empty() ? "baseline" : baseline_name)
                  << ": " << p << "\n";
    }
    std::cout << report.to_json()["aggregate"].dump(2) << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream csv((fs::path(out_dir) / "report.csv").string());
    if (!csv) throw IoError("cannot write report.csv in " + out_dir);
    csv << kReportCsvHeader << "\n";
    for (const auto& spec : runs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw ValidationError("--run expects NAME=DIR, got '" + spec + "'");
        const std::string name = spec.substr(0, eq), dir = spec.substr(eq + 1);
        const MetricsReport r =
            MetricsReport::from_json(read_json((fs::path(dir) / "metrics.json").string()));
        std::optional<double> p;
        if (!r.p_values.empty()) p = r.p_values.begin()->second;
        csv << report_csv_row(name, r, p) << "\n";
        for (size_t f = 0;; ++f) {
            const auto curve = fs::path(dir) / ("loss_fold_" + std::to_string(f) + ".json");
            if (!fs::exists(curve)) break;
            write_loss_svg(
                (fs::path(out_dir) / (name + "_loss_fold_" + std::to_string(f) + ".svg"))
                    .string(),
                read_json(curve.string()));
        }
    }
    std::cout << "report written to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fair partial domain adaptation for voice biomarkers"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark corpus");
    std::string synth_out;
    uint64_t synth_seed = 1;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "generation seed");

    // shared config plumbing for prep/split/train
    std::string config_path;
    RunConfig cfg;

    // prep
    auto* prep = app.add_subcommand("prep", "preprocess audio into a feature cache");
    std::vector<std::string> prep_manifests;
    std::string prep_role = "source", prep_audio_root = ".", prep_cache;
    prep->add_option("--config", config_path, "INI config file");
    prep->add_option("--manifest", prep_manifests, "manifest CSV (repeatable)")->required();
    prep->add_option("--role", prep_role, "source|target")
        ->check(CLI::IsMember({"source", "target"}));
    prep->add_option("--audio-root", prep_audio_root, "root for audio paths");
    prep->add_option("--cache", prep_cache, "feature cache directory")->required();
    std::string prep_feature;
    double prep_window = 0.0;
    prep->add_option("--feature", prep_feature, "logmel|mfcc");
    prep->add_option("--window-s", prep_window, "segment window length in seconds");

    // split
    auto* split = app.add_subcommand("split", "build a CV + UDA split plan");
    std::vector<std::string> split_src, split_tgt;
    int split_folds = 5;
    double split_frac = 0.3;
    uint64_t split_seed = 0;
    std::string split_out;
    split->add_option("--config", config_path, "INI config file");
    split->add_option("--source-manifest", split_src, "source manifest CSV (repeatable)")
        ->required();
    split->add_option("--target-manifest", split_tgt, "target manifest CSV (repeatable)");
    split->add_option("--folds", split_folds, "number of CV folds");
    split->add_option("--uda-fraction", split_frac, "target adaptation fraction");
    split->add_option("--seed", split_seed, "split seed");
    split->add_option("--out", split_out, "output plan JSON")->required();

    // train
    auto* train = app.add_subcommand("train", "run cross-validated training");
    std::vector<std::string> train_src_caches, train_tgt_caches;
    std::string train_plan, train_mode, train_align, train_loss, train_backbone;
    std::string train_run_dir, train_gap;
    int train_epochs = -1;
    long train_batch = -1;
    double train_lr = -1.0, train_ld = -1.0, train_lf = -1.0;
    long long train_seed = -1;
    bool f_no_warmup = false, f_no_mixstyle = false, f_no_fairness = false;
    train->add_option("--config", config_path, "INI config file");
    train->add_option("--source-cache", train_src_caches, "source feature cache (repeatable)")
        ->required();
    train->add_option("--target-cache", train_tgt_caches, "target feature cache (repeatable)");
    train->add_option("--plan", train_plan, "split plan JSON")->required();
    train->add_option("--run-dir", train_run_dir, "run output directory");
    train->add_option("--mode", train_mode, "DG|UDA")
        ->check(CLI::IsMember({"DG", "UDA", "dg", "uda"}));
    train->add_option("--align", train_align, "none|dann|cdan|partial_cdan|coral");
    train->add_option("--loss-mode", train_loss, "ce|ce_pn")
        ->check(CLI::IsMember({"ce", "ce_pn"}));
    train->add_option("--backbone", train_backbone, "tiny|resnet18")
        ->check(CLI::IsMember({"tiny", "resnet18"}));
    train->add_option("--epochs", train_epochs, "training epochs");
    train->add_option("--batch-size", train_batch, "batch size");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--lambda-d", train_ld, "max domain adversary weight");
    train->add_option("--lambda-fair", train_lf, "max fairness adversary weight");
    train->add_option("--seed", train_seed, "training seed");
    train->add_option("--gap-reduction", train_gap, "macro|per_class_max");
    train->add_flag("--no-warmup", f_no_warmup, "disable lambda warm-up");
    train->add_flag("--no-mixstyle", f_no_mixstyle, "disable MixStyle");
    train->add_flag("--no-fairness", f_no_fairness, "disable the gender adversary");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a run, optionally vs a baseline");
    std::string eval_run, eval_baseline, eval_baseline_name;
    size_t eval_resamples = 10000;
    uint64_t eval_seed = 0;
    eval->add_option("--run-dir", eval_run, "run directory")->required();
    eval->add_option("--baseline-run", eval_baseline, "baseline run directory");
    eval->add_option("--baseline-name", eval_baseline_name, "label for the p-value entry");
    eval->add_option("--resamples", eval_resamples, "permutation resamples");
    eval->add_option("--seed", eval_seed, "permutation seed");

    // report
    auto* report = app.add_subcommand("report", "aggregate runs into CSV + loss plots");
    std::vector<std::string> report_runs;
    std::string report_out;
    report->add_option("--run", report_runs, "NAME=DIR (repeatable)")->required();
    report->add_option("--out-dir", report_out, "report output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (!config_path.empty()) cfg = apply_ini(cfg, IniFile::load(config_path));

        if (synth->parsed()) return cmd_synth(synth_out, synth_seed);

        if (prep->parsed()) {
            if (!prep_feature.empty()) cfg.features.kind = parse_feature_kind(prep_feature);
            if (prep_window > 0.0) {
                cfg.prep.window_s = prep_window;
                cfg.prep.pad_mode = prep_window > 2.0 ? PadMode::zero : PadMode::none;
            }
            return cmd_prep(prep_manifests, prep_role, prep_audio_root, prep_cache, cfg);
        }

        if (split->parsed())
            return cmd_split(split_src, split_tgt, split_folds, split_frac, split_seed,
                             split_out, cfg);

        if (train->parsed()) {
            if (!train_mode.empty())
                cfg.mode = (train_mode == "DG" || train_mode == "dg")
                               ? TrainProtocol::Mode::DG
                               : TrainProtocol::Mode::UDA;
            if (!train_align.empty()) cfg.align_mode = parse_align_mode(train_align);
            if (!train_loss.empty()) cfg.patient_norm = train_loss == "ce_pn";
            if (!train_backbone.empty()) {
                cfg.backbone.variant = train_backbone == "tiny"
                                           ? BackboneConfig::Variant::tiny
                                           : BackboneConfig::Variant::resnet18;
                if (cfg.backbone.variant == BackboneConfig::Variant::resnet18)
                    cfg.backbone.feature_dim = 512;
            }
            if (train_epochs > 0) cfg.epochs = train_epochs;
            if (train_batch > 0) cfg.batch_size = static_cast<size_t>(train_batch);
            if (train_lr > 0.0) cfg.learning_rate = train_lr;
            if (train_ld >= 0.0) cfg.lambda_d_max = train_ld;
            if (train_lf >= 0.0) cfg.lambda_fair_max = train_lf;
            if (train_seed >= 0) cfg.seed = static_cast<uint64_t>(train_seed);
            if (!train_gap.empty()) cfg.gap_reduction = train_gap;
            if (f_no_warmup) cfg.no_warmup = true;
            if (f_no_mixstyle) cfg.no_mixstyle = true;
            if (f_no_fairness) cfg.no_fairness = true;
            if (!train_run_dir.empty()) cfg.run_dir = train_run_dir;
            return cmd_train(cfg, train_src_caches, train_tgt_caches, train_plan);
        }

        if (eval->parsed())
            return cmd_eval(eval_run, eval_baseline, eval_baseline_name, eval_resamples,
                            eval_seed);

        if (report->parsed()) return cmd_report(report_runs, report_out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
