#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fairpda/cohort.hpp"
#include "fairpda/common.hpp"
#include "fairpda/dsp.hpp"
#include "fairpda/wav.hpp"

namespace fairpda {

// Per-class voice perturbation parameters. Orderings across classes (e.g.
// jitter HC < PD < ALS) are a property of the configured values, not of the
// generator.
struct ClassEffects {
    double jitter_pct = 0.3;
    double shimmer_pct = 2.0;
    double hnr_db = 25.0;
    double tremor_hz = 4.5;
    double tremor_depth = 0.002;
};

// Acquisition-channel simulation per dataset.
struct DomainEffects {
    double bandpass_lo_hz = 60.0;
    double bandpass_hi_hz = 7600.0;
    double gain_db = 0.0;
    double noise_floor_db = -60.0;  // relative to signal RMS
    int sim_sr_hz = 16000;
};

struct DatasetSpec {
    CohortRole role = CohortRole::source;
    // patients per (class, gender)
    std::map<std::pair<ClassLabel, Gender>, int> n_patients;
    DomainEffects fx;

    std::set<ClassLabel> label_space() const {
        std::set<ClassLabel> s;
        for (const auto& [key, n] : n_patients)
            if (n > 0) s.insert(key.first);
        return s;
    }
};

struct SynthSpec {
    std::map<std::string, DatasetSpec> datasets;
    std::map<Gender, std::pair<double, double>> f0_hz = {
        {Gender::M, {120.0, 12.0}}, {Gender::F, {210.0, 18.0}}};
    std::map<ClassLabel, ClassEffects> class_fx = {
        {ClassLabel::HC, {0.3, 2.0, 25.0, 4.5, 0.002}},
        {ClassLabel::PD, {2.0, 6.0, 14.0, 5.5, 0.020}},
        {ClassLabel::ALS, {4.0, 10.0, 6.0, 7.5, 0.040}}};
    double duration_min_s = 4.5;
    double duration_max_s = 7.0;
    int gen_sr_hz = 16000;  // internal synthesis rate, before channel simulation
    uint64_t seed = 1;

    void validate() const {
        if (datasets.empty()) throw ValidationError("synth: no datasets configured");
        for (const auto& [c, fx] : class_fx)
            if (fx.jitter_pct < 0.0 || fx.shimmer_pct < 0.0)
                throw ValidationError("synth: jitter/shimmer must be >= 0");
        for (const auto& [name, ds] : datasets) {
            if (ds.fx.bandpass_lo_hz >= ds.fx.bandpass_hi_hz ||
                ds.fx.bandpass_hi_hz >= ds.fx.sim_sr_hz / 2.0 ||
                ds.fx.bandpass_hi_hz >= gen_sr_hz / 2.0)
                throw ValidationError("synth: dataset '" + name +
                                      "': need bandpass lo < hi < sim_sr/2");
        }
        if (duration_min_s <= 0.0 || duration_max_s < duration_min_s)
            throw ValidationError("synth: bad duration range");
    }

    // Desk-scale benchmark mirroring the source/target topology: two source
    // datasets with partially overlapping label spaces and two shifted
    // target datasets. Gender is imbalanced within the disease classes to
    // create a gender-leakage pathway.
    static SynthSpec default_spec() {
        SynthSpec s;
        auto cell = [](ClassLabel c, Gender g) { return std::make_pair(c, g); };
        DatasetSpec srcA;
        srcA.role = CohortRole::source;
        srcA.n_patients[cell(ClassLabel::HC, Gender::M)] = 6;
        srcA.n_patients[cell(ClassLabel::HC, Gender::F)] = 6;
        srcA.n_patients[cell(ClassLabel::PD, Gender::M)] = 8;
        srcA.n_patients[cell(ClassLabel::PD, Gender::F)] = 4;
        srcA.fx = {60.0, 7600.0, 0.0, -60.0, 16000};
        DatasetSpec srcB;
        srcB.role = CohortRole::source;
        srcB.n_patients[cell(ClassLabel::HC, Gender::M)] = 5;
        srcB.n_patients[cell(ClassLabel::HC, Gender::F)] = 5;
        srcB.n_patients[cell(ClassLabel::ALS, Gender::M)] = 7;
        srcB.n_patients[cell(ClassLabel::ALS, Gender::F)] = 5;
        srcB.fx = {40.0, 7800.0, 2.0, -55.0, 16000};
        DatasetSpec tgtC;
        tgtC.role = CohortRole::target;
        tgtC.n_patients[cell(ClassLabel::HC, Gender::M)] = 4;
        tgtC.n_patients[cell(ClassLabel::HC, Gender::F)] = 5;
        tgtC.n_patients[cell(ClassLabel::PD, Gender::M)] = 5;
        tgtC.n_patients[cell(ClassLabel::PD, Gender::F)] = 4;
        tgtC.fx = {100.0, 5000.0, -6.0, -45.0, 16000};
        DatasetSpec tgtD;
        tgtD.role = CohortRole::target;
        tgtD.n_patients[cell(ClassLabel::HC, Gender::M)] = 4;
        tgtD.n_patients[cell(ClassLabel::HC, Gender::F)] = 4;
        tgtD.n_patients[cell(ClassLabel::ALS, Gender::M)] = 5;
        tgtD.n_patients[cell(ClassLabel::ALS, Gender::F)] = 4;
        tgtD.fx = {300.0, 3400.0, -3.0, -40.0, 8000};  // telephone-like channel
        s.datasets = {{"srcA", srcA}, {"srcB", srcB}, {"tgtC", tgtC}, {"tgtD", tgtD}};
        return s;
    }
};

namespace synth {

// RBJ biquad, direct form 1.
struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

    double process(double x) {
        const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1; x1 = x;
        y2 = y1; y1 = y;
        return y;
    }

    static Biquad lowpass(double fc, double q, int sr) {
        const double w = 2.0 * M_PI * fc / sr;
        const double alpha = std::sin(w) / (2.0 * q);
        const double c = std::cos(w);
        const double a0 = 1.0 + alpha;
        Biquad f;
        f.b0 = (1.0 - c) / 2.0 / a0;
        f.b1 = (1.0 - c) / a0;
        f.b2 = f.b0;
        f.a1 = -2.0 * c / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }

    static Biquad highpass(double fc, double q, int sr) {
        const double w = 2.0 * M_PI * fc / sr;
        const double alpha = std::sin(w) / (2.0 * q);
        const double c = std::cos(w);
        const double a0 = 1.0 + alpha;
        Biquad f;
        f.b0 = (1.0 + c) / 2.0 / a0;
        f.b1 = -(1.0 + c) / a0;
        f.b2 = f.b0;
        f.a1 = -2.0 * c / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }

    static Biquad bandpass(double fc, double q, int sr) {
        const double w = 2.0 * M_PI * fc / sr;
        const double alpha = std::sin(w) / (2.0 * q);
        const double c = std::cos(w);
        const double a0 = 1.0 + alpha;
        Biquad f;
        f.b0 = alpha / a0;
        f.b1 = 0.0;
        f.b2 = -alpha / a0;
        f.a1 = -2.0 * c / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }
};

// 4th-order Butterworth band limiting via cascaded biquads.
inline std::vector<double> apply_bandpass(const std::vector<double>& x, double lo, double hi,
                                          int sr) {
    constexpr double q1 = 0.54119610, q2 = 1.30656296;
    Biquad hp1 = Biquad::highpass(lo, q1, sr), hp2 = Biquad::highpass(lo, q2, sr);
    Biquad lp1 = Biquad::lowpass(hi, q1, sr), lp2 = Biquad::lowpass(hi, q2, sr);
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        y[i] = lp2.process(lp1.process(hp2.process(hp1.process(x[i]))));
    return y;
}

// Source-filter sustained /a/: jittered/shimmered glottal impulse train with
// slow tremor, three parallel formant resonators, additive noise at the
// configured HNR, then the dataset channel simulation.
inline Wave synth_phonation(ClassLabel cls, Gender gender, const std::string& dataset,
                            const SynthSpec& spec, uint64_t seed) {
    spec.validate();
    auto ds_it = spec.datasets.find(dataset);
    if (ds_it == spec.datasets.end())
        throw ValidationError("synth: unknown dataset '" + dataset + "'");
    const DomainEffects& fx = ds_it->second.fx;
    const ClassEffects& ce = spec.class_fx.at(cls);
    const auto [f0_mean, f0_sd] = spec.f0_hz.at(gender);

    Rng rng(seed);
    const int sr = spec.gen_sr_hz;
    const double duration =
        spec.duration_min_s + rng.uniform() * (spec.duration_max_s - spec.duration_min_s);
    const size_t n = static_cast<size_t>(std::lround(duration * sr));
    const double f0_base = rng.normal(f0_mean, f0_sd);
    const double tremor_phase = rng.uniform() * 2.0 * M_PI;

    // glottal impulse train with cycle-level perturbations
    std::vector<double> source(n, 0.0);
    double t_cycle = 0.0;
    while (t_cycle < static_cast<double>(n)) {
        const double tsec = t_cycle / sr;
        const double tremor =
            1.0 + ce.tremor_depth * std::sin(2.0 * M_PI * ce.tremor_hz * tsec + tremor_phase);
        const double f0 =
            std::max(30.0, f0_base * tremor * (1.0 + 0.01 * ce.jitter_pct * rng.normal()));
        const double amp = std::max(0.05, 1.0 + 0.01 * ce.shimmer_pct * rng.normal());
        const auto idx = static_cast<size_t>(t_cycle);
        if (idx < n) source[idx] += amp;
        t_cycle += sr / f0;
    }

    // formant resonators for /a/
    const double formants[3] = {710.0 * (1.0 + 0.04 * rng.normal()),
                                1100.0 * (1.0 + 0.04 * rng.normal()),
                                2540.0 * (1.0 + 0.04 * rng.normal())};
    const double fweights[3] = {1.0, 0.6, 0.25};
    Biquad res[3];
    for (int i = 0; i < 3; ++i) res[i] = Biquad::bandpass(formants[i], 8.0, sr);
    std::vector<double> harmonic(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) harmonic[i] += fweights[j] * res[j].process(source[i]);

    const double h_rms = dsp::rms(harmonic);
    if (h_rms <= 0.0) throw NumericError("synth: degenerate harmonic signal");
    const double noise_rms = h_rms * db_to_amp(-ce.hnr_db);
    std::vector<double> sig(n);
    for (size_t i = 0; i < n; ++i) sig[i] = harmonic[i] + noise_rms * rng.normal();

    // amplitude envelope with soft on/offset, framed by lead/tail silence
    const auto ramp = static_cast<size_t>(0.05 * sr);
    for (size_t i = 0; i < ramp && i < n; ++i) {
        const double g = static_cast<double>(i) / ramp;
        sig[i] *= g;
        sig[n - 1 - i] *= g;
    }
    const auto lead = static_cast<size_t>((0.1 + 0.3 * rng.uniform()) * sr);
    const auto tail = static_cast<size_t>((0.1 + 0.3 * rng.uniform()) * sr);
    std::vector<double> framed(lead + n + tail, 0.0);
    std::copy(sig.begin(), sig.end(), framed.begin() + static_cast<long>(lead));

    // channel simulation: band limiting, gain, recording noise floor
    framed = apply_bandpass(framed, fx.bandpass_lo_hz, fx.bandpass_hi_hz, sr);
    const double gain = db_to_amp(fx.gain_db);
    const double floor_rms = dsp::rms(framed) * db_to_amp(fx.noise_floor_db);
    for (auto& v : framed) v = v * gain + floor_rms * gain * rng.normal();

    std::vector<double> out = dsp::resample(framed, sr, fx.sim_sr_hz);
    double peak = 0.0;
    for (double v : out) peak = std::max(peak, std::abs(v));
    if (peak > 0.99)
        for (auto& v : out) v *= 0.99 / peak;
    return Wave{std::move(out), fx.sim_sr_hz};
}

struct BenchmarkOutput {
    // dataset id -> manifest, audio under <out_dir>/<dataset>/
    std::map<std::string, CohortManifest> manifests;
};

/// Generates the full benchmark: WAV files plus one manifest CSV per
// dataset. Pure function of the spec; per-patient seeds derive from
// (spec.seed, patient id) so generation order does not matter.
inline BenchmarkOutput build_synth_benchmark(const SynthSpec& spec,
                                             const std::string& out_dir) {
    spec.validate();
    BenchmarkOutput out;
    for (const auto& [ds_name, ds] : spec.datasets) {
        bool any = false;
        for (const auto& [key, count] : ds.n_patients)
            if (count > 0) any = true;
        if (!any)
            throw ValidationError("synth: dataset '" + ds_name + "' has no patients");

        CohortManifest m;
        m.role = ds.role;
        const auto dir = std::filesystem::path(out_dir) / ds_name;
        std::filesystem::create_directories(dir);
        for (const auto& [key, count] : ds.n_patients) {
            const auto [cls, gender] = key;
            for (int i = 0; i < count; ++i) {
                char idx[16];
                std::snprintf(idx, sizeof(idx), "%03d", i);
                const std::string pid =
                    ds_name + "_" + to_string(cls) + "_" + to_string(gender) + "_" + idx;
                const uint64_t pseed = Rng::derive(spec.seed, pid);
                Rng meta_rng(Rng::derive(pseed, "meta"));
                PatientRecord p;
                p.patient_id = pid;
                p.dataset_id = ds_name;
                p.class_label = cls;
                p.gender = gender;
                p.age = 40 + static_cast<int>(meta_rng.uniform_int(36));
                p.medication_flag = MedicationFlag::standard;
                m.patients.push_back(p);

                const Wave w = synth_phonation(cls, gender, ds_name, spec,
                                               Rng::derive(pseed, "audio"));
                RecordingRecord r;
                r.recording_id = pid + "_r0";
                r.patient_id = pid;
                r.audio_path = ds_name + "/" + r.recording_id + ".wav";
                wavio::write((std::filesystem::path(out_dir) / r.audio_path).string(), w);
                m.recordings.push_back(r);
            }
        }
        save_manifest((std::filesystem::path(out_dir) / (ds_name + "_manifest.csv")).string(),
                      m);
        out.manifests[ds_name] = std::move(m);
    }
    return out;
}

}  // namespace synth
}  // namespace fairpda
