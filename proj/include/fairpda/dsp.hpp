#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fairpda/common.hpp"
#include "fairpda/wav.hpp"

namespace fairpda {

enum class PadMode { none, zero };

inline std::string to_string(PadMode m) { return m == PadMode::zero ? "zero" : "none"; }
inline PadMode parse_pad_mode(const std::string& s) {
    if (s == "none") return PadMode::none;
    if (s == "zero") return PadMode::zero;
    throw ValidationError("unknown pad_mode '" + s + "'");
}

struct PrepConfig {
    int target_sr_hz = 8000;
    double window_s = 2.0;
    double overlap = 0.5;
    PadMode pad_mode = PadMode::none;  // none for 2.0 s, zero for 4.0 s
    double vad_frame_ms = 30.0;
    double vad_threshold_db = -40.0;  // relative to peak frame energy
    double rms_target_dbfs = -26.0;   // overridden by LevelStats in the pipeline

    void validate() const {
        if (target_sr_hz <= 0) throw ValidationError("prep: target_sr_hz must be > 0");
        if (overlap < 0.0 || overlap >= 1.0)
            throw ValidationError("prep: overlap must be in [0,1)");
        if (window_s <= 0.0) throw ValidationError("prep: window_s must be > 0");
        if (vad_frame_ms <= 0.0) throw ValidationError("prep: vad_frame_ms must be > 0");
    }
};

struct LevelStats {
    std::map<std::string, double> per_dataset_rms_dbfs;
    double global_target_dbfs = 0.0;
};

namespace dsp {

// Identifies the resampling kernel; recorded in the feature-cache index so
// caches are self-describing.
inline const char* kResamplerVersion = "hann_sinc_32_v1";

inline double rms(const std::vector<double>& x) {
    if (x.empty()) return 0.0;
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return std::sqrt(acc / static_cast<double>(x.size()));
}

inline double rms_dbfs(const std::vector<double>& x) {
    const double r = rms(x);
    if (r <= 0.0) throw NumericError("rms_dbfs: zero-RMS signal");
    return amp_to_db(r);
}

inline void peak_normalize(std::vector<double>& x) {
    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    if (peak <= 0.0) throw NumericError("peak_normalize: all-zero signal");
    const double g = 1.0 / peak;
    for (double& v : x) v *= g;
}

// Hann-windowed sinc resampler, 32 taps each side.
inline std::vector<double> resample(const std::vector<double>& x, int src_sr, int dst_sr) {
    if (src_sr <= 0 || dst_sr <= 0) throw ValidationError("resample: bad sample rates");
    if (src_sr == dst_sr) return x;
    constexpr int kTaps = 32;
    const double ratio = static_cast<double>(src_sr) / dst_sr;
    const double cutoff = std::min(1.0, 1.0 / ratio) * 0.97;
    const size_t n_out =
        static_cast<size_t>(std::floor(static_cast<double>(x.size()) / ratio));
    std::vector<double> y(n_out, 0.0);
    const auto n_in = static_cast<long>(x.size());
    for (size_t n = 0; n < n_out; ++n) {
        const double t = static_cast<double>(n) * ratio;
        const long j0 = static_cast<long>(std::floor(t)) - kTaps + 1;
        const long j1 = static_cast<long>(std::floor(t)) + kTaps;
        double acc = 0.0;
        for (long j = std::max<long>(0, j0); j <= std::min<long>(n_in - 1, j1); ++j) {
            const double d = static_cast<double>(j) - t;
            double k;
            if (std::abs(d) < 1e-12) {
                k = cutoff;
            } else {
                k = std::sin(M_PI * cutoff * d) / (M_PI * d);
            }
            const double win = 0.5 + 0.5 * std::cos(M_PI * d / kTaps);
            acc += x[static_cast<size_t>(j)] * k * win;
        }
        y[n] = acc;
    }
    return y;
}

// Frame energies in dB over non-overlapping VAD frames. The last partial
// frame is included.
inline std::vector<double> frame_energies_db(const std::vector<double>& x, size_t frame_len) {
    std::vector<double> out;
    for (size_t i = 0; i < x.size(); i += frame_len) {
        const size_t end = std::min(x.size(), i + frame_len);
        double acc = 0.0;
        for (size_t j = i; j < end; ++j) acc += x[j] * x[j];
        const double e = acc / static_cast<double>(end - i);
        out.push_back(e > 0.0 ? 10.0 * std::log10(e) : -300.0);
    }
    return out;
}

// Energy VAD: trims leading/trailing frames quieter than
// (peak frame energy + threshold_db). Interior samples are untouched.
inline std::vector<double> vad_trim(const std::vector<double>& x, int sr,
                                    double frame_ms, double threshold_db) {
    if (x.empty()) throw ValidationError("vad_trim: empty signal");
    const auto frame_len =
        static_cast<size_t>(std::lround(frame_ms * 1e-3 * sr));
    const auto energies = frame_energies_db(x, frame_len);
    const double peak = *std::max_element(energies.begin(), energies.end());
    const double gate = peak + threshold_db;
    size_t first = energies.size(), last = 0;
    for (size_t i = 0; i < energies.size(); ++i) {
        if (energies[i] >= gate) {
            if (first == energies.size()) first = i;
            last = i;
        }
    }
    if (first == energies.size() || peak <= -290.0)
        throw ValidationError("silent recording: no frame above VAD threshold");
    const size_t begin = first * frame_len;
    const size_t end = std::min(x.size(), (last + 1) * frame_len);
    return {x.begin() + static_cast<long>(begin), x.begin() + static_cast<long>(end)};
}

struct EqualizeResult {
    std::vector<double> samples;
    bool clipped_gain = false;
};

// Scales to the target RMS; gain is peak-limited so no sample exceeds 1.0.
inline EqualizeResult rms_equalize(const std::vector<double>& x, double target_dbfs) {
    const double current = rms(x);
    if (current <= 0.0) throw NumericError("rms_equalize: zero-RMS input");
    double gain = db_to_amp(target_dbfs) / current;
    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    EqualizeResult out;
    if (peak * gain > 1.0) {
        gain = 1.0 / peak;
        out.clipped_gain = true;
    }
    out.samples.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) out.samples[i] = x[i] * gain;
    return out;
}

inline size_t window_count(size_t length, size_t window, size_t hop) {
    if (length < window) return 0;
    return (length - window) / hop + 1;
}

// 50%-overlap (configurable) fixed-length windowing. pad_mode zero emits a
// single zero-padded window for short inputs; pad_mode none emits only
// full windows.
inline std::vector<std::vector<double>> segment(const std::vector<double>& x,
                                                const PrepConfig& cfg) {
    cfg.validate();
    if (x.empty()) throw ValidationError("segment: empty signal");
    const auto window =
        static_cast<size_t>(std::lround(cfg.window_s * cfg.target_sr_hz));
    const auto hop = static_cast<size_t>(
        std::lround((1.0 - cfg.overlap) * static_cast<double>(window)));
    if (hop == 0) throw ValidationError("segment: overlap too large (hop = 0)");
    std::vector<std::vector<double>> out;
    if (x.size() < window) {
        if (cfg.pad_mode == PadMode::zero) {
            std::vector<double> w(window, 0.0);
            std::copy(x.begin(), x.end(), w.begin());
            out.push_back(std::move(w));
        }
        return out;
    }
    const size_t count = window_count(x.size(), window, hop);
    for (size_t i = 0; i < count; ++i) {
        const size_t off = i * hop;
        out.emplace_back(x.begin() + static_cast<long>(off),
                         x.begin() + static_cast<long>(off + window));
    }
    return out;
}

// peak-normalize -> resample -> VAD trim. RMS equalization happens at the
// pipeline level once LevelStats are known.
inline Wave preprocess_recording(const Wave& in, const PrepConfig& cfg) {
    cfg.validate();
    if (in.samples.empty()) throw ValidationError("preprocess: empty recording");
    std::vector<double> x = in.samples;
    peak_normalize(x);
    x = resample(x, in.sample_rate_hz, cfg.target_sr_hz);
    x = vad_trim(x, cfg.target_sr_hz, cfg.vad_frame_ms, cfg.vad_threshold_db);
    return Wave{std::move(x), cfg.target_sr_hz};
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty set");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median RMS per dataset over training recordings; global target is the
// median of the per-dataset medians. Zero-RMS recordings are skipped.
inline LevelStats compute_level_stats(
    const std::map<std::string, std::vector<const std::vector<double>*>>& by_dataset,
    std::vector<std::string>* warnings = nullptr) {
    if (by_dataset.empty()) throw ValidationError("compute_level_stats: no training data");
    LevelStats stats;
    std::vector<double> per_ds;
    for (const auto& [ds, recs] : by_dataset) {
        std::vector<double> levels;
        for (const auto* r : recs) {
            const double v = rms(*r);
            if (v <= 0.0) {
                if (warnings)
                    warnings->push_back("dataset '" + ds +
                                        "': zero-RMS recording excluded from level stats");
                continue;
            }
            levels.push_back(amp_to_db(v));
        }
        if (levels.empty())
            throw ValidationError("compute_level_stats: dataset '" + ds +
                                  "' has no usable recordings");
        stats.per_dataset_rms_dbfs[ds] = median(levels);
        per_ds.push_back(stats.per_dataset_rms_dbfs[ds]);
    }
    stats.global_target_dbfs = median(per_ds);
    return stats;
}

}  // namespace dsp
}  // namespace fairpda
