#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "fairpda/common.hpp"
#include "fairpda/tensor.hpp"

namespace fairpda {

enum class FeatureKind { logmel, mfcc };

inline std::string to_string(FeatureKind k) {
    return k == FeatureKind::logmel ? "logmel" : "mfcc";
}
inline FeatureKind parse_feature_kind(const std::string& s) {
    if (s == "logmel") return FeatureKind::logmel;
    if (s == "mfcc") return FeatureKind::mfcc;
    throw ValidationError("unknown feature kind '" + s + "'");
}

struct FeatureConfig {
    FeatureKind kind = FeatureKind::logmel;
    double frame_ms = 25.0;
    double hop_ms = 10.0;
    int n_mels = 64;
    int n_mfcc = 13;
    double log_floor = 1e-10;

    void validate() const {
        if (hop_ms > frame_ms) throw ValidationError("features: hop_ms > frame_ms");
        if (n_mfcc > n_mels) throw ValidationError("features: n_mfcc > n_mels");
        if (n_mels <= 0 || n_mfcc <= 0) throw ValidationError("features: bad band counts");
        if (log_floor <= 0.0) throw ValidationError("features: log_floor must be > 0");
    }
};

namespace feat {

// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw ValidationError("fft: size must be a power of 2");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline size_t next_pow2(size_t n) {
    size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular mel filterbank over FFT bins [0, n_fft/2], HTK mel scale.
// Returns n_mels x (n_fft/2 + 1) weights.
inline std::vector<std::vector<double>> mel_filterbank(int n_mels, size_t n_fft, int sr) {
    const size_t n_bins = n_fft / 2 + 1;
    const double f_max = sr / 2.0;
    const double mel_max = hz_to_mel(f_max);
    std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
    for (size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_max * static_cast<double>(i) /
                             static_cast<double>(n_mels + 1));
    std::vector<std::vector<double>> fb(static_cast<size_t>(n_mels),
                                        std::vector<double>(n_bins, 0.0));
    for (int m = 0; m < n_mels; ++m) {
        const double lo = edges[static_cast<size_t>(m)];
        const double mid = edges[static_cast<size_t>(m) + 1];
        const double hi = edges[static_cast<size_t>(m) + 2];
        for (size_t b = 0; b < n_bins; ++b) {
            const double f = static_cast<double>(b) * sr / static_cast<double>(n_fft);
            if (f > lo && f < hi) {
                fb[static_cast<size_t>(m)][b] =
                    f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
            }
        }
    }
    return fb;
}

inline std::vector<double> mel_band_centers_hz(int n_mels, int sr) {
    const double mel_max = hz_to_mel(sr / 2.0);
    std::vector<double> centers(static_cast<size_t>(n_mels));
    for (int m = 0; m < n_mels; ++m)
        centers[static_cast<size_t>(m)] =
            mel_to_hz(mel_max * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
    return centers;
}

inline size_t frame_count(size_t window_len, size_t frame_len, size_t hop_len) {
    if (window_len < frame_len) return 0;
    return (window_len - frame_len) / hop_len + 1;
}

// log-Mel spectrogram: Hann-windowed power spectrum through the mel
// filterbank, natural log with a floor. Shape n_mels x n_frames.
inline Tensor logmel(const std::vector<double>& window, int sr, const FeatureConfig& fc) {
    fc.validate();
    const auto frame_len = static_cast<size_t>(std::lround(fc.frame_ms * 1e-3 * sr));
    const auto hop_len = static_cast<size_t>(std::lround(fc.hop_ms * 1e-3 * sr));
    const size_t n_frames = frame_count(window.size(), frame_len, hop_len);
    if (n_frames == 0) throw ValidationError("logmel: window shorter than one frame");
    const size_t n_fft = next_pow2(frame_len);
    const auto fb = mel_filterbank(fc.n_mels, n_fft, sr);

    std::vector<double> hann(frame_len);
    for (size_t i = 0; i < frame_len; ++i)
        hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                                       static_cast<double>(frame_len));

    Tensor out({static_cast<size_t>(fc.n_mels), n_frames});
    std::vector<std::complex<double>> buf(n_fft);
    for (size_t t = 0; t < n_frames; ++t) {
        const size_t off = t * hop_len;
        for (size_t i = 0; i < n_fft; ++i)
            buf[i] = i < frame_len ? window[off + i] * hann[i] : 0.0;
        fft(buf);
        for (int m = 0; m < fc.n_mels; ++m) {
            double acc = 0.0;
            const auto& w = fb[static_cast<size_t>(m)];
            for (size_t b = 0; b <= n_fft / 2; ++b)
                acc += w[b] * std::norm(buf[b]);
            out.data[static_cast<size_t>(m) * n_frames + t] =
                std::log(std::max(acc, fc.log_floor));
        }
    }
    return out;
}

// Orthonormal DCT-II along the mel axis, truncated to n_mfcc coefficients.
inline Tensor mfcc(const std::vector<double>& window, int sr, const FeatureConfig& fc) {
    fc.validate();
    const Tensor lm = logmel(window, sr, fc);
    const size_t n_mels = lm.dim(0);
    const size_t n_frames = lm.dim(1);
    Tensor out({static_cast<size_t>(fc.n_mfcc), n_frames});
    const double scale0 = std::sqrt(1.0 / static_cast<double>(n_mels));
    const double scale = std::sqrt(2.0 / static_cast<double>(n_mels));
    for (size_t t = 0; t < n_frames; ++t) {
        for (int k = 0; k < fc.n_mfcc; ++k) {
            double acc = 0.0;
            for (size_t m = 0; m < n_mels; ++m)
                acc += lm.data[m * n_frames + t] *
                       std::cos(M_PI * (static_cast<double>(m) + 0.5) * k /
                                static_cast<double>(n_mels));
            out.data[static_cast<size_t>(k) * n_frames + t] = acc * (k == 0 ? scale0 : scale);
        }
    }
    return out;
}

inline Tensor extract(const std::vector<double>& window, int sr, const FeatureConfig& fc) {
    return fc.kind == FeatureKind::logmel ? logmel(window, sr, fc) : mfcc(window, sr, fc);
}

}  // namespace feat
}  // namespace fairpda
