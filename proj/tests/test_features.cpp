#include <doctest.h>

#include <cmath>
#include <complex>

#include "fairpda/features.hpp"

using namespace fairpda;

namespace {

std::vector<double> tone(double freq, int sr, double seconds, double amp = 0.5) {
    std::vector<double> x(static_cast<size_t>(seconds * sr));
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = amp * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / sr);
    return x;
}

// naive O(n^2) DFT oracle
std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x) {
    const size_t n = x.size();
    std::vector<std::complex<double>> out(n);
    for (size_t k = 0; k < n; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (size_t t = 0; t < n; ++t)
            acc += x[t] * std::polar(1.0, -2.0 * M_PI * static_cast<double>(k * t) /
                                              static_cast<double>(n));
        out[k] = acc;
    }
    return out;
}

// independent orthonormal DCT-II oracle
std::vector<double> dct2_ortho(const std::vector<double>& x, size_t n_out) {
    const size_t n = x.size();
    std::vector<double> out(n_out, 0.0);
    for (size_t k = 0; k < n_out; ++k) {
        double acc = 0.0;
        for (size_t m = 0; m < n; ++m)
            acc += x[m] * std::cos(M_PI * (static_cast<double>(m) + 0.5) *
                                   static_cast<double>(k) / static_cast<double>(n));
        const double scale = k == 0 ? std::sqrt(1.0 / static_cast<double>(n))
                                    : std::sqrt(2.0 / static_cast<double>(n));
        out[k] = scale * acc;
    }
    return out;
}

}  // namespace

TEST_CASE("radix-2 fft matches a naive dft oracle") {
    Rng rng(401);
    for (size_t n : {2ul, 8ul, 64ul, 256ul}) {
        std::vector<std::complex<double>> x(n);
        for (auto& v : x) v = {rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)};
        auto fast = x;
        feat::fft(fast);
        const auto slow = dft(x);
        for (size_t i = 0; i < n; ++i) CHECK(std::abs(fast[i] - slow[i]) < 1e-9 * static_cast<double>(n));
    }
}

TEST_CASE("next_pow2 rounds up correctly") {
    CHECK(feat::next_pow2(1) == 1);
    CHECK(feat::next_pow2(2) == 2);
    CHECK(feat::next_pow2(3) == 4);
    CHECK(feat::next_pow2(200) == 256);
    CHECK(feat::next_pow2(256) == 256);
}

TEST_CASE("HTK mel scale round trips and is monotone") {
    for (double hz : {50.0, 300.0, 1000.0, 3500.0})
        CHECK(feat::mel_to_hz(feat::hz_to_mel(hz)) == doctest::Approx(hz));
    CHECK(feat::hz_to_mel(1000.0) > feat::hz_to_mel(500.0));
    // anchor: 1000 Hz ~= 1000 mel in the HTK formula
    CHECK(feat::hz_to_mel(1000.0) == doctest::Approx(999.99).epsilon(1e-3));
}

TEST_CASE("mel filterbank rows are triangular, non-negative, and cover the band") {
    const auto fb = feat::mel_filterbank(64, 256, 8000);
    REQUIRE(fb.size() == 64);
    std::vector<double> coverage(129, 0.0);
    for (const auto& row : fb) {
        REQUIRE(row.size() == 129);
        double sum = 0.0;
        for (size_t i = 0; i < row.size(); ++i) {
            CHECK(row[i] >= 0.0);
            sum += row[i];
            coverage[i] += row[i];
        }
        CHECK(sum > 0.0);  // no empty filter
    }
    // interior bins are covered by at least one filter
    for (size_t i = 10; i < 120; ++i) CHECK(coverage[i] > 0.0);
}

TEST_CASE("logmel of a pure tone peaks at the band nearest the tone frequency") {
    FeatureConfig fc;
    const int sr = 8000;
    for (double freq : {250.0, 700.0, 1500.0, 3000.0}) {
        const Tensor lm = feat::logmel(tone(freq, sr, 0.5), sr, fc);
        const auto centers = feat::mel_band_centers_hz(fc.n_mels, sr);
        // expected band: center closest to the tone
        size_t expect = 0;
        for (size_t m = 1; m < centers.size(); ++m)
            if (std::abs(centers[m] - freq) < std::abs(centers[expect] - freq)) expect = m;
        // measured band: argmax of the mean log energy
        const size_t frames = lm.dim(1);
        size_t best = 0;
        double best_v = -1e300;
        for (size_t m = 0; m < lm.dim(0); ++m) {
            double v = 0.0;
            for (size_t t = 0; t < frames; ++t) v += lm.data[m * frames + t];
            if (v > best_v) {
                best_v = v;
                best = m;
            }
        }
        CHECK(std::abs(static_cast<long>(best) - static_cast<long>(expect)) <= 1);
    }
}

TEST_CASE("logmel applies the natural-log floor on silence") {
    FeatureConfig fc;
    const std::vector<double> silence(4000, 0.0);
    const Tensor lm = feat::logmel(silence, 8000, fc);
    for (double v : lm.data) CHECK(v == doctest::Approx(std::log(1e-10)));
}

TEST_CASE("logmel shape follows the frame-count formula") {
    FeatureConfig fc;
    const int sr = 8000;
    const auto x = tone(200.0, sr, 2.0);
    const Tensor lm = feat::logmel(x, sr, fc);
    const size_t frame = static_cast<size_t>(0.025 * sr), hop = static_cast<size_t>(0.010 * sr);
    CHECK(lm.dim(0) == 64);
    CHECK(lm.dim(1) == feat::frame_count(x.size(), frame, hop));
}

TEST_CASE("mfcc equals the independent DCT-II oracle applied to logmel") {
    FeatureConfig fc;
    const int sr = 8000;
    const auto x = tone(440.0, sr, 0.3, 0.4);
    const Tensor lm = feat::logmel(x, sr, fc);
    const Tensor mf = feat::mfcc(x, sr, fc);
    REQUIRE(mf.dim(0) == static_cast<size_t>(fc.n_mfcc));
    REQUIRE(mf.dim(1) == lm.dim(1));
    const size_t frames = lm.dim(1);
    for (size_t t = 0; t < frames; ++t) {
        std::vector<double> col(lm.dim(0));
        for (size_t m = 0; m < col.size(); ++m) col[m] = lm.data[m * frames + t];
        const auto oracle = dct2_ortho(col, static_cast<size_t>(fc.n_mfcc));
        for (size_t k = 0; k < oracle.size(); ++k)
            CHECK(std::abs(mf.data[k * frames + t] - oracle[k]) < 1e-9);
    }
}

TEST_CASE("extract dispatches on the configured feature kind") {
    FeatureConfig fc;
    const auto x = tone(300.0, 8000, 0.2);
    fc.kind = FeatureKind::logmel;
    CHECK(feat::extract(x, 8000, fc).dim(0) == 64);
    fc.kind = FeatureKind::mfcc;
    CHECK(feat::extract(x, 8000, fc).dim(0) == 13);
}

TEST_CASE("feature config validation rejects bad band counts") {
    FeatureConfig fc;
    fc.n_mfcc = 100;  // > n_mels
    CHECK_THROWS_AS(fc.validate(), ValidationError);
    fc = FeatureConfig{};
    fc.n_mels = 0;
    CHECK_THROWS_AS(fc.validate(), ValidationError);
}

TEST_CASE("feature kind strings round trip") {
    CHECK(parse_feature_kind(to_string(FeatureKind::logmel)) == FeatureKind::logmel);
    CHECK(parse_feature_kind(to_string(FeatureKind::mfcc)) == FeatureKind::mfcc);
    CHECK_THROWS_AS(parse_feature_kind("plp"), ValidationError);
}
