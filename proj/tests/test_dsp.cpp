#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fairpda/dsp.hpp"
#include "fairpda/wav.hpp"

using namespace fairpda;

namespace {

std::vector<double> tone(double freq, int sr, double seconds, double amp = 0.5) {
    std::vector<double> x(static_cast<size_t>(seconds * sr));
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = amp * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / sr);
    return x;
}

// brute-force window count: enumerate every hop offset that still fits
size_t brute_force_windows(size_t length, size_t window, size_t hop) {
    size_t n = 0;
    for (size_t start = 0;; start += hop) {
        if (start + window > length) break;
        ++n;
        if (hop == 0) break;
    }
    return n;
}

}  // namespace

TEST_CASE("window count formula matches brute-force enumeration on random cases") {
    Rng rng(301);
    for (int c = 0; c < 1000; ++c) {
        const size_t window = 1 + rng.uniform_int(500);
        const size_t hop = 1 + rng.uniform_int(window);
        const size_t length = rng.uniform_int(2000);
        CHECK(dsp::window_count(length, window, hop) ==
              brute_force_windows(length, window, hop));
    }
}

TEST_CASE("segmentation emits exactly window_count windows of exact length") {
    PrepConfig cfg;
    cfg.target_sr_hz = 100;
    cfg.window_s = 0.5;  // 50 samples
    cfg.overlap = 0.5;   // hop 25
    std::vector<double> x(137, 0.25);
    const auto segs = dsp::segment(x, cfg);
    CHECK(segs.size() == dsp::window_count(137, 50, 25));
    for (const auto& s : segs) CHECK(s.size() == 50);
}

TEST_CASE("zero pad mode emits one padded window for short recordings") {
    PrepConfig cfg;
    cfg.target_sr_hz = 100;
    cfg.window_s = 1.0;
    cfg.pad_mode = PadMode::zero;
    std::vector<double> x(40, 0.5);
    const auto segs = dsp::segment(x, cfg);
    REQUIRE(segs.size() == 1);
    REQUIRE(segs[0].size() == 100);
    for (size_t i = 0; i < 40; ++i) CHECK(segs[0][i] == 0.5);
    for (size_t i = 40; i < 100; ++i) CHECK(segs[0][i] == 0.0);

    cfg.pad_mode = PadMode::none;
    CHECK(dsp::segment(x, cfg).empty());
}

TEST_CASE("rms equalization lands within 0.01 dB of the target") {
    // spec example: wave at -30 dBFS, target -22 dBFS -> +8 dB gain
    auto x = tone(100.0, 8000, 1.0, 1.0);
    const double gain = std::pow(10.0, -30.0 / 20.0) / dsp::rms(x);
    for (auto& v : x) v *= gain;  // now exactly -30 dBFS RMS
    REQUIRE(dsp::rms_dbfs(x) == doctest::Approx(-30.0).epsilon(1e-6));

    const auto eq = dsp::rms_equalize(x, -22.0);
    CHECK(std::abs(dsp::rms_dbfs(eq.samples) - (-22.0)) < 0.01);
    CHECK_FALSE(eq.clipped_gain);
}

TEST_CASE("rms equalization limits gain at the clipping point and flags it") {
    // a near-full-scale signal asked to get much louder must be peak-limited
    auto x = tone(100.0, 8000, 0.5, 0.9);
    const auto eq = dsp::rms_equalize(x, 0.0);  // absurdly hot target
    CHECK(eq.clipped_gain);
    double peak = 0.0;
    for (double v : eq.samples) peak = std::max(peak, std::abs(v));
    CHECK(peak <= 1.0 + 1e-12);
}

TEST_CASE("rms equalization within 0.01 dB over random non-degenerate inputs") {
    Rng rng(307);
    for (int c = 0; c < 100; ++c) {
        std::vector<double> x(500);
        for (auto& v : x) v = 0.2 * rng.normal(0.0, 1.0);
        const double target = -40.0 + 20.0 * rng.uniform();
        const auto eq = dsp::rms_equalize(x, target);
        if (!eq.clipped_gain) CHECK(std::abs(dsp::rms_dbfs(eq.samples) - target) < 0.01);
    }
}

TEST_CASE("peak normalization maps the max magnitude to 1") {
    std::vector<double> x = {0.1, -0.5, 0.25};
    dsp::peak_normalize(x);
    CHECK(x[1] == doctest::Approx(-1.0));
    CHECK(x[0] == doctest::Approx(0.2));
}

TEST_CASE("resampler preserves a mid-band tone's frequency and amplitude") {
    const int src = 16000, dst = 8000;
    const auto x = tone(440.0, src, 1.0, 0.5);
    const auto y = dsp::resample(x, src, dst);
    CHECK(std::abs(static_cast<double>(y.size()) - 8000.0) < 2.0);
    // measure amplitude/frequency by correlation with quadrature references
    double c = 0.0, s = 0.0;
    const size_t skip = 100;  // avoid filter edge effects
    const size_t n = y.size() - 2 * skip;
    for (size_t i = skip; i < y.size() - skip; ++i) {
        const double t = static_cast<double>(i) / dst;
        c += y[i] * std::cos(2.0 * M_PI * 440.0 * t);
        s += y[i] * std::sin(2.0 * M_PI * 440.0 * t);
    }
    const double amp = 2.0 * std::sqrt(c * c + s * s) / static_cast<double>(n);
    CHECK(amp == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("resampling at the same rate is the identity") {
    const auto x = tone(200.0, 8000, 0.1);
    const auto y = dsp::resample(x, 8000, 8000);
    REQUIRE(y.size() == x.size());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("vad trims leading and trailing silence") {
    const int sr = 8000;
    std::vector<double> x(sr / 2, 0.0);  // 0.5 s silence
    const auto t = tone(150.0, sr, 1.0, 0.5);
    x.insert(x.end(), t.begin(), t.end());
    x.insert(x.end(), sr / 2, 0.0);
    const auto trimmed = dsp::vad_trim(x, sr, 30.0, -40.0);
    // within one 30 ms frame of the true voiced length
    const double frame = 0.03 * sr;
    CHECK(std::abs(static_cast<double>(trimmed.size()) - static_cast<double>(t.size())) <=
          2.0 * frame);
}

TEST_CASE("vad rejects an all-silent recording") {
    std::vector<double> x(8000, 0.0);
    CHECK_THROWS_AS(dsp::vad_trim(x, 8000, 30.0, -40.0), ValidationError);
}

TEST_CASE("median of odd and even length vectors") {
    CHECK(dsp::median({3.0, 1.0, 2.0}) == doctest::Approx(2.0));
    CHECK(dsp::median({4.0, 1.0, 3.0, 2.0}) == doctest::Approx(2.5));
}

TEST_CASE("level stats take the median of per-dataset median RMS levels") {
    const auto a = tone(100.0, 8000, 0.5, 0.1);
    const auto b = tone(100.0, 8000, 0.5, 0.4);
    const auto c = tone(100.0, 8000, 0.5, 0.8);
    std::map<std::string, std::vector<const std::vector<double>*>> by_ds = {
        {"d1", {&a}}, {"d2", {&b}}, {"d3", {&c}}};
    const auto stats = dsp::compute_level_stats(by_ds);
    CHECK(stats.per_dataset_rms_dbfs.size() == 3);
    CHECK(stats.global_target_dbfs == doctest::Approx(dsp::rms_dbfs(b)));
}

TEST_CASE("level stats exclude zero-rms recordings with a warning") {
    const auto a = tone(100.0, 8000, 0.5, 0.1);
    const std::vector<double> z(100, 0.0);
    std::map<std::string, std::vector<const std::vector<double>*>> by_ds = {{"d1", {&a, &z}}};
    std::vector<std::string> warnings;
    const auto stats = dsp::compute_level_stats(by_ds, &warnings);
    CHECK(stats.global_target_dbfs == doctest::Approx(dsp::rms_dbfs(a)));
    CHECK(!warnings.empty());
}

TEST_CASE("wav io round trips 16-bit PCM within quantization error") {
    const auto path = (std::filesystem::temp_directory_path() / "fpda_wav_rt.wav").string();
    Wave w;
    w.sample_rate_hz = 8000;
    w.samples = tone(250.0, 8000, 0.25, 0.7);
    wavio::write(path, w);
    const Wave r = wavio::read(path);
    CHECK(r.sample_rate_hz == 8000);
    REQUIRE(r.samples.size() == w.samples.size());
    for (size_t i = 0; i < r.samples.size(); ++i)
        CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.0 / 32000.0);
    std::filesystem::remove(path);
}

TEST_CASE("wav reader rejects missing files") {
    CHECK_THROWS_AS(wavio::read("/nonexistent/never.wav"), IoError);
}

TEST_CASE("full preprocess chain is deterministic") {
    Wave w;
    w.sample_rate_hz = 16000;
    w.samples = tone(180.0, 16000, 1.5, 0.4);
    // surround with silence so VAD has something to trim
    std::vector<double> x(1600, 0.0);
    x.insert(x.end(), w.samples.begin(), w.samples.end());
    x.insert(x.end(), 1600, 0.0);
    w.samples = x;
    PrepConfig cfg;
    const Wave a = dsp::preprocess_recording(w, cfg);
    const Wave b = dsp::preprocess_recording(w, cfg);
    CHECK(a.sample_rate_hz == cfg.target_sr_hz);
    CHECK(a.samples == b.samples);
}
