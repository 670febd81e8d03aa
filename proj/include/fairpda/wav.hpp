#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fairpda/common.hpp"

namespace fairpda {

struct Wave {
    std::vector<double> samples;  // mono, in [-1, 1] nominal
    int sample_rate_hz = 0;

    double duration_s() const {
        return static_cast<double>(samples.size()) / sample_rate_hz;
    }
};

namespace wavio {

namespace detail {

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("wav: truncated file");
    return v;
}

template <typename T>
void write_raw(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace detail

// PCM WAV reader: mono, 16/24/32-bit integer or 32-bit float.
inline Wave read(const std::string& path) {
    using namespace detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open wav: " + path);

    char riff[4], wave[4];
    is.read(riff, 4);
    const auto riff_size = read_raw<uint32_t>(is);
    (void)riff_size;
    is.read(wave, 4);
    if (!is || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
        throw IoError(path + ": not a RIFF/WAVE file");

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t sample_rate = 0;
    std::vector<char> payload;
    bool got_fmt = false, got_data = false;
    while (is && !(got_fmt && got_data)) {
        char id[4];
        is.read(id, 4);
        if (!is) break;
        const auto size = read_raw<uint32_t>(is);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            format = read_raw<uint16_t>(is);
            channels = read_raw<uint16_t>(is);
            sample_rate = read_raw<uint32_t>(is);
            read_raw<uint32_t>(is);  // byte rate
            read_raw<uint16_t>(is);  // block align
            bits = read_raw<uint16_t>(is);
            if (size > 16) is.seekg(size - 16, std::ios::cur);
            got_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            payload.resize(size);
            is.read(payload.data(), size);
            if (!is) throw IoError(path + ": truncated data chunk");
            got_data = true;
        } else {
            is.seekg(size + (size & 1), std::ios::cur);
        }
    }
    if (!got_fmt || !got_data) throw IoError(path + ": missing fmt or data chunk");
    if (channels != 1) throw ValidationError(path + ": expected mono audio");

    Wave w;
    w.sample_rate_hz = static_cast<int>(sample_rate);
    const char* p = payload.data();
    const size_t bytes = payload.size();
    if (format == 1 && bits == 16) {
        const size_t n = bytes / 2;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int16_t v;
            std::memcpy(&v, p + 2 * i, 2);
            w.samples[i] = static_cast<double>(v) / 32768.0;
        }
    } else if (format == 1 && bits == 24) {
        const size_t n = bytes / 3;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int32_t v = (static_cast<uint8_t>(p[3 * i])) |
                        (static_cast<uint8_t>(p[3 * i + 1]) << 8) |
                        (static_cast<int8_t>(p[3 * i + 2]) << 16);
            w.samples[i] = static_cast<double>(v) / 8388608.0;
        }
    } else if (format == 1 && bits == 32) {
        const size_t n = bytes / 4;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int32_t v;
            std::memcpy(&v, p + 4 * i, 4);
            w.samples[i] = static_cast<double>(v) / 2147483648.0;
        }
    } else if (format == 3 && bits == 32) {
        const size_t n = bytes / 4;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, p + 4 * i, 4);
            w.samples[i] = static_cast<double>(v);
        }
    } else {
        throw ValidationError(path + ": unsupported wav encoding (format " +
                              std::to_string(format) + ", " + std::to_string(bits) + " bit)");
    }
    return w;
}

// 16-bit PCM writer.
inline void write(const std::string& path, const Wave& w) {
    using namespace detail;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    const uint32_t data_size = static_cast<uint32_t>(w.samples.size() * 2);
    os.write("RIFF", 4);
    write_raw<uint32_t>(os, 36 + data_size);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_raw<uint32_t>(os, 16);
    write_raw<uint16_t>(os, 1);  // PCM
    write_raw<uint16_t>(os, 1);  // mono
    write_raw<uint32_t>(os, static_cast<uint32_t>(w.sample_rate_hz));
    write_raw<uint32_t>(os, static_cast<uint32_t>(w.sample_rate_hz * 2));
    write_raw<uint16_t>(os, 2);
    write_raw<uint16_t>(os, 16);
    os.write("data", 4);
    write_raw<uint32_t>(os, data_size);
    for (double s : w.samples) {
        double c = std::max(-1.0, std::min(1.0, s));
        auto v = static_cast<int16_t>(std::lrint(c * 32767.0));
        write_raw<int16_t>(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace wavio
}  // namespace fairpda
