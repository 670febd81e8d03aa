#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <vector>

#include "fairpda/common.hpp"

namespace fairpda {

// Dense row-major tensor of doubles. Features on disk are f32; everything
// in memory is double.
struct Tensor {
    std::vector<size_t> dims;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> d) : dims(std::move(d)) {
        data.assign(numel_of(dims), 0.0);
    }

    static size_t numel_of(const std::vector<size_t>& d) {
        return std::accumulate(d.begin(), d.end(), size_t{1}, std::multiplies<>());
    }

    size_t numel() const { return data.size(); }
    size_t dim(size_t i) const { return dims.at(i); }
    size_t ndim() const { return dims.size(); }

    double& at(size_t i) { return data[i]; }
    double at(size_t i) const { return data[i]; }

    // 4-D accessor (N,C,H,W); used by the conv stack
    double& at4(size_t n, size_t c, size_t h, size_t w) {
        return data[((n * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }
    double at4(size_t n, size_t c, size_t h, size_t w) const {
        return data[((n * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }
};

// Binary tensor container: magic "FPDA", u16 version, u8 dtype
// (1 = f32 LE, 2 = f64 LE), u8 ndim, u32 dims[], row-major payload.
namespace tensorio {

constexpr uint16_t kFormatVersion = 1;
constexpr uint8_t kDtypeF32 = 1;
constexpr uint8_t kDtypeF64 = 2;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("tensor container: truncated stream");
    return v;
}

inline void write_tensor(std::ostream& os, const Tensor& t, uint8_t dtype = kDtypeF32) {
    os.write("FPDA", 4);
    write_raw<uint16_t>(os, kFormatVersion);
    write_raw<uint8_t>(os, dtype);
    write_raw<uint8_t>(os, static_cast<uint8_t>(t.ndim()));
    for (size_t d : t.dims) write_raw<uint32_t>(os, static_cast<uint32_t>(d));
    if (dtype == kDtypeF32) {
        for (double v : t.data) write_raw<float>(os, static_cast<float>(v));
    } else if (dtype == kDtypeF64) {
        for (double v : t.data) write_raw<double>(os, v);
    } else {
        throw ValidationError("tensor container: unknown dtype code");
    }
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FPDA", 4) != 0)
        throw IoError("tensor container: bad magic");
    const auto version = read_raw<uint16_t>(is);
    if (version != kFormatVersion) throw IoError("tensor container: unsupported version");
    const auto dtype = read_raw<uint8_t>(is);
    const auto ndim = read_raw<uint8_t>(is);
    std::vector<size_t> dims(ndim);
    for (auto& d : dims) d = read_raw<uint32_t>(is);
    Tensor t(dims);
    if (dtype == kDtypeF32) {
        for (auto& v : t.data) v = static_cast<double>(read_raw<float>(is));
    } else if (dtype == kDtypeF64) {
        for (auto& v : t.data) v = read_raw<double>(is);
    } else {
        throw IoError("tensor container: unknown dtype code");
    }
    return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t, uint8_t dtype = kDtypeF32) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tensor(os, t, dtype);
    if (!os) throw IoError("write failed: " + path);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tensor(is);
}

}  // namespace tensorio
}  // namespace fairpda
