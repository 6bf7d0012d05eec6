#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pvf {

enum class Dtype { F32, F64 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
    return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
    return Dtype::F64;
}

inline const char* dtype_name(Dtype t) { return t == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += "x";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

// Grid extents (D,H,W). Coordinate column 0 maps to D, 1 to H, 2 to W.
struct Dims3 {
    int64_t d = 0, h = 0, w = 0;
    int64_t voxels() const { return d * h * w; }
    int64_t operator[](int a) const { return a == 0 ? d : (a == 1 ? h : w); }
    bool operator==(const Dims3&) const = default;
};

inline std::string dims_str(const Dims3& g) {
    return std::to_string(g.d) + "x" + std::to_string(g.h) + "x" + std::to_string(g.w);
}

// Worker cap for kernel-internal parallelism. Resolution order: set_threads()
// > PVF_THREADS env > hardware concurrency. Results are independent of the
// worker count by construction (disjoint output partitions, fixed reduction
// order), so this only affects speed.
int threads();
void set_threads(int n);

// Transient tensor allocation tracking, used by the benchmark command.
struct AllocStats {
    static std::atomic<int64_t> current_bytes;
    static std::atomic<int64_t> peak_bytes;
    static void on_alloc(int64_t bytes);
    static void on_free(int64_t bytes);
    static void reset_peak();
};

// Deterministic RNG. Distribution math is hand-rolled on top of mt19937_64 so
// that streams replay bit-identically for a given seed.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    int64_t index(int64_t n) {
        int64_t i = static_cast<int64_t>(uniform() * static_cast<double>(n));
        return i >= n ? n - 1 : i;
    }

    uint64_t raw() { return eng_(); }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace pvf
