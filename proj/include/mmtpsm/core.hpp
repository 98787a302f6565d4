#pragma once

// Core value types shared across the library: deterministic RNG, images,
// boxes, binary masks and run-length encoding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmtpsm {

// ---------------------------------------------------------------------------
// Deterministic RNG. SplitMix64 core; every random stream in the project is
// derived by hashing a root seed with a tag and counters, so no global state
// exists and any stream can be reconstructed from the seeds alone.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2)));
}

inline std::uint64_t hash_tag(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = seed;
    for (char c : tag) h = hash_combine(h, static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    return hash_combine(hash_combine(hash_tag(seed, tag), a), b);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

    std::uint64_t next_u64() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        return splitmix64(state_);
    }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        return next_u64() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller; one value per call, the pair's second half discarded
        double u1 = std::max(uniform(), 1e-300);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Image: H x W x C doubles in [0,1], row-major.
// ---------------------------------------------------------------------------

struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> v;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) {
        return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
    double at(int y, int x, int ch) const {
        return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

// ---------------------------------------------------------------------------
// Binary mask: H x W, row-major.
// ---------------------------------------------------------------------------

struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0) {}

    std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }

    std::size_t area() const {
        std::size_t n = 0;
        for (auto p : v) n += (p != 0);
        return n;
    }
    bool empty_mask() const { return area() == 0; }
};

// Run-length encoding, row-major, counts alternating starting with zeros.
inline std::vector<std::uint32_t> rle_encode(const Mask& m) {
    std::vector<std::uint32_t> counts;
    std::uint8_t cur = 0;
    std::uint32_t run = 0;
    for (auto p : m.v) {
        std::uint8_t b = (p != 0);
        if (b == cur) {
            ++run;
        } else {
            counts.push_back(run);
            cur = b;
            run = 1;
        }
    }
    counts.push_back(run);
    return counts;
}

inline Mask rle_decode(const std::vector<std::uint32_t>& counts, int h, int w) {
    Mask m(h, w);
    std::size_t pos = 0;
    std::uint8_t cur = 0;
    for (auto n : counts) {
        if (pos + n > m.v.size()) throw std::invalid_argument("rle_decode: counts exceed mask size");
        if (cur) std::fill(m.v.begin() + pos, m.v.begin() + pos + n, std::uint8_t{1});
        pos += n;
        cur ^= 1;
    }
    if (pos != m.v.size()) throw std::invalid_argument("rle_decode: counts do not cover mask");
    return m;
}

// ---------------------------------------------------------------------------
// Axis-aligned box, half-open pixel coordinates [x0,x1) x [y0,y1).
// ---------------------------------------------------------------------------

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
};

inline double box_iou(const Box& a, const Box& b) {
    double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
    double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline Box tight_bbox(const Mask& m) {
    int x0 = m.w, y0 = m.h, x1 = 0, y1 = 0;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x + 1);
                y1 = std::max(y1, y + 1);
            }
    if (x1 <= x0) return Box{};
    return Box{static_cast<double>(x0), static_cast<double>(y0),
               static_cast<double>(x1), static_cast<double>(y1)};
}

inline double mask_iou(const Mask& a, const Mask& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        bool pa = a.v[i] != 0, pb = b.v[i] != 0;
        inter += (pa && pb);
        uni += (pa || pb);
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

// Error categories surfaced as distinct process exit codes by the CLI.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mmtpsm
