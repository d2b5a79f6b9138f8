#pragma once

// Grid containers and the resampling operators that define what "resolution
// at factor alpha on a fixed canvas" means.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "diffscale/errors.hpp"

namespace diffscale {

/// Single-channel 2-D grid, row-major, stored in single precision.
class Field {
public:
    Field() = default;
    Field(int height, int width, float fill = 0.0f) : height_(height), width_(width)
    {
        if (height <= 0 || width <= 0)
            throw DimensionError("field dimensions must be positive, got " + std::to_string(height) + "x" +
                                 std::to_string(width));
        values_.assign(static_cast<std::size_t>(height) * width, fill);
    }
    Field(int height, int width, std::vector<float> values) : height_(height), width_(width), values_(std::move(values))
    {
        if (height <= 0 || width <= 0 || values_.size() != static_cast<std::size_t>(height) * width)
            throw DimensionError("field value count does not match " + std::to_string(height) + "x" +
                                 std::to_string(width));
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    float& operator()(int r, int c) noexcept { return values_[static_cast<std::size_t>(r) * width_ + c]; }
    float operator()(int r, int c) const noexcept { return values_[static_cast<std::size_t>(r) * width_ + c]; }

    std::span<float> values() noexcept { return values_; }
    std::span<const float> values() const noexcept { return values_; }
    std::vector<float>& storage() noexcept { return values_; }

    bool same_shape(const Field& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }

    /// Mean accumulated in double precision.
    double mean() const noexcept
    {
        double s = 0.0;
        for (float v : values_) s += v;
        return values_.empty() ? 0.0 : s / static_cast<double>(values_.size());
    }

    bool all_finite() const noexcept
    {
        for (float v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Field&, const Field&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> values_;
};

inline void require_same_shape(const Field& a, const Field& b, const char* what)
{
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                             std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                             std::to_string(b.width()));
}

namespace grid {

/// Exact ratio p/q kept in lowest terms.
struct Rational {
    long num = 0;
    long den = 1;

    static Rational make(long n, long d)
    {
        if (d == 0) throw DomainError("rational with zero denominator");
        long g = std::gcd(n, d);
        if (d < 0) g = -g;
        return {n / g, d / g};
    }
    double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Rational&, const Rational&) = default;
};

/// The evaluated scaling factors alpha_i = S / (L * i), i = 1..4, and their canvas sizes S / i.
struct FactorSet {
    int base_size = 0;   // L
    int canvas_size = 0; // S
    std::vector<Rational> factors;
    std::vector<int> sizes;

    double min_alpha() const { return factors.back().value(); }
    double max_alpha() const { return factors.front().value(); }
};

inline Field block_coarsen(const Field& f, int out_h, int out_w)
{
    if (out_h <= 0 || out_w <= 0 || f.height() % out_h != 0 || f.width() % out_w != 0)
        throw DimensionError("block_coarsen: " + std::to_string(f.height()) + "x" + std::to_string(f.width()) +
                             " is not divisible into " + std::to_string(out_h) + "x" + std::to_string(out_w));
    const int bh = f.height() / out_h;
    const int bw = f.width() / out_w;
    const double inv = 1.0 / (static_cast<double>(bh) * bw);
    Field out(out_h, out_w);
    for (int r = 0; r < out_h; ++r) {
        for (int c = 0; c < out_w; ++c) {
            double s = 0.0;
            for (int i = 0; i < bh; ++i)
                for (int j = 0; j < bw; ++j) s += f(r * bh + i, c * bw + j);
            out(r, c) = static_cast<float>(s * inv);
        }
    }
    return out;
}

/// Corner-aligned bilinear interpolation: output endpoints sample input endpoints.
inline Field bilinear_resize(const Field& f, int out_h, int out_w)
{
    if (out_h < 1 || out_w < 1)
        throw DimensionError("bilinear_resize: output size must be positive");
    if (f.empty()) throw DimensionError("bilinear_resize: empty input");
    auto coord = [](int i, int out, int in) {
        return out == 1 ? 0.0 : static_cast<double>(i) * (in - 1) / (out - 1);
    };
    Field out(out_h, out_w);
    for (int r = 0; r < out_h; ++r) {
        const double y = coord(r, out_h, f.height());
        const int y0 = std::min(static_cast<int>(y), f.height() - 1);
        const int y1 = std::min(y0 + 1, f.height() - 1);
        const double fy = y - y0;
        for (int c = 0; c < out_w; ++c) {
            const double x = coord(c, out_w, f.width());
            const int x0 = std::min(static_cast<int>(x), f.width() - 1);
            const int x1 = std::min(x0 + 1, f.width() - 1);
            const double fx = x - x0;
            const double top = (1.0 - fx) * f(y0, x0) + fx * f(y0, x1);
            const double bot = (1.0 - fx) * f(y1, x0) + fx * f(y1, x1);
            out(r, c) = static_cast<float>((1.0 - fy) * top + fy * bot);
        }
    }
    return out;
}

inline Field nearest_expand(const Field& f, int canvas)
{
    if (f.height() != f.width()) throw DimensionError("nearest_expand: square fields only");
    if (canvas <= 0 || canvas % f.height() != 0)
        throw DimensionError("nearest_expand: canvas " + std::to_string(canvas) + " not divisible by " +
                             std::to_string(f.height()));
    const int k = canvas / f.height();
    Field out(canvas, canvas);
    for (int r = 0; r < canvas; ++r)
        for (int c = 0; c < canvas; ++c) out(r, c) = f(r / k, c / k);
    return out;
}

/// Block means at `size` x `size`, replicated back onto the original canvas.
inline Field pixelate(const Field& truth, int size)
{
    if (truth.height() != truth.width()) throw DimensionError("pixelate: square fields only");
    return nearest_expand(block_coarsen(truth, size, size), truth.height());
}

inline FactorSet enumerate_factors(int L, int S)
{
    if (L <= 0 || S <= 0) throw ConfigError("factor set: L and S must be positive");
    if (S % 12 != 0)
        throw ConfigError("factor set: canvas size S=" + std::to_string(S) +
                          " must be divisible by 12 so that S/2, S/3, S/4 are integers");
    if (S / 4 < L)
        throw ConfigError("factor set: requires S/4 >= L (S=" + std::to_string(S) + ", L=" + std::to_string(L) + ")");
    FactorSet fs;
    fs.base_size = L;
    fs.canvas_size = S;
    for (int i = 1; i <= 4; ++i) {
        fs.factors.push_back(Rational::make(S, static_cast<long>(L) * i));
        fs.sizes.push_back(S / i);
    }
    return fs;
}

} // namespace grid
} // namespace diffscale
