#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <string>
#include <vector>

#include "diffscale/errors.hpp"

namespace diffscale::ad {

using Shape = std::vector<int>;

/// 64-byte aligned storage. Eigen picks vectorized code paths by pointer alignment, and a fixed
/// alignment keeps the floating-point summation order independent of heap layout.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept
    {
        return true;
    }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor with value semantics.
template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s))
    {
        for (int d : shape)
            if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        data.assign(shape_numel(shape), fill);
    }
    Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values))
    {
        check_length();
    }
    Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end())
    {
        check_length();
    }
    Tensor(Shape s, std::initializer_list<T> values) : shape(std::move(s)), data(values)
    {
        check_length();
    }

    void check_length() const
    {
        if (data.size() != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_str(shape));
    }

    std::size_t numel() const noexcept { return data.size(); }
    int rank() const noexcept { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool empty() const noexcept { return data.empty(); }

    template <class U>
    Tensor<U> cast() const
    {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

} // namespace diffscale::ad
