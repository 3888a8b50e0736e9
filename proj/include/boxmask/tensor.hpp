#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace boxmask {

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

/// Cache-line aligned storage, so vectorized kernels see the same
/// alignment (and reduction order) on every run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> values);

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    void fill(double value);
    void reshape(std::vector<int> shape);
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// Adds `other` element-wise; shapes must match.
    Tensor& operator+=(const Tensor& other);

private:
    std::vector<int> shape_;
    std::vector<double, AlignedAllocator<double>> data_;
};

} // namespace boxmask
