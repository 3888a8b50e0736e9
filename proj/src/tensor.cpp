#include "boxmask/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "boxmask/error.hpp"

namespace boxmask {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw InvalidArgument("negative tensor dimension in " + shape_string(shape));
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeMismatch("tensor of shape " + shape_string(shape_) + " given " +
                            std::to_string(data_.size()) + " values");
    }
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::reshape(std::vector<int> shape) {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeMismatch("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.data_.size() != data_.size()) {
        throw ShapeMismatch("tensor add " + shape_string(shape_) + " += " + shape_string(other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

} // namespace boxmask
