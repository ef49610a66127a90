#include "voxfuse/tensor.hpp"

#include <cmath>
#include <cstddef>

#include "voxfuse/errors.hpp"

namespace voxfuse {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in tensor shape");
        n *= static_cast<size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t(std::vector<int>{1});
    t.data_[0] = value;
    return t;
}

Tensor Tensor::vec(std::initializer_list<double> values) {
    Tensor t(std::vector<int>{static_cast<int>(values.size())});
    size_t i = 0;
    for (double v : values) t.data_[i++] = v;
    return t;
}

void Tensor::fill(double value) {
    for (double& x : data_) x = value;
}

void Tensor::add_(const Tensor& other) {
    if (!same_shape(other)) throw DimensionError("tensor add_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::axpy_(double a, const Tensor& x) {
    if (!same_shape(x)) throw DimensionError("tensor axpy_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
}

void Tensor::scale_(double a) {
    for (double& x : data_) x *= a;
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double x : data_) s += x;
    return s;
}

}  // namespace voxfuse
