#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace voxfuse {

/// Dense row-major tensor of 64-bit floats. Shapes are small integer lists;
/// most tensors in the pipeline are 1-D vectors or [N x D] row matrices.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);
    static Tensor vec(std::initializer_list<double> values);

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // 2-D accessors, row-major. Caller guarantees ndim()==2.
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    int rows() const { return shape_[0]; }
    int cols() const { return shape_[1]; }

    void fill(double value);
    void add_(const Tensor& other);             // this += other
    void axpy_(double a, const Tensor& x);      // this += a * x
    void scale_(double a);
    bool all_finite() const;
    double sum() const;

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

size_t shape_numel(const std::vector<int>& shape);

}  // namespace voxfuse
