#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "edgevtp/error.hpp"

namespace edgevtp {

// Dense row-major tensor of doubles. All training-path math runs in f64;
// the benchmark forward path has its own f32 mirror (see inference.hpp).
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (count(shape_) != static_cast<int64_t>(v_.size()))
            throw_dimension("tensor: shape " + shape_str() + " does not match " +
                            std::to_string(v_.size()) + " values");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& x : t.v_) x = value;
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(v_.size()); }
    bool empty() const { return v_.empty(); }

    // 2-D accessors; matrices are the workhorse layout.
    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const {
        if (shape_.size() < 2) return shape_.size() == 1 ? 1 : 0;
        int64_t c = 1;
        for (size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
        return static_cast<int>(c);
    }

    double& at(int r, int c) { return v_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v_[static_cast<size_t>(r) * cols() + c]; }

    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw_dimension("reshape: " + shape_str() + " -> incompatible element count");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = shape.empty() ? 0 : 1;
        for (int d : shape) n *= d;
        return n;
    }

  private:
    std::vector<int> shape_;
    std::vector<double> v_;
};

}  // namespace edgevtp
