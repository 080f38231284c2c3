#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fine {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until an adjoint reaches this tensor
    bool requires_grad = false;
};

// Dense row-major f64 array. A Tensor is a handle: copies share storage, which
// is what lets the tape route adjoints back to parameters. Use clone() for an
// independent value copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double& operator[](std::size_t i) { return impl_->data[i]; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double& at(std::size_t row, std::size_t col);
    double at(std::size_t row, std::size_t col) const;

    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const { return !impl_->grad.empty(); }
    // Zeros when no adjoint has been accumulated yet.
    std::vector<double> grad() const;
    std::vector<double>& grad_buffer();
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const;
    Tensor reshaped(Shape shape) const;  // copy with a new shape, same data
    bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Ordered record of adjoint closures. Ops append while a tape is active on the
// current thread; backward() replays the record in reverse and clears it.
class GradTape {
public:
    using Adjoint = std::function<void()>;

    void record(Adjoint adjoint) { entries_.push_back(std::move(adjoint)); }
    void backward(const Tensor& loss);
    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }

private:
    std::vector<Adjoint> entries_;
};

// Activates a tape on the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(GradTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* previous_;
};

// Suspends recording (sampling, evaluation).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    GradTape* previous_;
};

GradTape* active_tape();

// Runs the active tape backward from a scalar loss.
void backward(const Tensor& loss);

// Central-difference gradient of a scalar function. f is evaluated with the
// tape suspended; x is perturbed in place and restored.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double eps = 1e-5);

}  // namespace fine
