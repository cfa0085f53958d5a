#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "snet/common.hpp"

namespace snet {

// Dense row-major double tensor with an optional gradient buffer. Copies are
// shallow: two Tensor handles may share the same storage, which is what the
// reverse-mode tape relies on to accumulate gradients into leaves.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(int axis) const;
    int ndim() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    // True once a gradient buffer has been allocated (by backward or zero_grad).
    bool has_grad() const;
    // Allocates a zero-filled gradient buffer on first use.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();
    void drop_grad();

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    // Throws NumericError if any element is NaN/Inf; `what` names the producer.
    void check_finite(const char* what) const;

  private:
    struct Impl {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty until first accumulation
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Execution-ordered tape of backward closures. Ops record onto the innermost
// live Graph (a thread_local stack), so distinct graphs on distinct threads
// are fully independent. With no live Graph, ops run in pure inference mode
// and produce outputs with requires_grad == false.
class Graph {
  public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current();

    void record(std::function<void()> backward_step);
    std::size_t num_nodes() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and replays the tape in reverse execution
    // order. `root` must be scalar. Calling backward twice without reset is a
    // UsageError; gradients accumulate by summation over all paths.
    void backward(const Tensor& root);
    void reset();

  private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
    Graph* parent_ = nullptr;
};

// True when an op called with these inputs should record a backward node.
bool grad_recording(const Tensor& a);
bool grad_recording(const Tensor& a, const Tensor& b);
bool grad_recording(const Tensor& a, const Tensor& b, const Tensor& c);

}  // namespace snet
