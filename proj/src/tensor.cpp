#include "snet/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace snet {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (std::int64_t d : shape) {
        if (d <= 0) throw ConfigError("tensor extent must be positive, got shape " + shape_to_string(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ConfigError("data length " + std::to_string(data.size()) + " does not match shape " +
                          shape_to_string(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->value = std::move(data);
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

std::int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= ndim()) throw UsageError("axis out of range");
    return impl_->shape[static_cast<std::size_t>(axis)];
}

int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }

std::vector<double>& Tensor::data() { return impl_->value; }
const std::vector<double>& Tensor::data() const { return impl_->value; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) throw UsageError("gradient read before any backward accumulation");
    return impl_->grad;
}

void Tensor::zero_grad() {
    impl_->grad.assign(impl_->value.size(), 0.0);
}

void Tensor::drop_grad() { impl_->grad.clear(); }

void Tensor::check_finite(const char* what) const {
    for (double v : impl_->value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(what) + " produced a non-finite value");
        }
    }
}

namespace {
thread_local Graph* g_current_graph = nullptr;
}

Graph::Graph() : parent_(g_current_graph) { g_current_graph = this; }

Graph::~Graph() { g_current_graph = parent_; }

Graph* Graph::current() { return g_current_graph; }

void Graph::record(std::function<void()> backward_step) {
    nodes_.push_back(std::move(backward_step));
}

void Graph::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1) {
        throw UsageError("backward requires a scalar root tensor");
    }
    if (consumed_) {
        throw UsageError("backward called twice on the same graph; reset() it first");
    }
    consumed_ = true;
    Tensor seed = root;
    seed.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Graph::reset() {
    nodes_.clear();
    consumed_ = false;
}

bool grad_recording(const Tensor& a) {
    return Graph::current() != nullptr && a.requires_grad();
}

bool grad_recording(const Tensor& a, const Tensor& b) {
    return Graph::current() != nullptr && (a.requires_grad() || b.requires_grad());
}

bool grad_recording(const Tensor& a, const Tensor& b, const Tensor& c) {
    return Graph::current() != nullptr &&
           (a.requires_grad() || b.requires_grad() || (c.defined() && c.requires_grad()));
}

}  // namespace snet
