#include "bevkit/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace bevkit {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data,
                                      bool requires_grad) {
    for (auto e : shape) {
        require(e > 0, "tensor extents must be positive");
    }
    require(product(shape) == static_cast<std::int64_t>(data.size()),
            "tensor data length does not match shape");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (checked_mode()) {
        detail::check_finite(node->value, "leaf");
    }
    return node;
}

std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> idx) {
    require(idx.size() == shape.size(), "index rank mismatch");
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
        require(i >= 0 && i < shape[axis], "index out of bounds");
        flat = flat * shape[axis] + i;
        ++axis;
    }
    return flat;
}

}  // namespace

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

Tensor Tensor::zeros(Shape shape) {
    auto n = static_cast<std::size_t>(product(shape));
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::full(Shape shape, double value) {
    auto n = static_cast<std::size_t>(product(shape));
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), false));
}

Tensor Tensor::scalar(double value) { return Tensor::from({1}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), true));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto n = static_cast<std::size_t>(product(shape));
    std::vector<double> data(n);
    for (auto& v : data) {
        v = dist(rng);
    }
    return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    auto n = static_cast<std::size_t>(product(shape));
    std::vector<double> data(n);
    for (auto& v : data) {
        v = dist(rng);
    }
    return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

const Shape& Tensor::shape() const {
    require(defined(), "undefined tensor");
    return node_->shape;
}

std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(shape().size()); }

std::int64_t Tensor::numel() const {
    require(defined(), "undefined tensor");
    return node_->numel();
}

std::int64_t Tensor::extent(std::int64_t axis) const {
    const auto& s = shape();
    require(axis >= 0 && axis < static_cast<std::int64_t>(s.size()),
            "extent axis out of range");
    return s[static_cast<std::size_t>(axis)];
}

std::span<double> Tensor::data() {
    require(defined(), "undefined tensor");
    return {node_->value.data(), node_->value.size()};
}

std::span<const double> Tensor::data() const {
    require(defined(), "undefined tensor");
    return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
    require(defined() && numel() == 1, "item() needs a one-element tensor");
    return node_->value[0];
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    return node_->value[static_cast<std::size_t>(flat_index(shape(), idx))];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return node_->value[static_cast<std::size_t>(flat_index(shape(), idx))];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    require(defined(), "undefined tensor");
    require(!recorded(), "requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    require(has_grad(), "tensor has no gradient");
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    require(defined(), "undefined tensor");
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::recorded() const { return defined() && node_->tape != nullptr; }

void TensorNode::ensure_grad() {
    if (grad.empty()) {
        grad.assign(value.size(), 0.0);
    }
}

void TensorNode::accum_grad(std::span<const double> g) {
    require(g.size() == value.size(), "gradient size mismatch");
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        grad[i] += g[i];
    }
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const std::shared_ptr<TensorNode>& node) {
    node->tape = this;
    node->tape_pos = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
    require(loss.defined(), "undefined loss");
    require(loss.numel() == 1, "backward expects a scalar loss");
    auto& root = *loss.node();
    require(root.tape == this, "loss was not recorded on this tape");

    root.ensure_grad();
    root.grad[0] = 1.0;

    for (std::int64_t i = root.tape_pos; i >= 0; --i) {
        auto& node = *nodes_[static_cast<std::size_t>(i)];
        if (node.grad.empty()) {
            continue;  // did not contribute to the loss
        }
        if (node.backward_fn) {
            node.backward_fn(node);
        }
        // Intermediate grads are consumed exactly once; free them.
        node.grad.clear();
        node.grad.shrink_to_fit();
    }
    nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

void backward(const Tensor& loss) {
    require(loss.defined(), "undefined loss");
    require(loss.node()->tape != nullptr,
            "backward on a detached tensor: loss was not produced on an active tape");
    loss.node()->tape->backward(loss);
}

namespace detail {

void check_finite(std::span<const double> values, const std::string& op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            fail("non-finite value in op '" + op + "'");
        }
    }
}

Tensor make_op(std::string op_name, Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward_fn) {
    for (auto e : shape) {
        require(e > 0, op_name + ": result extents must be positive");
    }
    require(product(shape) == static_cast<std::int64_t>(value.size()),
            op_name + ": result data length does not match shape");
    if (checked_mode()) {
        check_finite(value, op_name);
    }

    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op_name = std::move(op_name);

    bool needs_grad = false;
    for (const auto& in : inputs) {
        needs_grad = needs_grad || in.requires_grad();
    }
    Tape* tape = Tape::active();
    if (needs_grad && tape != nullptr) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward_fn = std::move(backward_fn);
        tape->record(node);
    }
    return Tensor(node);
}

}  // namespace detail

}  // namespace bevkit
