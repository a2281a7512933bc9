#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bevkit/common.hpp"

namespace bevkit {

using Shape = std::vector<std::int64_t>;

class Tape;
struct TensorNode;

/// Dense 64-bit tensor with reverse-mode differentiation.
///
/// A Tensor is a value-semantic handle to a shared node holding row-major
/// f64 data. Ops record themselves on the active Tape when any input
/// requires grad; leaves (parameters) own their grad buffers across tapes.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    /// Trainable leaf: requires_grad set, grad buffer allocated lazily.
    static Tensor param(Shape shape, std::vector<double> data);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t rank() const;
    std::int64_t numel() const;
    std::int64_t extent(std::int64_t axis) const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;
    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// True when this tensor was produced by a recorded op (lives on a tape).
    bool recorded() const;

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;

    // Set only for op results recorded on a tape.
    Tape* tape = nullptr;
    std::int64_t tape_pos = -1;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    std::string op_name;

    std::int64_t numel() const { return product(shape); }
    void ensure_grad();
    void accum_grad(std::span<const double> g);
};

/// Ordered record of primitive applications. Construction order is a
/// topological order: every node's inputs are recorded (or are leaves)
/// before the node itself. One tape per pipeline instance, single-threaded.
class Tape {
public:
    Tape() = default;
    ~Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(const std::shared_ptr<TensorNode>& node);
    std::size_t size() const { return nodes_.size(); }

    /// Reverse traversal from `loss` (must be scalar and recorded here).
    /// Visits each contributing node exactly once, accumulates leaf grads,
    /// and frees non-leaf gradient buffers as it goes.
    void backward(const Tensor& loss);

private:
    std::vector<std::shared_ptr<TensorNode>> nodes_;
};

/// RAII activation of a tape for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// Populates gradients of all requires_grad leaves that contributed to
/// `loss`. Fails on a detached tensor (no recording tape).
void backward(const Tensor& loss);

namespace detail {

void check_finite(std::span<const double> values, const std::string& op);

/// Builds an op-result tensor. Records it on the active tape when any
/// input requires grad; otherwise the result is a detached constant.
Tensor make_op(std::string op_name, Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward_fn);

}  // namespace detail

}  // namespace bevkit
