#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmh {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class DType { f32, f64 };

template <class T>
inline constexpr DType dtype_of = sizeof(T) == 4 ? DType::f32 : DType::f64;

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);

/// Whether operations record a computation graph. Thread-local.
bool grad_enabled();

class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

/// One record of the computation graph: the value, its gradient buffer, and
/// the rule that pushes `grad` back into `inputs`.
template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass reaches this node
    bool requires_grad = false;
    bool is_leaf = true;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer of an input, allocated on first use.
    static std::span<T> grad_of(Node& input);
};

/// Dense row-major tensor with reverse-mode differentiation. Copies share the
/// underlying node (handle semantics, like a shared buffer).
template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t size(std::int64_t axis) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<const T> data() const { return node_->data; }
    /// Mutable access to the values; only meaningful for leaves (parameters, inputs).
    std::span<T> data_mut() { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() { return node_->grad; }
    void zero_grad();

    /// New leaf holding a copy of the values, with no graph history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    /// Accumulates d(this)/d(leaf) into every reachable requires_grad leaf.
    void backward() const;

    std::string_view op() const { return node_->op; }
    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

   private:
    std::shared_ptr<Node<T>> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

namespace detail {

/// Builds an op result. The graph edge is kept only when grad mode is on and
/// some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::string_view op, std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

/// Element-wise conversion between precisions (no graph).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& src) {
    std::vector<To> out(src.data().begin(), src.data().end());
    return Tensor<To>::from_data(src.shape(), std::move(out));
}

}  // namespace mmh
