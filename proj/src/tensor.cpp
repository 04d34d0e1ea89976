#include "mmhdit/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "mmhdit/errors.hpp"

namespace mmh {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::string_view dtype_name(DType dtype) { return dtype == DType::f32 ? "F32" : "F64"; }

DType parse_dtype(std::string_view name) {
    if (name == "F32") return DType::f32;
    if (name == "F64") return DType::f64;
    throw IntegrityError("unsupported dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <class T>
std::span<T> Node<T>::grad_of(Node& input) {
    if (input.grad.empty()) input.grad.assign(input.data.size(), T(0));
    return input.grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()) + " elements");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

template <class T>
std::int64_t Tensor<T>::size(std::int64_t axis) const {
    auto n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
}

template <class T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
    return from_data(shape(), node_->data);
}

template <class T>
void Tensor<T>::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) {
        throw ContractError("backward() on a tensor that is not connected to any parameter");
    }

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        if (!node->is_leaf) {
            node->grad.assign(node->data.size(), T(0));
        } else if (node->grad.empty()) {
            node->grad.assign(node->data.size(), T(0));
        }
    }
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::string_view op, std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool track = grad_enabled() &&
                 std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>, std::string_view,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>, std::string_view,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace mmh
