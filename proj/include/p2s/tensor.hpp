#pragma once

// Dense tensors with tape-style reverse-mode differentiation.
//
// Layout: row-major, activations are N x H x W x C. There is no implicit
// broadcasting; every operator states its exact shape contract and throws
// ShapeError when it is violated.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace p2s {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] inline void bad_shape(std::string_view op, const Shape& s, std::string_view expected) {
    throw ShapeError(std::string(op) + ": got shape " + to_string(s) + ", expected " + std::string(expected));
}

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::shared_ptr<Node<T>> producer;  // null for leaves
};

template <typename T>
struct Node {
    std::string_view op;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::function<void(std::span<const T>)> backward;
    bool consumed = false;
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Gradient buffer of an input, allocated lazily. Empty when the input does
// not take part in differentiation.
template <typename T>
std::span<T> grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
    if (!impl->requires_grad) return {};
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T{0});
    return impl->grad;
}

}  // namespace detail

/// True while operations are being recorded on the calling thread.
inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables recording on the current thread for the guard's lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

template <typename T>
class Tensor {
   public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        impl_->data.assign(numel(shape), fill);
        impl_->shape = std::move(shape);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                             to_string(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, v, requires_grad); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    /// Mutable access for parameter updates and buffer writes. Do not call on
    /// tensors that are inputs of a graph still awaiting backward.
    std::span<T> mutable_data() { return impl_->data; }
    T item() const {
        if (size() != 1) throw ShapeError("item: tensor has shape " + to_string(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool is_leaf() const { return impl_->producer == nullptr; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad; }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T{0}); }
    void clear_grad() { impl_->grad.clear(); }

    /// Leaf copy sharing nothing with this tensor's graph.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(impl_->data.begin(), impl_->data.end());
        return Tensor<U>(shape(), std::move(out), requires_grad());
    }

    /// Reverse pass from this single-element tensor. Every requires_grad
    /// leaf reachable from it receives d(this)/d(leaf), added to its grad.
    void backward() const;

    const std::shared_ptr<Impl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

   private:
    std::shared_ptr<Impl> impl_;
};

namespace detail {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Wraps freshly computed data into a tensor and, when needed, records the
// producing operation together with its backward rule.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (!should_record<T>(inputs)) return out;
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->seq = next_seq();
    for (auto* t : inputs) node->inputs.push_back(t->impl());
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->producer = std::move(node);
    return out;
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (!defined() || size() != 1)
        throw GraphError("backward: loss must be a single-element tensor, got shape " +
                         (defined() ? to_string(shape()) : std::string("<undefined>")));
    if (!impl_->producer) throw GraphError("backward: loss is not on a recorded graph");

    // Collect (node, output) pairs reachable from the loss. Outputs are held
    // by owning handles: releasing a node's inputs may drop the last other
    // reference to tensors still waiting in the queue.
    std::vector<std::pair<detail::Node<T>*, std::shared_ptr<Impl>>> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::shared_ptr<Impl>> stack{impl_};
    while (!stack.empty()) {
        auto cur = std::move(stack.back());
        stack.pop_back();
        auto* node = cur->producer.get();
        if (!node || !seen.insert(node).second) continue;
        if (node->consumed) throw GraphError("backward: graph already consumed");
        for (auto& in : node->inputs) stack.push_back(in);
        order.emplace_back(node, std::move(cur));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first->seq > b.first->seq; });

    impl_->grad.assign(1, T{1});
    for (auto& [node, out] : order) {
        if (!out->grad.empty()) node->backward(out->grad);
        if (out != impl_) {
            out->grad.clear();
            out->grad.shrink_to_fit();
        }
        node->consumed = true;
        node->backward = nullptr;
        node->inputs.clear();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives.

namespace detail {
template <typename T>
void check_same(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same("add", a, b);
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> g) {
        for (auto& p : {ai, bi}) {
            auto dst = detail::grad_of(p);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same("sub", a, b);
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
        auto db = detail::grad_of(bi);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same("mul", a, b);
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bi->data[i];
        auto db = detail::grad_of(bi);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * ai->data[i];
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same("div", a, b);
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result<T>("div", a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] / bi->data[i];
        auto db = detail::grad_of(bi);
        for (std::size_t i = 0; i < db.size(); ++i) {
            T d = bi->data[i];
            db[i] -= g[i] * ai->data[i] / (d * d);
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += c;
    auto ai = a.impl();
    return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {&a}, [ai](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= c;
    auto ai = a.impl();
    return detail::make_result<T>("mul_scalar", a.shape(), std::move(out), {&a}, [ai, c](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * c;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    auto ai = a.impl();
    return detail::make_result<T>("relu", a.shape(), std::move(out), {&a}, [ai](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i)
            if (ai->data[i] > T{0}) da[i] += g[i];
    });
}

/// Logistic function. Results are kept inside the open interval (0, 1) even
/// where the exact value rounds to an endpoint.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    constexpr T lo = std::numeric_limits<T>::min();
    constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
    std::vector<T> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = x[i] >= T{0} ? T{1} / (T{1} + std::exp(-x[i])) : std::exp(x[i]) / (T{1} + std::exp(x[i]));
        out[i] = std::clamp(v, lo, hi);
    }
    auto ai = a.impl();
    Tensor<T> result = detail::make_result<T>("sigmoid", a.shape(), std::move(out), {&a}, nullptr);
    if (result.is_leaf()) return result;
    // The rule needs the output values; hold them by copy to avoid a cycle.
    std::vector<T> y(result.data().begin(), result.data().end());
    result.impl()->producer->backward = [ai, y = std::move(y)](std::span<const T> g) {
        auto da = detail::grad_of(ai);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i] * (T{1} - y[i]);
    };
    return result;
}

/// Sum of all elements, accumulated in double precision. Shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) acc += static_cast<double>(v);
    auto ai = a.impl();
    return detail::make_result<T>("sum", Shape{1}, std::vector<T>{static_cast<T>(acc)}, {&a},
                                  [ai](std::span<const T> g) {
                                      auto da = detail::grad_of(ai);
                                      for (auto& v : da) v += g[0];
                                  });
}

template <typename T>
Tensor<T> ones_like(const Tensor<T>& a) {
    return Tensor<T>(a.shape(), T{1});
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& a) {
    return Tensor<T>(a.shape(), T{0});
}

/// Debug check for the finite-output invariant.
template <typename T>
bool all_finite(const Tensor<T>& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace p2s
