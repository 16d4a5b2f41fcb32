#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Graph is built once (define-then-run): leaves are named inputs,
// parameters that read external storage, or constants. Every op node stores a
// forward kernel and, if differentiable, a backward kernel. Nodes are appended
// in creation order, which is therefore a topological order; evaluate() runs
// the forward kernels in that order and backward() walks it in reverse.
//
// The same graph can be re-evaluated with new input bindings, which is how
// the training loop and the finite-difference checker use it.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "regda/tensor.hpp"

namespace regda::ad {

// Clamp applied inside log and shared by every consumer of log().
inline constexpr double kLogEpsilon = 1e-12;

enum class NodeKind { input, parameter, constant, op };

template <typename T>
class Graph;

template <typename T>
struct Node {
    using Kernel = std::function<void(Graph<T>&, Node<T>&)>;

    std::string op;
    std::string label;
    NodeKind kind = NodeKind::op;
    Shape shape;
    std::vector<std::size_t> parents;
    bool requires_grad = false;
    bool bound = false;
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* storage = nullptr;
    Kernel forward;
    Kernel backward;
};

template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

    bool valid() const { return graph_ != nullptr; }
    Graph<T>& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Shape& shape() const { return graph_->node(id_).shape; }
    const Tensor<T>& value() const { return graph_->value(id_); }
    const Tensor<T>& grad() const { return graph_->grad(*this); }
    bool requires_grad() const { return graph_->node(id_).requires_grad; }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
using Bindings = std::map<std::string, Tensor<T>>;

template <typename T>
class Graph {
public:
    using Kernel = typename Node<T>::Kernel;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Placeholder bound at evaluation time.
    Var<T> input(const std::string& name, Shape shape, bool requires_grad = false) {
        if (inputs_.count(name)) throw std::invalid_argument("graph: duplicate input '" + name + "'");
        Node<T> n;
        n.op = "input";
        n.label = name;
        n.kind = NodeKind::input;
        n.shape = std::move(shape);
        n.requires_grad = requires_grad;
        auto v = push(std::move(n));
        inputs_[name] = v.id();
        return v;
    }

    // Leaf reading `storage` on every evaluation; always requires grad.
    Var<T> parameter(const std::string& name, const Tensor<T>& storage) {
        Node<T> n;
        n.op = "parameter";
        n.label = name;
        n.kind = NodeKind::parameter;
        n.shape = storage.shape();
        n.requires_grad = true;
        n.storage = &storage;
        return push(std::move(n));
    }

    Var<T> constant(Tensor<T> value, const std::string& label = "constant") {
        Node<T> n;
        n.op = "constant";
        n.label = label;
        n.kind = NodeKind::constant;
        n.shape = value.shape();
        n.value = std::move(value);
        return push(std::move(n));
    }

    // Appends an op node. Without a backward kernel the node is a gradient barrier.
    Var<T> add_op(std::string op, Shape shape, std::vector<std::size_t> parents, Kernel forward,
                  Kernel backward = nullptr) {
        Node<T> n;
        n.op = std::move(op);
        n.shape = std::move(shape);
        n.parents = std::move(parents);
        n.forward = std::move(forward);
        if (backward) {
            for (auto p : n.parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
            if (n.requires_grad) n.backward = std::move(backward);
        }
        return push(std::move(n));
    }

    void set_label(const Var<T>& v, std::string label) { nodes_[v.id()].label = std::move(label); }

    void set_input(const std::string& name, const Tensor<T>& value) {
        auto it = inputs_.find(name);
        if (it == inputs_.end()) throw std::invalid_argument("graph: unknown input '" + name + "'");
        auto& n = nodes_[it->second];
        if (value.shape() != n.shape)
            throw ShapeError("graph: input '" + name + "' expects " + to_string(n.shape) + ", got " +
                             to_string(value.shape()));
        n.value = value;
        n.bound = true;
        evaluated_ = false;
    }

    // Raw mutable access to a bound input, used by the finite-difference checker.
    Tensor<T>& input_value(const std::string& name) {
        auto& n = nodes_.at(inputs_.at(name));
        if (!n.bound) throw std::logic_error("graph: input '" + name + "' is not bound");
        evaluated_ = false;
        return n.value;
    }

    void evaluate(const Bindings<T>& bindings) {
        for (const auto& [name, value] : bindings) set_input(name, value);
        evaluate();
    }

    void evaluate() {
        for (auto& n : nodes_) {
            switch (n.kind) {
                case NodeKind::input:
                    if (!n.bound) throw std::logic_error("graph: input '" + n.label + "' is not bound");
                    break;
                case NodeKind::parameter:
                    if (n.storage->shape() != n.shape)
                        throw ShapeError("graph: parameter '" + n.label + "' changed shape to " +
                                         to_string(n.storage->shape()));
                    break;
                case NodeKind::constant:
                    break;
                case NodeKind::op:
                    n.forward(*this, n);
                    if (check_finite_ && !all_finite(n.value))
                        throw NumericalError("non-finite value produced by " + describe(n));
                    break;
            }
        }
        evaluated_ = true;
        ++generation_;
    }

    // Seeds a scalar output with 1 and propagates to every reachable leaf.
    void backward(const Var<T>& seed) {
        const auto& n = nodes_.at(seed.id());
        if (numel(n.shape) != 1)
            throw ShapeError("backward: seed " + describe(n) + " has shape " + to_string(n.shape) +
                             "; pass an explicit cotangent");
        backward(seed, Tensor<T>(n.shape, T{1}));
    }

    void backward(const Var<T>& seed, const Tensor<T>& cotangent) {
        if (!evaluated_) throw std::logic_error("backward called before evaluate");
        const std::size_t root = seed.id();
        if (cotangent.shape() != nodes_[root].shape)
            throw ShapeError("backward: cotangent " + to_string(cotangent.shape()) + " for node of shape " +
                             to_string(nodes_[root].shape));
        reached_.assign(nodes_.size(), 0);
        if (!nodes_[root].requires_grad) {
            backward_generation_ = generation_;
            return;
        }
        reached_[root] = 1;
        for (std::size_t i = root + 1; i-- > 0;) {
            if (!reached_[i]) continue;
            auto& n = nodes_[i];
            n.grad.reset(n.shape);
            for (auto p : n.parents)
                if (nodes_[p].requires_grad) reached_[p] = 1;
        }
        nodes_[root].grad = cotangent;
        for (std::size_t i = root + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (reached_[i] && n.backward) n.backward(*this, n);
        }
        backward_generation_ = generation_;
    }

    // Gradient from the most recent backward(); zeros if the node was not reached.
    const Tensor<T>& grad(const Var<T>& v) const {
        const auto& n = nodes_.at(v.id());
        if (backward_generation_ != generation_ || reached_.size() <= v.id() || !reached_[v.id()]) {
            zero_cache_ = Tensor<T>(n.shape);
            return zero_cache_;
        }
        return n.grad;
    }

    // Accumulation target for a parent's gradient, or nullptr if it needs none.
    Tensor<T>* grad_sink(std::size_t id) {
        if (!reached_[id] || !nodes_[id].requires_grad) return nullptr;
        return &nodes_[id].grad;
    }

    const Tensor<T>& value(std::size_t id) const {
        const auto& n = nodes_[id];
        return n.storage ? *n.storage : n.value;
    }

    const Node<T>& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }
    bool evaluated() const { return evaluated_; }
    void set_finite_check(bool on) { check_finite_ = on; }

    static std::string describe(const Node<T>& n) {
        return n.label.empty() ? n.op : n.op + " '" + n.label + "'";
    }

private:
    Var<T> push(Node<T> n) {
        nodes_.push_back(std::move(n));
        evaluated_ = false;
        return Var<T>(this, nodes_.size() - 1);
    }

    static bool all_finite(const Tensor<T>& t) {
        for (auto v : t.vec())
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::vector<Node<T>> nodes_;
    std::unordered_map<std::string, std::size_t> inputs_;
    std::vector<char> reached_;
    bool evaluated_ = false;
    bool check_finite_ = false;
    std::size_t generation_ = 0;
    std::size_t backward_generation_ = std::numeric_limits<std::size_t>::max();
    mutable Tensor<T> zero_cache_;
};

namespace detail {

template <typename T>
void require_same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
    if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    require_same_graph(a, b, op);
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>* sink, const Tensor<T>& g, T scale = T{1}) {
    if (!sink) return;
    auto* d = sink->data();
    const auto* s = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += scale * s[i];
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kh, kw, stride, pad;
    std::size_t out_h, out_w;
};

// cols has shape (channels*kh*kw) x (out_h*out_w).
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
                const T* src = img + c * g.height * g.width;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.out_w;
                    if (y < 0 || y >= static_cast<long>(g.height)) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                        dst[ox] = (x < 0 || x >= static_cast<long>(g.width)) ? T{0} : src[y * g.width + x];
                    }
                }
            }
}

// Adjoint of im2col: scatters-adds columns back into the image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
                T* dst = img + c * g.height * g.width;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                    if (y < 0 || y >= static_cast<long>(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                        if (x < 0 || x >= static_cast<long>(g.width)) continue;
                        dst[y * g.width + x] += row[oy * g.out_w + ox];
                    }
                }
            }
}

template <typename T, typename F>
Var<T> unary(const Var<T>& x, std::string op, F fn) {
    auto& g = x.graph();
    const auto xi = x.id();
    return g.add_op(std::move(op), x.shape(), {xi}, [xi, fn](Graph<T>& g, Node<T>& n) {
        const auto& in = g.value(xi);
        n.value.reset(n.shape);
        for (std::size_t i = 0; i < in.size(); ++i) n.value[i] = fn(in[i]);
    });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "add");
    const auto ai = a.id(), bi = b.id();
    return a.graph().add_op(
        "add", a.shape(), {ai, bi},
        [ai, bi](Graph<T>& g, Node<T>& n) {
            const auto &x = g.value(ai), &y = g.value(bi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] + y[i];
        },
        [ai, bi](Graph<T>& g, Node<T>& n) {
            detail::accumulate(g.grad_sink(ai), n.grad);
            detail::accumulate(g.grad_sink(bi), n.grad);
        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "sub");
    const auto ai = a.id(), bi = b.id();
    return a.graph().add_op(
        "sub", a.shape(), {ai, bi},
        [ai, bi](Graph<T>& g, Node<T>& n) {
            const auto &x = g.value(ai), &y = g.value(bi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] - y[i];
        },
        [ai, bi](Graph<T>& g, Node<T>& n) {
            detail::accumulate(g.grad_sink(ai), n.grad);
            detail::accumulate(g.grad_sink(bi), n.grad, T{-1});
        });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "mul");
    const auto ai = a.id(), bi = b.id();
    return a.graph().add_op(
        "mul", a.shape(), {ai, bi},
        [ai, bi](Graph<T>& g, Node<T>& n) {
            const auto &x = g.value(ai), &y = g.value(bi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * y[i];
        },
        [ai, bi](Graph<T>& g, Node<T>& n) {
            if (auto* s = g.grad_sink(ai)) {
                const auto& y = g.value(bi);
                for (std::size_t i = 0; i < y.size(); ++i) (*s)[i] += n.grad[i] * y[i];
            }
            if (auto* s = g.grad_sink(bi)) {
                const auto& x = g.value(ai);
                for (std::size_t i = 0; i < x.size(); ++i) (*s)[i] += n.grad[i] * x[i];
            }
        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    const auto ai = a.id();
    return a.graph().add_op(
        "scale", a.shape(), {ai},
        [ai, c](Graph<T>& g, Node<T>& n) {
            const auto& x = g.value(ai);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = c * x[i];
        },
        [ai, c](Graph<T>& g, Node<T>& n) { detail::accumulate(g.grad_sink(ai), n.grad, c); });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_graph(a, b, "matmul");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    const auto ai = a.id(), bi = b.id();
    return a.graph().add_op(
        "matmul", Shape{m, p}, {ai, bi},
        [=](Graph<T>& g, Node<T>& n) {
            n.value.reset(n.shape);
            detail::MatMap<T>(n.value.data(), m, p).noalias() =
                detail::ConstMatMap<T>(g.value(ai).data(), m, k) * detail::ConstMatMap<T>(g.value(bi).data(), k, p);
        },
        [=](Graph<T>& g, Node<T>& n) {
            detail::ConstMatMap<T> dy(n.grad.data(), m, p);
            if (auto* s = g.grad_sink(ai))
                detail::MatMap<T>(s->data(), m, k).noalias() +=
                    dy * detail::ConstMatMap<T>(g.value(bi).data(), k, p).transpose();
            if (auto* s = g.grad_sink(bi))
                detail::MatMap<T>(s->data(), k, p).noalias() +=
                    detail::ConstMatMap<T>(g.value(ai).data(), m, k).transpose() * dy;
        });
}

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

// x: [B,C,H,W], weight: [O,C,kh,kw], bias: [O] (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dOptions opt = {}) {
    detail::require_same_graph(x, weight, "conv2d");
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || opt.stride == 0)
        throw ShapeError("conv2d: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
    if (bias.valid() && (bias.shape().size() != 1 || bias.shape()[0] != ws[0]))
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " for weight " + to_string(ws));
    if (xs[2] + 2 * opt.padding < ws[2] || xs[3] + 2 * opt.padding < ws[3])
        throw ShapeError("conv2d: kernel " + to_string(ws) + " larger than padded input " + to_string(xs));
    detail::ConvGeometry geo{xs[1], xs[2], xs[3], ws[2], ws[3], opt.stride, opt.padding, 0, 0};
    geo.out_h = (xs[2] + 2 * opt.padding - ws[2]) / opt.stride + 1;
    geo.out_w = (xs[3] + 2 * opt.padding - ws[3]) / opt.stride + 1;
    const std::size_t batch = xs[0], out_c = ws[0];
    const std::size_t ckk = geo.channels * geo.kh * geo.kw, plane = geo.out_h * geo.out_w;
    const std::size_t in_plane = geo.channels * geo.height * geo.width;
    const auto xi = x.id(), wi = weight.id();
    const bool has_bias = bias.valid();
    const auto bi = has_bias ? bias.id() : 0;
    std::vector<std::size_t> parents{xi, wi};
    if (has_bias) parents.push_back(bi);
    auto cols = std::make_shared<std::vector<T>>();

    return x.graph().add_op(
        "conv2d", Shape{batch, out_c, geo.out_h, geo.out_w}, parents,
        [=](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            detail::ConstMatMap<T> w(g.value(wi).data(), out_c, ckk);
            cols->resize(batch * ckk * plane);
            n.value.reset(n.shape);
            for (std::size_t b = 0; b < batch; ++b) {
                T* c = cols->data() + b * ckk * plane;
                detail::im2col(in.data() + b * in_plane, geo, c);
                detail::MatMap<T> out(n.value.data() + b * out_c * plane, out_c, plane);
                out.noalias() = w * detail::ConstMatMap<T>(c, ckk, plane);
                if (has_bias) {
                    const auto& bv = g.value(bi);
                    for (std::size_t o = 0; o < out_c; ++o) out.row(o).array() += bv[o];
                }
            }
        },
        [=](Graph<T>& g, Node<T>& n) {
            auto* dx = g.grad_sink(xi);
            auto* dw = g.grad_sink(wi);
            auto* db = has_bias ? g.grad_sink(bi) : nullptr;
            AlignedVector<T> dcols(dx ? ckk * plane : 0);
            for (std::size_t b = 0; b < batch; ++b) {
                detail::ConstMatMap<T> dy(n.grad.data() + b * out_c * plane, out_c, plane);
                const T* c = cols->data() + b * ckk * plane;
                if (dw)
                    detail::MatMap<T>(dw->data(), out_c, ckk).noalias() +=
                        dy * detail::ConstMatMap<T>(c, ckk, plane).transpose();
                if (db)
                    for (std::size_t o = 0; o < out_c; ++o) (*db)[o] += dy.row(o).sum();
                if (dx) {
                    detail::MatMap<T>(dcols.data(), ckk, plane).noalias() =
                        detail::ConstMatMap<T>(g.value(wi).data(), out_c, ckk).transpose() * dy;
                    detail::col2im(dcols.data(), geo, dx->data() + b * in_plane);
                }
            }
        });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, Conv2dOptions opt = {}) {
    return conv2d(x, weight, Var<T>{}, opt);
}

// Transposed convolution (adjoint of conv2d w.r.t. its input).
// x: [B,C,H,W], weight: [C,O,kh,kw], bias: [O] (optional).
// Output spatial size is (H-1)*stride - 2*padding + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dOptions opt = {}) {
    detail::require_same_graph(x, weight, "conv_transpose2d");
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0] || opt.stride == 0)
        throw ShapeError("conv_transpose2d: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
    const long oh = static_cast<long>((xs[2] - 1) * opt.stride + ws[2]) - 2 * static_cast<long>(opt.padding);
    const long ow = static_cast<long>((xs[3] - 1) * opt.stride + ws[3]) - 2 * static_cast<long>(opt.padding);
    if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: non-positive output size for " + to_string(xs));
    if (bias.valid() && (bias.shape().size() != 1 || bias.shape()[0] != ws[1]))
        throw ShapeError("conv_transpose2d: bias " + to_string(bias.shape()) + " for weight " + to_string(ws));
    const std::size_t batch = xs[0], in_c = xs[1], out_c = ws[1];
    // Geometry of the equivalent forward convolution mapping output -> input.
    detail::ConvGeometry geo{out_c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow),
                             ws[2], ws[3], opt.stride, opt.padding, xs[2], xs[3]};
    const std::size_t okk = out_c * ws[2] * ws[3], plane = xs[2] * xs[3];
    const std::size_t out_plane = out_c * geo.height * geo.width;
    const auto xi = x.id(), wi = weight.id();
    const bool has_bias = bias.valid();
    const auto bi = has_bias ? bias.id() : 0;
    std::vector<std::size_t> parents{xi, wi};
    if (has_bias) parents.push_back(bi);

    return x.graph().add_op(
        "conv_transpose2d", Shape{batch, out_c, geo.height, geo.width}, parents,
        [=](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            detail::ConstMatMap<T> w(g.value(wi).data(), in_c, okk);
            AlignedVector<T> cols(okk * plane);
            n.value.reset(n.shape);
            for (std::size_t b = 0; b < batch; ++b) {
                detail::MatMap<T>(cols.data(), okk, plane).noalias() =
                    w.transpose() * detail::ConstMatMap<T>(in.data() + b * in_c * plane, in_c, plane);
                T* out = n.value.data() + b * out_plane;
                detail::col2im(cols.data(), geo, out);
                if (has_bias) {
                    const auto& bv = g.value(bi);
                    const std::size_t hw = geo.height * geo.width;
                    for (std::size_t o = 0; o < out_c; ++o)
                        for (std::size_t i = 0; i < hw; ++i) out[o * hw + i] += bv[o];
                }
            }
        },
        [=](Graph<T>& g, Node<T>& n) {
            auto* dx = g.grad_sink(xi);
            auto* dw = g.grad_sink(wi);
            auto* db = has_bias ? g.grad_sink(bi) : nullptr;
            AlignedVector<T> cols(okk * plane);
            const std::size_t hw = geo.height * geo.width;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* dy = n.grad.data() + b * out_plane;
                if (db)
                    for (std::size_t o = 0; o < out_c; ++o)
                        for (std::size_t i = 0; i < hw; ++i) (*db)[o] += dy[o * hw + i];
                if (!dx && !dw) continue;
                detail::im2col(dy, geo, cols.data());
                detail::ConstMatMap<T> c(cols.data(), okk, plane);
                if (dx)
                    detail::MatMap<T>(dx->data() + b * in_c * plane, in_c, plane).noalias() +=
                        detail::ConstMatMap<T>(g.value(wi).data(), in_c, okk) * c;
                if (dw)
                    detail::MatMap<T>(dw->data(), in_c, okk).noalias() +=
                        detail::ConstMatMap<T>(g.value(xi).data() + b * in_c * plane, in_c, plane) * c.transpose();
            }
        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    const auto xi = x.id();
    return x.graph().add_op(
        "relu", x.shape(), {xi},
        [xi](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < in.size(); ++i) n.value[i] = in[i] > T{0} ? in[i] : T{0};
        },
        [xi](Graph<T>& g, Node<T>& n) {
            if (auto* s = g.grad_sink(xi)) {
                const auto& in = g.value(xi);
                for (std::size_t i = 0; i < in.size(); ++i)
                    if (in[i] > T{0}) (*s)[i] += n.grad[i];
            }
        });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    const auto xi = x.id();
    return x.graph().add_op(
        "exp", x.shape(), {xi},
        [xi](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < in.size(); ++i) n.value[i] = std::exp(in[i]);
        },
        [xi](Graph<T>& g, Node<T>& n) {
            if (auto* s = g.grad_sink(xi))
                for (std::size_t i = 0; i < n.value.size(); ++i) (*s)[i] += n.grad[i] * n.value[i];
        });
}

// log(max(x, eps)); the gradient is 1/x above the clamp and 0 below it.
template <typename T>
Var<T> log(const Var<T>& x, double eps = kLogEpsilon) {
    const auto xi = x.id();
    const T e = static_cast<T>(eps);
    return x.graph().add_op(
        "log", x.shape(), {xi},
        [xi, e](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < in.size(); ++i) n.value[i] = std::log(std::max(in[i], e));
        },
        [xi, e](Graph<T>& g, Node<T>& n) {
            if (auto* s = g.grad_sink(xi)) {
                const auto& in = g.value(xi);
                for (std::size_t i = 0; i < in.size(); ++i)
                    if (in[i] > e) (*s)[i] += n.grad[i] / in[i];
            }
        });
}

namespace detail {

// Maps every flat input index to its flat index after removing `axes`.
inline std::vector<std::size_t> reduction_map(const Shape& in, const std::vector<std::size_t>& axes, Shape& out) {
    std::vector<char> drop(in.size(), 0);
    for (auto a : axes) {
        if (a >= in.size()) throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for " + to_string(in));
        drop[a] = 1;
    }
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i)
        if (!drop[i]) out.push_back(in[i]);
    const auto in_st = strides_of(in);
    std::vector<std::size_t> out_st(in.size(), 0);
    {
        const auto st = strides_of(out);
        std::size_t j = 0;
        for (std::size_t i = 0; i < in.size(); ++i)
            if (!drop[i]) out_st[i] = st[j++];
    }
    std::vector<std::size_t> map(numel(in));
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        std::size_t rem = flat, o = 0;
        for (std::size_t d = 0; d < in.size(); ++d) {
            const std::size_t idx = rem / in_st[d];
            rem %= in_st[d];
            o += idx * out_st[d];
        }
        map[flat] = o;
    }
    return map;
}

}  // namespace detail

// Sums over the listed axes (removed from the result).
template <typename T>
Var<T> sum(const Var<T>& x, const std::vector<std::size_t>& axes) {
    Shape out;
    auto map = std::make_shared<std::vector<std::size_t>>(detail::reduction_map(x.shape(), axes, out));
    const auto xi = x.id();
    return x.graph().add_op(
        "sum", out, {xi},
        [xi, map](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < in.size(); ++i) n.value[(*map)[i]] += in[i];
        },
        [xi, map](Graph<T>& g, Node<T>& n) {
            if (auto* s = g.grad_sink(xi))
                for (std::size_t i = 0; i < s->size(); ++i) (*s)[i] += n.grad[(*map)[i]];
        });
}

template <typename T>
Var<T> mean(const Var<T>& x, const std::vector<std::size_t>& axes) {
    std::size_t count = 1;
    for (auto a : axes) count *= x.shape().at(a);
    return scale(sum(x, axes), T{1} / static_cast<T>(count));
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    std::vector<std::size_t> axes(x.shape().size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return sum(x, axes);
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(numel(x.shape())));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    if (numel(shape) != numel(x.shape()))
        throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
    const auto xi = x.id();
    return x.graph().add_op(
        "reshape", shape, {xi},
        [xi](Graph<T>& g, Node<T>& n) {
            n.value.reset(n.shape);
            const auto& in = g.value(xi);
            std::copy(in.data(), in.data() + in.size(), n.value.data());
        },
        [xi](Graph<T>& g, Node<T>& n) { detail::accumulate(g.grad_sink(xi), n.grad); });
}

// Half-open range [begin, end) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& s = x.shape();
    if (axis >= s.size() || begin >= end || end > s[axis])
        throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(s));
    Shape out = s;
    out[axis] = end - begin;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t full = s[axis], len = end - begin;
    const auto xi = x.id();
    return x.graph().add_op(
        "slice", out, {xi},
        [=](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(in.data() + (o * full + begin) * inner, len * inner, n.value.data() + o * len * inner);
        },
        [=](Graph<T>& g, Node<T>& n) {
            if (auto* sk = g.grad_sink(xi))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < len * inner; ++i)
                        (*sk)[(o * full + begin) * inner + i] += n.grad[o * len * inner + i];
        });
}

// Softmax taken jointly over the last two axes.
template <typename T>
Var<T> spatial_softmax(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() < 2) throw ShapeError("spatial_softmax: needs rank >= 2, got " + to_string(s));
    const std::size_t area = s[s.size() - 1] * s[s.size() - 2];
    const std::size_t slices = numel(s) / area;
    const auto xi = x.id();
    return x.graph().add_op(
        "spatial_softmax", s, {xi},
        [=](Graph<T>& g, Node<T>& n) {
            const auto& in = g.value(xi);
            n.value.reset(n.shape);
            for (std::size_t k = 0; k < slices; ++k) {
                const T* z = in.data() + k * area;
                T* p = n.value.data() + k * area;
                T m = z[0];
                for (std::size_t i = 0; i < area; ++i) {
                    if (!std::isfinite(z[i])) throw std::domain_error("spatial_softmax: non-finite logits");
                    m = std::max(m, z[i]);
                }
                T total{0};
                for (std::size_t i = 0; i < area; ++i) total += (p[i] = std::exp(z[i] - m));
                for (std::size_t i = 0; i < area; ++i) p[i] /= total;
            }
        },
        [=](Graph<T>& g, Node<T>& n) {
            auto* sk = g.grad_sink(xi);
            if (!sk) return;
            for (std::size_t k = 0; k < slices; ++k) {
                const T* p = n.value.data() + k * area;
                const T* dp = n.grad.data() + k * area;
                T dot{0};
                for (std::size_t i = 0; i < area; ++i) dot += p[i] * dp[i];
                T* dz = sk->data() + k * area;
                for (std::size_t i = 0; i < area; ++i) dz[i] += p[i] * (dp[i] - dot);
            }
        });
}

// Forward identity; gradient does not flow through.
template <typename T>
Var<T> detach(const Var<T>& x) {
    const auto xi = x.id();
    return x.graph().add_op("detach", x.shape(), {xi}, [xi](Graph<T>& g, Node<T>& n) { n.value = g.value(xi); });
}

// Forward identity; backward multiplies the cotangent by -scale.
template <typename T>
Var<T> reverse_grad(const Var<T>& x, T scale_factor = T{1}) {
    if (!std::isfinite(scale_factor)) throw std::invalid_argument("reverse_grad: non-finite scale");
    const auto xi = x.id();
    return x.graph().add_op(
        "reverse_grad", x.shape(), {xi}, [xi](Graph<T>& g, Node<T>& n) { n.value = g.value(xi); },
        [xi, scale_factor](Graph<T>& g, Node<T>& n) {
            detail::accumulate(g.grad_sink(xi), n.grad, -scale_factor);
        });
}

// Per-slice maximum over the last two axes (forward only).
template <typename T>
Var<T> spatial_max(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() < 2) throw ShapeError("spatial_max: needs rank >= 2, got " + to_string(s));
    const std::size_t area = s[s.size() - 1] * s[s.size() - 2];
    Shape out(s.begin(), s.end() - 2);
    const auto xi = x.id();
    return x.graph().add_op("spatial_max", out, {xi}, [=](Graph<T>& g, Node<T>& n) {
        const auto& in = g.value(xi);
        n.value.reset(n.shape);
        for (std::size_t k = 0; k < n.value.size(); ++k)
            n.value[k] = *std::max_element(in.data() + k * area, in.data() + (k + 1) * area);
    });
}

// Per-slice (row, col) of the first maximum in row-major order (forward only).
template <typename T>
Var<T> spatial_argmax(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() < 2) throw ShapeError("spatial_argmax: needs rank >= 2, got " + to_string(s));
    const std::size_t w = s[s.size() - 1], area = w * s[s.size() - 2];
    Shape out(s.begin(), s.end() - 2);
    out.push_back(2);
    const auto xi = x.id();
    return x.graph().add_op("spatial_argmax", out, {xi}, [=](Graph<T>& g, Node<T>& n) {
        const auto& in = g.value(xi);
        n.value.reset(n.shape);
        for (std::size_t k = 0; k * 2 < n.value.size(); ++k) {
            const T* z = in.data() + k * area;
            const auto idx = static_cast<std::size_t>(std::max_element(z, z + area) - z);
            n.value[2 * k] = static_cast<T>(idx / w);
            n.value[2 * k + 1] = static_cast<T>(idx % w);
        }
    });
}

// Concatenation along axis 0.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    Shape out = parts.front().shape();
    std::vector<std::size_t> ids, offsets;
    std::size_t offset = 0;
    out[0] = 0;
    for (const auto& p : parts) {
        detail::require_same_graph(parts.front(), p, "concat");
        const auto& s = p.shape();
        if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1))
            throw ShapeError("concat: " + to_string(parts.front().shape()) + " vs " + to_string(s));
        out[0] += s[0];
        ids.push_back(p.id());
        offsets.push_back(offset);
        offset += numel(s);
    }
    return parts.front().graph().add_op(
        "concat", out, ids,
        [ids, offsets](Graph<T>& g, Node<T>& n) {
            n.value.reset(n.shape);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const auto& v = g.value(ids[i]);
                std::copy_n(v.data(), v.size(), n.value.data() + offsets[i]);
            }
        },
        [ids, offsets](Graph<T>& g, Node<T>& n) {
            for (std::size_t i = 0; i < ids.size(); ++i)
                if (auto* s = g.grad_sink(ids[i]))
                    for (std::size_t j = 0; j < s->size(); ++j) (*s)[j] += n.grad[offsets[i] + j];
        });
}

// Maximum over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar function built by `fn` from a single input.
template <typename F>
double grad_check(F&& fn, const Tensor<double>& point, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2]");
    Graph<double> g;
    auto x = g.input("x", point.shape(), true);
    Var<double> y = fn(g, x);
    if (numel(y.shape()) != 1) throw ShapeError("grad_check: function output must be scalar, got " + to_string(y.shape()));
    g.set_input("x", point);
    g.evaluate();
    if (!std::isfinite(y.value()[0])) throw std::domain_error("grad_check: non-finite function value");
    g.backward(y);
    const Tensor<double> analytic = g.grad(x);
    double worst = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        auto& xv = g.input_value("x");
        xv[i] = point[i] + eps;
        g.evaluate();
        const double up = y.value()[0];
        g.input_value("x")[i] = point[i] - eps;
        g.evaluate();
        const double down = y.value()[0];
        g.input_value("x")[i] = point[i];
        const double numeric = (up - down) / (2.0 * eps);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw std::domain_error("grad_check: non-finite derivative at coordinate " + std::to_string(i));
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    return worst;
}

}  // namespace regda::ad
