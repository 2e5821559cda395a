#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <vector>

#include "haicomm/common.hpp"

namespace haicomm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense n-d array participating in a reverse-mode graph. Handles share the
// underlying node; ops build new nodes wired to their inputs. A graph is
// confined to one thread; distinct graphs may run concurrently.
template <typename T>
class Tensor {
public:
    struct Node {
        std::vector<T> data;
        std::vector<T> grad;  // allocated on demand; same extent as data
        Shape shape;
        bool requires_grad = false;
        const char* op = "leaf";  // producing operation
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), T(0));
        }
    };

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor init: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool requires_grad() const { return node_->requires_grad; }
    bool defined() const { return node_ != nullptr; }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
        return node_->data[0];
    }

    T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    void zero_grad() { node_->grad.clear(); }

    void add_to_grad(const std::vector<T>& g) {
        node_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
    }

    // Reverse pass from a scalar output. Leaves with requires_grad end up with
    // populated grads; everything else is untouched.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward(): output must be scalar, got " + shape_str(shape()));
        std::vector<Node*> order;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, child] = stack.back();
            if (child < n->parents.size()) {
                Node* p = n->parents[child++].get();
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->requires_grad && n->backward) n->backward(*n);
        }
    }

    const char* op_name() const { return node_->op; }
    std::uintptr_t graph_id() const { return reinterpret_cast<std::uintptr_t>(node_.get()); }

    const std::shared_ptr<Node>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node> node_;
};

namespace ops {

template <typename T>
using NodePtr = std::shared_ptr<typename Tensor<T>::Node>;

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::vector<NodePtr<T>> parents,
                      std::function<void(typename Tensor<T>::Node&)> backward) {
    auto n = std::make_shared<typename Tensor<T>::Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
void check_2d(const Tensor<T>& a, const char* op) {
    if (a.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected 2-d tensor, got " + shape_str(a.shape()));
}

}  // namespace ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    ops::check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return ops::make_result<T>("add",
        a.shape(), std::move(out), {an, bn}, [an, bn](typename Tensor<T>::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    ops::check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return ops::make_result<T>("mul",
        a.shape(), std::move(out), {an, bn}, [an, bn](typename Tensor<T>::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return ops::make_result<T>("scale", a.shape(), std::move(out), {an}, [an, c](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    ops::check_2d(a, "matmul");
    ops::check_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(m * n, T(0));
    const T* A = a.data().data();
    const T* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* Ci = out.data() + i * n;
        const T* Ai = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = Ai[p];
            const T* Bp = B + p * n;
            for (std::size_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return ops::make_result<T>("matmul",
        {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](typename Tensor<T>::Node& self) {
            const T* G = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = 0;
                        const T* Gi = G + i * n;
                        const T* Bp = bn->data.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += Gi[j] * Bp[j];
                        an->grad[i * k + p] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i) {
                    const T* Ai = an->data.data() + i * k;
                    const T* Gi = G + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = Ai[p];
                        T* Bg = bn->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) Bg[j] += av * Gi[j];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    ops::check_2d(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    auto an = a.node();
    return ops::make_result<T>("transpose", {c, r}, std::move(out), {an}, [an, r, c](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    auto an = a.node();
    return ops::make_result<T>("reshape", std::move(shape), a.data(), {an}, [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// Adds a length-C vector to every row of an [R x C] matrix.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    ops::check_2d(x, "add_rowvec");
    const std::size_t r = x.rows(), c = x.cols();
    if (v.numel() != c)
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " does not match columns of " +
                         shape_str(x.shape()));
    std::vector<T> out(x.data());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v.data()[j];
    auto xn = x.node(), vn = v.node();
    return ops::make_result<T>("add_rowvec", x.shape(), std::move(out), {xn, vn},
                               [xn, vn, r, c](typename Tensor<T>::Node& self) {
                                   if (xn->requires_grad) {
                                       xn->ensure_grad();
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           xn->grad[i] += self.grad[i];
                                   }
                                   if (vn->requires_grad) {
                                       vn->ensure_grad();
                                       for (std::size_t i = 0; i < r; ++i)
                                           for (std::size_t j = 0; j < c; ++j)
                                               vn->grad[j] += self.grad[i * c + j];
                                   }
                               });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// Softmax over the trailing axis, with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const Shape& s = x.shape();
    const std::size_t c = s.back();
    const std::size_t rows = x.numel() / c;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * c;
        T* o = out.data() + r * c;
        T mx = in[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
    }
    auto xn = x.node();
    auto yvals = out;  // backward needs the outputs
    return ops::make_result<T>("softmax", s, std::move(out), {xn},
                               [xn, yvals = std::move(yvals), rows, c](typename Tensor<T>::Node& self) {
                                   xn->ensure_grad();
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const T* y = yvals.data() + r * c;
                                       const T* g = self.grad.data() + r * c;
                                       T dot = 0;
                                       for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                                       for (std::size_t j = 0; j < c; ++j)
                                           xn->grad[r * c + j] += y[j] * (g[j] - dot);
                                   }
                               });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        out[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    }
    auto xn = x.node();
    return ops::make_result<T>("gelu", x.shape(), std::move(out), {xn}, [xn](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        constexpr T inv_sqrt2pi = T(0.3989422804014326779);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T v = xn->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            xn->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// Row-wise layer norm with learnable gain/bias over the trailing axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, T eps = T(1e-5)) {
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.numel() / c;
    if (g.numel() != c || b.numel() != c)
        throw ShapeError("layer_norm: gain/bias " + shape_str(g.shape()) + "/" + shape_str(b.shape()) +
                         " do not match trailing axis of " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_sigma(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * c;
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += in[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            xhat[r * c + j] = (in[j] - mu) * inv;
            out[r * c + j] = xhat[r * c + j] * g.data()[j] + b.data()[j];
        }
    }
    auto xn = x.node(), gn = g.node(), bn = b.node();
    return ops::make_result<T>("layer_norm",
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), rows,
         c](typename Tensor<T>::Node& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = self.grad.data() + r * c;
                const T* xh = xhat.data() + r * c;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) gn->grad[j] += gr[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) bn->grad[j] += gr[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T mean_dyh = 0, mean_dyh_xh = 0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const T dyh = gr[j] * gn->data[j];
                        mean_dyh += dyh;
                        mean_dyh_xh += dyh * xh[j];
                    }
                    mean_dyh /= static_cast<T>(c);
                    mean_dyh_xh /= static_cast<T>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T dyh = gr[j] * gn->data[j];
                        xn->grad[r * c + j] += inv_sigma[r] * (dyh - mean_dyh - xh[j] * mean_dyh_xh);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    std::vector<ops::NodePtr<T>> parents;
    for (const auto& p : parts) {
        ops::check_2d(p, "concat_cols");
        if (p.rows() != r)
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.cols();
        parents.push_back(p.node());
    }
    std::vector<T> out(r * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.data().data() + i * c, c, out.data() + i * total + off);
        off += c;
    }
    auto parents_copy = parents;
    return ops::make_result<T>("concat_cols", {r, total}, std::move(out), std::move(parents),
                               [parents = std::move(parents_copy), r, total](typename Tensor<T>::Node& self) {
                                   std::size_t off = 0;
                                   for (auto& p : parents) {
                                       const std::size_t c = p->shape[1];
                                       if (p->requires_grad) {
                                           p->ensure_grad();
                                           for (std::size_t i = 0; i < r; ++i)
                                               for (std::size_t j = 0; j < c; ++j)
                                                   p->grad[i * c + j] += self.grad[i * total + off + j];
                                       }
                                       off += c;
                                   }
                               });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    std::vector<ops::NodePtr<T>> parents;
    for (const auto& p : parts) {
        ops::check_2d(p, "concat_rows");
        if (p.cols() != c)
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.rows();
        parents.push_back(p.node());
    }
    std::vector<T> out;
    out.reserve(total * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    auto parents_copy = parents;
    return ops::make_result<T>("concat_rows", {total, c}, std::move(out), std::move(parents),
                               [parents = std::move(parents_copy), c](typename Tensor<T>::Node& self) {
                                   std::size_t off = 0;
                                   for (auto& p : parents) {
                                       const std::size_t n = p->data.size();
                                       if (p->requires_grad) {
                                           p->ensure_grad();
                                           for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
                                       }
                                       off += n;
                                   }
                               });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
    ops::check_2d(x, "slice_cols");
    const std::size_t r = x.rows(), c = x.cols();
    if (start + len > c)
        throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(x.shape()));
    std::vector<T> out(r * len);
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(x.data().data() + i * c + start, len, out.data() + i * len);
    auto xn = x.node();
    return ops::make_result<T>("slice_cols", {r, len}, std::move(out), {xn},
                               [xn, start, len, r, c](typename Tensor<T>::Node& self) {
                                   xn->ensure_grad();
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < len; ++j)
                                           xn->grad[i * c + start + j] += self.grad[i * len + j];
                               });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t len) {
    ops::check_2d(x, "slice_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (start + len > r)
        throw ShapeError("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(x.shape()));
    std::vector<T> out(x.data().begin() + start * c, x.data().begin() + (start + len) * c);
    auto xn = x.node();
    return ops::make_result<T>("slice_rows", {len, c}, std::move(out), {xn},
                               [xn, start, len, c](typename Tensor<T>::Node& self) {
                                   xn->ensure_grad();
                                   for (std::size_t i = 0; i < len * c; ++i)
                                       xn->grad[start * c + i] += self.grad[i];
                               });
}

// Select rows by index (token selection under masking).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
    ops::check_2d(x, "gather_rows");
    const std::size_t c = x.cols();
    for (auto i : idx)
        if (i >= x.rows())
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                             shape_str(x.shape()));
    std::vector<T> out(idx.size() * c);
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy_n(x.data().data() + idx[k] * c, c, out.data() + k * c);
    auto xn = x.node();
    return ops::make_result<T>("gather_rows", {idx.size(), c}, std::move(out), {xn},
                               [xn, idx, c](typename Tensor<T>::Node& self) {
                                   xn->ensure_grad();
                                   for (std::size_t k = 0; k < idx.size(); ++k)
                                       for (std::size_t j = 0; j < c; ++j)
                                           xn->grad[idx[k] * c + j] += self.grad[k * c + j];
                               });
}

// Place row k of x at row idx[k] of an [out_rows x C] zero matrix (additive on
// duplicate indices).
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx, std::size_t out_rows) {
    ops::check_2d(x, "scatter_rows");
    if (idx.size() != x.rows())
        throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                         shape_str(x.shape()));
    const std::size_t c = x.cols();
    for (auto i : idx)
        if (i >= out_rows)
            throw ShapeError("scatter_rows: index " + std::to_string(i) + " out of range for " +
                             std::to_string(out_rows) + " rows");
    std::vector<T> out(out_rows * c, T(0));
    for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) out[idx[k] * c + j] += x.data()[k * c + j];
    auto xn = x.node();
    return ops::make_result<T>("scatter_rows", {out_rows, c}, std::move(out), {xn},
                               [xn, idx, c](typename Tensor<T>::Node& self) {
                                   xn->ensure_grad();
                                   for (std::size_t k = 0; k < idx.size(); ++k)
                                       for (std::size_t j = 0; j < c; ++j)
                                           xn->grad[k * c + j] += self.grad[idx[k] * c + j];
                               });
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, std::size_t n) {
    ops::check_2d(x, "repeat_rows");
    if (x.rows() != 1) throw ShapeError("repeat_rows: expected [1,C], got " + shape_str(x.shape()));
    const std::size_t c = x.cols();
    std::vector<T> out(n * c);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data().data(), c, out.data() + i * c);
    auto xn = x.node();
    return ops::make_result<T>("repeat_rows", {n, c}, std::move(out), {xn}, [xn, n, c](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) xn->grad[j] += self.grad[i * c + j];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    auto xn = x.node();
    return ops::make_result<T>("sum", {1}, {s}, {xn}, [xn](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        for (auto& g : xn->grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Mean squared error over all elements.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    ops::check_same_shape(a, b, "mse_loss");
    const std::size_t n = a.numel();
    if (n == 0) throw ShapeError("mse_loss: empty tensors");
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    auto an = a.node(), bn = b.node();
    return ops::make_result<T>("mse_loss", {1}, {s / static_cast<T>(n)}, {an, bn},
                               [an, bn, n](typename Tensor<T>::Node& self) {
                                   const T f = self.grad[0] * T(2) / static_cast<T>(n);
                                   if (an->requires_grad) {
                                       an->ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                           an->grad[i] += f * (an->data[i] - bn->data[i]);
                                   }
                                   if (bn->requires_grad) {
                                       bn->ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                           bn->grad[i] -= f * (an->data[i] - bn->data[i]);
                                   }
                               });
}

// Probabilities are clamped to [eps, 1-eps]; clamped entries get zero gradient.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p_pos, const std::vector<int>& labels, T eps = T(1e-7)) {
    const std::size_t n = p_pos.numel();
    if (labels.size() != n)
        throw ShapeError("bce_loss: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(p_pos.shape()));
    if (n == 0) throw ShapeError("bce_loss: empty input");
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T p = std::clamp(p_pos.data()[i], eps, T(1) - eps);
        s += labels[i] ? -std::log(p) : -std::log(T(1) - p);
    }
    auto pn = p_pos.node();
    return ops::make_result<T>("bce_loss",
        {1}, {s / static_cast<T>(n)}, {pn}, [pn, labels, n, eps](typename Tensor<T>::Node& self) {
            pn->ensure_grad();
            const T f = self.grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T raw = pn->data[i];
                if (raw < eps || raw > T(1) - eps) continue;
                pn->grad[i] += f * (labels[i] ? -T(1) / raw : T(1) / (T(1) - raw));
            }
        });
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
    for (T v : x.data())
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& x, std::size_t row) {
    const std::size_t c = x.cols();
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (x.at(row, j) > x.at(row, best)) best = j;
    return best;
}

}  // namespace haicomm
