#pragma once

// Minimal dense-tensor computation graph with reverse-mode differentiation.
// Tensors are NCHW double precision; convolutions go through im2col + Eigen
// GEMM. A graph instance is confined to one thread during forward/backward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hiernas/common.hpp"

namespace hiernas::mt {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node {
  public:
    Shape4 shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* tag = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    void zero_grad() {
        std::fill(grad.begin(), grad.end(), 0.0);
    }
};

inline NodePtr make_leaf(Shape4 shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(static_cast<std::size_t>(shape.numel()), 0.0);
    n->requires_grad = requires_grad;
    return n;
}

inline NodePtr make_node(Shape4 shape, const char* tag, std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(static_cast<std::size_t>(shape.numel()), 0.0);
    n->tag = tag;
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

[[noreturn]] inline void shape_error(const char* op, const Shape4& a, const Shape4& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " vs " + b.str());
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const NodePtr& loss) {
    if (loss->shape.numel() != 1)
        throw InvalidArgumentError("backward: loss must be scalar, got " + loss->shape.str());
    // Reverse topological order by iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise and reduction ops
// ---------------------------------------------------------------------------

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    if (!(a->shape == b->shape)) shape_error("add", a->shape, b->shape);
    auto out = make_node(a->shape, "add", {a, b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
    out->backward_fn = [a, b](Node& self) {
        for (auto& p : {a, b}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    };
    return out;
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    if (!(a->shape == b->shape)) shape_error("mul", a->shape, b->shape);
    auto out = make_node(a->shape, "mul", {a, b});
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * b->value[i];
    out->backward_fn = [a, b](Node& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i] * a->value[i];
        }
    };
    return out;
}

inline NodePtr sum(const NodePtr& x) {
    auto out = make_node({1, 1, 1, 1}, "sum", {x});
    double acc = 0.0;
    for (double v : x->value) acc += v;
    out->value[0] = acc;
    out->backward_fn = [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (auto& g : x->grad) g += self.grad[0];
    };
    return out;
}

inline NodePtr identity(const NodePtr& x) {
    auto out = make_node(x->shape, "identity", {x});
    out->value = x->value;
    out->backward_fn = [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
    };
    return out;
}

inline NodePtr zero_op(const NodePtr& x) {
    // "no connection": output and gradient are exactly zero.
    auto out = make_node(x->shape, "zero", {x});
    out->backward_fn = [](Node&) {};
    return out;
}

inline NodePtr relu(const NodePtr& x) {
    auto out = make_node(x->shape, "relu", {x});
    for (std::size_t i = 0; i < x->value.size(); ++i)
        out->value[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
    out->backward_fn = [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (x->value[i] > 0.0) x->grad[i] += self.grad[i];
    };
    return out;
}

// Weighted sum of same-shaped tensors with coefficients taken from entries of
// a small coefficient tensor (e.g. a softmaxed logits group). Differentiable
// w.r.t. both the inputs and the coefficients.
inline NodePtr mix(const std::vector<NodePtr>& xs, const NodePtr& coeffs,
                   const std::vector<int>& coeff_idx) {
    if (xs.empty() || xs.size() != coeff_idx.size())
        throw InvalidArgumentError("mix: need one coefficient index per input");
    for (const auto& x : xs)
        if (!(x->shape == xs[0]->shape)) shape_error("mix", xs[0]->shape, x->shape);
    std::vector<NodePtr> parents = xs;
    parents.push_back(coeffs);
    auto out = make_node(xs[0]->shape, "mix", std::move(parents));
    for (std::size_t t = 0; t < xs.size(); ++t) {
        double c = coeffs->value[coeff_idx[t]];
        const auto& xv = xs[t]->value;
        for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] += c * xv[i];
    }
    out->backward_fn = [xs, coeffs, coeff_idx](Node& self) {
        for (std::size_t t = 0; t < xs.size(); ++t) {
            double c = coeffs->value[coeff_idx[t]];
            if (xs[t]->requires_grad) {
                xs[t]->ensure_grad();
                auto& g = xs[t]->grad;
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
            }
            if (coeffs->requires_grad) {
                coeffs->ensure_grad();
                double dot = 0.0;
                const auto& xv = xs[t]->value;
                for (std::size_t i = 0; i < self.grad.size(); ++i) dot += xv[i] * self.grad[i];
                coeffs->grad[coeff_idx[t]] += dot;
            }
        }
    };
    return out;
}

// Like mix, but each input's coefficient may come from a different
// coefficient tensor (e.g. trellis transitions from different source groups).
struct MixTerm {
    NodePtr x;
    NodePtr coeffs;
    int idx;
};

inline NodePtr mix_terms(const std::vector<MixTerm>& terms) {
    if (terms.empty()) throw InvalidArgumentError("mix_terms: empty term list");
    for (const auto& t : terms)
        if (!(t.x->shape == terms[0].x->shape)) shape_error("mix_terms", terms[0].x->shape, t.x->shape);
    std::vector<NodePtr> parents;
    for (const auto& t : terms) {
        parents.push_back(t.x);
        parents.push_back(t.coeffs);
    }
    auto out = make_node(terms[0].x->shape, "mix_terms", std::move(parents));
    for (const auto& t : terms) {
        const double c = t.coeffs->value[t.idx];
        for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] += c * t.x->value[i];
    }
    auto terms_copy = std::make_shared<std::vector<MixTerm>>(terms);
    out->backward_fn = [terms_copy](Node& self) {
        for (const auto& t : *terms_copy) {
            const double c = t.coeffs->value[t.idx];
            if (t.x->requires_grad) {
                t.x->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) t.x->grad[i] += c * self.grad[i];
            }
            if (t.coeffs->requires_grad) {
                t.coeffs->ensure_grad();
                double dot = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    dot += t.x->value[i] * self.grad[i];
                t.coeffs->grad[t.idx] += dot;
            }
        }
    };
    return out;
}

inline NodePtr add_n(const std::vector<NodePtr>& xs) {
    if (xs.empty()) throw InvalidArgumentError("add_n: empty input list");
    for (const auto& x : xs)
        if (!(x->shape == xs[0]->shape)) shape_error("add_n", xs[0]->shape, x->shape);
    auto out = make_node(xs[0]->shape, "add_n", xs);
    for (const auto& x : xs)
        for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] += x->value[i];
    out->backward_fn = [xs](Node& self) {
        for (const auto& x : xs) {
            if (!x->requires_grad) continue;
            x->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// channel concat / slice
// ---------------------------------------------------------------------------

inline NodePtr concat_channels(const std::vector<NodePtr>& xs) {
    if (xs.empty()) throw InvalidArgumentError("concat_channels: empty input list");
    int c_total = 0;
    for (const auto& x : xs) {
        if (x->shape.n != xs[0]->shape.n || x->shape.h != xs[0]->shape.h ||
            x->shape.w != xs[0]->shape.w)
            shape_error("concat_channels", xs[0]->shape, x->shape);
        c_total += x->shape.c;
    }
    Shape4 sh{xs[0]->shape.n, c_total, xs[0]->shape.h, xs[0]->shape.w};
    auto out = make_node(sh, "concat", xs);
    const std::int64_t plane = static_cast<std::int64_t>(sh.h) * sh.w;
    for (int n = 0; n < sh.n; ++n) {
        std::int64_t off = static_cast<std::int64_t>(n) * c_total * plane;
        for (const auto& x : xs) {
            const std::int64_t sz = static_cast<std::int64_t>(x->shape.c) * plane;
            std::memcpy(out->value.data() + off,
                        x->value.data() + static_cast<std::int64_t>(n) * sz, sz * sizeof(double));
            off += sz;
        }
    }
    out->backward_fn = [xs, c_total, plane](Node& self) {
        for (int n = 0; n < self.shape.n; ++n) {
            std::int64_t off = static_cast<std::int64_t>(n) * c_total * plane;
            for (const auto& x : xs) {
                const std::int64_t sz = static_cast<std::int64_t>(x->shape.c) * plane;
                if (x->requires_grad) {
                    x->ensure_grad();
                    double* dst = x->grad.data() + static_cast<std::int64_t>(n) * sz;
                    const double* src = self.grad.data() + off;
                    for (std::int64_t i = 0; i < sz; ++i) dst[i] += src[i];
                }
                off += sz;
            }
        }
    };
    return out;
}

inline NodePtr slice_channels(const NodePtr& x, int c_begin, int c_end) {
    if (c_begin < 0 || c_end > x->shape.c || c_begin >= c_end)
        throw InvalidArgumentError("slice_channels: bad channel range");
    Shape4 sh{x->shape.n, c_end - c_begin, x->shape.h, x->shape.w};
    auto out = make_node(sh, "slice", {x});
    const std::int64_t plane = static_cast<std::int64_t>(sh.h) * sh.w;
    for (int n = 0; n < sh.n; ++n) {
        const double* src =
            x->value.data() + (static_cast<std::int64_t>(n) * x->shape.c + c_begin) * plane;
        double* dst = out->value.data() + static_cast<std::int64_t>(n) * sh.c * plane;
        std::memcpy(dst, src, static_cast<std::size_t>(sh.c) * plane * sizeof(double));
    }
    out->backward_fn = [x, c_begin, plane](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int n = 0; n < self.shape.n; ++n) {
            double* dst =
                x->grad.data() + (static_cast<std::int64_t>(n) * x->shape.c + c_begin) * plane;
            const double* src = self.grad.data() + static_cast<std::int64_t>(n) * self.shape.c * plane;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(self.shape.c) * plane; ++i)
                dst[i] += src[i];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

struct ConvGeom {
    int kh, kw, stride, dilation, pad_h, pad_w, h_out, w_out;
};

inline ConvGeom conv_geometry(const Shape4& x, const Shape4& w, int stride, int dilation) {
    ConvGeom g;
    g.kh = w.h;
    g.kw = w.w;
    g.stride = stride;
    g.dilation = dilation;
    g.pad_h = dilation * (g.kh - 1) / 2;
    g.pad_w = dilation * (g.kw - 1) / 2;
    g.h_out = (x.h + 2 * g.pad_h - dilation * (g.kh - 1) - 1) / stride + 1;
    g.w_out = (x.w + 2 * g.pad_w - dilation * (g.kw - 1) - 1) / stride + 1;
    return g;
}

// Fills col (cin_g*kh*kw) x (h_out*w_out), row-major, from one image's group
// slice starting at `src` with cin_g channel planes of size h*w.
inline void im2col(const double* src, int cin_g, int h, int w, const ConvGeom& g, double* col) {
    const int hw_out = g.h_out * g.w_out;
    double* row = col;
    for (int c = 0; c < cin_g; ++c) {
        const double* plane = src + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx, row += hw_out) {
                const int oy = ky * g.dilation - g.pad_h;
                const int ox = kx * g.dilation - g.pad_w;
                for (int y = 0; y < g.h_out; ++y) {
                    const int iy = y * g.stride + oy;
                    double* dst = row + y * g.w_out;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + g.w_out, 0.0);
                        continue;
                    }
                    const double* in_row = plane + static_cast<std::int64_t>(iy) * w;
                    for (int x = 0; x < g.w_out; ++x) {
                        const int ix = x * g.stride + ox;
                        dst[x] = (ix >= 0 && ix < w) ? in_row[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-add transpose of im2col.
inline void col2im(const double* col, int cin_g, int h, int w, const ConvGeom& g, double* dst) {
    const int hw_out = g.h_out * g.w_out;
    const double* row = col;
    for (int c = 0; c < cin_g; ++c) {
        double* plane = dst + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx, row += hw_out) {
                const int oy = ky * g.dilation - g.pad_h;
                const int ox = kx * g.dilation - g.pad_w;
                for (int y = 0; y < g.h_out; ++y) {
                    const int iy = y * g.stride + oy;
                    if (iy < 0 || iy >= h) continue;
                    const double* src_row = row + y * g.w_out;
                    double* out_row = plane + static_cast<std::int64_t>(iy) * w;
                    for (int x = 0; x < g.w_out; ++x) {
                        const int ix = x * g.stride + ox;
                        if (ix >= 0 && ix < w) out_row[ix] += src_row[x];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// conv2d with same-padding. weights shape (c_out, c_in/groups, kh, kw); bias
// optional with shape (1, c_out, 1, 1). Odd kernels only.
inline NodePtr conv2d(const NodePtr& x, const NodePtr& weights, const NodePtr& bias, int stride,
                      int dilation, int groups) {
    const Shape4& xs = x->shape;
    const Shape4& ws = weights->shape;
    if (stride != 1 && stride != 2) throw InvalidArgumentError("conv2d: stride must be 1 or 2");
    if (dilation < 1) throw InvalidArgumentError("conv2d: dilation must be >= 1");
    if (ws.h % 2 == 0 || ws.w % 2 == 0) throw InvalidArgumentError("conv2d: kernel must be odd");
    if (groups < 1 || xs.c % groups != 0 || ws.n % groups != 0 || ws.c != xs.c / groups)
        shape_error("conv2d", xs, ws);
    if (bias && (bias->shape.c != ws.n || bias->shape.numel() != ws.n))
        shape_error("conv2d(bias)", ws, bias->shape);

    const auto g = detail::conv_geometry(xs, ws, stride, dilation);
    const int c_out = ws.n, cin_g = ws.c, cout_g = c_out / groups;
    const int kk = cin_g * g.kh * g.kw;
    const int hw_out = g.h_out * g.w_out;
    Shape4 osh{xs.n, c_out, g.h_out, g.w_out};
    auto out = bias ? make_node(osh, "conv2d", {x, weights, bias})
                    : make_node(osh, "conv2d", {x, weights});

    const bool pointwise = (g.kh == 1 && g.kw == 1 && stride == 1);
    std::vector<double> col;
    if (!pointwise) col.resize(static_cast<std::size_t>(kk) * hw_out);
    const std::int64_t x_im = static_cast<std::int64_t>(xs.c) * xs.h * xs.w;
    const std::int64_t o_im = static_cast<std::int64_t>(c_out) * hw_out;
    for (int n = 0; n < xs.n; ++n) {
        for (int grp = 0; grp < groups; ++grp) {
            const double* src = x->value.data() + n * x_im +
                                static_cast<std::int64_t>(grp) * cin_g * xs.h * xs.w;
            const double* col_ptr = src;
            if (!pointwise) {
                detail::im2col(src, cin_g, xs.h, xs.w, g, col.data());
                col_ptr = col.data();
            }
            CMapRM W(weights->value.data() + static_cast<std::int64_t>(grp) * cout_g * kk, cout_g, kk);
            CMapRM C(col_ptr, kk, hw_out);
            MapRM O(out->value.data() + n * o_im + static_cast<std::int64_t>(grp) * cout_g * hw_out,
                    cout_g, hw_out);
            O.noalias() = W * C;
        }
        if (bias) {
            double* o = out->value.data() + n * o_im;
            for (int c = 0; c < c_out; ++c) {
                const double b = bias->value[c];
                for (int i = 0; i < hw_out; ++i) o[static_cast<std::int64_t>(c) * hw_out + i] += b;
            }
        }
    }

    out->backward_fn = [x, weights, bias, g, groups, cin_g, cout_g, kk, hw_out, pointwise, x_im,
                        o_im](Node& self) {
        const Shape4& xs = x->shape;
        std::vector<double> col, col_grad;
        if (!pointwise) col.resize(static_cast<std::size_t>(kk) * hw_out);
        if (x->requires_grad && !pointwise) col_grad.resize(static_cast<std::size_t>(kk) * hw_out);
        if (x->requires_grad) x->ensure_grad();
        if (weights->requires_grad) weights->ensure_grad();
        if (bias && bias->requires_grad) bias->ensure_grad();
        const int c_out = self.shape.c;
        for (int n = 0; n < xs.n; ++n) {
            for (int grp = 0; grp < groups; ++grp) {
                CMapRM dY(self.grad.data() + n * o_im +
                              static_cast<std::int64_t>(grp) * cout_g * hw_out,
                          cout_g, hw_out);
                const double* src = x->value.data() + n * x_im +
                                    static_cast<std::int64_t>(grp) * cin_g * xs.h * xs.w;
                if (weights->requires_grad) {
                    const double* col_ptr = src;
                    if (!pointwise) {
                        detail::im2col(src, cin_g, xs.h, xs.w, g, col.data());
                        col_ptr = col.data();
                    }
                    CMapRM C(col_ptr, kk, hw_out);
                    MapRM dW(weights->grad.data() + static_cast<std::int64_t>(grp) * cout_g * kk,
                             cout_g, kk);
                    dW.noalias() += dY * C.transpose();
                }
                if (x->requires_grad) {
                    CMapRM W(weights->value.data() + static_cast<std::int64_t>(grp) * cout_g * kk,
                             cout_g, kk);
                    double* dx = x->grad.data() + n * x_im +
                                 static_cast<std::int64_t>(grp) * cin_g * xs.h * xs.w;
                    if (pointwise) {
                        MapRM dX(dx, kk, hw_out);
                        dX.noalias() += W.transpose() * dY;
                    } else {
                        MapRM dC(col_grad.data(), kk, hw_out);
                        dC.noalias() = W.transpose() * dY;
                        detail::col2im(col_grad.data(), cin_g, xs.h, xs.w, g, dx);
                    }
                }
            }
            if (bias && bias->requires_grad) {
                const double* gsrc = self.grad.data() + n * o_im;
                for (int c = 0; c < c_out; ++c) {
                    double acc = 0.0;
                    for (int i = 0; i < hw_out; ++i)
                        acc += gsrc[static_cast<std::int64_t>(c) * hw_out + i];
                    bias->grad[c] += acc;
                }
            }
        }
    };
    return out;
}

// Depthwise k x k (dilated) followed by pointwise 1x1. dw shape
// (c_in, 1, k, k); pw shape (c_out, c_in, 1, 1).
inline NodePtr separable_conv(const NodePtr& x, const NodePtr& dw, const NodePtr& pw,
                              const NodePtr& bias, int stride, int dilation) {
    auto depth = conv2d(x, dw, nullptr, stride, dilation, x->shape.c);
    return conv2d(depth, pw, bias, 1, 1, 1);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

inline NodePtr avg_pool_3x3(const NodePtr& x) {
    // window 3, stride 1, same-padding; divisor fixed at 9.
    auto out = make_node(x->shape, "avg_pool_3x3", {x});
    const int h = x->shape.h, w = x->shape.w;
    const std::int64_t planes = static_cast<std::int64_t>(x->shape.n) * x->shape.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* in = x->value.data() + p * h * w;
        double* o = out->value.data() + p * h * w;
        for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < w; ++xw) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int iy = y + dy, ix = xw + dx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) acc += in[iy * w + ix];
                    }
                o[y * w + xw] = acc / 9.0;
            }
    }
    out->backward_fn = [x, h, w, planes](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + p * h * w;
            double* dx = x->grad.data() + p * h * w;
            for (int y = 0; y < h; ++y)
                for (int xw = 0; xw < w; ++xw) {
                    const double gv = g[y * w + xw] / 9.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx2 = -1; dx2 <= 1; ++dx2) {
                            int iy = y + dy, ix = xw + dx2;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) dx[iy * w + ix] += gv;
                        }
                }
        }
    };
    return out;
}

inline NodePtr max_pool_3x3(const NodePtr& x) {
    // window 3, stride 1, same-padding; gradient routes to the first maximal
    // element (row-major scan order) on ties.
    auto out = make_node(x->shape, "max_pool_3x3", {x});
    const int h = x->shape.h, w = x->shape.w;
    const std::int64_t planes = static_cast<std::int64_t>(x->shape.n) * x->shape.c;
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out->value.size());
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* in = x->value.data() + p * h * w;
        double* o = out->value.data() + p * h * w;
        std::int32_t* am = argmax->data() + p * h * w;
        for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < w; ++xw) {
                double best = -std::numeric_limits<double>::infinity();
                int best_idx = -1;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int iy = y + dy, ix = xw + dx;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                        if (in[iy * w + ix] > best) {
                            best = in[iy * w + ix];
                            best_idx = iy * w + ix;
                        }
                    }
                o[y * w + xw] = best;
                am[y * w + xw] = best_idx;
            }
    }
    out->backward_fn = [x, argmax, h, w, planes](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + p * h * w;
            const std::int32_t* am = argmax->data() + p * h * w;
            double* dx = x->grad.data() + p * h * w;
            for (int i = 0; i < h * w; ++i) dx[am[i]] += g[i];
        }
    };
    return out;
}

inline NodePtr global_avg_pool(const NodePtr& x) {
    Shape4 sh{x->shape.n, x->shape.c, 1, 1};
    auto out = make_node(sh, "global_avg_pool", {x});
    const std::int64_t hw = static_cast<std::int64_t>(x->shape.h) * x->shape.w;
    const std::int64_t planes = static_cast<std::int64_t>(x->shape.n) * x->shape.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        const double* in = x->value.data() + p * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += in[i];
        out->value[p] = acc / static_cast<double>(hw);
    }
    out->backward_fn = [x, hw, planes](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t p = 0; p < planes; ++p) {
            const double gv = self.grad[p] / static_cast<double>(hw);
            double* dx = x->grad.data() + p * hw;
            for (std::int64_t i = 0; i < hw; ++i) dx[i] += gv;
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

inline NodePtr bilinear_resize(const NodePtr& x, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1)
        throw InvalidArgumentError("bilinear_resize: target size must be positive");
    Shape4 sh{x->shape.n, x->shape.c, target_h, target_w};
    auto out = make_node(sh, "bilinear_resize", {x});
    const int h = x->shape.h, w = x->shape.w;
    // Half-pixel-center sampling with edge clamping: constants are preserved.
    struct Tap {
        int i0, i1;
        double w0, w1;
    };
    auto taps_for = [](int n_in, int n_out) {
        std::vector<Tap> taps(n_out);
        for (int i = 0; i < n_out; ++i) {
            double src = (i + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
            int i0 = static_cast<int>(std::floor(src));
            double frac = src - i0;
            int j0 = std::clamp(i0, 0, n_in - 1);
            int j1 = std::clamp(i0 + 1, 0, n_in - 1);
            taps[i] = {j0, j1, 1.0 - frac, frac};
        }
        return taps;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps_for(h, target_h));
    auto tx = std::make_shared<std::vector<Tap>>(taps_for(w, target_w));
    const std::int64_t planes = static_cast<std::int64_t>(x->shape.n) * x->shape.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* in = x->value.data() + p * h * w;
        double* o = out->value.data() + static_cast<std::int64_t>(p) * target_h * target_w;
        for (int y = 0; y < target_h; ++y) {
            const Tap& a = (*ty)[y];
            for (int xw = 0; xw < target_w; ++xw) {
                const Tap& b = (*tx)[xw];
                o[y * target_w + xw] = a.w0 * (b.w0 * in[a.i0 * w + b.i0] + b.w1 * in[a.i0 * w + b.i1]) +
                                       a.w1 * (b.w0 * in[a.i1 * w + b.i0] + b.w1 * in[a.i1 * w + b.i1]);
            }
        }
    }
    out->backward_fn = [x, ty, tx, h, w, target_h, target_w, planes](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(p) * target_h * target_w;
            double* dx = x->grad.data() + p * h * w;
            for (int y = 0; y < target_h; ++y) {
                const auto& a = (*ty)[y];
                for (int xw = 0; xw < target_w; ++xw) {
                    const auto& b = (*tx)[xw];
                    const double gv = g[y * target_w + xw];
                    dx[a.i0 * w + b.i0] += a.w0 * b.w0 * gv;
                    dx[a.i0 * w + b.i1] += a.w0 * b.w1 * gv;
                    dx[a.i1 * w + b.i0] += a.w1 * b.w0 * gv;
                    dx[a.i1 * w + b.i1] += a.w1 * b.w1 * gv;
                }
            }
        }
    };
    return out;
}

inline NodePtr bilinear_upsample_x2(const NodePtr& x) {
    return bilinear_resize(x, x->shape.h * 2, x->shape.w * 2);
}

// ---------------------------------------------------------------------------
// batch normalization (current-minibatch statistics)
// ---------------------------------------------------------------------------

inline NodePtr batch_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                          double eps = 1e-5) {
    if (gamma->shape.numel() != x->shape.c || beta->shape.numel() != x->shape.c)
        shape_error("batch_norm", x->shape, gamma->shape);
    auto out = make_node(x->shape, "batch_norm", {x, gamma, beta});
    const int c = x->shape.c;
    const std::int64_t hw = static_cast<std::int64_t>(x->shape.h) * x->shape.w;
    const std::int64_t m = static_cast<std::int64_t>(x->shape.n) * hw;
    auto xhat = std::make_shared<std::vector<double>>(x->value.size());
    auto invstd = std::make_shared<std::vector<double>>(c);
    for (int ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (int n = 0; n < x->shape.n; ++n) {
            const double* in = x->value.data() + (static_cast<std::int64_t>(n) * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) mean += in[i];
        }
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (int n = 0; n < x->shape.n; ++n) {
            const double* in = x->value.data() + (static_cast<std::int64_t>(n) * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = in[i] - mean;
                var += d * d;
            }
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[ch] = is;
        const double gm = gamma->value[ch], bt = beta->value[ch];
        for (int n = 0; n < x->shape.n; ++n) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * c + ch) * hw;
            const double* in = x->value.data() + off;
            double* xh = xhat->data() + off;
            double* o = out->value.data() + off;
            for (std::int64_t i = 0; i < hw; ++i) {
                xh[i] = (in[i] - mean) * is;
                o[i] = gm * xh[i] + bt;
            }
        }
    }
    out->backward_fn = [x, gamma, beta, xhat, invstd, c, hw, m](Node& self) {
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < x->shape.n; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * c + ch) * hw;
                const double* g = self.grad.data() + off;
                const double* xh = xhat->data() + off;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
            }
            if (beta->requires_grad) beta->grad[ch] += sum_g;
            if (gamma->requires_grad) gamma->grad[ch] += sum_gx;
            if (x->requires_grad) {
                const double scale = gamma->value[ch] * (*invstd)[ch];
                const double mg = sum_g / static_cast<double>(m);
                const double mgx = sum_gx / static_cast<double>(m);
                for (int n = 0; n < x->shape.n; ++n) {
                    const std::int64_t off = (static_cast<std::int64_t>(n) * c + ch) * hw;
                    const double* g = self.grad.data() + off;
                    const double* xh = xhat->data() + off;
                    double* dx = x->grad.data() + off;
                    for (std::int64_t i = 0; i < hw; ++i)
                        dx[i] += scale * (g[i] - mg - xh[i] * mgx);
                }
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// softmax and losses
// ---------------------------------------------------------------------------

// Softmax over a flat logits tensor with an optional feasibility mask; masked
// entries are exactly 0 in the output and receive no gradient.
inline NodePtr masked_softmax_vec(const NodePtr& logits, const std::vector<bool>& mask) {
    const std::size_t k = logits->value.size();
    if (mask.size() != k)
        throw InvalidArgumentError("masked_softmax_vec: mask size mismatch");
    bool any = false;
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
        if (!std::isfinite(logits->value[i]) && mask[i])
            throw NumericError("masked_softmax_vec: non-finite logit");
        if (mask[i]) {
            any = true;
            max_v = std::max(max_v, logits->value[i]);
        }
    }
    if (!any) throw InvalidArgumentError("masked_softmax_vec: all entries masked");
    auto out = make_node(logits->shape, "softmax_vec", {logits});
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (mask[i]) z += std::exp(logits->value[i] - max_v);
    for (std::size_t i = 0; i < k; ++i)
        out->value[i] = mask[i] ? std::exp(logits->value[i] - max_v) / z : 0.0;
    out->backward_fn = [logits, mask, k](Node& self) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        double dot = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            if (mask[i]) dot += self.grad[i] * self.value[i];
        for (std::size_t i = 0; i < k; ++i)
            if (mask[i]) logits->grad[i] += self.value[i] * (self.grad[i] - dot);
    };
    return out;
}

inline NodePtr softmax_vec(const NodePtr& logits) {
    return masked_softmax_vec(logits, std::vector<bool>(logits->value.size(), true));
}

inline NodePtr softmax_over_channel(const NodePtr& x) {
    auto out = make_node(x->shape, "softmax_channel", {x});
    const int c = x->shape.c;
    const std::int64_t hw = static_cast<std::int64_t>(x->shape.h) * x->shape.w;
    for (int n = 0; n < x->shape.n; ++n) {
        const double* in = x->value.data() + static_cast<std::int64_t>(n) * c * hw;
        double* o = out->value.data() + static_cast<std::int64_t>(n) * c * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int ch = 0; ch < c; ++ch) mx = std::max(mx, in[ch * hw + i]);
            double z = 0.0;
            for (int ch = 0; ch < c; ++ch) z += std::exp(in[ch * hw + i] - mx);
            for (int ch = 0; ch < c; ++ch) o[ch * hw + i] = std::exp(in[ch * hw + i] - mx) / z;
        }
    }
    out->backward_fn = [x, c, hw](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int n = 0; n < x->shape.n; ++n) {
            const double* p = self.value.data() + static_cast<std::int64_t>(n) * c * hw;
            const double* g = self.grad.data() + static_cast<std::int64_t>(n) * c * hw;
            double* dx = x->grad.data() + static_cast<std::int64_t>(n) * c * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double dot = 0.0;
                for (int ch = 0; ch < c; ++ch) dot += g[ch * hw + i] * p[ch * hw + i];
                for (int ch = 0; ch < c; ++ch)
                    dx[ch * hw + i] += p[ch * hw + i] * (g[ch * hw + i] - dot);
            }
        }
    };
    return out;
}

// Integer label map companion to Tensor4 logits.
struct LabelMap {
    int n = 0, h = 0, w = 0;
    std::vector<int> v;

    std::int64_t numel() const { return static_cast<std::int64_t>(n) * h * w; }
};

// Mean pixel cross entropy over non-ignored pixels.
inline NodePtr cross_entropy_spatial(const NodePtr& logits, const LabelMap& labels,
                                     int ignore_index = -1) {
    if (logits->shape.n != labels.n || logits->shape.h != labels.h || logits->shape.w != labels.w)
        throw ShapeError("cross_entropy_spatial: logits " + logits->shape.str() + " vs labels (" +
                         std::to_string(labels.n) + "," + std::to_string(labels.h) + "," +
                         std::to_string(labels.w) + ")");
    const int c = logits->shape.c;
    const std::int64_t hw = static_cast<std::int64_t>(labels.h) * labels.w;
    auto out = make_node({1, 1, 1, 1}, "cross_entropy", {logits});
    auto probs = std::make_shared<std::vector<double>>(logits->value.size());
    std::int64_t count = 0;
    double loss = 0.0;
    for (int n = 0; n < labels.n; ++n) {
        const double* in = logits->value.data() + static_cast<std::int64_t>(n) * c * hw;
        double* p = probs->data() + static_cast<std::int64_t>(n) * c * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int ch = 0; ch < c; ++ch) mx = std::max(mx, in[ch * hw + i]);
            double z = 0.0;
            for (int ch = 0; ch < c; ++ch) z += std::exp(in[ch * hw + i] - mx);
            for (int ch = 0; ch < c; ++ch) p[ch * hw + i] = std::exp(in[ch * hw + i] - mx) / z;
            const int lbl = labels.v[n * hw + i];
            if (lbl == ignore_index) continue;
            if (lbl < 0 || lbl >= c)
                throw InvalidArgumentError("cross_entropy_spatial: label out of range");
            loss -= (in[lbl * hw + i] - mx) - std::log(z);
            ++count;
        }
    }
    if (count == 0) throw InvalidArgumentError("cross_entropy_spatial: all pixels ignored");
    out->value[0] = loss / static_cast<double>(count);
    auto labels_copy = std::make_shared<LabelMap>(labels);
    out->backward_fn = [logits, probs, labels_copy, c, hw, count, ignore_index](Node& self) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double scale = self.grad[0] / static_cast<double>(count);
        for (int n = 0; n < labels_copy->n; ++n) {
            const double* p = probs->data() + static_cast<std::int64_t>(n) * c * hw;
            double* dx = logits->grad.data() + static_cast<std::int64_t>(n) * c * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const int lbl = labels_copy->v[n * hw + i];
                if (lbl == ignore_index) continue;
                for (int ch = 0; ch < c; ++ch) dx[ch * hw + i] += scale * p[ch * hw + i];
                dx[lbl * hw + i] -= scale;
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

class ParamStore {
  public:
    NodePtr create(const std::string& name, Shape4 shape) {
        if (params_.count(name)) throw InvalidArgumentError("ParamStore: duplicate name " + name);
        auto p = make_leaf(shape, true);
        p->tag = "param";
        params_[name] = p;
        return p;
    }

    NodePtr get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw InvalidArgumentError("ParamStore: unknown name " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, NodePtr>& all() const { return params_; }

    std::size_t total_elements() const {
        std::size_t total = 0;
        for (const auto& [name, p] : params_) total += p->value.size();
        return total;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p->zero_grad();
    }

    std::vector<double>& state(const std::string& key, std::size_t size) {
        auto& s = state_[key];
        if (s.size() != size) s.assign(size, 0.0);
        return s;
    }

    // Checkpoint: u64 little-endian header length, JSON header mapping names
    // to offsets (in doubles) and shapes, then the packed values.
    void save(const std::string& path) const {
        nlohmann::ordered_json header;
        std::uint64_t offset = 0;
        for (const auto& [name, p] : params_) {
            header[name] = {{"offset", offset},
                            {"shape", {p->shape.n, p->shape.c, p->shape.h, p->shape.w}}};
            offset += p->value.size();
        }
        const std::string hs = header.dump();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write checkpoint: " + path);
        std::uint64_t hlen = hs.size();
        f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, p] : params_)
            f.write(reinterpret_cast<const char*>(p->value.data()),
                    static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!f) throw IoError("checkpoint write failed: " + path);
    }

    // Loads values into already-created parameters; shapes must match.
    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read checkpoint: " + path);
        std::uint64_t hlen = 0;
        f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
        std::string hs(hlen, '\0');
        f.read(hs.data(), static_cast<std::streamsize>(hlen));
        nlohmann::json header = nlohmann::json::parse(hs);
        const std::streampos payload = f.tellg();
        for (auto it = header.begin(); it != header.end(); ++it) {
            if (!params_.count(it.key()))
                throw ValidationError("checkpoint has unknown parameter " + it.key());
            auto p = params_[it.key()];
            auto sh = it.value()["shape"].get<std::vector<int>>();
            if (!(Shape4{sh[0], sh[1], sh[2], sh[3]} == p->shape))
                throw ValidationError("checkpoint shape mismatch for " + it.key());
            std::uint64_t off = it.value()["offset"].get<std::uint64_t>();
            f.seekg(payload + static_cast<std::streamoff>(off * sizeof(double)));
            f.read(reinterpret_cast<char*>(p->value.data()),
                   static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        }
        if (!f) throw IoError("checkpoint read failed: " + path);
    }

  private:
    std::map<std::string, NodePtr> params_;
    std::map<std::string, std::vector<double>> state_;
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

inline double global_grad_norm(const std::vector<NodePtr>& params) {
    double acc = 0.0;
    for (const auto& p : params) {
        if (p->grad.empty()) continue;
        for (double g : p->grad) acc += g * g;
    }
    return std::sqrt(acc);
}

inline void clip_grad_norm(const std::vector<NodePtr>& params, double max_norm) {
    double norm = global_grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const double scale = max_norm / norm;
    for (const auto& p : params)
        for (double& g : p->grad) g *= scale;
}

// Momentum SGD with loss-coupled L2 weight decay.
class SgdMomentum {
  public:
    SgdMomentum(ParamStore& store, std::vector<std::string> names, double momentum,
                double weight_decay)
        : store_(store), names_(std::move(names)), momentum_(momentum), wd_(weight_decay) {}

    void step(double lr) {
        for (const auto& name : names_) {
            auto p = store_.get(name);
            p->ensure_grad();
            auto& buf = store_.state("sgd_m." + name, p->value.size());
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i] + wd_ * p->value[i];
                buf[i] = momentum_ * buf[i] + g;
                p->value[i] -= lr * buf[i];
            }
        }
    }

  private:
    ParamStore& store_;
    std::vector<std::string> names_;
    double momentum_, wd_;
};

// Adam with decoupled weight decay.
class Adam {
  public:
    Adam(ParamStore& store, std::vector<std::string> names, double lr, double weight_decay,
         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : store_(store), names_(std::move(names)), lr_(lr), wd_(weight_decay), b1_(beta1),
          b2_(beta2), eps_(eps) {}

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (const auto& name : names_) {
            auto p = store_.get(name);
            p->ensure_grad();
            auto& m = store_.state("adam_m." + name, p->value.size());
            auto& v = store_.state("adam_v." + name, p->value.size());
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i];
                m[i] = b1_ * m[i] + (1.0 - b1_) * g;
                v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
                p->value[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
                p->value[i] -= lr_ * wd_ * p->value[i];
            }
        }
    }

  private:
    ParamStore& store_;
    std::vector<std::string> names_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string param;
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped_nondifferentiable = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;

    bool passed() const {
        for (const auto& e : entries)
            if (e.max_rel_error > tolerance) return false;
        return true;
    }
    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
};

// Central finite differences against backward(). `build` must be a pure
// function of the current parameter values. `stride` > 1 samples every
// stride-th coordinate (deterministic subsampling for large parameters).
inline GradCheckReport gradient_check(const std::function<NodePtr()>& build,
                                      const std::vector<std::pair<std::string, NodePtr>>& params,
                                      double h = 1e-4, double tolerance = 1e-4, int stride = 1) {
    if (h <= 0.0) throw InvalidArgumentError("gradient_check: h must be positive");
    GradCheckReport report;
    report.tolerance = tolerance;
    for (const auto& [name, p] : params) {
        p->ensure_grad();
        p->zero_grad();
    }
    auto loss = build();
    backward(loss);
    std::map<std::string, std::vector<double>> analytic;
    for (const auto& [name, p] : params) {
        p->ensure_grad();
        analytic[name] = p->grad;
    }
    for (const auto& [name, p] : params) {
        GradCheckEntry entry;
        entry.param = name;
        for (std::size_t i = 0; i < p->value.size(); i += static_cast<std::size_t>(stride)) {
            const double orig = p->value[i];
            auto eval = [&](double v) {
                p->value[i] = v;
                double out = build()->value[0];
                p->value[i] = orig;
                return out;
            };
            const double f0 = eval(orig);
            const double fp = eval(orig + h), fm = eval(orig - h);
            const double fd = (fp - fm) / (2.0 * h);
            // Kink detector: one-sided slopes disagree at a nondifferentiable
            // point (e.g. a max-pool tie).
            const double slope_fwd = (fp - f0) / h;
            const double slope_bwd = (f0 - fm) / h;
            const double scale = std::max({std::abs(slope_fwd), std::abs(slope_bwd), 1.0});
            const double an = analytic[name][i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            // Stencil-consistency probe: for smooth f the central estimates at
            // h and h/2 agree to within the truncation error itself, while a
            // kink inside the stencil (e.g. a relu or max-pool boundary within
            // +/-h of the point) shifts them against each other at the error
            // scale. Neither test consults the analytic gradient, so flagging
            // cannot mask a backward bug.
            const double fd_half =
                (eval(orig + 0.5 * h) - eval(orig - 0.5 * h)) / h;
            if (std::abs(slope_fwd - slope_bwd) > 1000.0 * tolerance * scale ||
                std::abs(fd - fd_half) > 0.5 * tolerance * denom) {
                ++entry.skipped_nondifferentiable;
                continue;
            }
            entry.max_rel_error = std::max(entry.max_rel_error, std::abs(fd - an) / denom);
            ++entry.checked;
        }
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace hiernas::mt
