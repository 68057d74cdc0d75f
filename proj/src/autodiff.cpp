#include "codesign/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace codesign::ad {

namespace detail {

// Fixed alignment keeps Eigen's vectorized loops peeling identically on every
// run, so results do not depend on where the allocator placed a buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
    bool nonsmooth = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

using detail::Buffer;
using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail), op_(op) {}

struct OpBuilder {
    static Tensor make(const char* op, Shape shape, Buffer value,
                       std::vector<Tensor> inputs, std::function<void(Node&)> bw,
                       bool local_nonsmooth = false) {
        auto node = std::make_shared<Node>();
        node->op = op;
        node->shape = std::move(shape);
        node->value = std::move(value);
        node->nonsmooth = local_nonsmooth;
        bool needs_grad = false;
        for (const auto& in : inputs) {
            needs_grad = needs_grad || in.node_->requires_grad;
            node->nonsmooth = node->nonsmooth || in.node_->nonsmooth;
        }
        if (needs_grad) {
            node->requires_grad = true;
            for (auto& in : inputs) node->inputs.push_back(in.node_);
            node->backward = std::move(bw);
        }
        return Tensor(std::move(node));
    }

    static Tensor leaf(Shape shape, Buffer value, bool requires_grad) {
        if (value.size() != numel(shape)) {
            throw ShapeError("tensor", "value count " + std::to_string(value.size()) +
                                           " does not match shape " + to_string(shape));
        }
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }
};

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return OpBuilder::leaf(std::move(shape), Buffer(values.begin(), values.end()), false);
}

Tensor Tensor::constant(Shape shape, double fill) {
    const auto n = ad::numel(shape);
    return OpBuilder::leaf(std::move(shape), Buffer(n, fill), false);
}

Tensor Tensor::scalar(double value) { return OpBuilder::leaf(Shape{1}, Buffer{value}, false); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return OpBuilder::leaf(std::move(shape), Buffer(values.begin(), values.end()), true);
}

namespace {
const Node& checked(const std::shared_ptr<Node>& n) {
    if (!n) throw std::logic_error("use of undefined tensor");
    return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }
std::size_t Tensor::numel() const { return checked(node_).value.size(); }
std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("dim", "axis out of range");
    return s[axis];
}
bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
std::span<const double> Tensor::values() const { return checked(node_).value; }

std::span<double> Tensor::mutable_values() {
    checked(node_);
    if (!node_->inputs.empty() || node_->backward) {
        throw std::logic_error("mutable_values: only leaf tensors may be modified");
    }
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item", "tensor is not a scalar " + to_string(shape()));
    return node_->value[0];
}

bool Tensor::has_grad() const { return checked(node_).grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("grad: gradient not populated");
    return node_->grad;
}

void Tensor::zero_grad() {
    checked(node_);
    node_->grad.assign(node_->value.size(), 0.0);
}

bool Tensor::nonsmooth() const { return checked(node_).nonsmooth; }
const char* Tensor::op() const { return checked(node_).op; }

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

enum class BroadcastKind { Same, AScalar, BScalar, General };

struct Broadcast {
    BroadcastKind kind = BroadcastKind::Same;
    Shape out;
    std::vector<std::size_t> ia, ib;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        return bc;
    }
    if (numel(b) == 1 && numel(a) >= 1) {
        bc.kind = BroadcastKind::BScalar;
        bc.out = a.size() >= b.size() ? a : b;
        return bc;
    }
    if (numel(a) == 1) {
        bc.kind = BroadcastKind::AScalar;
        bc.out = b.size() >= a.size() ? b : a;
        return bc;
    }
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] == pb[i] || pb[i] == 1) {
            out[i] = pa[i];
        } else if (pa[i] == 1) {
            out[i] = pb[i];
        } else {
            throw ShapeError(op, "cannot broadcast " + to_string(a) + " with " + to_string(b));
        }
    }
    bc.kind = BroadcastKind::General;
    bc.out = out;
    const std::size_t n = numel(out);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> sa(r), sb(r);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = r; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : acc_a;
        sb[i] = pb[i] == 1 ? 0 : acc_b;
        acc_a *= pa[i];
        acc_b *= pb[i];
    }
    std::vector<std::size_t> idx(r, 0);
    std::size_t off_a = 0, off_b = 0;
    for (std::size_t k = 0; k < n; ++k) {
        bc.ia[k] = off_a;
        bc.ib[k] = off_b;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            off_a += sa[d];
            off_b += sb[d];
            if (idx[d] < out[d]) break;
            off_a -= sa[d] * out[d];
            off_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    return bc;
}

inline std::size_t index_a(const Broadcast& bc, std::size_t k) {
    switch (bc.kind) {
        case BroadcastKind::Same:
        case BroadcastKind::BScalar: return k;
        case BroadcastKind::AScalar: return 0;
        default: return bc.ia[k];
    }
}

inline std::size_t index_b(const Broadcast& bc, std::size_t k) {
    switch (bc.kind) {
        case BroadcastKind::Same:
        case BroadcastKind::AScalar: return k;
        case BroadcastKind::BScalar: return 0;
        default: return bc.ib[k];
    }
}

// f(a, b) -> value; da(a, b, out) and db(a, b, out) are local partials.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    auto bc = std::make_shared<Broadcast>(broadcast(op, a.shape(), b.shape()));
    const std::size_t n = numel(bc->out);
    const auto av = a.values();
    const auto bv = b.values();
    Buffer out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[index_a(*bc, k)], bv[index_b(*bc, k)]);
    Node* na = a.node();
    Node* nb = b.node();
    return OpBuilder::make(op, bc->out, std::move(out), {a, b}, [na, nb, bc, da, db](Node& self) {
        const std::size_t n = self.value.size();
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = index_a(*bc, k), j = index_b(*bc, k);
                na->grad[i] += self.grad[k] * da(na->value[i], nb->value[j], self.value[k]);
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = index_a(*bc, k), j = index_b(*bc, k);
                nb->grad[j] += self.grad[k] * db(na->value[i], nb->value[j], self.value[k]);
            }
        }
    });
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df, bool nonsmooth = false) {
    const auto xv = x.values();
    Buffer out(xv.size());
    for (std::size_t k = 0; k < xv.size(); ++k) out[k] = f(xv[k]);
    Node* nx = x.node();
    return OpBuilder::make(op, x.shape(), std::move(out), {x}, [nx, df](Node& self) {
        nx->ensure_grad();
        for (std::size_t k = 0; k < self.value.size(); ++k) {
            nx->grad[k] += self.grad[k] * df(nx->value[k], self.value[k]);
        }
    }, nonsmooth);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double d : b.values()) {
        if (d == 0.0) throw std::domain_error("div: zero denominator");
    }
    return binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double c) {
    return unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul", "incompatible shapes " + to_string(a.shape()) + " and " +
                                       to_string(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    Buffer out(static_cast<std::size_t>(m * n));
    MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
    Node* na = a.node();
    Node* nb = b.node();
    return OpBuilder::make("matmul", Shape{a.dim(0), b.dim(1)}, std::move(out), {a, b},
                           [na, nb, m, k, n](Node& self) {
                               ConstMap g(self.grad.data(), m, n);
                               if (na->requires_grad) {
                                   na->ensure_grad();
                                   MutMap(na->grad.data(), m, k).noalias() +=
                                       g * ConstMap(nb->value.data(), k, n).transpose();
                               }
                               if (nb->requires_grad) {
                                   nb->ensure_grad();
                                   MutMap(nb->grad.data(), k, n).noalias() +=
                                       ConstMap(na->value.data(), m, k).transpose() * g;
                               }
                           });
}

namespace {

struct ConvGeometry {
    std::size_t batch, channels, height, width, out_channels, kernel, stride, pad, out_h, out_w;
    std::size_t col_rows() const { return channels * kernel * kernel; }
    std::size_t col_cols() const { return out_h * out_w; }
};

void im2col(const ConvGeometry& g, const double* x, double* col, std::size_t ld) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ld;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 &&
                                            iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        row[oy * g.out_w + ox] =
                            inside ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                       static_cast<std::size_t>(ix)]
                                   : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* col, double* x, std::size_t ld) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ld;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                          static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
    if (x.rank() != 4 || weight.rank() != 4) {
        throw ShapeError("conv2d", "expected (B,C,H,W) input and (O,C,k,k) weight, got " +
                                       to_string(x.shape()) + " and " + to_string(weight.shape()));
    }
    if (weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
        throw ShapeError("conv2d", "weight " + to_string(weight.shape()) +
                                       " incompatible with input " + to_string(x.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
        throw ShapeError("conv2d", "bias shape " + to_string(bias.shape()));
    }
    ConvGeometry g{};
    g.batch = x.dim(0);
    g.channels = x.dim(1);
    g.height = x.dim(2);
    g.width = x.dim(3);
    g.out_channels = weight.dim(0);
    g.kernel = weight.dim(2);
    g.stride = stride;
    g.pad = g.kernel / 2;
    if (g.height + 2 * g.pad < g.kernel || g.width + 2 * g.pad < g.kernel) {
        throw ShapeError("conv2d", "input smaller than kernel");
    }
    g.out_h = (g.height + 2 * g.pad - g.kernel) / stride + 1;
    g.out_w = (g.width + 2 * g.pad - g.kernel) / stride + 1;

    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    const auto cols = static_cast<Eigen::Index>(g.col_cols());
    const auto oc = static_cast<Eigen::Index>(g.out_channels);
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = g.out_channels * g.col_cols();

    const std::size_t hw = g.col_cols();
    Buffer out(g.batch * out_stride);
    Buffer col(g.col_rows() * hw);
    ConstMap w(weight.values().data(), oc, rows);
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.values().data() + b * in_stride, col.data(), hw);
        MutMap o(out.data() + b * out_stride, oc, cols);
        o.noalias() = w * ConstMap(col.data(), rows, cols);
        if (bias.defined()) {
            for (Eigen::Index c = 0; c < oc; ++c) o.row(c).array() += bias.values()[static_cast<std::size_t>(c)];
        }
    }

    Node* nx = x.node();
    Node* nw = weight.node();
    Node* nbias = bias.defined() ? bias.node() : nullptr;
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return OpBuilder::make(
        "conv2d", Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), inputs,
        [nx, nw, nbias, g, rows, cols, oc, in_stride, out_stride, hw](Node& self) {
            Buffer col(g.col_rows() * hw);
            Buffer dcol;
            ConstMap w(nw->value.data(), oc, rows);
            if (nw->requires_grad) nw->ensure_grad();
            if (nbias && nbias->requires_grad) nbias->ensure_grad();
            if (nx->requires_grad) {
                nx->ensure_grad();
                dcol.resize(col.size());
            }
            for (std::size_t b = 0; b < g.batch; ++b) {
                ConstMap go(self.grad.data() + b * out_stride, oc, cols);
                if (nw->requires_grad) {
                    im2col(g, nx->value.data() + b * in_stride, col.data(), hw);
                    MutMap(nw->grad.data(), oc, rows).noalias() += go * ConstMap(col.data(), rows, cols).transpose();
                }
                if (nbias && nbias->requires_grad) {
                    for (Eigen::Index c = 0; c < oc; ++c) {
                        nbias->grad[static_cast<std::size_t>(c)] += go.row(c).sum();
                    }
                }
                if (nx->requires_grad) {
                    MutMap(dcol.data(), rows, cols).noalias() = w.transpose() * go;
                    col2im_add(g, dcol.data(), nx->grad.data() + b * in_stride, hw);
                }
            }
        });
}

Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample2x", "expected (B,C,H,W), got " + to_string(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Buffer out(planes * 4 * h * w);
    const auto xv = x.values();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Node* nx = x.node();
    return OpBuilder::make("upsample2x", Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                           [nx, planes, h, w](Node& self) {
                               nx->ensure_grad();
                               for (std::size_t p = 0; p < planes; ++p) {
                                   for (std::size_t y = 0; y < 2 * h; ++y) {
                                       for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                                           nx->grad[(p * h + y / 2) * w + xx / 2] +=
                                               self.grad[(p * 2 * h + y) * 2 * w + xx];
                                       }
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Structural

namespace {
struct AxisSplit {
    std::size_t outer, dim, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit a{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}
}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat", "no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat", "axis out of range");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw ShapeError("concat", "mismatched shapes " + to_string(first) + " and " + to_string(s));
        out_shape[axis] += s[axis];
    }
    const auto os = split_axis(out_shape, axis);
    Buffer out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t d = p.dim(axis);
        const auto v = p.values();
        for (std::size_t o = 0; o < os.outer; ++o) {
            std::copy_n(v.data() + o * d * os.inner, d * os.inner,
                        out.data() + (o * os.dim + off) * os.inner);
        }
        off += d;
    }
    std::vector<Node*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return OpBuilder::make("concat", out_shape, std::move(out), parts,
                           [nodes, offsets, os, axis](Node& self) {
                               for (std::size_t i = 0; i < nodes.size(); ++i) {
                                   Node* n = nodes[i];
                                   if (!n->requires_grad) continue;
                                   n->ensure_grad();
                                   const std::size_t d = n->shape[axis];
                                   for (std::size_t o = 0; o < os.outer; ++o) {
                                       const double* src = self.grad.data() + (o * os.dim + offsets[i]) * os.inner;
                                       double* dst = n->grad.data() + o * d * os.inner;
                                       for (std::size_t k = 0; k < d * os.inner; ++k) dst[k] += src[k];
                                   }
                               }
                           });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
        throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                      ") on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
    }
    const auto is = split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    const std::size_t d = end - begin;
    Buffer out(numel(out_shape));
    const auto v = x.values();
    for (std::size_t o = 0; o < is.outer; ++o) {
        std::copy_n(v.data() + (o * is.dim + begin) * is.inner, d * is.inner, out.data() + o * d * is.inner);
    }
    Node* nx = x.node();
    return OpBuilder::make("slice", out_shape, std::move(out), {x}, [nx, is, d, begin](Node& self) {
        nx->ensure_grad();
        for (std::size_t o = 0; o < is.outer; ++o) {
            const double* src = self.grad.data() + o * d * is.inner;
            double* dst = nx->grad.data() + (o * is.dim + begin) * is.inner;
            for (std::size_t k = 0; k < d * is.inner; ++k) dst[k] += src[k];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape", "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    Buffer out(x.values().begin(), x.values().end());
    Node* nx = x.node();
    return OpBuilder::make("reshape", std::move(shape), std::move(out), {x}, [nx](Node& self) {
        nx->ensure_grad();
        for (std::size_t k = 0; k < self.grad.size(); ++k) nx->grad[k] += self.grad[k];
    });
}

Tensor take(const Tensor& x, std::vector<std::size_t> flat_indices, Shape out_shape) {
    if (numel(out_shape) != flat_indices.size()) {
        throw ShapeError("take", "index count does not match output shape " + to_string(out_shape));
    }
    const auto v = x.values();
    Buffer out(flat_indices.size());
    for (std::size_t k = 0; k < flat_indices.size(); ++k) {
        const std::size_t i = flat_indices[k];
        if (i == kZeroIndex) {
            out[k] = 0.0;
        } else if (i >= v.size()) {
            throw ShapeError("take", "index " + std::to_string(i) + " out of range for " + to_string(x.shape()));
        } else {
            out[k] = v[i];
        }
    }
    Node* nx = x.node();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(flat_indices));
    return OpBuilder::make("take", std::move(out_shape), std::move(out), {x}, [nx, idx](Node& self) {
        nx->ensure_grad();
        for (std::size_t k = 0; k < idx->size(); ++k) {
            if ((*idx)[k] != kZeroIndex) nx->grad[(*idx)[k]] += self.grad[k];
        }
    });
}

Tensor select_columns(const Tensor& x, const std::vector<std::size_t>& columns) {
    if (x.rank() != 2) throw ShapeError("select_columns", "expected 2-D input, got " + to_string(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<std::size_t> flat(rows * columns.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j] >= cols) throw ShapeError("select_columns", "column index out of range");
            flat[r * columns.size() + j] = r * cols + columns[j];
        }
    }
    return take(x, std::move(flat), Shape{rows, columns.size()});
}

// ---------------------------------------------------------------------------
// Nonlinearities

namespace {
inline double stable_sigmoid(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
    return unary("sigmoid", x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor tanh(const Tensor& x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double t) { return 1.0 - t * t; });
}

Tensor relu(const Tensor& x) {
    const auto v = x.values();
    const bool kink = std::any_of(v.begin(), v.end(), [](double e) { return e == 0.0; });
    return unary(
        "relu", x, [](double e) { return e > 0 ? e : 0.0; }, [](double e, double) { return e > 0 ? 1.0 : 0.0; },
        kink);
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double e) { return std::max(e, 0.0) + std::log1p(std::exp(-std::abs(e))); },
        [](double e, double) { return stable_sigmoid(e); });
}

Tensor abs(const Tensor& x) {
    const auto v = x.values();
    const bool kink = std::any_of(v.begin(), v.end(), [](double e) { return e == 0.0; });
    return unary(
        "abs", x, [](double e) { return std::abs(e); },
        [](double e, double) { return e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0); }, kink);
}

Tensor sqrt(const Tensor& x) {
    const auto v = x.values();
    if (std::any_of(v.begin(), v.end(), [](double e) { return e < 0.0; })) {
        throw std::domain_error("sqrt: negative input");
    }
    const bool kink = std::any_of(v.begin(), v.end(), [](double e) { return e == 0.0; });
    return unary(
        "sqrt", x, [](double e) { return std::sqrt(e); },
        [](double, double s) { return s > 0 ? 0.5 / s : 0.0; }, kink);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
    const auto v = x.values();
    const double s = std::accumulate(v.begin(), v.end(), 0.0);
    Node* nx = x.node();
    return OpBuilder::make("sum", Shape{1}, {s}, {x}, [nx](Node& self) {
        nx->ensure_grad();
        const double g = self.grad[0];
        for (double& e : nx->grad) e += g;
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("sum_axis", "axis out of range for " + to_string(x.shape()));
    const auto s = split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    Buffer out(s.outer * s.inner, 0.0);
    const auto v = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t d = 0; d < s.dim; ++d)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += v[(o * s.dim + d) * s.inner + i];
    Node* nx = x.node();
    return OpBuilder::make("sum_axis", out_shape, std::move(out), {x}, [nx, s](Node& self) {
        nx->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t d = 0; d < s.dim; ++d)
                for (std::size_t i = 0; i < s.inner; ++i)
                    nx->grad[(o * s.dim + d) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

MaxResult max_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("max_axis", "axis out of range for " + to_string(x.shape()));
    const auto s = split_axis(x.shape(), axis);
    if (s.dim == 0) throw ShapeError("max_axis", "empty axis");
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    Buffer out(s.outer * s.inner);
    std::vector<std::size_t> arg(s.outer * s.inner);
    const auto v = x.values();
    bool tie = false;
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = 0;
            double bv = v[o * s.dim * s.inner + i];
            for (std::size_t d = 1; d < s.dim; ++d) {
                const double e = v[(o * s.dim + d) * s.inner + i];
                if (e > bv) {
                    bv = e;
                    best = d;
                }
            }
            const double tol = 1e-12 * std::max(1.0, std::abs(bv));
            for (std::size_t d = 0; d < s.dim && !tie; ++d) {
                tie = d != best && std::abs(v[(o * s.dim + d) * s.inner + i] - bv) <= tol;
            }
            out[o * s.inner + i] = bv;
            arg[o * s.inner + i] = best;
        }
    }
    Node* nx = x.node();
    auto index = std::make_shared<std::vector<std::size_t>>(arg);
    Tensor values = OpBuilder::make("max_axis", out_shape, std::move(out), {x}, [nx, s, index](Node& self) {
        nx->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i)
                nx->grad[(o * s.dim + (*index)[o * s.inner + i]) * s.inner + i] += self.grad[o * s.inner + i];
    }, tie);
    return {values, std::move(arg)};
}

Tensor cyclic_xcorr2d(const Tensor& a, const Tensor& reference) {
    if (a.rank() != 3 || a.shape() != reference.shape()) {
        throw ShapeError("cyclic_xcorr2d", "expected matching (B,H,W) operands, got " + to_string(a.shape()) +
                                               " and " + to_string(reference.shape()));
    }
    if (reference.requires_grad()) {
        throw std::invalid_argument("cyclic_xcorr2d: reference must be a constant");
    }
    const std::size_t B = a.dim(0), H = a.dim(1), W = a.dim(2), P = H * W;
    Buffer out(B * P, 0.0);
    const auto av = a.values();
    const auto rv = reference.values();
    for (std::size_t b = 0; b < B; ++b) {
        const double* ab = av.data() + b * P;
        const double* rb = rv.data() + b * P;
        for (std::size_t dy = 0; dy < H; ++dy) {
            for (std::size_t dx = 0; dx < W; ++dx) {
                double acc = 0.0;
                for (std::size_t y = 0; y < H; ++y) {
                    const double* arow = ab + y * W;
                    const double* rrow = rb + ((y + H - dy) % H) * W;
                    for (std::size_t x = 0; x < W; ++x) acc += arow[x] * rrow[(x + W - dx) % W];
                }
                out[b * P + dy * W + dx] = acc;
            }
        }
    }
    Node* na = a.node();
    // the reference is not an input, so the closure keeps it alive
    return OpBuilder::make("cyclic_xcorr2d", Shape{B, P}, std::move(out), {a}, [na, reference, B, H, W, P](Node& self) {
        const Node* nr = reference.node();
        na->ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            const double* g = self.grad.data() + b * P;
            const double* rb = nr->value.data() + b * P;
            double* ga = na->grad.data() + b * P;
            for (std::size_t dy = 0; dy < H; ++dy) {
                for (std::size_t dx = 0; dx < W; ++dx) {
                    const double gs = g[dy * W + dx];
                    if (gs == 0.0) continue;
                    for (std::size_t y = 0; y < H; ++y) {
                        const double* rrow = rb + ((y + H - dy) % H) * W;
                        double* grow = ga + y * W;
                        for (std::size_t x = 0; x < W; ++x) grow[x] += gs * rrow[(x + W - dx) % W];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass

void backward(const Tensor& output) {
    if (!output.defined()) throw std::logic_error("backward: undefined tensor");
    if (output.numel() != 1) {
        throw ShapeError("backward", "output must be scalar, got " + to_string(output.shape()));
    }
    Node* root = output.node();
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

// ---------------------------------------------------------------------------
// ParameterSet

Tensor& ParameterSet::add(const std::string& name, Tensor tensor) {
    if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    if (!tensor.defined() || !tensor.requires_grad()) {
        throw std::invalid_argument("parameter " + name + " is not trainable");
    }
    order_.push_back(name);
    return tensors_.emplace(name, std::move(tensor)).first->second;
}

Tensor& ParameterSet::get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

bool ParameterSet::contains(const std::string& name) const { return tensors_.count(name) != 0; }

std::size_t ParameterSet::total_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
}

void ParameterSet::backward(const Tensor& output) {
    zero_grad();
    ad::backward(output);
}

// ---------------------------------------------------------------------------
// Finite differences

GradCheckReport finite_diff_check(const std::function<Tensor()>& program, ParameterSet& params, double step,
                                  double eps_fraction, std::size_t max_entries_per_parameter) {
    if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be positive");
    GradCheckReport report;
    Tensor out = program();
    report.nonsmooth = out.nonsmooth();
    params.backward(out);

    struct Probe {
        std::string name;
        std::size_t index;
        double analytic;
        double numeric;
    };
    std::vector<Probe> probes;
    for (const auto& name : params.names()) {
        Tensor& p = params.get(name);
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        const std::size_t n = p.numel();
        std::vector<std::size_t> entries;
        if (max_entries_per_parameter == 0 || n <= max_entries_per_parameter) {
            entries.resize(n);
            std::iota(entries.begin(), entries.end(), std::size_t{0});
        } else {
            for (std::size_t k = 0; k < max_entries_per_parameter; ++k) {
                entries.push_back(k * n / max_entries_per_parameter);
            }
        }
        for (std::size_t i : entries) {
            auto v = p.mutable_values();
            const double orig = v[i];
            v[i] = orig + step;
            Tensor plus = program();
            report.nonsmooth = report.nonsmooth || plus.nonsmooth();
            const double fp = plus.item();
            p.mutable_values()[i] = orig - step;
            Tensor minus = program();
            report.nonsmooth = report.nonsmooth || minus.nonsmooth();
            const double fm = minus.item();
            p.mutable_values()[i] = orig;
            probes.push_back({name, i, analytic[i], (fp - fm) / (2.0 * step)});
        }
    }
    double max_fd = 0.0;
    for (const auto& pr : probes) max_fd = std::max(max_fd, std::abs(pr.numeric));
    const double eps = std::max(eps_fraction * max_fd, 1e-12);
    for (const auto& pr : probes) {
        const double err = std::abs(pr.analytic - pr.numeric) / (std::abs(pr.numeric) + eps);
        if (report.checked == 0 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_parameter = pr.name;
            report.worst_index = pr.index;
        }
        ++report.checked;
    }
    return report;
}

}  // namespace codesign::ad
