#pragma once

// Reverse-mode automatic differentiation over dense real tensors.
//
// A Tensor is a shared handle to a node in a recorded computation graph.
// Operations on tensors that require gradients record a backward closure;
// operations on constants produce constants and record nothing. Complex
// quantities are carried as paired real tensors by the callers.

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace codesign::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when a primitive receives operands it cannot combine. The message
/// names the primitive.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& op, const std::string& detail);
    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor constant(Shape shape, double fill = 0.0);
    static Tensor scalar(double value);
    /// Trainable leaf.
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }

    bool requires_grad() const;
    std::span<const double> values() const;
    /// Only leaves may be mutated (optimizer updates, finite differences).
    std::span<double> mutable_values();
    double item() const;
    double operator[](std::size_t i) const { return values()[i]; }

    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// True if this value, or anything it was computed from, was evaluated at
    /// a point where a primitive is not differentiable (ties, kinks).
    bool nonsmooth() const;

    const char* op() const;
    detail::Node* node() const noexcept { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct OpBuilder;
};

// Elementwise arithmetic with broadcasting (numpy rules, trailing alignment).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Division; every denominator entry must be nonzero.
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(neg(x), c); }

/// (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: (B, C, H, W), weight: (O, C, k, k) with odd k, bias: (O) or undefined.
/// Zero padding of k/2 on every side.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1);
/// Nearest-neighbour 2x up-sampling of (B, C, H, W).
Tensor upsample2x(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

inline constexpr std::size_t kZeroIndex = std::numeric_limits<std::size_t>::max();
/// Gather by flat index into an output of the given shape. kZeroIndex yields 0.
Tensor take(const Tensor& x, std::vector<std::size_t> flat_indices, Shape out_shape);
/// Gather columns of a 2-D tensor: out(r, j) = x(r, columns[j]).
Tensor select_columns(const Tensor& x, const std::vector<std::size_t>& columns);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);

struct MaxResult {
    Tensor values;
    std::vector<std::size_t> indices;
};
/// Maximum along one axis, with the winning index per output entry.
MaxResult max_axis(const Tensor& x, std::size_t axis);

/// a: (B, H, W); reference: (B, H, W) constant.
/// out(b, dy*W + dx) = sum_{y,x} a(b, y, x) * reference(b, y - dy, x - dx), indices mod (H, W).
Tensor cyclic_xcorr2d(const Tensor& a, const Tensor& reference);

/// Populates gradients of every requires-grad tensor reachable from output.
/// Gradients of reachable tensors are reset first, so repeated calls agree.
void backward(const Tensor& output);

class ParameterSet {
public:
    /// Throws std::invalid_argument on duplicate names.
    Tensor& add(const std::string& name, Tensor tensor);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return order_.size(); }
    std::size_t total_values() const;
    const std::vector<std::string>& names() const { return order_; }

    void zero_grad();
    /// Zeroes every gradient, then runs backward; unreachable members end at 0.
    void backward(const Tensor& output);

private:
    std::map<std::string, Tensor> tensors_;
    std::vector<std::string> order_;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    bool nonsmooth = false;
    std::size_t checked = 0;
};

/// Compares analytic gradients of `program` against central differences.
/// Relative error per entry is |g - fd| / (|fd| + eps) where
/// eps = eps_fraction * max |fd| over all checked entries (floor 1e-12).
/// When max_entries_per_parameter > 0 only that many evenly spaced entries
/// of each parameter are probed.
GradCheckReport finite_diff_check(const std::function<Tensor()>& program, ParameterSet& params,
                                  double step, double eps_fraction = 1e-3,
                                  std::size_t max_entries_per_parameter = 0);

}  // namespace codesign::ad
