#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mdan {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded operation output. Nodes reachable through `parents` form the
// DAG that backward() walks in reverse topological order.
struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // persistent, leaf-accumulated; sized lazily
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates into the per-parent buffers; entries are null for parents
    // that do not require grad.
    std::function<void(const std::vector<double>& out_grad,
                       const std::vector<std::vector<double>*>& parent_grads)>
        backward;
    const char* op = "leaf";

    std::size_t size() const { return data.size(); }
};

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode autodiff. Value semantics
// over a shared node; data is immutable after creation except through
// mutable_values() (parameter updates) and the grad buffer.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    const std::vector<double>& values() const;
    std::vector<double>& mutable_values();
    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();
    double item() const;

    detail::Node* node() const { return n_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n);

  private:
    std::shared_ptr<detail::Node> n_;
};

// --- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor upsample_bilinear_2x(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);

// Elementwise; add/mul accept a [1,H,W] map broadcast across the channels of
// a [C,H,W] tensor (the only broadcast pattern the model needs).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor ewise_max(const Tensor& a, const Tensor& b);

// x - s and x / s with s a scalar tensor broadcast over x.
Tensor sub_broadcast_scalar(const Tensor& x, const Tensor& s);
Tensor div_broadcast_scalar(const Tensor& x, const Tensor& s);
Tensor reduce_min(const Tensor& x);
Tensor reduce_max(const Tensor& x);

Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, std::size_t start, std::size_t len);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);
Tensor sum(const Tensor& x);

// Mean negative log likelihood of rows of p (distributions) at indices y.
Tensor cross_entropy(const Tensor& p, const std::vector<std::size_t>& y);

// Reverse-mode sweep from a scalar loss. Accumulates into the grad buffer of
// every visited tensor with requires_grad; repeated calls accumulate.
void backward(const Tensor& loss);

}  // namespace mdan
