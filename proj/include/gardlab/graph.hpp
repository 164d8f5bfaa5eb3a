#pragma once

#include <functional>
#include <vector>

#include "gardlab/tensor.hpp"

namespace gardlab {

// Reverse-mode autodiff tape over 2D tensors. Ops compute values eagerly and
// record backward closures; backward(loss) walks the tape in reverse.
//
// A graph built with recording=false computes values only (no closures, no
// gradient buffers) and is used for frozen-model inference.
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaves. `leaf` is a constant; `var` participates in backward.
    int leaf(Tensor v);
    int var(Tensor v);

    const Tensor& val(int id) const { return nodes_[id].val; }
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    size_t node_count() const { return nodes_.size(); }

    // Runs backpropagation from a scalar loss node.
    void backward(int loss);

    // Elementwise / scalar
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int add_const(int a, double c);
    int gelu(int a);
    int silu(int a);
    int softplus(int a);
    int sigmoid(int a);
    int log_eps(int a, double eps);
    int abs(int a);
    int acos_clamped(int a, double clamp = 1.0 - 1e-7);
    int sqrt_eps(int a, double eps);

    // Linear algebra
    int matmul(int a, int b);
    int transpose(int a);
    int linear(int x, int w, int b);  // x[n,i] * w[i,o] + b[1,o]

    // Normalization / activation over rows
    int layernorm(int x, int gain, int bias, double eps = 1e-6);
    int softmax_rows(int a);
    int normalize_rows(int a, double eps = 1e-12);

    // Shape ops
    int slice_rows(int a, int r0, int n);
    int slice_cols(int a, int c0, int n);
    int concat_rows(const std::vector<int>& parts);
    int concat_cols(const std::vector<int>& parts);

    // Broadcast over rows: v is 1xC
    int add_rowvec(int x, int v);
    int mul_rowvec(int x, int v);

    // Reductions
    int sum_all(int a);
    int mean_all(int a);
    int mean_rows(int a);  // [n,c] -> [1,c]
    int row_sum(int a);    // [n,c] -> [n,1]

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        std::function<void()> back;
    };

    int push(Tensor v, bool needs_grad, std::function<void()> back = nullptr);
    Tensor& g(int id);  // grad buffer, allocated on demand
    bool track(int a) const { return recording_ && nodes_[a].needs_grad; }
    bool track(int a, int b) const {
        return recording_ && (nodes_[a].needs_grad || nodes_[b].needs_grad);
    }

    std::vector<Node> nodes_;
    bool recording_;
};

}  // namespace gardlab
