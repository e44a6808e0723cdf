#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pvic/tensor.hpp"

namespace pvic {

// Reverse-mode autodiff over tensor-valued nodes. Each op records its parents
// and a closure that pushes the node's grad into the parents' grads. Nodes are
// created in program order, so descending id is a valid reverse-topological
// order for backward. A graph is single-owner and single-threaded.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on backward
    bool requires_grad = false;
    bool grad_ready = false;
    uint64_t id = 0;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(value.shape());
            grad_ready = true;
        }
    }
};

Var constant(Tensor t);
Var leaf(Tensor t);  // requires_grad = true

// elementwise / shape ops
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var add_rowwise(const Var& x, const Var& bias);  // x: [n x d] + bias: [d]
Var mul_const(const Var& a, const Tensor& m);    // elementwise by a fixed tensor (masking)
Var scale_var(const Var& x, const Var& s);       // x * s, s a 1-element node
Var reshape(const Var& a, std::vector<int> shape);
Var transpose(const Var& a);                      // rank-2
Var concat_cols(const std::vector<Var>& parts);   // rank-2, along axis 1
Var concat_rows(const std::vector<Var>& parts);   // rank-2, along axis 0
Var slice_cols(const Var& a, int c0, int len);    // rank-2
Var slice_rows(const Var& a, int r0, int len);    // rank-2

// nonlinearities / reductions
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log_clamped(const Var& a, double floor = 1e-12);
Var pow_scalar(const Var& a, double e);
Var sum_all(const Var& a);  // -> scalar [1]
Var mean_all(const Var& a);

// linear algebra / normalization
Var matmul(const Var& a, const Var& b);
Var softmax(const Var& a, int axis = -1);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);

// composes affine-relu-affine; params given as W1,b1,W2,b2
struct Mlp2Params {
    Var w1, b1, w2, b2;
};
Var mlp2(const Var& x, const Mlp2Params& p);

Var linear(const Var& x, const Var& w, const Var& b);

// Reverse accumulation from a scalar loss. Grads of reachable requires_grad
// nodes are populated; contributions from multiple uses sum.
void backward(const Var& loss);

// Max over all parameter coordinates of
// |analytic - central_difference| / max(1, |central_difference|).
// f rebuilds the graph from the current leaf values each call.
double finite_diff_check(const std::function<Var()>& f, const std::vector<Var>& params,
                         double eps = 1e-5);

}  // namespace pvic
