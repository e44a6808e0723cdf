#include "pvic/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace pvic {

namespace {

std::atomic<uint64_t> g_next_id{1};

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                         b->value.shape_str());
}

}  // namespace

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    n->requires_grad = true;
    return n;
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (auto& p : n.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (long long i = 0; i < n.grad.numel(); ++i) p->grad[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const Var& a = n.parents[0];
        const Var& b = n.parents[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long long i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] *= c;
    return make_node(std::move(out), {a}, [c](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += c * n.grad[i];
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] += c;
    return make_node(std::move(out), {a}, [](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_rowwise(const Var& x, const Var& bias) {
    if (x->value.rank() != 2 || bias->value.rank() != 1 || x->value.cols() != bias->value.dim(0))
        throw ShapeError("add_rowwise: need [n x d] + [d]");
    Tensor out = x->value;
    const int n = out.rows(), d = out.cols();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out.at(r, c) += bias->value[static_cast<size_t>(c)];
    return make_node(std::move(out), {x, bias}, [](Node& nd) {
        const Var& x = nd.parents[0];
        const Var& b = nd.parents[1];
        const int n = nd.grad.rows(), d = nd.grad.cols();
        if (x->requires_grad) {
            x->ensure_grad();
            for (long long i = 0; i < nd.grad.numel(); ++i) x->grad[i] += nd.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) b->grad[static_cast<size_t>(c)] += nd.grad.at(r, c);
        }
    });
}

Var mul_const(const Var& a, const Tensor& m) {
    if (!a->value.same_shape(m)) throw ShapeError("mul_const: shape mismatch");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] *= m[i];
    Tensor mc = m;
    return make_node(std::move(out), {a}, [mc](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * mc[i];
    });
}

Var scale_var(const Var& x, const Var& s) {
    if (s->value.numel() != 1) throw ShapeError("scale_var: scale must have one element");
    Tensor out = x->value;
    const double sv = s->value[0];
    for (long long i = 0; i < out.numel(); ++i) out[i] *= sv;
    return make_node(std::move(out), {x, s}, [](Node& n) {
        const Var& x = n.parents[0];
        const Var& s = n.parents[1];
        if (x->requires_grad) {
            x->ensure_grad();
            const double sv = s->value[0];
            for (long long i = 0; i < n.grad.numel(); ++i) x->grad[i] += sv * n.grad[i];
        }
        if (s->requires_grad) {
            s->ensure_grad();
            double acc = 0.0;
            for (long long i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * x->value[i];
            s->grad[0] += acc;
        }
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a->value.numel()) throw ShapeError("reshape: numel mismatch");
    Tensor out(std::move(shape), a->value.data());
    return make_node(std::move(out), {a}, [](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

Var transpose(const Var& a) {
    if (a->value.rank() != 2) throw ShapeError("transpose: rank-2 only");
    const int n = a->value.rows(), d = a->value.cols();
    Tensor out({d, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out.at(c, r) = a->value.at(r, c);
    return make_node(std::move(out), {a}, [](Node& nd) {
        const Var& a = nd.parents[0];
        a->ensure_grad();
        const int d = nd.grad.rows(), n = nd.grad.cols();
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < n; ++c) a->grad.at(c, r) += nd.grad.at(r, c);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    const int n = parts[0]->value.rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != 2 || p->value.rows() != n)
            throw ShapeError("concat_cols: row mismatch");
        total += p->value.cols();
    }
    Tensor out({n, total});
    int off = 0;
    for (const auto& p : parts) {
        const int d = p->value.cols();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) out.at(r, off + c) = p->value.at(r, c);
        off += d;
    }
    return make_node(std::move(out), parts, [](Node& nd) {
        int off = 0;
        for (auto& p : nd.parents) {
            const int d = p->value.cols();
            if (p->requires_grad) {
                p->ensure_grad();
                for (int r = 0; r < p->value.rows(); ++r)
                    for (int c = 0; c < d; ++c) p->grad.at(r, c) += nd.grad.at(r, off + c);
            }
            off += d;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    const int d = parts[0]->value.cols();
    int total = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != 2 || p->value.cols() != d)
            throw ShapeError("concat_rows: col mismatch");
        total += p->value.rows();
    }
    Tensor out({total, d});
    int off = 0;
    for (const auto& p : parts) {
        for (int r = 0; r < p->value.rows(); ++r)
            for (int c = 0; c < d; ++c) out.at(off + r, c) = p->value.at(r, c);
        off += p->value.rows();
    }
    return make_node(std::move(out), parts, [](Node& nd) {
        int off = 0;
        for (auto& p : nd.parents) {
            const int nr = p->value.rows();
            if (p->requires_grad) {
                p->ensure_grad();
                for (int r = 0; r < nr; ++r)
                    for (int c = 0; c < p->value.cols(); ++c)
                        p->grad.at(r, c) += nd.grad.at(off + r, c);
            }
            off += nr;
        }
    });
}

Var slice_cols(const Var& a, int c0, int len) {
    if (a->value.rank() != 2 || c0 < 0 || len < 0 || c0 + len > a->value.cols())
        throw ShapeError("slice_cols: range out of bounds");
    const int n = a->value.rows();
    Tensor out({n, len});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < len; ++c) out.at(r, c) = a->value.at(r, c0 + c);
    return make_node(std::move(out), {a}, [c0](Node& nd) {
        const Var& a = nd.parents[0];
        a->ensure_grad();
        for (int r = 0; r < nd.grad.rows(); ++r)
            for (int c = 0; c < nd.grad.cols(); ++c) a->grad.at(r, c0 + c) += nd.grad.at(r, c);
    });
}

Var slice_rows(const Var& a, int r0, int len) {
    if (a->value.rank() != 2 || r0 < 0 || len < 0 || r0 + len > a->value.rows())
        throw ShapeError("slice_rows: range out of bounds");
    const int d = a->value.cols();
    Tensor out({len, d});
    for (int r = 0; r < len; ++r)
        for (int c = 0; c < d; ++c) out.at(r, c) = a->value.at(r0 + r, c);
    return make_node(std::move(out), {a}, [r0](Node& nd) {
        const Var& a = nd.parents[0];
        a->ensure_grad();
        for (int r = 0; r < nd.grad.rows(); ++r)
            for (int c = 0; c < nd.grad.cols(); ++c) a->grad.at(r0 + r, c) += nd.grad.at(r, c);
    });
}

Var relu(const Var& a) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i)
            if (a->value[i] > 0.0) a->grad[i] += n.grad[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) {
        const double x = out[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_node(std::move(out), {a}, [](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) {
            const double s = n.value[i];
            a->grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

Var log_clamped(const Var& a, double floor) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(out[i], floor));
    return make_node(std::move(out), {a}, [floor](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        // zero slope below the clamp; matches the clamped value exactly
        for (long long i = 0; i < n.grad.numel(); ++i)
            if (a->value[i] > floor) a->grad[i] += n.grad[i] / a->value[i];
    });
}

Var pow_scalar(const Var& a, double e) {
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], e);
    return make_node(std::move(out), {a}, [e](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        for (long long i = 0; i < n.grad.numel(); ++i) {
            // base floored for e < 1 so the derivative stays finite at 0
            const double x = e < 1.0 ? std::max(a->value[i], 1e-12) : a->value[i];
            a->grad[i] += n.grad[i] * e * std::pow(x, e - 1.0);
        }
    });
}

Var sum_all(const Var& a) {
    double acc = 0.0;
    for (long long i = 0; i < a->value.numel(); ++i) acc += a->value[i];
    return make_node(Tensor::scalar(acc), {a}, [](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        const double g = n.grad[0];
        for (long long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.cols() != b->value.rows())
        throw ShapeError("matmul: inner extents must match, got " + a->value.shape_str() + " * " +
                         b->value.shape_str());
    const int m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
    Tensor out({m, n});
    const double* pa = a->value.data().data();
    const double* pb = b->value.data().data();
    double* po = out.data().data();
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = pa[static_cast<size_t>(i) * k + l];
            if (av == 0.0) continue;
            const double* pbrow = pb + static_cast<size_t>(l) * n;
            double* porow = po + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) porow[j] += av * pbrow[j];
        }
    return make_node(std::move(out), {a, b}, [](Node& nd) {
        const Var& a = nd.parents[0];
        const Var& b = nd.parents[1];
        const int m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
        const double* pg = nd.grad.data().data();
        if (a->requires_grad) {
            a->ensure_grad();
            const double* pb = b->value.data().data();
            double* pga = a->grad.data().data();
            // dA = G * B^T
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    const double* pgrow = pg + static_cast<size_t>(i) * n;
                    const double* pbrow = pb + static_cast<size_t>(l) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += pgrow[j] * pbrow[j];
                    pga[static_cast<size_t>(i) * k + l] += acc;
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            const double* pa = a->value.data().data();
            double* pgb = b->grad.data().data();
            // dB = A^T * G
            for (int l = 0; l < k; ++l)
                for (int i = 0; i < m; ++i) {
                    const double av = pa[static_cast<size_t>(i) * k + l];
                    if (av == 0.0) continue;
                    const double* pgrow = pg + static_cast<size_t>(i) * n;
                    double* pgbrow = pgb + static_cast<size_t>(l) * n;
                    for (int j = 0; j < n; ++j) pgbrow[j] += av * pgrow[j];
                }
        }
    });
}

namespace {

// iterate a tensor as outer x axis x inner
struct AxisView {
    long long outer, extent, inner;
};

AxisView axis_view(const Tensor& t, int axis) {
    int r = t.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("bad axis");
    AxisView v{1, t.dim(axis), 1};
    for (int i = 0; i < axis; ++i) v.outer *= t.dim(i);
    for (int i = axis + 1; i < r; ++i) v.inner *= t.dim(i);
    return v;
}

}  // namespace

Var softmax(const Var& a, int axis) {
    const AxisView v = axis_view(a->value, axis);
    Tensor out = a->value;
    for (long long o = 0; o < v.outer; ++o)
        for (long long in = 0; in < v.inner; ++in) {
            const long long base = o * v.extent * v.inner + in;
            double mx = out[static_cast<size_t>(base)];
            for (long long e = 1; e < v.extent; ++e)
                mx = std::max(mx, out[static_cast<size_t>(base + e * v.inner)]);
            double denom = 0.0;
            for (long long e = 0; e < v.extent; ++e) {
                const size_t idx = static_cast<size_t>(base + e * v.inner);
                out[idx] = std::exp(out[idx] - mx);
                denom += out[idx];
            }
            for (long long e = 0; e < v.extent; ++e) out[static_cast<size_t>(base + e * v.inner)] /= denom;
        }
    const int ax = axis;
    return make_node(std::move(out), {a}, [ax](Node& n) {
        const Var& a = n.parents[0];
        a->ensure_grad();
        const AxisView v = axis_view(n.value, ax);
        for (long long o = 0; o < v.outer; ++o)
            for (long long in = 0; in < v.inner; ++in) {
                const long long base = o * v.extent * v.inner + in;
                double dot = 0.0;
                for (long long e = 0; e < v.extent; ++e) {
                    const size_t idx = static_cast<size_t>(base + e * v.inner);
                    dot += n.grad[idx] * n.value[idx];
                }
                for (long long e = 0; e < v.extent; ++e) {
                    const size_t idx = static_cast<size_t>(base + e * v.inner);
                    a->grad[idx] += n.value[idx] * (n.grad[idx] - dot);
                }
            }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    if (x->value.rank() < 1) throw ShapeError("layer_norm: rank >= 1");
    const int d = x->value.dim(x->value.rank() - 1);
    if (gain->value.numel() != d || bias->value.numel() != d)
        throw ShapeError("layer_norm: gain/bias must have last-axis extent");
    const long long rows = x->value.numel() / d;
    Tensor out = x->value;
    // cache per-row (mean, inv_std) and normalized values for backward
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);
    auto xhat = std::make_shared<std::vector<double>>(x->value.data().size());
    for (long long r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += out[base + c];
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = out[base + c] - mean;
            var += dv * dv;
        }
        var /= d;  // population variance
        const double inv_std = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>(r) * 2] = mean;
        (*stats)[static_cast<size_t>(r) * 2 + 1] = inv_std;
        for (int c = 0; c < d; ++c) {
            const double h = (out[base + c] - mean) * inv_std;
            (*xhat)[base + c] = h;
            out[base + c] = h * gain->value[static_cast<size_t>(c)] + bias->value[static_cast<size_t>(c)];
        }
    }
    return make_node(std::move(out), {x, gain, bias}, [stats, xhat, d](Node& n) {
        const Var& x = n.parents[0];
        const Var& gain = n.parents[1];
        const Var& bias = n.parents[2];
        const long long rows = n.value.numel() / d;
        if (gain->requires_grad) gain->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (long long r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * d;
            const double inv_std = (*stats)[static_cast<size_t>(r) * 2 + 1];
            double mg = 0.0, mgh = 0.0;
            for (int c = 0; c < d; ++c) {
                const double gh = n.grad[base + c] * gain->value[static_cast<size_t>(c)];
                mg += gh;
                mgh += gh * (*xhat)[base + c];
            }
            mg /= d;
            mgh /= d;
            for (int c = 0; c < d; ++c) {
                const size_t i = base + c;
                if (gain->requires_grad) gain->grad[static_cast<size_t>(c)] += n.grad[i] * (*xhat)[i];
                if (bias->requires_grad) bias->grad[static_cast<size_t>(c)] += n.grad[i];
                if (x->requires_grad) {
                    const double gh = n.grad[i] * gain->value[static_cast<size_t>(c)];
                    x->grad[i] += inv_std * (gh - mg - (*xhat)[i] * mgh);
                }
            }
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_rowwise(matmul(x, w), b); }

Var mlp2(const Var& x, const Mlp2Params& p) {
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

void backward(const Var& loss) {
    if (loss->value.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss->requires_grad) return;  // constant function of params: all grads zero

    // collect reachable grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    // nodes are created after their parents, so descending id is reverse-topological
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    for (Node* n : order) n->ensure_grad();
    loss->grad[0] = 1.0;
    for (Node* n : order)
        if (n->backprop) n->backprop(*n);
}

double finite_diff_check(const std::function<Var()>& f, const std::vector<Var>& params,
                         double eps) {
    // analytic pass
    Var loss = f();
    if (!loss->value.all_finite()) throw NumericError("finite_diff_check: non-finite f");
    backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params)
        analytic.push_back(p->grad_ready ? p->grad : Tensor::zeros(p->value.shape()));

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Var p = params[pi];
        for (long long i = 0; i < p->value.numel(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double fp = f()->value[0];
            p->value[i] = orig - eps;
            const double fm = f()->value[0];
            p->value[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_check: non-finite f");
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace pvic
