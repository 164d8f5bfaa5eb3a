#include "gardlab/graph.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <memory>

namespace gardlab {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC cmap(const Tensor& t) { return MapC(t.data.data(), t.rows, t.cols); }
MapM mmap(Tensor& t) { return MapM(t.data.data(), t.rows, t.cols); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

}  // namespace

int Graph::push(Tensor v, bool needs_grad, std::function<void()> back) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::g(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor(n.val.rows, n.val.cols);
    return n.grad;
}

const Tensor& Graph::grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0)
        throw std::logic_error("Graph::grad on node without gradient (run backward first)");
    return n.grad;
}

int Graph::leaf(Tensor v) { return push(std::move(v), false); }

int Graph::var(Tensor v) {
    int id = push(std::move(v), recording_);
    return id;
}

void Graph::backward(int loss) {
    if (!recording_) throw std::logic_error("backward on non-recording graph");
    if (!nodes_[loss].val.is_scalar()) throw std::logic_error("backward: loss must be scalar");
    g(loss).data[0] = 1.0;
    for (int i = loss; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.back && n.grad.size() != 0) n.back();
    }
}

int Graph::add(int a, int b) {
    const Tensor &va = nodes_[a].val, &vb = nodes_[b].val;
    check_same_shape(va, vb, "add");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    if (!track(a, b)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, b, id] {
        const Tensor& go = g(id);
        if (nodes_[a].needs_grad) {
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
        }
        if (nodes_[b].needs_grad) {
            Tensor& gb = g(b);
            for (size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i];
        }
    };
    return id;
}

int Graph::sub(int a, int b) {
    const Tensor &va = nodes_[a].val, &vb = nodes_[b].val;
    check_same_shape(va, vb, "sub");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
    if (!track(a, b)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, b, id] {
        const Tensor& go = g(id);
        if (nodes_[a].needs_grad) {
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
        }
        if (nodes_[b].needs_grad) {
            Tensor& gb = g(b);
            for (size_t i = 0; i < go.size(); ++i) gb.data[i] -= go.data[i];
        }
    };
    return id;
}

int Graph::mul(int a, int b) {
    const Tensor &va = nodes_[a].val, &vb = nodes_[b].val;
    check_same_shape(va, vb, "mul");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
    if (!track(a, b)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, b, id] {
        const Tensor& go = g(id);
        if (nodes_[a].needs_grad) {
            Tensor& ga = g(a);
            const Tensor& vb2 = nodes_[b].val;
            for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * vb2.data[i];
        }
        if (nodes_[b].needs_grad) {
            Tensor& gb = g(b);
            const Tensor& va2 = nodes_[a].val;
            for (size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i] * va2.data[i];
        }
    };
    return id;
}

int Graph::scale(int a, double s) {
    Tensor out = nodes_[a].val;
    for (double& v : out.data) v *= s;
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, s, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) ga.data[i] += s * go.data[i];
    };
    return id;
}

int Graph::add_const(int a, double c) {
    Tensor out = nodes_[a].val;
    for (double& v : out.data) v += c;
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    };
    return id;
}

int Graph::gelu(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < va.size(); ++i) {
        double x = va.data[i];
        out.data[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        constexpr double inv_sqrt2l = 0.7071067811865475244;
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double x = va2.data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2l));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga.data[i] += go.data[i] * (cdf + x * pdf);
        }
    };
    return id;
}

int Graph::silu(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) {
        double x = va.data[i];
        out.data[i] = x / (1.0 + std::exp(-x));
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double x = va2.data[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            ga.data[i] += go.data[i] * (s * (1.0 + x * (1.0 - s)));
        }
    };
    return id;
}

int Graph::softplus(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) {
        double x = va.data[i];
        out.data[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double x = va2.data[i];
            ga.data[i] += go.data[i] / (1.0 + std::exp(-x));
        }
    };
    return id;
}

int Graph::sigmoid(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-va.data[i]));
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& vo = nodes_[id].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double s = vo.data[i];
            ga.data[i] += go.data[i] * s * (1.0 - s);
        }
    };
    return id;
}

int Graph::log_eps(int a, double eps) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = std::log(va.data[i] + eps);
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, eps, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] / (va2.data[i] + eps);
    };
    return id;
}

int Graph::abs(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = std::fabs(va.data[i]);
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double x = va2.data[i];
            ga.data[i] += go.data[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    };
    return id;
}

int Graph::acos_clamped(int a, double clamp) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) {
        double x = std::min(clamp, std::max(-clamp, va.data[i]));
        out.data[i] = std::acos(x);
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, clamp, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) {
            double x = va2.data[i];
            if (std::fabs(x) < clamp)
                ga.data[i] += go.data[i] * (-1.0 / std::sqrt(1.0 - x * x));
        }
    };
    return id;
}

int Graph::sqrt_eps(int a, double eps) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = std::sqrt(va.data[i] + eps);
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& vo = nodes_[id].val;
        Tensor& ga = g(a);
        for (size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * 0.5 / vo.data[i];
    };
    return id;
}

int Graph::matmul(int a, int b) {
    const Tensor &va = nodes_[a].val, &vb = nodes_[b].val;
    if (va.cols != vb.rows)
        throw std::invalid_argument("matmul: inner dims mismatch " + va.shape_str() + " * " +
                                    vb.shape_str());
    Tensor out(va.rows, vb.cols);
    mmap(out).noalias() = cmap(va) * cmap(vb);
    if (!track(a, b)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, b, id] {
        const Tensor& go = g(id);
        if (nodes_[a].needs_grad)
            mmap(g(a)).noalias() += cmap(go) * cmap(nodes_[b].val).transpose();
        if (nodes_[b].needs_grad)
            mmap(g(b)).noalias() += cmap(nodes_[a].val).transpose() * cmap(go);
    };
    return id;
}

int Graph::transpose(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.cols, va.rows);
    mmap(out) = cmap(va).transpose();
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] { mmap(g(a)) += cmap(g(id)).transpose(); };
    return id;
}

int Graph::linear(int x, int w, int b) {
    const Tensor &vx = nodes_[x].val, &vw = nodes_[w].val, &vb = nodes_[b].val;
    if (vx.cols != vw.rows || vb.rows != 1 || vb.cols != vw.cols)
        throw std::invalid_argument("linear: shape mismatch");
    Tensor out(vx.rows, vw.cols);
    mmap(out).noalias() = cmap(vx) * cmap(vw);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += vb(0, c);
    bool ng = recording_ && (nodes_[x].needs_grad || nodes_[w].needs_grad || nodes_[b].needs_grad);
    if (!ng) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, x, w, b, id] {
        const Tensor& go = g(id);
        if (nodes_[x].needs_grad)
            mmap(g(x)).noalias() += cmap(go) * cmap(nodes_[w].val).transpose();
        if (nodes_[w].needs_grad)
            mmap(g(w)).noalias() += cmap(nodes_[x].val).transpose() * cmap(go);
        if (nodes_[b].needs_grad) {
            Tensor& gb = g(b);
            for (int r = 0; r < go.rows; ++r)
                for (int c = 0; c < go.cols; ++c) gb(0, c) += go(r, c);
        }
    };
    return id;
}

int Graph::layernorm(int x, int gain, int bias, double eps) {
    const Tensor &vx = nodes_[x].val, &vg = nodes_[gain].val, &vb = nodes_[bias].val;
    if (vg.rows != 1 || vg.cols != vx.cols || vb.rows != 1 || vb.cols != vx.cols)
        throw std::invalid_argument("layernorm: affine shape mismatch");
    const int n = vx.rows, c = vx.cols;
    Tensor out(n, c);
    // keep per-row mean / inv-std for the backward pass
    auto stats = std::make_shared<std::vector<double>>(2 * n);
    for (int r = 0; r < n; ++r) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += vx(r, j);
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = vx(r, j) - mu;
            var += d * d;
        }
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * r] = mu;
        (*stats)[2 * r + 1] = inv;
        for (int j = 0; j < c; ++j) out(r, j) = (vx(r, j) - mu) * inv * vg(0, j) + vb(0, j);
    }
    bool ng =
        recording_ && (nodes_[x].needs_grad || nodes_[gain].needs_grad || nodes_[bias].needs_grad);
    if (!ng) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, x, gain, bias, id, stats] {
        const Tensor& go = g(id);
        const Tensor& vx2 = nodes_[x].val;
        const Tensor& vg2 = nodes_[gain].val;
        const int n2 = vx2.rows, c2 = vx2.cols;
        for (int r = 0; r < n2; ++r) {
            double mu = (*stats)[2 * r], inv = (*stats)[2 * r + 1];
            // xhat and upstream-through-affine
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < c2; ++j) {
                double xhat = (vx2(r, j) - mu) * inv;
                double dxhat = go(r, j) * vg2(0, j);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            if (nodes_[gain].needs_grad || nodes_[bias].needs_grad) {
                Tensor& gg = g(gain);
                Tensor& gb = g(bias);
                for (int j = 0; j < c2; ++j) {
                    double xhat = (vx2(r, j) - mu) * inv;
                    gg(0, j) += go(r, j) * xhat;
                    gb(0, j) += go(r, j);
                }
            }
            if (nodes_[x].needs_grad) {
                Tensor& gx = g(x);
                for (int j = 0; j < c2; ++j) {
                    double xhat = (vx2(r, j) - mu) * inv;
                    double dxhat = go(r, j) * vg2(0, j);
                    gx(r, j) += inv * (dxhat - sum_dxhat / c2 - xhat * sum_dxhat_xhat / c2);
                }
            }
        }
    };
    return id;
}

int Graph::softmax_rows(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (int r = 0; r < va.rows; ++r) {
        double mx = -1e300;
        for (int j = 0; j < va.cols; ++j) mx = std::max(mx, va(r, j));
        double sum = 0.0;
        for (int j = 0; j < va.cols; ++j) {
            double e = std::exp(va(r, j) - mx);
            out(r, j) = e;
            sum += e;
        }
        double inv = 1.0 / sum;
        for (int j = 0; j < va.cols; ++j) out(r, j) *= inv;
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        const Tensor& vo = nodes_[id].val;
        Tensor& ga = g(a);
        for (int r = 0; r < vo.rows; ++r) {
            double dot = 0.0;
            for (int j = 0; j < vo.cols; ++j) dot += go(r, j) * vo(r, j);
            for (int j = 0; j < vo.cols; ++j) ga(r, j) += vo(r, j) * (go(r, j) - dot);
        }
    };
    return id;
}

int Graph::normalize_rows(int a, double eps) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, va.cols);
    for (int r = 0; r < va.rows; ++r) {
        double s = 0.0;
        for (int j = 0; j < va.cols; ++j) s += va(r, j) * va(r, j);
        double inv = 1.0 / std::sqrt(s + eps);
        for (int j = 0; j < va.cols; ++j) out(r, j) = va(r, j) * inv;
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, eps, id] {
        const Tensor& go = g(id);
        const Tensor& va2 = nodes_[a].val;
        Tensor& ga = g(a);
        for (int r = 0; r < va2.rows; ++r) {
            double s = 0.0, dot = 0.0;
            for (int j = 0; j < va2.cols; ++j) s += va2(r, j) * va2(r, j);
            double n = std::sqrt(s + eps);
            for (int j = 0; j < va2.cols; ++j) dot += go(r, j) * va2(r, j);
            for (int j = 0; j < va2.cols; ++j)
                ga(r, j) += go(r, j) / n - va2(r, j) * dot / (n * n * n);
        }
    };
    return id;
}

int Graph::slice_rows(int a, int r0, int n) {
    const Tensor& va = nodes_[a].val;
    if (r0 < 0 || r0 + n > va.rows) throw std::out_of_range("slice_rows");
    Tensor out(n, va.cols);
    std::copy(va.data.begin() + static_cast<size_t>(r0) * va.cols,
              va.data.begin() + static_cast<size_t>(r0 + n) * va.cols, out.data.begin());
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, r0, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (int r = 0; r < go.rows; ++r)
            for (int j = 0; j < go.cols; ++j) ga(r0 + r, j) += go(r, j);
    };
    return id;
}

int Graph::slice_cols(int a, int c0, int n) {
    const Tensor& va = nodes_[a].val;
    if (c0 < 0 || c0 + n > va.cols) throw std::out_of_range("slice_cols");
    Tensor out(va.rows, n);
    for (int r = 0; r < va.rows; ++r)
        for (int j = 0; j < n; ++j) out(r, j) = va(r, c0 + j);
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, c0, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (int r = 0; r < go.rows; ++r)
            for (int j = 0; j < go.cols; ++j) ga(r, c0 + j) += go(r, j);
    };
    return id;
}

int Graph::concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int cols = nodes_[parts[0]].val.cols, rows = 0;
    bool ng = false;
    for (int p : parts) {
        if (nodes_[p].val.cols != cols) throw std::invalid_argument("concat_rows: cols mismatch");
        rows += nodes_[p].val.rows;
        ng = ng || nodes_[p].needs_grad;
    }
    Tensor out(rows, cols);
    int r = 0;
    for (int p : parts) {
        const Tensor& vp = nodes_[p].val;
        std::copy(vp.data.begin(), vp.data.end(),
                  out.data.begin() + static_cast<size_t>(r) * cols);
        r += vp.rows;
    }
    if (!recording_ || !ng) return push(std::move(out), false);
    int id = push(std::move(out), true);
    std::vector<int> ps = parts;
    nodes_[id].back = [this, ps, id] {
        const Tensor& go = g(id);
        int r0 = 0;
        for (int p : ps) {
            const int pr = nodes_[p].val.rows;
            if (nodes_[p].needs_grad) {
                Tensor& gp = g(p);
                for (int r2 = 0; r2 < pr; ++r2)
                    for (int j = 0; j < go.cols; ++j) gp(r2, j) += go(r0 + r2, j);
            }
            r0 += pr;
        }
    };
    return id;
}

int Graph::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = nodes_[parts[0]].val.rows, cols = 0;
    bool ng = false;
    for (int p : parts) {
        if (nodes_[p].val.rows != rows) throw std::invalid_argument("concat_cols: rows mismatch");
        cols += nodes_[p].val.cols;
        ng = ng || nodes_[p].needs_grad;
    }
    Tensor out(rows, cols);
    int c = 0;
    for (int p : parts) {
        const Tensor& vp = nodes_[p].val;
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < vp.cols; ++j) out(r, c + j) = vp(r, j);
        c += vp.cols;
    }
    if (!recording_ || !ng) return push(std::move(out), false);
    int id = push(std::move(out), true);
    std::vector<int> ps = parts;
    nodes_[id].back = [this, ps, id] {
        const Tensor& go = g(id);
        int c0 = 0;
        for (int p : ps) {
            const int pc = nodes_[p].val.cols;
            if (nodes_[p].needs_grad) {
                Tensor& gp = g(p);
                for (int r = 0; r < go.rows; ++r)
                    for (int j = 0; j < pc; ++j) gp(r, j) += go(r, c0 + j);
            }
            c0 += pc;
        }
    };
    return id;
}

int Graph::add_rowvec(int x, int v) {
    const Tensor &vx = nodes_[x].val, &vv = nodes_[v].val;
    if (vv.rows != 1 || vv.cols != vx.cols) throw std::invalid_argument("add_rowvec: shape");
    Tensor out = vx;
    for (int r = 0; r < out.rows; ++r)
        for (int j = 0; j < out.cols; ++j) out(r, j) += vv(0, j);
    if (!track(x, v)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, x, v, id] {
        const Tensor& go = g(id);
        if (nodes_[x].needs_grad) {
            Tensor& gx = g(x);
            for (size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
        }
        if (nodes_[v].needs_grad) {
            Tensor& gv = g(v);
            for (int r = 0; r < go.rows; ++r)
                for (int j = 0; j < go.cols; ++j) gv(0, j) += go(r, j);
        }
    };
    return id;
}

int Graph::mul_rowvec(int x, int v) {
    const Tensor &vx = nodes_[x].val, &vv = nodes_[v].val;
    if (vv.rows != 1 || vv.cols != vx.cols) throw std::invalid_argument("mul_rowvec: shape");
    Tensor out = vx;
    for (int r = 0; r < out.rows; ++r)
        for (int j = 0; j < out.cols; ++j) out(r, j) *= vv(0, j);
    if (!track(x, v)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, x, v, id] {
        const Tensor& go = g(id);
        const Tensor& vx2 = nodes_[x].val;
        const Tensor& vv2 = nodes_[v].val;
        if (nodes_[x].needs_grad) {
            Tensor& gx = g(x);
            for (int r = 0; r < go.rows; ++r)
                for (int j = 0; j < go.cols; ++j) gx(r, j) += go(r, j) * vv2(0, j);
        }
        if (nodes_[v].needs_grad) {
            Tensor& gv = g(v);
            for (int r = 0; r < go.rows; ++r)
                for (int j = 0; j < go.cols; ++j) gv(0, j) += go(r, j) * vx2(r, j);
        }
    };
    return id;
}

int Graph::sum_all(int a) {
    const Tensor& va = nodes_[a].val;
    double s = 0.0;
    for (double v : va.data) s += v;
    if (!track(a)) return push(Tensor::scalar(s), false);
    int id = push(Tensor::scalar(s), true);
    nodes_[id].back = [this, a, id] {
        double go = g(id).data[0];
        Tensor& ga = g(a);
        for (double& v : ga.data) v += go;
    };
    return id;
}

int Graph::mean_all(int a) {
    const Tensor& va = nodes_[a].val;
    double s = 0.0;
    for (double v : va.data) s += v;
    double inv = 1.0 / static_cast<double>(va.size());
    if (!track(a)) return push(Tensor::scalar(s * inv), false);
    int id = push(Tensor::scalar(s * inv), true);
    nodes_[id].back = [this, a, inv, id] {
        double go = g(id).data[0] * inv;
        Tensor& ga = g(a);
        for (double& v : ga.data) v += go;
    };
    return id;
}

int Graph::mean_rows(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(1, va.cols);
    for (int r = 0; r < va.rows; ++r)
        for (int j = 0; j < va.cols; ++j) out(0, j) += va(r, j);
    double inv = 1.0 / va.rows;
    for (double& v : out.data) v *= inv;
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, inv, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (int r = 0; r < ga.rows; ++r)
            for (int j = 0; j < ga.cols; ++j) ga(r, j) += go(0, j) * inv;
    };
    return id;
}

int Graph::row_sum(int a) {
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows, 1);
    for (int r = 0; r < va.rows; ++r) {
        double s = 0.0;
        for (int j = 0; j < va.cols; ++j) s += va(r, j);
        out(r, 0) = s;
    }
    if (!track(a)) return push(std::move(out), false);
    int id = push(std::move(out), true);
    nodes_[id].back = [this, a, id] {
        const Tensor& go = g(id);
        Tensor& ga = g(a);
        for (int r = 0; r < ga.rows; ++r)
            for (int j = 0; j < ga.cols; ++j) ga(r, j) += go(r, 0);
    };
    return id;
}

}  // namespace gardlab
