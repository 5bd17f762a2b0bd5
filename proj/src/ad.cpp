#include "diffusereg/ad.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "diffusereg/errors.hpp"
#include "diffusereg/kernels.hpp"

namespace dreg::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
}

// Parent grad buffer, or nullptr when that parent does not take gradients.
double* grad_of(const NodePtr& p) { return p->requires_grad ? p->ensure_grad().data() : nullptr; }

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor constant(int rows, int cols, std::vector<double> values) {
    require(values.size() == static_cast<std::size_t>(rows) * cols, "constant: size mismatch");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    return Tensor(n);
}

Tensor zeros(int rows, int cols) {
    return constant(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0));
}

Tensor variable(int rows, int cols, std::vector<double> values) {
    Tensor t = constant(rows, cols, std::move(values));
    t.node()->requires_grad = true;
    return t;
}

Tensor make_op(int rows, int cols, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(parents.begin(), parents.end(),
                                     [](const Tensor& p) { return p.requires_grad(); });
        if (any) {
            n->requires_grad = true;
            for (auto& p : parents)
                if (p.defined()) n->parents.push_back(p.node());
            n->backward = std::move(backward);
        }
    }
    return Tensor(n);
}

void backward(const Tensor& loss) {
    require(loss.size() == 1, "backward: loss must be a scalar");
    if (!loss.requires_grad()) return;
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---- elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    return make_op(a.rows(), a.cols(), std::move(v), {a, b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (double* g = grad_of(p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    auto pa = a.node(), pb = b.node();
    return make_op(a.rows(), a.cols(), std::move(v), {a, b}, [pa, pb, ga, gb](Node& self) {
        if (ga) {
            double* g = pa->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (gb) {
            double* g = pb->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.rows(), a.cols(), std::move(v), {a, b}, [pa, pb](Node& self) {
        if (double* g = grad_of(pa))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        if (double* g = grad_of(pb))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    });
}

Tensor affine(const Tensor& a, double s, double c) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a.value()[i] + c;
    auto pa = a.node();
    return make_op(a.rows(), a.cols(), std::move(v), {a}, [pa, s](Node& self) {
        double* g = pa->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    });
}

Tensor add_row_vector(const Tensor& x, const Tensor& vec) {
    require(vec.size() == static_cast<std::size_t>(x.cols()), "add_row_vector: width mismatch");
    const int r = x.rows(), c = x.cols();
    std::vector<double> v(x.value());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v[i * c + j] += vec.value()[j];
    auto px = x.node(), pv = vec.node();
    return make_op(r, c, std::move(v), {x, vec}, [px, pv, r, c](Node& self) {
        if (double* g = grad_of(px))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = grad_of(pv))
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    });
}

Tensor add_col_vector(const Tensor& x, const Tensor& vec) {
    require(vec.size() == static_cast<std::size_t>(x.rows()), "add_col_vector: height mismatch");
    const int r = x.rows(), c = x.cols();
    std::vector<double> v(x.value());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v[i * c + j] += vec.value()[i];
    auto px = x.node(), pv = vec.node();
    return make_op(r, c, std::move(v), {x, vec}, [px, pv, r, c](Node& self) {
        if (double* g = grad_of(px))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = grad_of(pv))
            for (int i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int j = 0; j < c; ++j) acc += self.grad[i * c + j];
                g[i] += acc;
            }
    });
}

Tensor channel_affine(const Tensor& x, std::span<const double> scale, std::span<const double> shift) {
    require(scale.size() == static_cast<std::size_t>(x.rows()) && shift.size() == scale.size(),
            "channel_affine: channel count mismatch");
    const int r = x.rows(), c = x.cols();
    std::vector<double> v(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v[i * c + j] = x.value()[i * c + j] * scale[i] + shift[i];
    std::vector<double> sc(scale.begin(), scale.end());
    auto px = x.node();
    return make_op(r, c, std::move(v), {x}, [px, sc, r, c](Node& self) {
        double* g = px->ensure_grad().data();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * sc[i];
    });
}

Tensor gelu(const Tensor& x) {
    // tanh approximation
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double a = x.value()[i];
        v[i] = 0.5 * a * (1.0 + std::tanh(k * (a + 0.044715 * a * a * a)));
    }
    auto px = x.node();
    return make_op(x.rows(), x.cols(), std::move(v), {x}, [px](Node& self) {
        double* g = px->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double a = px->value[i];
            const double u = k * (a + 0.044715 * a * a * a);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * a * a);
            g[i] += self.grad[i] * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * du);
        }
    });
}

Tensor silu(const Tensor& x) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double a = x.value()[i];
        v[i] = a / (1.0 + std::exp(-a));
    }
    auto px = x.node();
    return make_op(x.rows(), x.cols(), std::move(v), {x}, [px](Node& self) {
        double* g = px->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double a = px->value[i];
            const double sg = 1.0 / (1.0 + std::exp(-a));
            g[i] += self.grad[i] * (sg * (1.0 + a * (1.0 - sg)));
        }
    });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double a = x.value()[i];
        v[i] = a > 0.0 ? a : slope * a;
    }
    auto px = x.node();
    return make_op(x.rows(), x.cols(), std::move(v), {x}, [px, slope](Node& self) {
        double* g = px->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (px->value[i] > 0.0 ? 1.0 : slope);
    });
}

// ---- shape ------------------------------------------------------------------------

Tensor transpose(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    std::vector<double> v(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v[j * r + i] = x.value()[i * c + j];
    auto px = x.node();
    return make_op(c, r, std::move(v), {x}, [px, r, c](Node& self) {
        double* g = px->ensure_grad().data();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& x, int rows, int cols) {
    require(static_cast<std::size_t>(rows) * cols == x.size(), "reshape: element count mismatch");
    auto px = x.node();
    return make_op(rows, cols, x.value(), {x}, [px](Node& self) {
        double* g = px->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int>> index) {
    const int c = x.cols();
    const int r = static_cast<int>(index->size());
    std::vector<double> v(static_cast<std::size_t>(r) * c, 0.0);
    for (int i = 0; i < r; ++i) {
        const int src = (*index)[i];
        if (src < 0) continue;
        require(src < x.rows(), "gather_rows: index out of range");
        std::copy_n(x.value().data() + static_cast<std::size_t>(src) * c, c, v.data() + static_cast<std::size_t>(i) * c);
    }
    auto px = x.node();
    return make_op(r, c, std::move(v), {x}, [px, index, c](Node& self) {
        double* g = px->ensure_grad().data();
        const int r = static_cast<int>(index->size());
        for (int i = 0; i < r; ++i) {
            const int src = (*index)[i];
            if (src < 0) continue;
            const double* gi = self.grad.data() + static_cast<std::size_t>(i) * c;
            double* go = g + static_cast<std::size_t>(src) * c;
            for (int j = 0; j < c; ++j) go[j] += gi[j];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int r = parts.front().rows();
    int c = 0;
    for (auto& p : parts) {
        require(p.rows() == r, "concat_cols: row mismatch");
        c += p.cols();
    }
    std::vector<double> v(static_cast<std::size_t>(r) * c);
    int off = 0;
    std::vector<int> offsets;
    for (auto& p : parts) {
        offsets.push_back(off);
        for (int i = 0; i < r; ++i)
            std::copy_n(p.value().data() + static_cast<std::size_t>(i) * p.cols(), p.cols(),
                        v.data() + static_cast<std::size_t>(i) * c + off);
        off += p.cols();
    }
    std::vector<NodePtr> nodes;
    for (auto& p : parts) nodes.push_back(p.node());
    return make_op(r, c, std::move(v), parts, [nodes, offsets, r, c](Node& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            double* g = grad_of(nodes[k]);
            if (!g) continue;
            const int pc = nodes[k]->cols;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < pc; ++j) g[i * pc + j] += self.grad[static_cast<std::size_t>(i) * c + offsets[k] + j];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const int c = parts.front().cols();
    int r = 0;
    for (auto& p : parts) {
        require(p.cols() == c, "concat_rows: column mismatch");
        r += p.rows();
    }
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(r) * c);
    for (auto& p : parts) v.insert(v.end(), p.value().begin(), p.value().end());
    std::vector<NodePtr> nodes;
    for (auto& p : parts) nodes.push_back(p.node());
    return make_op(r, c, std::move(v), parts, [nodes](Node& self) {
        std::size_t off = 0;
        for (auto& n : nodes) {
            if (double* g = grad_of(n))
                for (std::size_t i = 0; i < n->value.size(); ++i) g[i] += self.grad[off + i];
            off += n->value.size();
        }
    });
}

Tensor slice_rows(const Tensor& x, int begin, int count) {
    require(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows: range out of bounds");
    const int c = x.cols();
    std::vector<double> v(x.value().begin() + static_cast<std::size_t>(begin) * c,
                          x.value().begin() + static_cast<std::size_t>(begin + count) * c);
    auto px = x.node();
    return make_op(count, c, std::move(v), {x}, [px, begin, c](Node& self) {
        double* g = px->ensure_grad().data() + static_cast<std::size_t>(begin) * c;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

// ---- layers -----------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.cols() == w.rows(), "linear: inner dimension mismatch");
    const int n = x.rows(), cin = x.cols(), cout = w.cols();
    std::vector<double> v(static_cast<std::size_t>(n) * cout);
    kernels::matmul(x.value().data(), w.value().data(), v.data(), n, cout, cin, false);
    if (b.defined()) {
        require(b.size() == static_cast<std::size_t>(cout), "linear: bias width mismatch");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cout; ++j) v[static_cast<std::size_t>(i) * cout + j] += b.value()[j];
    }
    auto px = x.node(), pw = w.node();
    NodePtr pb = b.defined() ? b.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_op(n, cout, std::move(v), parents, [px, pw, pb, n, cin, cout](Node& self) {
        if (double* g = grad_of(px)) kernels::matmul_a_bt(self.grad.data(), pw->value.data(), g, n, cin, cout, true);
        if (double* g = grad_of(pw)) kernels::matmul_at_b(px->value.data(), self.grad.data(), g, cin, cout, n, true);
        if (pb) {
            if (double* g = grad_of(pb))
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < cout; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * cout + j];
        }
    });
}

namespace {

struct RowStats {
    std::vector<double> xhat;
    std::vector<double> inv_std;
};

RowStats standardize_rows(const std::vector<double>& x, int r, int c, double eps) {
    RowStats st{std::vector<double>(x.size()), std::vector<double>(r)};
    for (int i = 0; i < r; ++i) {
        const double* row = x.data() + static_cast<std::size_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        st.inv_std[i] = is;
        for (int j = 0; j < c; ++j) st.xhat[static_cast<std::size_t>(i) * c + j] = (row[j] - mu) * is;
    }
    return st;
}

// dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), per row.
void standardize_rows_backward(const double* dxhat, const RowStats& st, int r, int c, double* gx) {
    for (int i = 0; i < r; ++i) {
        const double* dh = dxhat + static_cast<std::size_t>(i) * c;
        const double* xh = st.xhat.data() + static_cast<std::size_t>(i) * c;
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < c; ++j) {
            m1 += dh[j];
            m2 += dh[j] * xh[j];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) gx[static_cast<std::size_t>(i) * c + j] += st.inv_std[i] * (dh[j] - m1 - xh[j] * m2);
    }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int r = x.rows(), c = x.cols();
    require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c),
            "layer_norm: affine width mismatch");
    auto st = std::make_shared<RowStats>(standardize_rows(x.value(), r, c, eps));
    std::vector<double> v(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * c + j;
            v[k] = st->xhat[k] * gamma.value()[j] + beta.value()[j];
        }
    auto px = x.node(), pg = gamma.node(), pbeta = beta.node();
    return make_op(r, c, std::move(v), {x, gamma, beta}, [px, pg, pbeta, st, r, c](Node& self) {
        if (double* g = grad_of(pg))
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * c + j] * st->xhat[static_cast<std::size_t>(i) * c + j];
        if (double* g = grad_of(pbeta))
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * c + j];
        if (double* g = grad_of(px)) {
            std::vector<double> dxhat(self.grad.size());
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    dxhat[static_cast<std::size_t>(i) * c + j] = self.grad[static_cast<std::size_t>(i) * c + j] * pg->value[j];
            standardize_rows_backward(dxhat.data(), *st, r, c, g);
        }
    });
}

Tensor normalize_rows(const Tensor& x, double eps) {
    const int r = x.rows(), c = x.cols();
    auto st = std::make_shared<RowStats>(standardize_rows(x.value(), r, c, eps));
    auto px = x.node();
    return make_op(r, c, st->xhat, {x}, [px, st, r, c](Node& self) {
        standardize_rows_backward(self.grad.data(), *st, r, c, px->ensure_grad().data());
    });
}

Tensor conv3(const Tensor& x, const Tensor& w, const Tensor& b, Shape3 s) {
    const int cin = x.rows(), cout = w.rows();
    require(static_cast<std::size_t>(x.cols()) == s.size(), "conv3: input is not channels x voxels");
    require(w.cols() == cin * 27, "conv3: weight must be Cout x (Cin*27)");
    require(!b.defined() || b.size() == static_cast<std::size_t>(cout), "conv3: bias size mismatch");
    std::vector<double> v(static_cast<std::size_t>(cout) * s.size());
    kernels::conv3_forward(x.value().data(), w.value().data(), b.defined() ? b.value().data() : nullptr, v.data(),
                           cin, cout, s);
    auto px = x.node(), pw = w.node();
    NodePtr pb = b.defined() ? b.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_op(cout, static_cast<int>(s.size()), std::move(v), parents, [px, pw, pb, cin, cout, s](Node& self) {
        kernels::conv3_backward(px->value.data(), pw->value.data(), self.grad.data(), grad_of(px), grad_of(pw),
                                pb ? grad_of(pb) : nullptr, cin, cout, s);
    });
}

Tensor window_attention(const Tensor& qkv, std::shared_ptr<const AttentionPlan> plan, const Tensor& bias_table) {
    kernels::AttentionLayout lay = plan->layout;
    const int c = lay.channels();
    require(qkv.cols() == 3 * c, "window_attention: qkv width must be 3*C");
    require(qkv.rows() == lay.windows * lay.seq, "window_attention: qkv rows must be windows*seq");
    lay.mask = plan->mask.empty() ? nullptr : plan->mask.data();
    lay.bias_index = plan->bias_index.empty() ? nullptr : plan->bias_index.data();
    if (bias_table.defined()) {
        require(bias_table.rows() == lay.heads && bias_table.cols() == lay.bias_entries,
                "window_attention: bias table must be heads x entries");
        lay.bias_table = bias_table.value().data();
    } else {
        lay.bias_table = nullptr;
    }
    std::vector<double> out(static_cast<std::size_t>(lay.windows) * lay.q_count * c);
    auto probs = std::make_shared<std::vector<double>>(lay.prob_count());
    kernels::window_attention_forward(lay, qkv.value().data(), out.data(), probs->data());
    auto pq = qkv.node();
    NodePtr pt = bias_table.defined() ? bias_table.node() : nullptr;
    std::vector<Tensor> parents{qkv};
    if (bias_table.defined()) parents.push_back(bias_table);
    return make_op(lay.windows * lay.q_count, c, std::move(out), parents, [pq, pt, plan, probs](Node& self) {
        kernels::AttentionLayout l = plan->layout;
        l.mask = plan->mask.empty() ? nullptr : plan->mask.data();
        l.bias_index = plan->bias_index.empty() ? nullptr : plan->bias_index.data();
        l.bias_table = pt ? pt->value.data() : nullptr;
        std::vector<double> scratch;
        double* gq = grad_of(pq);
        if (!gq) {
            scratch.assign(pq->value.size(), 0.0);
            gq = scratch.data();
        }
        kernels::window_attention_backward(l, pq->value.data(), probs->data(), self.grad.data(), gq,
                                           pt ? grad_of(pt) : nullptr);
    });
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.value()) acc += v;
    auto px = x.node();
    return make_op(1, 1, {acc}, {x}, [px](Node& self) {
        double* g = px->ensure_grad().data();
        for (std::size_t i = 0; i < px->value.size(); ++i) g[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return affine(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mse: shape mismatch");
    const std::size_t n = a.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    auto pa = a.node(), pb = b.node();
    return make_op(1, 1, {acc / static_cast<double>(n)}, {a, b}, [pa, pb, n](Node& self) {
        const double s = 2.0 * self.grad[0] / static_cast<double>(n);
        double* ga = grad_of(pa);
        double* gb = grad_of(pb);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = s * (pa->value[i] - pb->value[i]);
            if (ga) ga[i] += d;
            if (gb) gb[i] -= d;
        }
    });
}

}  // namespace dreg::ad
