#include "lcc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace lcc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

int64_t shape_product(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
    os << "]";
    return os.str();
}

void validate_shape(const std::vector<int>& shape) {
    for (int d : shape)
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
}

std::shared_ptr<TensorNode> new_node(std::vector<int> shape, std::vector<double> data) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

// c[m×n] += a[m×k] · b[k×n]; the j-loop carries no reduction so it vectorizes
// under strict FP. Summation order over p is fixed (ascending), which keeps
// results bit-stable.
void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        double* cr = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double apv = ar[p];
            const double* br = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += apv * br[j];
        }
    }
}

std::vector<double> transposed(const double* a, int m, int n) {
    std::vector<double> t(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) t[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
    return t;
}

void require_2d(const Tensor& t, const char* who) {
    if (t.rank() != 2) throw ShapeError(std::string(who) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

} // namespace

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    validate_shape(shape);
    const auto n = static_cast<size_t>(shape_product(shape));
    auto node = new_node(std::move(shape), std::vector<double>(n, 0.0));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    validate_shape(shape);
    const auto n = static_cast<size_t>(shape_product(shape));
    return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    if (shape_product(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto node = new_node(std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::randn(std::vector<int> shape, RngState& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.data()) x = rng.next_normal() * stddev;
    return t;
}

double Tensor::item() const {
    if (!node_ || node_->size() != 1)
        throw ShapeError("item(): tensor is not scalar");
    return node_->data[0];
}

Tensor Tensor::detached() const {
    return from(node_->shape, node_->data, false);
}

Tensor Tensor::clone() const {
    return from(node_->shape, node_->data, node_->requires_grad);
}

void Tensor::backward() const {
    if (!node_) throw Error("backward() on empty tensor");
    if (node_->size() != 1) throw ShapeError("backward(): root must be scalar");

    // post-order DFS over parent edges, iterative
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get()});
    seen.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    // interior grads are per-pass; leaf grads persist and accumulate
    for (TensorNode* n : order)
        if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);

    node_->ensure_grad();
    node_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- kernels ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    mm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (any_grad({&a, &b})) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {a.node_ptr(),
                         b.node_ptr()};
        node->backward_fn = [m, k, n](TensorNode& self) {
            TensorNode& pa = *self.parents[0];
            TensorNode& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                auto bt = transposed(pb.data.data(), k, n);
                mm_acc(self.grad.data(), bt.data(), pa.grad.data(), m, n, k);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                auto at = transposed(pa.data.data(), m, k);
                mm_acc(at.data(), self.grad.data(), pb.grad.data(), k, m, n);
            }
        };
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
    require_2d(x, "linear");
    require_2d(w, "linear");
    const int t = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in)
        throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + " vs w " + shape_str(w.shape()));
    Tensor out = Tensor::zeros({t, out_dim});
    {
        auto wt = transposed(w.data().data(), out_dim, in);
        mm_acc(x.data().data(), wt.data(), out.data().data(), t, in, out_dim);
    }
    if (any_grad({&x, &w})) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr(),
                         w.node_ptr()};
        node->backward_fn = [t, in, out_dim](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            TensorNode& pw = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                mm_acc(self.grad.data(), pw.data.data(), px.grad.data(), t, out_dim, in);
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                auto gt = transposed(self.grad.data(), t, out_dim);
                mm_acc(gt.data(), px.data.data(), pw.grad.data(), out_dim, t, in);
            }
        };
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::from({n, m}, transposed(a.data().data(), m, n));
    if (a.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {a.node_ptr()};
        node->backward_fn = [m, n](TensorNode& self) {
            TensorNode& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            pa.ensure_grad();
            auto gt = transposed(self.grad.data(), n, m);
            for (size_t i = 0; i < gt.size(); ++i) pa.grad[i] += gt[i];
        };
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    auto& dd = out.data();
    for (size_t i = 0; i < dd.size(); ++i) dd[i] = da[i] + db[i];
    if (any_grad({&a, &b})) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {a.node_ptr(),
                         b.node_ptr()};
        node->backward_fn = [](TensorNode& self) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    auto& dd = out.data();
    for (size_t i = 0; i < dd.size(); ++i) dd[i] = da[i] * db[i];
    if (any_grad({&a, &b})) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {a.node_ptr(),
                         b.node_ptr()};
        node->backward_fn = [](TensorNode& self) {
            TensorNode& pa = *self.parents[0];
            TensorNode& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
            }
        };
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    auto& dd = out.data();
    for (size_t i = 0; i < dd.size(); ++i) dd[i] = da[i] * c;
    if (a.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {a.node_ptr()};
        node->backward_fn = [c](TensorNode& self) {
            TensorNode& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * c;
        };
    }
    return out;
}

Tensor row_scale(const Tensor& x, std::vector<double> factors) {
    require_2d(x, "row_scale");
    const int r = x.dim(0), c = x.dim(1);
    if (static_cast<int>(factors.size()) != r)
        throw ShapeError("row_scale: " + std::to_string(factors.size()) + " factors for " +
                         std::to_string(r) + " rows");
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at2(i, j) = x.at2(i, j) * factors[static_cast<size_t>(i)];
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [f = std::move(factors), r, c](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    px.grad[static_cast<size_t>(i) * c + j] +=
                        self.grad[static_cast<size_t>(i) * c + j] * f[static_cast<size_t>(i)];
        };
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& dx = x.data();
    auto& dd = out.data();
    for (size_t i = 0; i < dd.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-dx[i]));
        dd[i] = dx[i] * s;
    }
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = px.data[i];
                const double s = 1.0 / (1.0 + std::exp(-v));
                px.grad[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
            }
        };
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (double& g : px.grad) g += self.grad[0];
        };
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_rows: rank-0 tensor");
    const int n = x.cols();
    const int64_t rows = n == 0 ? 0 : x.size() / n;
    if (n == 0) throw ShapeError("softmax_rows: empty last axis");
    Tensor out = Tensor::zeros(x.shape());
    const auto& dx = x.data();
    auto& dy = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = dx.data() + r * n;
        double* yrow = dy.data() + r * n;
        double mx = kNegInf;
        for (int j = 0; j < n; ++j) {
            if (std::isnan(row[j])) throw EvalError("softmax_rows: NaN input entry");
            if (row[j] > mx) mx = row[j];
        }
        if (mx == kNegInf)
            throw MaskError("softmax_rows: all entries of row " + std::to_string(r) +
                            " are -inf (masked row)");
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = row[j] == kNegInf ? 0.0 : std::exp(row[j] - mx);
            yrow[j] = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) yrow[j] /= z;
    }
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [rows, n](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = self.data.data() + r * n;
                const double* g = self.grad.data() + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g[j] * y[j];
                double* gx = px.grad.data() + r * n;
                for (int j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q_logits) {
    if (p.shape() != q_logits.shape())
        throw ShapeError("kl_divergence shape mismatch: " + shape_str(p.shape()) + " vs " +
                         shape_str(q_logits.shape()));
    const int n = p.cols();
    const int64_t rows = n == 0 ? 0 : p.size() / n;
    if (rows == 0) return Tensor::scalar(0.0);

    // validate p and precompute log-softmax(q) row-wise
    std::vector<double> sm(static_cast<size_t>(rows) * n);
    const auto& dp = p.data();
    const auto& dq = q_logits.data();
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* prow = dp.data() + r * n;
        double psum = 0.0;
        for (int j = 0; j < n; ++j) {
            if (prow[j] < 0.0)
                throw DistributionError("kl_divergence: negative probability in row " + std::to_string(r));
            psum += prow[j];
        }
        if (std::abs(psum - 1.0) > 1e-9)
            throw DistributionError("kl_divergence: row " + std::to_string(r) + " sums to " +
                                    std::to_string(psum));
        const double* qrow = dq.data() + r * n;
        double mx = qrow[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, qrow[j]);
        double z = 0.0;
        double* smrow = sm.data() + r * n;
        for (int j = 0; j < n; ++j) {
            smrow[j] = std::exp(qrow[j] - mx);
            z += smrow[j];
        }
        const double logz = std::log(z) + mx;
        double row_kl = 0.0;
        for (int j = 0; j < n; ++j) {
            smrow[j] /= z;
            if (prow[j] > 0.0) row_kl += prow[j] * (std::log(prow[j]) - (qrow[j] - logz));
        }
        total += row_kl;
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    if (q_logits.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {q_logits.node_ptr(),
                         p.node_ptr()};
        node->backward_fn = [sm = std::move(sm), rows, n](TensorNode& self) {
            TensorNode& pq = *self.parents[0];
            TensorNode& pp = *self.parents[1];
            if (!pq.requires_grad) return;
            pq.ensure_grad();
            const double up = self.grad[0] / static_cast<double>(rows);
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < n; ++j) {
                    const size_t i = static_cast<size_t>(r) * n + j;
                    pq.grad[i] += up * (sm[i] - pp.data[i]);
                }
        };
    }
    return out;
}

Tensor mse_loss(const Tensor& target, const Tensor& pred) {
    if (target.shape() != pred.shape())
        throw ShapeError("mse_loss shape mismatch: " + shape_str(target.shape()) + " vs " +
                         shape_str(pred.shape()));
    const int64_t n = pred.size();
    if (n == 0) return Tensor::scalar(0.0);
    const auto& dt = target.data();
    const auto& dp = pred.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = dp[static_cast<size_t>(i)] - dt[static_cast<size_t>(i)];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (pred.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {pred.node_ptr(),
                         target.node_ptr()};
        node->backward_fn = [n](TensorNode& self) {
            TensorNode& pp = *self.parents[0];
            TensorNode& pt = *self.parents[1];
            if (!pp.requires_grad) return;
            pp.ensure_grad();
            const double up = self.grad[0] * 2.0 / static_cast<double>(n);
            for (size_t i = 0; i < pp.data.size(); ++i) pp.grad[i] += up * (pp.data[i] - pt.data[i]);
        };
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    require_2d(logits, "cross_entropy");
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(t) + " rows");
    if (t == 0) return Tensor::scalar(0.0);
    std::vector<double> sm(static_cast<size_t>(t) * v);
    const auto& dl = logits.data();
    double total = 0.0;
    for (int r = 0; r < t; ++r) {
        const int y = targets[static_cast<size_t>(r)];
        if (y < 0 || y >= v)
            throw ShapeError("cross_entropy: target " + std::to_string(y) + " out of range [0, " +
                             std::to_string(v) + ")");
        const double* row = dl.data() + static_cast<size_t>(r) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        double* smrow = sm.data() + static_cast<size_t>(r) * v;
        for (int j = 0; j < v; ++j) {
            smrow[j] = std::exp(row[j] - mx);
            z += smrow[j];
        }
        for (int j = 0; j < v; ++j) smrow[j] /= z;
        total += std::log(z) + mx - row[y];
    }
    Tensor out = Tensor::scalar(total / t);
    if (logits.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {logits.node_ptr()};
        node->backward_fn = [sm = std::move(sm), ys = std::vector<int>(targets.begin(), targets.end()),
                             t, v](TensorNode& self) {
            TensorNode& pl = *self.parents[0];
            if (!pl.requires_grad) return;
            pl.ensure_grad();
            const double up = self.grad[0] / t;
            for (int r = 0; r < t; ++r) {
                double* g = pl.grad.data() + static_cast<size_t>(r) * v;
                const double* s = sm.data() + static_cast<size_t>(r) * v;
                for (int j = 0; j < v; ++j) g[j] += up * s[j];
                g[ys[static_cast<size_t>(r)]] -= up;
            }
        };
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require_2d(x, "rms_norm");
    const int r = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d)
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " vs x " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_rms(static_cast<size_t>(r));
    const auto& dx = x.data();
    const auto& dg = gain.data();
    for (int i = 0; i < r; ++i) {
        const double* row = dx.data() + static_cast<size_t>(i) * d;
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(ss / d + eps);
        inv_rms[static_cast<size_t>(i)] = inv;
        double* yrow = out.data().data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) yrow[j] = dg[static_cast<size_t>(j)] * row[j] * inv;
    }
    if (any_grad({&x, &gain})) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr(),
                         gain.node_ptr()};
        node->backward_fn = [inv = std::move(inv_rms), r, d](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            TensorNode& pg = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (int i = 0; i < r; ++i) {
                    const double* xr = px.data.data() + static_cast<size_t>(i) * d;
                    const double* g = self.grad.data() + static_cast<size_t>(i) * d;
                    const double* gn = pg.data.data();
                    const double iv = inv[static_cast<size_t>(i)];
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += g[j] * gn[j] * xr[j];
                    double* gx = px.grad.data() + static_cast<size_t>(i) * d;
                    const double c = dot * iv * iv * iv / d;
                    for (int j = 0; j < d; ++j) gx[j] += g[j] * gn[j] * iv - xr[j] * c;
                }
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int i = 0; i < r; ++i) {
                    const double* xr = px.data.data() + static_cast<size_t>(i) * d;
                    const double* g = self.grad.data() + static_cast<size_t>(i) * d;
                    const double iv = inv[static_cast<size_t>(i)];
                    for (int j = 0; j < d; ++j) pg.grad[static_cast<size_t>(j)] += g[j] * xr[j] * iv;
                }
            }
        };
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
    require_2d(table, "embedding_rows");
    const int v = table.dim(0), d = table.dim(1);
    const int t = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    for (int i = 0; i < t; ++i) {
        const int id = ids[static_cast<size_t>(i)];
        if (id < 0 || id >= v)
            throw ShapeError("embedding_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        std::copy_n(table.data().data() + static_cast<size_t>(id) * d, d,
                    out.data().data() + static_cast<size_t>(i) * d);
    }
    if (table.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {table.node_ptr()};
        node->backward_fn = [ids = std::vector<int>(ids.begin(), ids.end()), d](TensorNode& self) {
            TensorNode& pt = *self.parents[0];
            if (!pt.requires_grad) return;
            pt.ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const double* g = self.grad.data() + i * d;
                double* gt = pt.grad.data() + static_cast<size_t>(ids[i]) * d;
                for (int j = 0; j < d; ++j) gt[j] += g[j];
            }
        };
    }
    return out;
}

Tensor rotary(const Tensor& x, std::span<const int> positions, int n_heads, int head_dim,
              double rope_base, int rope_dims) {
    require_2d(x, "rotary");
    const int t = x.dim(0), d = x.dim(1);
    if (d != n_heads * head_dim)
        throw ShapeError("rotary: width " + std::to_string(d) + " != n_heads*head_dim");
    if (head_dim % 2 != 0) throw ShapeError("rotary: head_dim must be even");
    if (rope_dims == 0) rope_dims = head_dim;
    if (rope_dims < 0 || rope_dims > head_dim || rope_dims % 2 != 0)
        throw ShapeError("rotary: rope_dims must be even and within head_dim");
    if (static_cast<int>(positions.size()) != t)
        throw ShapeError("rotary: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(t) + " rows");
    const int half = rope_dims / 2;
    // angle tables shared by forward and backward
    std::vector<double> cs(static_cast<size_t>(t) * half), sn(static_cast<size_t>(t) * half);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < half; ++j) {
            const double freq = std::pow(rope_base, -2.0 * j / rope_dims);
            const double ang = positions[static_cast<size_t>(i)] * freq;
            cs[static_cast<size_t>(i) * half + j] = std::cos(ang);
            sn[static_cast<size_t>(i) * half + j] = std::sin(ang);
        }
    Tensor out = Tensor::from(x.shape(), x.data());
    const auto& dx = x.data();
    auto& dy = out.data();
    for (int i = 0; i < t; ++i)
        for (int h = 0; h < n_heads; ++h)
            for (int j = 0; j < half; ++j) {
                const size_t base = static_cast<size_t>(i) * d + static_cast<size_t>(h) * head_dim + 2 * j;
                const double c = cs[static_cast<size_t>(i) * half + j];
                const double s = sn[static_cast<size_t>(i) * half + j];
                const double a = dx[base], b = dx[base + 1];
                dy[base] = a * c - b * s;
                dy[base + 1] = a * s + b * c;
            }
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [cs = std::move(cs), sn = std::move(sn), t, d, n_heads, head_dim,
                             half](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int i = 0; i < t; ++i)
                for (int h = 0; h < n_heads; ++h) {
                    const size_t hb = static_cast<size_t>(i) * d + static_cast<size_t>(h) * head_dim;
                    for (int j = 0; j < half; ++j) {
                        const size_t base = hb + 2 * j;
                        const double c = cs[static_cast<size_t>(i) * half + j];
                        const double s = sn[static_cast<size_t>(i) * half + j];
                        const double ga = self.grad[base], gb = self.grad[base + 1];
                        px.grad[base] += ga * c + gb * s;
                        px.grad[base + 1] += -ga * s + gb * c;
                    }
                    for (int j = 2 * half; j < head_dim; ++j) px.grad[hb + j] += self.grad[hb + j];
                }
        };
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    require_2d(x, "slice_rows");
    const int r = x.dim(0), c = x.dim(1);
    if (r0 < 0 || r1 < r0 || r1 > r)
        throw ShapeError("slice_rows: [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of " + std::to_string(r) + " rows");
    Tensor out = Tensor::zeros({r1 - r0, c});
    std::copy_n(x.data().data() + static_cast<size_t>(r0) * c, static_cast<size_t>(r1 - r0) * c,
                out.data().data());
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [r0, c](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                px.grad[static_cast<size_t>(r0) * c + i] += self.grad[i];
        };
    }
    return out;
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
    require_2d(x, "gather_rows");
    const int r = x.dim(0), c = x.dim(1);
    const int t = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({t, c});
    for (int i = 0; i < t; ++i) {
        const int src = rows[static_cast<size_t>(i)];
        if (src < 0 || src >= r)
            throw ShapeError("gather_rows: row " + std::to_string(src) + " out of range [0, " +
                             std::to_string(r) + ")");
        std::copy_n(x.data().data() + static_cast<size_t>(src) * c, c,
                    out.data().data() + static_cast<size_t>(i) * c);
    }
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [rows = std::vector<int>(rows.begin(), rows.end()), c](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (size_t i = 0; i < rows.size(); ++i) {
                const double* g = self.grad.data() + i * c;
                double* gx = px.grad.data() + static_cast<size_t>(rows[i]) * c;
                for (int j = 0; j < c; ++j) gx[j] += g[j];
            }
        };
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    require_2d(x, "slice_cols");
    const int r = x.dim(0), c = x.dim(1);
    if (c0 < 0 || c1 < c0 || c1 > c)
        throw ShapeError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of " + std::to_string(c) + " cols");
    const int w = c1 - c0;
    Tensor out = Tensor::zeros({r, w});
    for (int i = 0; i < r; ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(i) * c + c0, w,
                    out.data().data() + static_cast<size_t>(i) * w);
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        auto* node = out.node();
        node->parents = {x.node_ptr()};
        node->backward_fn = [c0, c, w, r](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    px.grad[static_cast<size_t>(i) * c + c0 + j] +=
                        self.grad[static_cast<size_t>(i) * w + j];
        };
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int c = parts[0].dim(1);
    int total = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_rows");
        if (p.dim(1) != c)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        total += p.dim(0);
        grad = grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros({total, c});
    int row = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.data().data(), p.size(), out.data().data() + static_cast<size_t>(row) * c);
        row += p.dim(0);
    }
    if (grad) {
        out.set_requires_grad(true);
        auto* node = out.node();
        for (const Tensor& p : parts)
            node->parents.push_back(p.node_ptr());
        node->backward_fn = [c](TensorNode& self) {
            size_t offset = 0;
            for (auto& p : self.parents) {
                const size_t n = p->data.size();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < n; ++i) p->grad[i] += self.grad[offset + i];
                }
                offset += n;
            }
        };
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int r = parts[0].dim(0);
    int total = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_cols");
        if (p.dim(0) != r) throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        total += p.dim(1);
        grad = grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros({r, total});
    int col = 0;
    for (const Tensor& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < r; ++i)
            std::copy_n(p.data().data() + static_cast<size_t>(i) * w, w,
                        out.data().data() + static_cast<size_t>(i) * total + col);
        col += w;
    }
    if (grad) {
        out.set_requires_grad(true);
        auto* node = out.node();
        for (const Tensor& p : parts)
            node->parents.push_back(p.node_ptr());
        node->backward_fn = [r, total](TensorNode& self) {
            int col = 0;
            for (auto& p : self.parents) {
                const int w = static_cast<int>(p->data.size()) / r;
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                self.grad[static_cast<size_t>(i) * total + col + j];
                }
                col += w;
            }
        };
    }
    return out;
}

int argmax_lowest(std::span<const double> row) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(row.size()); ++j)
        if (row[static_cast<size_t>(j)] > row[static_cast<size_t>(best)]) best = j;
    return best;
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace lcc
