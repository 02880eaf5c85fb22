#include "bilayer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace bilayer {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

thread_local Tape* g_active_tape = nullptr;
thread_local double g_kink_margin = std::numeric_limits<double>::infinity();

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Node& Tensor::node() {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
}

const Tensor::Node& Tensor::node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.value().begin(), t.value().end(), v);
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("from_data: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.value()) v = rand_normal(rng, 0.0, stddev);
    return t;
}

const std::vector<std::size_t>& Tensor::shape() const { return node().shape; }
std::size_t Tensor::numel() const { return node().value.size(); }
std::size_t Tensor::dim(std::size_t i) const { return node().shape.at(i); }
bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }
std::vector<double>& Tensor::value() { return node().value; }
const std::vector<double>& Tensor::value() const { return node().value; }
bool Tensor::has_grad() const { return defined() && !node().grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient; run backward first");
    return node().grad;
}

std::vector<double>& Tensor::grad_mut() {
    ensure_grad();
    return node_->grad;
}

void Tensor::ensure_grad() {
    if (node().grad.size() != node().value.size()) node().grad.assign(node().value.size(), 0.0);
}

void Tensor::zero_grad() {
    if (defined() && !node().grad.empty()) std::fill(node().grad.begin(), node().grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return value()[0];
}

Tensor Tensor::clone() const {
    return from_data(shape(), value(), requires_grad());
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> adjoint) { entries_.push_back(std::move(adjoint)); }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw ContractError("backward: no active tape");
    if (tape->entries_.empty()) throw ContractError("backward: tape is empty");
    if (tape->consumed_) throw ContractError("backward: tape already replayed; run a fresh forward");
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    Tensor seed = loss;
    seed.ensure_grad();
    seed.grad_mut()[0] += 1.0;
    for (auto it = tape->entries_.rbegin(); it != tape->entries_.rend(); ++it) (*it)();
    tape->consumed_ = true;
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor make_output(std::vector<std::size_t> shape, std::vector<double> data, bool track) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data), false);
    if (track) {
        out.set_requires_grad(true);
        out.ensure_grad();
    }
    return out;
}

// Elementwise binary op with 1-element broadcast on either side.
enum class BinKind { Add, Sub, Mul, Div };

Tensor binop(const Tensor& a, const Tensor& b, BinKind kind) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw DimensionError("elementwise op on shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t n = std::max(a.numel(), b.numel());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: out[i] = x + y; break;
            case BinKind::Sub: out[i] = x - y; break;
            case BinKind::Mul: out[i] = x * y; break;
            case BinKind::Div: out[i] = x / y; break;
        }
    }
    const bool track = recording({&a, &b});
    Tensor res = make_output(a_scalar && !b_scalar ? b.shape() : a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a, tb = b;
        Tape::active()->record([ta, tb, res, kind, a_scalar, b_scalar]() mutable {
            const auto& g = res.grad();
            const std::size_t n = g.size();
            if (ta.requires_grad()) {
                auto& da = ta.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    double d = 0;
                    switch (kind) {
                        case BinKind::Add: d = gi; break;
                        case BinKind::Sub: d = gi; break;
                        case BinKind::Mul: d = gi * tb.value()[b_scalar ? 0 : i]; break;
                        case BinKind::Div: d = gi / tb.value()[b_scalar ? 0 : i]; break;
                    }
                    da[a_scalar ? 0 : i] += d;
                }
            }
            if (tb.requires_grad()) {
                auto& db = tb.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    double x = ta.value()[a_scalar ? 0 : i];
                    double y = tb.value()[b_scalar ? 0 : i];
                    double d = 0;
                    switch (kind) {
                        case BinKind::Add: d = gi; break;
                        case BinKind::Sub: d = -gi; break;
                        case BinKind::Mul: d = gi * x; break;
                        case BinKind::Div: d = -gi * x / (y * y); break;
                    }
                    db[b_scalar ? 0 : i] += d;
                }
            }
        });
    }
    return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binop(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binop(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binop(a, b, BinKind::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binop(a, b, BinKind::Div); }

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    const bool track = recording({&a});
    Tensor res = make_output(a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res, c]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
        });
    }
    return res;
}

Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    const bool track = recording({&a});
    Tensor res = make_output(a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        });
    }
    return res;
}

namespace {

// c[M,N] += a[M,K] * b[K,N]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[M,N] += a[M,K] * b[N,K]^T
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// c[K,N] += a[M,K]^T * b[M,N]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul inner extents disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
    const bool track = recording({&a, &b});
    Tensor res = make_output({m, n}, std::move(out), track);
    if (track) {
        Tensor ta = a, tb = b;
        Tape::active()->record([ta, tb, res, m, k, n]() mutable {
            const auto& g = res.grad();
            if (ta.requires_grad())  // da += g * b^T
                gemm_nt_acc(g.data(), tb.value().data(), ta.grad_mut().data(), m, n, k);
            if (tb.requires_grad())  // db += a^T * g
                gemm_tn_acc(ta.value().data(), g.data(), tb.grad_mut().data(), m, k, n);
        });
    }
    return res;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d expects rank 2, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
    const bool track = recording({&a});
    Tensor res = make_output({c, r}, std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res, r, c]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
        });
    }
    return res;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("add_rowvec on " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.value()[i * c + j] + b.value()[j];
    const bool track = recording({&x, &b});
    Tensor res = make_output(x.shape(), std::move(out), track);
    if (track) {
        Tensor tx = x, tb = b;
        Tape::active()->record([tx, tb, res, r, c]() mutable {
            const auto& g = res.grad();
            if (tx.requires_grad()) {
                auto& dx = tx.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (tb.requires_grad()) {
                auto& db = tb.grad_mut();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
            }
        });
    }
    return res;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    return b.defined() ? add_rowvec(y, b) : y;
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = a.value()[i];
        g_kink_margin = std::min(g_kink_margin, std::abs(v));
        out[i] = v > 0 ? v : 0.0;
    }
    const bool track = recording({&a});
    Tensor res = make_output(a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (ta.value()[i] > 0) da[i] += g[i];
        });
    }
    return res;
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = a.value()[i];
        out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    const bool track = recording({&a});
    Tensor res = make_output(a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = res.value()[i];
                da[i] += g[i] * y * (1.0 - y);
            }
        });
    }
    return res;
}

Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() == 0 || a.shape().empty())
        throw DimensionError("softmax_lastdim on empty shape");
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = a.value().data() + r * k;
        double* orow = out.data() + r * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::size_t j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < k; ++j) orow[j] /= sum;
    }
    const bool track = recording({&a});
    Tensor res = make_output(a.shape(), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res, rows, k]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            const auto& y = res.value();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * k;
                const double* gr = g.data() + r * k;
                double dot = 0;
                for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                double* dr = da.data() + r * k;
                for (std::size_t j = 0; j < k; ++j) dr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.shape().empty()) throw DimensionError("layer_norm on empty shape");
    const std::size_t k = x.shape().back();
    if (gain.numel() != k || bias.numel() != k)
        throw DimensionError("layer_norm gain/bias must have " + std::to_string(k) + " elements");
    const std::size_t rows = x.numel() / k;
    std::vector<double> out(x.numel());
    std::vector<double> inv_sd(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.value().data() + r * k;
        double mu = 0;
        for (std::size_t j = 0; j < k; ++j) mu += row[j];
        mu /= double(k);
        double var = 0;
        for (std::size_t j = 0; j < k; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= double(k);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sd[r] = is;
        double* orow = out.data() + r * k;
        for (std::size_t j = 0; j < k; ++j)
            orow[j] = (row[j] - mu) * is * gain.value()[j] + bias.value()[j];
    }
    const bool track = recording({&x, &gain, &bias});
    Tensor res = make_output(x.shape(), std::move(out), track);
    if (track) {
        Tensor tx = x, tg = gain, tb = bias;
        Tape::active()->record([tx, tg, tb, res, rows, k, mean, inv_sd]() mutable {
            const auto& g = res.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = tx.value().data() + r * k;
                const double* gr = g.data() + r * k;
                const double mu = mean[r], is = inv_sd[r];
                if (tg.requires_grad() || tb.requires_grad()) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const double xhat = (xr[j] - mu) * is;
                        if (tg.requires_grad()) tg.grad_mut()[j] += gr[j] * xhat;
                        if (tb.requires_grad()) tb.grad_mut()[j] += gr[j];
                    }
                }
                if (tx.requires_grad()) {
                    // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * is
                    double m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < k; ++j) {
                        const double dxh = gr[j] * tg.value()[j];
                        const double xhat = (xr[j] - mu) * is;
                        m1 += dxh;
                        m2 += dxh * xhat;
                    }
                    m1 /= double(k);
                    m2 /= double(k);
                    auto& dx = tx.grad_mut();
                    for (std::size_t j = 0; j < k; ++j) {
                        const double dxh = gr[j] * tg.value()[j];
                        const double xhat = (xr[j] - mu) * is;
                        dx[r * k + j] += (dxh - m1 - xhat * m2) * is;
                    }
                }
            }
        });
    }
    return res;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 3 || w.rank() != 4)
        throw DimensionError("conv2d expects x[C,H,W], w[Co,Ci,k,k]; got " + shape_str(x.shape()) +
                             ", " + shape_str(w.shape()));
    const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t co = w.dim(0), wci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kh != kw || (kh != 1 && kh != 3))
        throw ConfigError("conv2d kernel size " + std::to_string(kh) + " unsupported (use 1 or 3)");
    if (wci != ci)
        throw DimensionError("conv2d channels disagree: input " + std::to_string(ci) +
                             " vs kernel " + std::to_string(wci));
    if (bias.defined() && bias.numel() != co)
        throw DimensionError("conv2d bias must have " + std::to_string(co) + " elements");
    const std::ptrdiff_t pad = std::ptrdiff_t(kh - 1) / 2;
    std::vector<double> out(co * h * wd, 0.0);
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    for (std::size_t oc = 0; oc < co; ++oc) {
        double* oplane = out.data() + oc * h * wd;
        if (bias.defined()) {
            const double bv = bias.value()[oc];
            for (std::size_t i = 0; i < h * wd; ++i) oplane[i] = bv;
        }
        for (std::size_t ic = 0; ic < ci; ++ic) {
            const double* xplane = xv + ic * h * wd;
            const double* kplane = wv + (oc * ci + ic) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const double kv = kplane[ky * kw + kx];
                    if (kv == 0.0) continue;
                    const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad;
                    const std::ptrdiff_t dx = std::ptrdiff_t(kx) - pad;
                    const std::size_t y0 = dy < 0 ? std::size_t(-dy) : 0;
                    const std::size_t y1 = dy > 0 ? h - std::size_t(dy) : h;
                    const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
                    const std::size_t x1 = dx > 0 ? wd - std::size_t(dx) : wd;
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const double* xrow = xplane + (oy + dy) * wd + dx;
                        double* orow = oplane + oy * wd;
                        for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += kv * xrow[ox];
                    }
                }
            }
        }
    }
    const bool track = recording({&x, &w, &bias});
    Tensor res = make_output({co, h, wd}, std::move(out), track);
    if (track) {
        Tensor tx = x, tw = w, tb = bias;
        Tape::active()->record([tx, tw, tb, res, ci, co, h, wd, kh, kw, pad]() mutable {
            const auto& g = res.grad();
            for (std::size_t oc = 0; oc < co; ++oc) {
                const double* gplane = g.data() + oc * h * wd;
                if (tb.defined() && tb.requires_grad()) {
                    double s = 0;
                    for (std::size_t i = 0; i < h * wd; ++i) s += gplane[i];
                    tb.grad_mut()[oc] += s;
                }
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    const double* xplane = tx.value().data() + ic * h * wd;
                    const double* kplane = tw.value().data() + (oc * ci + ic) * kh * kw;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad;
                            const std::ptrdiff_t dx = std::ptrdiff_t(kx) - pad;
                            const std::size_t y0 = dy < 0 ? std::size_t(-dy) : 0;
                            const std::size_t y1 = dy > 0 ? h - std::size_t(dy) : h;
                            const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
                            const std::size_t x1 = dx > 0 ? wd - std::size_t(dx) : wd;
                            if (tw.requires_grad()) {
                                double s = 0;
                                for (std::size_t oy = y0; oy < y1; ++oy) {
                                    const double* xrow = xplane + (oy + dy) * wd + dx;
                                    const double* grow = gplane + oy * wd;
                                    for (std::size_t ox = x0; ox < x1; ++ox) s += grow[ox] * xrow[ox];
                                }
                                tw.grad_mut()[(oc * ci + ic) * kh * kw + ky * kw + kx] += s;
                            }
                            if (tx.requires_grad()) {
                                const double kv = kplane[ky * kw + kx];
                                if (kv == 0.0) continue;
                                auto& dx_acc = tx.grad_mut();
                                double* dplane = dx_acc.data() + ic * h * wd;
                                for (std::size_t oy = y0; oy < y1; ++oy) {
                                    double* drow = dplane + (oy + dy) * wd + dx;
                                    const double* grow = gplane + oy * wd;
                                    for (std::size_t ox = x0; ox < x1; ++ox) drow[ox] += kv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return res;
}

namespace {

struct BilinearTap {
    std::size_t lo, hi;
    double w_lo, w_hi;
};

// align_corners=false source taps for 2x upsampling along one axis.
BilinearTap up2_tap(std::size_t out_idx, std::size_t in_extent) {
    double src = (double(out_idx) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const double max_src = double(in_extent - 1);
    if (src > max_src) src = max_src;
    const std::size_t lo = std::size_t(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in_extent - 1);
    const double f = src - double(lo);
    return {lo, hi, 1.0 - f, f};
}

}  // namespace

Tensor upsample_bilinear_x2(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("upsample expects [C,H,W], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<BilinearTap> ty(oh), tx(ow);
    for (std::size_t i = 0; i < oh; ++i) ty[i] = up2_tap(i, h);
    for (std::size_t j = 0; j < ow; ++j) tx[j] = up2_tap(j, w);
    std::vector<double> out(c * oh * ow);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xp = x.value().data() + ch * h * w;
        double* op = out.data() + ch * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                const auto& a = ty[i];
                const auto& b = tx[j];
                op[i * ow + j] = a.w_lo * (b.w_lo * xp[a.lo * w + b.lo] + b.w_hi * xp[a.lo * w + b.hi]) +
                                 a.w_hi * (b.w_lo * xp[a.hi * w + b.lo] + b.w_hi * xp[a.hi * w + b.hi]);
            }
        }
    }
    const bool track = recording({&x});
    Tensor res = make_output({c, oh, ow}, std::move(out), track);
    if (track) {
        Tensor txn = x;
        Tape::active()->record([txn, res, c, h, w, oh, ow, ty, tx]() mutable {
            if (!txn.requires_grad()) return;
            auto& dx = txn.grad_mut();
            const auto& g = res.grad();
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* dp = dx.data() + ch * h * w;
                const double* gp = g.data() + ch * oh * ow;
                for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                        const auto& a = ty[i];
                        const auto& b = tx[j];
                        const double gv = gp[i * ow + j];
                        dp[a.lo * w + b.lo] += gv * a.w_lo * b.w_lo;
                        dp[a.lo * w + b.hi] += gv * a.w_lo * b.w_hi;
                        dp[a.hi * w + b.lo] += gv * a.w_hi * b.w_lo;
                        dp[a.hi * w + b.hi] += gv * a.w_hi * b.w_hi;
                    }
                }
            }
        });
    }
    return res;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw DimensionError("bce_with_logits shapes disagree: " + shape_str(logits.shape()) +
                             " vs " + shape_str(targets.shape()));
    const std::size_t n = logits.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double t = targets.value()[i];
        if (t < 0.0 || t > 1.0)
            throw DomainError("bce_with_logits target " + std::to_string(t) + " outside [0,1]");
    }
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.value()[i];
        const double t = targets.value()[i];
        loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= double(n);
    const bool track = recording({&logits, &targets});
    Tensor res = make_output({1}, {loss}, track);
    if (track) {
        Tensor tl = logits, tt = targets;
        Tape::active()->record([tl, tt, res, n]() mutable {
            const double g = res.grad()[0];
            if (tl.requires_grad()) {
                auto& dl = tl.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    const double z = tl.value()[i];
                    const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                            : std::exp(z) / (1.0 + std::exp(z));
                    dl[i] += g * (s - tt.value()[i]) / double(n);
                }
            }
            if (tt.requires_grad()) {
                auto& dt = tt.grad_mut();
                for (std::size_t i = 0; i < n; ++i) dt[i] += g * (-tl.value()[i]) / double(n);
            }
        });
    }
    return res;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy_rows expects [Q,C]");
    const std::size_t q = logits.dim(0), c = logits.dim(1);
    if (targets.size() != q)
        throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(q) + " rows");
    for (int t : targets)
        if (t < 0 || std::size_t(t) >= c) throw DomainError("class target out of range");
    double loss = 0;
    std::vector<double> probs(q * c);
    for (std::size_t r = 0; r < q; ++r) {
        const double* row = logits.value().data() + r * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        loss += lse - row[targets[r]];
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
    }
    loss /= double(q);
    const bool track = recording({&logits});
    Tensor res = make_output({1}, {loss}, track);
    if (track) {
        Tensor tl = logits;
        Tape::active()->record([tl, res, targets, probs, q, c]() mutable {
            if (!tl.requires_grad()) return;
            const double g = res.grad()[0];
            auto& dl = tl.grad_mut();
            for (std::size_t r = 0; r < q; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    double d = probs[r * c + j] - (std::size_t(targets[r]) == j ? 1.0 : 0.0);
                    dl[r * c + j] += g * d / double(q);
                }
        });
    }
    return res;
}

Tensor sum_all(const Tensor& a) {
    double s = 0;
    for (double v : a.value()) s += v;
    const bool track = recording({&a});
    Tensor res = make_output({1}, {s}, track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res]() mutable {
            if (!ta.requires_grad()) return;
            const double g = res.grad()[0];
            auto& da = ta.grad_mut();
            for (double& d : da) d += g;
        });
    }
    return res;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / double(a.numel())); }

Tensor sum_lastdim(const Tensor& a) {
    if (a.shape().empty()) throw DimensionError("sum_lastdim on empty shape");
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r] += a.value()[r * k + j];
    std::vector<std::size_t> shp(a.shape().begin(), a.shape().end() - 1);
    if (shp.empty()) shp = {1};
    const bool track = recording({&a});
    Tensor res = make_output(shp, std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res, rows, k]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < k; ++j) da[r * k + j] += g[r];
        });
    }
    return res;
}

namespace {

// Shared by reshape/chw_to_nk/nk_to_chw: value permutation with index map.
Tensor permuted(const Tensor& a, std::vector<std::size_t> out_shape,
                std::vector<std::size_t> src_index) {
    std::vector<double> out(src_index.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[src_index[i]];
    const bool track = recording({&a});
    Tensor res = make_output(std::move(out_shape), std::move(out), track);
    if (track) {
        Tensor ta = a;
        Tape::active()->record([ta, res, src_index]() mutable {
            if (!ta.requires_grad()) return;
            auto& da = ta.grad_mut();
            const auto& g = res.grad();
            for (std::size_t i = 0; i < g.size(); ++i) da[src_index[i]] += g[i];
        });
    }
    return res;
}

}  // namespace

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<std::size_t> idx(a.numel());
    std::iota(idx.begin(), idx.end(), 0);
    return permuted(a, std::move(shape), std::move(idx));
}

Tensor chw_to_nk(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("chw_to_nk expects [C,H,W]");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<std::size_t> idx(c * h * w);
    for (std::size_t n = 0; n < h * w; ++n)
        for (std::size_t k = 0; k < c; ++k) idx[n * c + k] = k * h * w + n;
    return permuted(x, {h * w, c}, std::move(idx));
}

Tensor nk_to_chw(const Tensor& x, std::size_t h, std::size_t w) {
    if (x.rank() != 2 || x.dim(0) != h * w)
        throw DimensionError("nk_to_chw expects [" + std::to_string(h * w) + ",K]");
    const std::size_t c = x.dim(1);
    std::vector<std::size_t> idx(c * h * w);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t n = 0; n < h * w; ++n) idx[k * h * w + n] = n * c + k;
    return permuted(x, {c, h, w}, std::move(idx));
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() != 2) throw DimensionError("gather_rows expects rank 2");
    const std::size_t c = x.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(rows.size() * c);
    for (std::size_t r : rows) {
        if (r >= x.dim(0)) throw DomainError("gather_rows index out of range");
        for (std::size_t j = 0; j < c; ++j) idx.push_back(r * c + j);
    }
    return permuted(x, {rows.size(), c}, std::move(idx));
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c1 > x.dim(1) || c0 >= c1) throw DimensionError("slice_cols range invalid");
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(r * (c1 - c0));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = c0; j < c1; ++j) idx.push_back(i * c + j);
    return permuted(x, {r, c1 - c0}, std::move(idx));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("concat_rows expects matching column counts");
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const bool track = recording({&a, &b});
    Tensor res = make_output({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), track);
    if (track) {
        Tensor ta = a, tb = b;
        Tape::active()->record([ta, tb, res]() mutable {
            const auto& g = res.grad();
            if (ta.requires_grad()) {
                auto& da = ta.grad_mut();
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
            }
            if (tb.requires_grad()) {
                auto& db = tb.grad_mut();
                const std::size_t off = ta.numel();
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[off + i];
            }
        });
    }
    return res;
}

// ---- gradient verification --------------------------------------------------

void reset_kink_margin() { g_kink_margin = std::numeric_limits<double>::infinity(); }
double kink_margin() { return g_kink_margin; }

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
    double l0, l1;
    {
        Tape t;
        l0 = f().item();
    }
    {
        Tape t;
        l1 = f().item();
    }
    if (std::memcmp(&l0, &l1, sizeof(double)) != 0)
        throw ContractError("grad_check: function is not deterministic across forwards");

    for (Tensor& p : params) {
        p.ensure_grad();
        p.zero_grad();
    }
    {
        Tape t;
        Tensor loss = f();
        if (loss.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
        backward(loss);
    }
    // Central differences cannot resolve gradients below the rounding noise of
    // the function value; differences inside that band count as exact.
    const double noise_floor =
        64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(l0)) / eps;
    double max_rel = 0;
    for (Tensor& p : params) {
        auto& v = p.value();
        const auto& analytic = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + eps;
            const double lp = f().item();
            v[i] = keep - eps;
            const double lm = f().item();
            v[i] = keep;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[i];
            const double diff = std::abs(a - numeric);
            if (diff <= noise_floor) continue;
            const double rel = diff / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    Tensor params[] = {x};
    return grad_check([&]() { return f(x); }, params, eps);
}

// ---- binary dump --------------------------------------------------------------

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw IoError("tensor load: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void dump_tensor(std::ostream& os, const Tensor& t) {
    put_u64(os, t.shape().size());
    for (std::size_t e : t.shape()) put_u64(os, e);
    // raw little-endian doubles; this code only targets little-endian hosts
    os.write(reinterpret_cast<const char*>(t.value().data()),
             std::streamsize(t.numel() * sizeof(double)));
    if (!os) throw IoError("tensor dump: write failed");
}

Tensor load_tensor(std::istream& is) {
    const std::uint64_t rank = get_u64(is);
    if (rank > 8) throw IoError("tensor load: implausible rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
        shape[i] = std::size_t(get_u64(is));
        n *= shape[i];
    }
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(double)));
    if (!is) throw IoError("tensor load: truncated data");
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace bilayer
