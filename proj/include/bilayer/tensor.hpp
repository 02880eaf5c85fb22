#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/rng.hpp"

namespace bilayer {

/// Dense row-major double tensor with reverse-mode gradients.
///
/// A Tensor is a shared handle: copies alias the same storage. Leaves are
/// created with requires_grad=true to take part in backward(); intermediate
/// results inherit the flag while a Tape is active.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t numel() const;
    std::size_t dim(std::size_t i) const;
    std::size_t rank() const { return shape().size(); }

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    std::vector<double>& value();
    const std::vector<double>& value() const;
    double operator[](std::size_t i) const { return value()[i]; }

    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut();
    void ensure_grad();
    void zero_grad();

    /// Value of a one-element tensor.
    double item() const;

    bool same_storage(const Tensor& o) const { return node_ == o.node_; }
    /// Deep copy of values (fresh storage, no grad history).
    Tensor clone() const;

private:
    struct Node {
        std::vector<std::size_t> shape;
        std::vector<double> value;
        std::vector<double> grad;  // sized on demand
        bool requires_grad = false;
    };
    std::shared_ptr<Node> node_;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    Node& node();
    const Node& node() const;
    friend class Tape;
};

/// Ordered record of executed operations for one forward pass.
///
/// The newest Tape on a thread is the active one; ops append adjoint
/// closures while it is active. backward() replays the record in reverse
/// exactly once; a second backward on the same tape is a contract error.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();
    void record(std::function<void()> adjoint);
    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
    friend void backward(const Tensor&);
};

/// Seeds d(loss)/d(loss)=1 and replays the active tape in reverse,
/// accumulating gradients into every requires_grad tensor it touched.
void backward(const Tensor& loss);

// ---- operators -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);        // same shape or 1-element broadcast
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);     // [M,K]x[K,N]
Tensor transpose2d(const Tensor& a);
Tensor add_rowvec(const Tensor& x, const Tensor& b); // [N,K] + [K]
/// matmul(x, w) with row-broadcast bias; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Same-size cross-correlation with zero padding (k-1)/2, k in {1,3}.
/// x: [Cin,H,W], w: [Cout,Cin,k,k], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

/// Bilinear x2 upsampling, align_corners=false. x: [C,H,W] -> [C,2H,2W].
Tensor upsample_bilinear_x2(const Tensor& x);

/// Mean binary cross-entropy from logits, log-sum-exp form. Targets in [0,1].
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Mean negative log-likelihood of target classes. logits: [Q,C].
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);                 // [..,K] -> [..]

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
/// [C,H,W] -> [H*W,C] node layout and back.
Tensor chw_to_nk(const Tensor& x);
Tensor nk_to_chw(const Tensor& x, std::size_t h, std::size_t w);

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);  // [R,C] -> [R,c1-c0)
Tensor concat_rows(const Tensor& a, const Tensor& b);

// ---- gradient verification ------------------------------------------------

/// Minimum |pre-activation| seen by relu since the last reset; used by tests
/// to reject inputs that sit on the kink where finite differences are invalid.
void reset_kink_margin();
double kink_margin();

/// Central finite differences over every coordinate of every parameter,
/// compared against reverse-mode gradients of f(). Returns the max relative
/// error with denominator max(|analytic|,|numeric|,1e-8); differences below
/// the rounding-noise resolution of the difference quotient count as exact.
/// f must be scalar and deterministic (checked by a double forward).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps = 1e-5);
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

// ---- binary dump ----------------------------------------------------------

/// Flat little-endian dump: u64 extent count, u64 extents, raw doubles.
void dump_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);

}  // namespace bilayer
