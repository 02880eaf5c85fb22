#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "bilayer/gradcheck_suite.hpp"
#include "bilayer/tensor.hpp"

using namespace bilayer;

namespace {

// naive triple-loop reference, independent of the gemm loop order
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

std::vector<double> softmax_oracle(const std::vector<double>& row) {
    std::vector<double> out(row.size());
    double sum = 0;
    for (std::size_t i = 0; i < row.size(); ++i) sum += std::exp(row[i]);
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::exp(row[i]) / sum;
    return out;
}

// direct sliding-window cross-correlation with zero padding
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const int ci = int(x.dim(0)), h = int(x.dim(1)), wd = int(x.dim(2));
    const int co = int(w.dim(0)), k = int(w.dim(2)), pad = (k - 1) / 2;
    std::vector<double> out(std::size_t(co) * h * wd, 0.0);
    for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) {
                double s = bias.defined() ? bias[std::size_t(oc)] : 0.0;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = y + ky - pad, ix = xx + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            s += x[std::size_t((ic * h + iy) * wd + ix)] *
                                 w[std::size_t(((oc * ci + ic) * k + ky) * k + kx)];
                        }
                out[std::size_t((oc * h + y) * wd + xx)] = s;
            }
    return out;
}

double bce_oracle(const std::vector<double>& z, const std::vector<double>& t) {
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        s += -(t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p));
    }
    return s / double(z.size());
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == a[i]);
    Tensor zero = Tensor::zeros({2, 2});
    Tensor rz = matmul(a, zero);
    for (std::size_t i = 0; i < 4; ++i) CHECK(rz[i] == 0.0);
}

TEST_CASE("matmul matches naive oracle on 100 random cases") {
    Rng rng = make_rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = std::size_t(rand_int(rng, 1, 6));
        const std::size_t k = std::size_t(rand_int(rng, 1, 6));
        const std::size_t n = std::size_t(rand_int(rng, 1, 6));
        Tensor a = Tensor::randn({m, k}, rng);
        Tensor b = Tensor::randn({k, n}, rng);
        Tensor c = matmul(a, b);
        auto expect = matmul_oracle(a.value(), b.value(), m, k, n);
        for (std::size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(c[i] - expect[i]) <= 1e-12);
    }
    Tensor fixed_a = Tensor::randn({3, 4}, rng);
    Tensor fixed_b = Tensor::randn({4, 2}, rng);
    Tensor prod = matmul(fixed_a, fixed_b);
    auto expect = matmul_oracle(fixed_a.value(), fixed_b.value(), 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(prod[i] - expect[i]) <= 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry, shift invariance and oracle") {
    Tensor z = softmax_lastdim(Tensor::from_data({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(z[std::size_t(i)] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor s1 = softmax_lastdim(Tensor::from_data({2}, {7.5, 7.5 + 0.3}));
    Tensor s2 = softmax_lastdim(Tensor::from_data({2}, {0.0, 0.3}));
    CHECK(s1[0] == doctest::Approx(s2[0]).epsilon(1e-13));
    CHECK(s1[1] == doctest::Approx(s2[1]).epsilon(1e-13));

    Tensor s3 = softmax_lastdim(Tensor::from_data({3}, {1, 2, 3}));
    auto expect = softmax_oracle({1, 2, 3});
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s3[i] - expect[i]) <= 1e-12);
}

TEST_CASE("softmax rows sum to one for extreme magnitudes") {
    Rng rng = make_rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = std::size_t(rand_int(rng, 1, 8));
        Tensor x = Tensor::zeros({n});
        for (double& v : x.value()) v = rand_uniform(rng, -1e4, 1e4);
        Tensor y = softmax_lastdim(x);
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += y[i];
            CHECK(std::isfinite(y[i]));
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("conv2d identity, zero and oracle") {
    Rng rng = make_rng(21);
    Tensor x = Tensor::randn({1, 4, 4}, rng);
    Tensor wid = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, wid);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

    Tensor wz = Tensor::zeros({2, 1, 3, 3});
    Tensor yz = conv2d(x, wz);
    for (std::size_t i = 0; i < yz.numel(); ++i) CHECK(yz[i] == 0.0);

    for (int trial = 0; trial < 100; ++trial) {
        Tensor xi = Tensor::randn({2, 5, 5}, rng);
        Tensor wi = Tensor::randn({3, 2, 3, 3}, rng);
        Tensor bi = Tensor::randn({3}, rng);
        Tensor yi = conv2d(xi, wi, bi);
        auto expect = conv_oracle(xi, wi, bi);
        for (std::size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(yi[i] - expect[i]) <= 1e-12);
    }
}

TEST_CASE("conv2d rejects unsupported kernel size") {
    Tensor x = Tensor::zeros({1, 5, 5});
    Tensor w = Tensor::zeros({1, 1, 5, 5});
    CHECK_THROWS_AS(conv2d(x, w), ConfigError);
}

TEST_CASE("layer_norm zero, normalization and formula oracle") {
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor zero = Tensor::zeros({4});
    Tensor y0 = layer_norm(zero, gain, bias);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y0[i] == 0.0);

    Rng rng = make_rng(31);
    Tensor x = Tensor::randn({6, 4}, rng, 3.0);
    Tensor y = layer_norm(x, gain, bias);
    for (std::size_t r = 0; r < 6; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 4; ++j) mean += y[r * 4 + j];
        mean /= 4;
        for (std::size_t j = 0; j < 4; ++j) var += (y[r * 4 + j] - mean) * (y[r * 4 + j] - mean);
        var /= 4;
        CHECK(std::abs(mean) <= 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shifts variance slightly
    }

    Tensor v = Tensor::from_data({4}, {0.3, -1.2, 2.0, 0.5});
    Tensor g2 = Tensor::from_data({4}, {1.5, 0.5, -1.0, 2.0});
    Tensor b2 = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
    Tensor yv = layer_norm(v, g2, b2);
    double mu = (0.3 - 1.2 + 2.0 + 0.5) / 4.0;
    double var = 0;
    for (double d : {0.3, -1.2, 2.0, 0.5}) var += (d - mu) * (d - mu);
    var /= 4.0;
    const double is = 1.0 / std::sqrt(var + 1e-5);
    const double xs[4] = {0.3, -1.2, 2.0, 0.5};
    for (std::size_t i = 0; i < 4; ++i) {
        const double expect = (xs[i] - mu) * is * g2[i] + b2[i];
        CHECK(yv[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("upsample constant, degenerate and ramp oracle") {
    Tensor c5 = Tensor::full({1, 3, 3}, 5.0);
    Tensor up = upsample_bilinear_x2(c5);
    CHECK(up.shape() == std::vector<std::size_t>{1, 6, 6});
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up[i] == doctest::Approx(5.0));

    Tensor one = Tensor::from_data({1, 1, 1}, {2.5});
    Tensor up1 = upsample_bilinear_x2(one);
    CHECK(up1.shape() == std::vector<std::size_t>{1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(up1[i] == 2.5);

    // independent per-pixel interpolation for a 2x2 ramp
    Tensor ramp = Tensor::from_data({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
    Tensor upr = upsample_bilinear_x2(ramp);
    auto sample = [&](double y, double x) {
        y = std::clamp(y, 0.0, 1.0);
        x = std::clamp(x, 0.0, 1.0);
        const int y0 = int(y), x0 = int(x);
        const int y1 = std::min(y0 + 1, 1), x1 = std::min(x0 + 1, 1);
        const double fy = y - y0, fx = x - x0;
        auto at = [&](int yy, int xx) { return ramp[std::size_t(yy * 2 + xx)]; };
        return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
               fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    };
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const double expect = sample((y + 0.5) / 2 - 0.5, (x + 0.5) / 2 - 0.5);
            CHECK(std::abs(upr[std::size_t(y * 4 + x)] - expect) <= 1e-12);
        }
}

TEST_CASE("bce saturated, ln2 and naive oracle") {
    Tensor strong = Tensor::full({3}, 50.0);
    Tensor ones = Tensor::full({3}, 1.0);
    CHECK(bce_with_logits(strong, ones).item() < 1e-9);

    Rng rng = make_rng(41);
    Tensor t = Tensor::zeros({5});
    for (double& v : t.value()) v = rand_uniform(rng, 0, 1);
    Tensor zl = Tensor::zeros({5});
    CHECK(bce_with_logits(zl, t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    for (int trial = 0; trial < 50; ++trial) {
        Tensor z = Tensor::randn({7}, rng, 2.0);
        Tensor tt = Tensor::zeros({7});
        for (double& v : tt.value()) v = rand_uniform(rng, 0, 1);
        CHECK(bce_with_logits(z, tt).item() ==
              doctest::Approx(bce_oracle(z.value(), tt.value())).epsilon(1e-10));
    }
}

TEST_CASE("bce rejects out-of-domain targets and stays finite at 1e4 logits") {
    Tensor z = Tensor::zeros({2});
    Tensor bad = Tensor::from_data({2}, {0.5, 1.5});
    CHECK_THROWS_AS(bce_with_logits(z, bad), DomainError);

    Tensor ext = Tensor::from_data({4}, {1e4, -1e4, 9999.0, -9999.0});
    Tensor t = Tensor::from_data({4}, {1.0, 0.0, 0.0, 1.0});
    const double loss = bce_with_logits(ext, t).item();
    CHECK(std::isfinite(loss));
}

TEST_CASE("backward on sum gives ones; analytic square derivative") {
    Rng rng = make_rng(3);
    Tensor x = Tensor::randn({3, 2}, rng, 1.0, true);
    {
        Tape tape;
        backward(sum_all(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor v = Tensor::from_data({2}, {1.0, 2.0}, true);
    v.zero_grad();
    {
        Tape tape;
        backward(sum_all(mul(v, v)));
    }
    CHECK(v.grad()[0] == doctest::Approx(2.0));
    CHECK(v.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    {
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar loss
        Tensor loss = sum_all(y);
        backward(loss);
        CHECK_THROWS_AS(backward(loss), ContractError);  // tape already replayed
    }
    {
        Tape tape;
        CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);  // empty tape
    }
}

TEST_CASE("gradient accumulation is additive across fan-out") {
    Tensor x = Tensor::from_data({2}, {0.5, -0.25}, true);
    x.zero_grad();
    {
        Tape tape;
        Tensor y = add(mul(x, x), mul(x, x));  // two uses of x
        backward(sum_all(y));
    }
    CHECK(x.grad()[0] == doctest::Approx(4 * 0.5));
    CHECK(x.grad()[1] == doctest::Approx(4 * -0.25));
}

TEST_CASE("grad_check exact for linear and constant functions") {
    Rng rng = make_rng(77);
    Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
    const double e1 = grad_check([](const Tensor& t) { return sum_all(t); }, x);
    CHECK(e1 < 1e-10);
    const double e2 =
        grad_check([](const Tensor& t) { return sum_all(softmax_lastdim(t)); }, x);
    CHECK(e2 < 1e-10);  // softmax rows sum to one, so the function is constant
}

TEST_CASE("grad_check flags non-deterministic functions") {
    Tensor x = Tensor::scalar(1.0, true);
    int calls = 0;
    auto f = [&]() {
        ++calls;
        return scale(x, calls % 2 ? 1.0 : 2.0);
    };
    Tensor params[] = {x};
    CHECK_THROWS_AS(grad_check(f, params), ContractError);
}

TEST_CASE("gradcheck suite passes at reduced trial count") {
    GradCheckReport report = run_gradcheck_suite(4, 123);
    for (const auto& e : report.entries) {
        INFO(e.name << " max_rel_error=" << e.max_rel_error);
        CHECK(e.max_rel_error <= 1e-4);
    }
}

TEST_CASE("tensor dump/load round-trip") {
    Rng rng = make_rng(9);
    Tensor t = Tensor::randn({2, 3, 4}, rng);
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    dump_tensor(ss, t);
    Tensor back = load_tensor(ss);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
}
