#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vnode/ops.hpp"
#include "vnode/rng.hpp"

using namespace vnode;

namespace {

// Independent convolution oracle: direct receptive-field sums, no im2col, no
// GEMM. Cross-correlation orientation, zero padding.
template <typename T>
Tensor<T> conv2d_bruteforce(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                            const ops::Conv2dOpts& o) {
    const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t g = o.groups, opg = cout / g;
    const std::int64_t ho = (h + 2 * o.pad_h - kh) / o.stride_h + 1;
    const std::int64_t wo = (wd + 2 * o.pad_w - kw) / o.stride_w + 1;
    Tensor<T> out(Shape{n, cout, ho, wo});
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t oc = 0; oc < cout; ++oc) {
            const std::int64_t grp = oc / opg;
            for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    T acc = bias ? bias->data()[oc] : T{};
                    for (std::int64_t ic = 0; ic < cpg; ++ic)
                        for (std::int64_t ky = 0; ky < kh; ++ky)
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t iy = oy * o.stride_h - o.pad_h + ky;
                                const std::int64_t ix = ox * o.stride_w - o.pad_w + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += w.data()[((oc * cpg + ic) * kh + ky) * kw + kx] *
                                       x.data()[((ni * cin + grp * cpg + ic) * h + iy) * wd + ix];
                            }
                    out.data()[((ni * cout + oc) * ho + oy) * wo + ox] = acc;
                }
        }
    return out;
}

} // namespace

TEST_CASE("conv2d: zero input yields the bias everywhere") {
    Rng rng(1);
    Tensor<double> x = Tensor<double>::zeros({2, 3, 5, 5});
    Tensor<double> w = uniform_tensor<double>({4, 3, 3, 3}, rng, -1, 1);
    Tensor<double> b = Tensor<double>::of({4}, {0.5, -1.0, 2.0, 0.0});
    auto y = ops::conv2d(x, w, &b, {1, 1, 1, 1, 1});
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 4; ++c)
            for (std::int64_t i = 0; i < 25; ++i) CHECK(y.data()[(n * 4 + c) * 25 + i] == b.data()[c]);
}

TEST_CASE("conv2d: 1x1 kernel of value 2 scales the input") {
    Tensor<double> x = Tensor<double>::of({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> w = Tensor<double>::of({1, 1, 1, 1}, {2});
    auto y = ops::conv2d<double>(x, w, nullptr, {});
    CHECK(y.vec() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("conv2d: 3x3 ones with padding 1 on a 3x3 of ones") {
    // brute-force oracle gives corners 4, edges 6, center 9
    Tensor<double> x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    ops::Conv2dOpts o;
    o.pad_h = o.pad_w = 1;
    auto oracle = conv2d_bruteforce<double>(x, w, nullptr, o);
    CHECK(oracle.vec() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
    auto y = ops::conv2d<double>(x, w, nullptr, o);
    CHECK(y.vec() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("conv2d matches the brute-force oracle on random configurations") {
    Rng rng(2);
    struct Cfg {
        std::int64_t n, cin, h, w, cout;
        int kh, kw, sh, sw, ph, pw, groups;
    };
    const Cfg cfgs[] = {
        {2, 3, 8, 8, 5, 3, 3, 1, 1, 1, 1, 1},
        {1, 4, 7, 9, 6, 3, 5, 2, 1, 0, 2, 2},
        {3, 8, 6, 6, 8, 3, 3, 1, 1, 1, 1, 8}, // depthwise
        {2, 6, 5, 5, 9, 1, 1, 1, 1, 0, 0, 3},
        {1, 2, 11, 4, 4, 5, 3, 3, 2, 2, 1, 2},
    };
    for (const auto& c : cfgs) {
        Tensor<double> x = uniform_tensor<double>({c.n, c.cin, c.h, c.w}, rng, -1, 1);
        Tensor<double> w = uniform_tensor<double>({c.cout, c.cin / c.groups, c.kh, c.kw}, rng, -1, 1);
        Tensor<double> b = uniform_tensor<double>({c.cout}, rng, -1, 1);
        ops::Conv2dOpts o{c.sh, c.sw, c.ph, c.pw, c.groups};
        auto got = ops::conv2d(x, w, &b, o);
        auto want = conv2d_bruteforce(x, w, &b, o);
        CHECK(got.same_shape(want));
        CHECK(rel_error(got, want) < 1e-13);
    }
}

TEST_CASE("grouped conv equals independent per-group convs concatenated") {
    Rng rng(3);
    const int g = 4;
    Tensor<double> x = uniform_tensor<double>({2, 8, 6, 6}, rng, -1, 1);
    Tensor<double> w = uniform_tensor<double>({12, 2, 3, 3}, rng, -1, 1);
    ops::Conv2dOpts o;
    o.pad_h = o.pad_w = 1;
    o.groups = g;
    auto whole = ops::conv2d<double>(x, w, nullptr, o);

    std::vector<Tensor<double>> parts;
    for (int grp = 0; grp < g; ++grp) {
        // slice channels [2*grp, 2*grp+2) and kernels [3*grp, 3*grp+3)
        Tensor<double> xs({2, 2, 6, 6});
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t c = 0; c < 2; ++c)
                std::copy(x.data() + ((n * 8 + grp * 2 + c) * 36), x.data() + ((n * 8 + grp * 2 + c) * 36) + 36,
                          xs.data() + ((n * 2 + c) * 36));
        Tensor<double> ws({3, 2, 3, 3});
        std::copy(w.data() + grp * 3 * 18, w.data() + (grp + 1) * 3 * 18, ws.data());
        ops::Conv2dOpts o1;
        o1.pad_h = o1.pad_w = 1;
        parts.push_back(ops::conv2d<double>(xs, ws, nullptr, o1));
    }
    auto cat = ops::concat(parts, 1);
    CHECK(tensors_equal(whole, cat)); // same arithmetic path, exact
}

TEST_CASE("conv2d linearity in the input when bias is zero") {
    Rng rng(4);
    Tensor<double> x = uniform_tensor<double>({1, 2, 6, 6}, rng, -1, 1);
    Tensor<double> y = uniform_tensor<double>({1, 2, 6, 6}, rng, -1, 1);
    Tensor<double> w = uniform_tensor<double>({3, 2, 3, 3}, rng, -1, 1);
    const double alpha = 1.3, beta = -0.7;
    ops::Conv2dOpts o;
    o.pad_h = o.pad_w = 1;
    auto lhs = ops::conv2d<double>(ops::add(ops::scalar_mul(x, alpha), ops::scalar_mul(y, beta)), w, nullptr, o);
    auto rhs = ops::add(ops::scalar_mul(ops::conv2d<double>(x, w, nullptr, o), alpha),
                        ops::scalar_mul(ops::conv2d<double>(y, w, nullptr, o), beta));
    CHECK(rel_error(lhs, rhs) < 1e-6);
}

TEST_CASE("conv2d rejects bad geometry") {
    Tensor<double> x({1, 3, 4, 4});
    Tensor<double> w({4, 3, 3, 3});
    CHECK_THROWS_AS(ops::conv2d<double>(x, w, nullptr, {1, 1, 0, 0, 2}), ConfigError);      // groups
    CHECK_THROWS_AS(ops::conv2d<double>(x, Tensor<double>({4, 2, 3, 3}), nullptr, {}), ShapeError);
    CHECK_THROWS_AS(ops::conv2d<double>(x, Tensor<double>({4, 3, 7, 7}), nullptr, {}), ShapeError); // too big
    Tensor<double> b({3});
    CHECK_THROWS_AS(ops::conv2d<double>(x, w, &b, {}), ShapeError);
}

TEST_CASE("elementwise examples") {
    Tensor<double> x = Tensor<double>::of({2, 2}, {1, 2, 3, 4});
    CHECK(tensors_equal(ops::add(x, Tensor<double>::zeros({2, 2})), x)); // additive identity
    CHECK(ops::mul(x, x).vec() == std::vector<double>{1, 4, 9, 16});
    CHECK(ops::scalar_add(Tensor<double>::of({2}, {1.0, 2.0}), 0.5).vec() == std::vector<double>{1.5, 2.5});
    CHECK_THROWS_AS(ops::add(x, Tensor<double>({3})), ShapeError);
}

TEST_CASE("matmul identity and shape errors") {
    Tensor<double> eye = Tensor<double>::of({2, 2}, {1, 0, 0, 1});
    Tensor<double> b = Tensor<double>::of({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(tensors_equal(ops::matmul(eye, b), b));
    CHECK_THROWS_AS(ops::matmul(b, b), ShapeError);
}

TEST_CASE("softmax") {
    auto u = ops::softmax(Tensor<double>::of({1, 4}, {0, 0, 0, 0}), 1);
    for (int i = 0; i < 4; ++i) CHECK(u.data()[i] == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(5);
    Tensor<double> x = uniform_tensor<double>({3, 7}, rng, -30, 30);
    auto s = ops::softmax(x, 1);
    for (int r = 0; r < 3; ++r) {
        double sum = 0;
        for (int c = 0; c < 7; ++c) {
            CHECK(s.data()[r * 7 + c] >= 0.0);
            sum += s.data()[r * 7 + c];
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("pooling") {
    // mean of the four values
    auto g = ops::global_avgpool2d(Tensor<double>::of({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(g.item() == doctest::Approx(2.5).epsilon(1e-15));

    Tensor<double> x = Tensor<double>::of({1, 1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    auto p = ops::avgpool2d(x, 2, 2);
    CHECK(p.vec() == std::vector<double>{3.5, 5.5, 11.5, 13.5});
}

TEST_CASE("reductions") {
    Tensor<double> x = Tensor<double>::of({2, 3}, {1, 5, 2, 7, 0, -1});
    CHECK(ops::reduce_all(x, ops::ReduceTag::sum).item() == 14.0);
    CHECK(ops::reduce_all(x, ops::ReduceTag::mean).item() == doctest::Approx(14.0 / 6));
    CHECK(ops::reduce_all(x, ops::ReduceTag::max).item() == 7.0);
    CHECK(ops::reduce_axis(x, ops::ReduceTag::sum, 0).vec() == std::vector<double>{8, 5, 1});
    CHECK(ops::reduce_axis(x, ops::ReduceTag::max, 1).vec() == std::vector<double>{5, 7});
    CHECK(ops::reduce_axis(x, ops::ReduceTag::mean, 1).vec() == std::vector<double>{8.0 / 3, 2.0});
}

TEST_CASE("concat") {
    Tensor<double> a = Tensor<double>::of({1, 2, 1, 1}, {1, 2});
    Tensor<double> b = Tensor<double>::of({1, 3, 1, 1}, {3, 4, 5});
    auto c = ops::concat<double>({a, b}, 1);
    CHECK(c.shape() == Shape{1, 5, 1, 1});
    CHECK(c.vec() == std::vector<double>{1, 2, 3, 4, 5});
    CHECK_THROWS_AS(ops::concat<double>({a, Tensor<double>({2, 2, 1, 1})}, 1), ShapeError);
}

TEST_CASE("cross entropy") {
    Tensor<double> onehot = Tensor<double>::of({1, 4}, {0, 1, 0, 0});
    CHECK(ops::cross_entropy(onehot, {1}).item() == 0.0);

    Tensor<double> uniform = Tensor<double>::full({1, 10}, 0.1);
    CHECK(ops::cross_entropy(uniform, {3}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    // invariant under a joint permutation of the class axis and the label
    Tensor<double> p = Tensor<double>::of({1, 3}, {0.2, 0.5, 0.3});
    Tensor<double> pp = Tensor<double>::of({1, 3}, {0.5, 0.3, 0.2});
    CHECK(ops::cross_entropy(p, {1}).item() == ops::cross_entropy(pp, {0}).item());

    CHECK_THROWS_AS(ops::cross_entropy(p, {5}), ContractError);
    CHECK_THROWS_AS(ops::cross_entropy(p, {0, 1}), ContractError);
}

TEST_CASE("deterministic: repeated evaluation is bit-identical") {
    Rng rng(6);
    Tensor<float> x = uniform_tensor<float>({2, 3, 9, 9}, rng, -1, 1);
    Tensor<float> w = uniform_tensor<float>({4, 3, 3, 3}, rng, -1, 1);
    ops::Conv2dOpts o;
    o.pad_h = o.pad_w = 1;
    auto y1 = ops::conv2d<float>(x, w, nullptr, o);
    auto y2 = ops::conv2d<float>(x, w, nullptr, o);
    CHECK(tensors_equal(y1, y2));

    // multi-threaded forward partitions work but not arithmetic
    kernels::set_threads(2);
    auto y3 = ops::conv2d<float>(x, w, nullptr, o);
    kernels::set_threads(1);
    CHECK(tensors_equal(y1, y3));
}
