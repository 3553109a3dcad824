#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "hiernas/microtensor.hpp"

using namespace hiernas;
using namespace hiernas::mt;

namespace {

void fill_random(const NodePtr& n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    for (auto& v : n->value) v = dist(rng);
}

// Independent oracle: direct 7-loop convolution with same-padding.
std::vector<double> naive_conv(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride,
                               int dilation, int groups) {
    const auto& xs = x->shape;
    const auto& ws = w->shape;
    const int pad = dilation * (ws.h - 1) / 2;
    const int ho = (xs.h + 2 * pad - dilation * (ws.h - 1) - 1) / stride + 1;
    const int wo = (xs.w + 2 * pad - dilation * (ws.w - 1) - 1) / stride + 1;
    const int cin_g = xs.c / groups, cout_g = ws.n / groups;
    std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * ho * wo, 0.0);
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < ws.n; ++co) {
            const int grp = co / cout_g;
            for (int y = 0; y < ho; ++y)
                for (int xo = 0; xo < wo; ++xo) {
                    double acc = b ? b->value[co] : 0.0;
                    for (int ci = 0; ci < cin_g; ++ci)
                        for (int ky = 0; ky < ws.h; ++ky)
                            for (int kx = 0; kx < ws.w; ++kx) {
                                const int iy = y * stride + ky * dilation - pad;
                                const int ix = xo * stride + kx * dilation - pad;
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                const double xv =
                                    x->value[((static_cast<std::int64_t>(n) * xs.c + grp * cin_g +
                                               ci) *
                                                  xs.h +
                                              iy) *
                                                 xs.w +
                                             ix];
                                const double wv =
                                    w->value[((static_cast<std::int64_t>(co) * cin_g + ci) * ws.h +
                                              ky) *
                                                 ws.w +
                                             kx];
                                acc += xv * wv;
                            }
                    out[((static_cast<std::int64_t>(n) * ws.n + co) * ho + y) * wo + xo] = acc;
                }
        }
    return out;
}

}  // namespace

TEST_CASE("trivial backward rules") {
    auto x = make_leaf({1, 2, 3, 3}, true);
    std::mt19937_64 rng(1);
    fill_random(x, rng);
    auto loss = sum(x);
    backward(loss);
    for (double g : x->grad) REQUIRE(g == 1.0);

    auto y = make_leaf({1, 2, 3, 3}, true);
    fill_random(y, rng);
    x->zero_grad();
    auto loss2 = sum(mul(x, y));
    backward(loss2);
    for (std::size_t i = 0; i < x->grad.size(); ++i) REQUIRE(x->grad[i] == y->value[i]);

    REQUIRE_THROWS_AS(backward(add(x, y)), InvalidArgumentError);
}

TEST_CASE("zero_op and identity contracts") {
    auto x = make_leaf({2, 3, 4, 4}, true);
    std::mt19937_64 rng(2);
    fill_random(x, rng);
    auto z = zero_op(x);
    for (double v : z->value) REQUIRE(v == 0.0);
    backward(sum(z));
    for (double g : x->grad) REQUIRE(g == 0.0);

    auto id = identity(x);
    REQUIRE(id->value == x->value);
    x->zero_grad();
    backward(sum(id));
    for (double g : x->grad) REQUIRE(g == 1.0);
}

TEST_CASE("conv2d forward matches naive oracle") {
    std::mt19937_64 rng(3);
    struct Case {
        int n, cin, cout, h, w, k, stride, dilation, groups;
    };
    for (const Case& c : {Case{1, 2, 3, 5, 5, 3, 1, 1, 1}, Case{2, 4, 4, 6, 6, 3, 2, 1, 1},
                          Case{1, 4, 4, 5, 7, 3, 1, 2, 4}, Case{1, 3, 6, 7, 5, 5, 1, 2, 1},
                          Case{2, 6, 4, 8, 8, 1, 1, 1, 2}, Case{1, 2, 2, 4, 4, 1, 2, 1, 1},
                          Case{1, 3, 3, 4, 4, 3, 1, 6, 3}}) {
        auto x = make_leaf({c.n, c.cin, c.h, c.w});
        auto w = make_leaf({c.cout, c.cin / c.groups, c.k, c.k});
        auto b = make_leaf({1, c.cout, 1, 1});
        fill_random(x, rng);
        fill_random(w, rng);
        fill_random(b, rng);
        auto out = conv2d(x, w, b, c.stride, c.dilation, c.groups);
        auto expect = naive_conv(x, w, b, c.stride, c.dilation, c.groups);
        REQUIRE(out->value.size() == expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i)
            REQUIRE(out->value[i] == Catch::Approx(expect[i]).margin(1e-12));
    }
}

TEST_CASE("conv2d shape errors") {
    auto x = make_leaf({1, 3, 5, 5});
    auto w = make_leaf({4, 2, 3, 3});
    REQUIRE_THROWS_AS(conv2d(x, w, nullptr, 1, 1, 1), ShapeError);
    auto w2 = make_leaf({4, 3, 3, 3});
    auto bad_bias = make_leaf({1, 3, 1, 1});
    REQUIRE_THROWS_AS(conv2d(x, w2, bad_bias, 1, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradients vs finite differences") {
    std::mt19937_64 rng(4);
    auto x = make_leaf({1, 2, 5, 5}, true);
    auto w = make_leaf({3, 2, 3, 3}, true);
    auto b = make_leaf({1, 3, 1, 1}, true);
    auto t = make_leaf({1, 3, 5, 5});
    fill_random(x, rng);
    fill_random(w, rng);
    fill_random(b, rng);
    fill_random(t, rng);
    auto build = [&] {
        auto y = conv2d(x, w, b, 1, 1, 1);
        auto d = mul(y, t);
        return sum(d);
    };
    auto report = gradient_check(build, {{"x", x}, {"w", w}, {"b", b}});
    INFO("max rel error " << report.max_rel_error());
    REQUIRE(report.passed());
}

TEST_CASE("strided grouped dilated conv gradients") {
    std::mt19937_64 rng(5);
    auto x = make_leaf({2, 4, 6, 6}, true);
    auto w = make_leaf({4, 2, 3, 3}, true);
    fill_random(x, rng);
    fill_random(w, rng);
    auto build = [&] {
        auto y = conv2d(x, w, nullptr, 2, 2, 2);
        return sum(mul(y, y));
    };
    auto report = gradient_check(build, {{"x", x}, {"w", w}});
    REQUIRE(report.passed());
}

TEST_CASE("separable conv chain gradients") {
    std::mt19937_64 rng(6);
    auto x = make_leaf({1, 3, 6, 6}, true);
    auto dw1 = make_leaf({3, 1, 5, 5}, true);
    auto pw1 = make_leaf({4, 3, 1, 1}, true);
    auto dw2 = make_leaf({4, 1, 3, 3}, true);
    auto pw2 = make_leaf({2, 4, 1, 1}, true);
    for (auto& p : {x, dw1, pw1, dw2, pw2}) fill_random(p, rng, 0.5);
    auto build = [&] {
        auto a = separable_conv(x, dw1, pw1, nullptr, 1, 2);
        auto b = separable_conv(relu(a), dw2, pw2, nullptr, 1, 1);
        return sum(mul(b, b));
    };
    auto report =
        gradient_check(build, {{"x", x}, {"dw1", dw1}, {"pw1", pw1}, {"dw2", dw2}, {"pw2", pw2}});
    INFO("max rel error " << report.max_rel_error());
    REQUIRE(report.passed());
}

TEST_CASE("pooling gradients") {
    std::mt19937_64 rng(7);
    auto x = make_leaf({1, 2, 5, 5}, true);
    fill_random(x, rng);
    auto t = make_leaf({1, 2, 5, 5});
    fill_random(t, rng);
    auto rep_avg = gradient_check([&] { return sum(mul(avg_pool_3x3(x), t)); }, {{"x", x}});
    REQUIRE(rep_avg.passed());
    auto rep_max = gradient_check([&] { return sum(mul(max_pool_3x3(x), t)); }, {{"x", x}});
    REQUIRE(rep_max.passed());
    auto rep_gap = gradient_check([&] { return sum(mul(global_avg_pool(x), global_avg_pool(t))); },
                                  {{"x", x}});
    REQUIRE(rep_gap.passed());
}

TEST_CASE("max_pool tie point is flagged as nondifferentiable") {
    auto x = make_leaf({1, 1, 2, 2}, true);
    // Exact tie between two window entries.
    x->value = {1.0, 1.0, 0.0, -1.0};
    auto report = gradient_check([&] { return sum(max_pool_3x3(x)); }, {{"x", x}});
    int skipped = 0;
    for (const auto& e : report.entries) skipped += e.skipped_nondifferentiable;
    REQUIRE(skipped > 0);
}

TEST_CASE("bilinear resize preserves constants and checks gradients") {
    auto x = make_leaf({1, 2, 3, 3}, true);
    std::fill(x->value.begin(), x->value.end(), 2.5);
    auto up = bilinear_upsample_x2(x);
    for (double v : up->value) REQUIRE(v == Catch::Approx(2.5).epsilon(1e-14));
    auto rs = bilinear_resize(x, 7, 5);
    for (double v : rs->value) REQUIRE(v == Catch::Approx(2.5).epsilon(1e-14));

    std::mt19937_64 rng(8);
    fill_random(x, rng);
    auto t = make_leaf({1, 2, 6, 6});
    fill_random(t, rng);
    auto rep = gradient_check([&] { return sum(mul(bilinear_upsample_x2(x), t)); }, {{"x", x}});
    REQUIRE(rep.passed());
}

TEST_CASE("batch_norm normalizes and differentiates") {
    std::mt19937_64 rng(9);
    auto x = make_leaf({2, 3, 4, 4}, true);
    fill_random(x, rng, 3.0);
    auto gamma = make_leaf({1, 3, 1, 1}, true);
    auto beta = make_leaf({1, 3, 1, 1}, true);
    std::fill(gamma->value.begin(), gamma->value.end(), 1.0);
    auto y = batch_norm(x, gamma, beta);
    const std::int64_t hw = 16, m = 2 * hw;
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < hw; ++i) mean += y->value[(n * 3 + c) * hw + i];
        mean /= m;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < hw; ++i) {
                double d = y->value[(n * 3 + c) * hw + i] - mean;
                var += d * d;
            }
        var /= m;
        REQUIRE(std::abs(mean) <= 1e-6);
        REQUIRE(std::abs(var - 1.0) <= 1e-4);
    }
    fill_random(gamma, rng);
    fill_random(beta, rng);
    auto t = make_leaf({2, 3, 4, 4});
    fill_random(t, rng);
    auto rep = gradient_check([&] { return sum(mul(batch_norm(x, gamma, beta), t)); },
                              {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    INFO("max rel error " << rep.max_rel_error());
    REQUIRE(rep.passed());
}

TEST_CASE("concat then slice reproduces inputs bit-exactly") {
    std::mt19937_64 rng(10);
    auto a = make_leaf({2, 2, 3, 3}, true);
    auto b = make_leaf({2, 3, 3, 3}, true);
    fill_random(a, rng);
    fill_random(b, rng);
    auto cat = concat_channels({a, b});
    auto sa = slice_channels(cat, 0, 2);
    auto sb = slice_channels(cat, 2, 5);
    REQUIRE(sa->value == a->value);
    REQUIRE(sb->value == b->value);
    auto rep = gradient_check([&] { return sum(mul(concat_channels({a, b}), concat_channels({a, b}))); },
                              {{"a", a}, {"b", b}});
    REQUIRE(rep.passed());
}

TEST_CASE("masked softmax properties") {
    auto logits = make_leaf({1, 4, 1, 1}, true);
    logits->value = {std::log(3.0), 0.0, 0.0, 0.0};
    auto p = softmax_vec(logits);
    double sum_p = 0.0;
    for (double v : p->value) sum_p += v;
    REQUIRE(sum_p == Catch::Approx(1.0).epsilon(1e-14));
    REQUIRE(p->value[0] == Catch::Approx(3.0 / 6.0).epsilon(1e-12));

    logits->value = {1.0, 2.0, 3.0, 4.0};
    auto p1 = softmax_vec(logits)->value;
    for (auto& v : logits->value) v += 17.5;
    auto p2 = softmax_vec(logits)->value;
    for (std::size_t i = 0; i < p1.size(); ++i)
        REQUIRE(p1[i] == Catch::Approx(p2[i]).epsilon(1e-12));

    auto m = masked_softmax_vec(logits, {true, false, true, false});
    REQUIRE(m->value[1] == 0.0);
    REQUIRE(m->value[3] == 0.0);
    REQUIRE(m->value[0] + m->value[2] == Catch::Approx(1.0).epsilon(1e-14));

    logits->value[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(softmax_vec(logits), NumericError);
    REQUIRE_THROWS_AS(masked_softmax_vec(logits, {false, false, false, false}),
                      InvalidArgumentError);
}

TEST_CASE("mix gradients w.r.t. inputs and coefficients") {
    std::mt19937_64 rng(11);
    auto a = make_leaf({1, 2, 3, 3}, true);
    auto b = make_leaf({1, 2, 3, 3}, true);
    auto logits = make_leaf({1, 3, 1, 1}, true);
    fill_random(a, rng);
    fill_random(b, rng);
    fill_random(logits, rng);
    auto t = make_leaf({1, 2, 3, 3});
    fill_random(t, rng);
    auto build = [&] {
        auto coeffs = softmax_vec(logits);
        auto m = mix({a, b}, coeffs, {0, 2});
        return sum(mul(m, t));
    };
    auto rep = gradient_check(build, {{"a", a}, {"b", b}, {"logits", logits}});
    REQUIRE(rep.passed());
}

TEST_CASE("cross entropy spatial") {
    std::mt19937_64 rng(12);
    auto logits = make_leaf({2, 3, 4, 4}, true);
    fill_random(logits, rng);
    LabelMap labels{2, 4, 4, {}};
    labels.v.resize(32);
    for (auto& l : labels.v) l = static_cast<int>(rng() % 3);
    labels.v[5] = -1;  // ignored

    auto rep = gradient_check([&] { return cross_entropy_spatial(logits, labels, -1); },
                              {{"logits", logits}});
    INFO("max rel error " << rep.max_rel_error());
    REQUIRE(rep.passed());

    LabelMap wrong{1, 4, 4, std::vector<int>(16, 0)};
    REQUIRE_THROWS_AS(cross_entropy_spatial(logits, wrong, -1), ShapeError);
    LabelMap all_ignored{2, 4, 4, std::vector<int>(32, -1)};
    REQUIRE_THROWS_AS(cross_entropy_spatial(logits, all_ignored, -1), InvalidArgumentError);
}

TEST_CASE("gradient check on a linear function is exact") {
    auto x = make_leaf({1, 1, 2, 2}, true);
    x->value = {1.0, 2.0, 3.0, 4.0};
    auto rep = gradient_check([&] { return sum(x); }, {{"x", x}});
    REQUIRE(rep.max_rel_error() < 1e-10);
}

TEST_CASE("param store checkpoint round trip") {
    std::mt19937_64 rng(13);
    ParamStore store;
    auto a = store.create("conv.w", {4, 3, 3, 3});
    auto b = store.create("bn.gamma", {1, 4, 1, 1});
    fill_random(a, rng);
    fill_random(b, rng);
    REQUIRE_THROWS_AS(store.create("conv.w", {1, 1, 1, 1}), InvalidArgumentError);

    const std::string path = "mt_checkpoint_test.bin";
    store.save(path);

    ParamStore loaded;
    loaded.create("conv.w", {4, 3, 3, 3});
    loaded.create("bn.gamma", {1, 4, 1, 1});
    loaded.load(path);
    REQUIRE(loaded.get("conv.w")->value == a->value);
    REQUIRE(loaded.get("bn.gamma")->value == b->value);

    ParamStore mismatched;
    mismatched.create("conv.w", {4, 3, 3, 3});
    REQUIRE_THROWS_AS(mismatched.load(path), ValidationError);
    std::remove(path.c_str());
}

TEST_CASE("sgd with momentum minimizes a quadratic") {
    ParamStore store;
    auto x = store.create("x", {1, 1, 1, 2});
    x->value = {5.0, -3.0};
    SgdMomentum opt(store, {"x"}, 0.9, 0.0);
    for (int i = 0; i < 200; ++i) {
        store.zero_grad();
        auto loss = sum(mul(x, x));
        backward(loss);
        opt.step(0.05);
    }
    REQUIRE(std::abs(x->value[0]) < 1e-3);
    REQUIRE(std::abs(x->value[1]) < 1e-3);
}

TEST_CASE("adam minimizes a quadratic") {
    ParamStore store;
    auto x = store.create("x", {1, 1, 1, 2});
    x->value = {2.0, -1.5};
    Adam opt(store, {"x"}, 0.05, 0.0);
    for (int i = 0; i < 500; ++i) {
        store.zero_grad();
        auto loss = sum(mul(x, x));
        backward(loss);
        opt.step();
    }
    REQUIRE(std::abs(x->value[0]) < 1e-3);
    REQUIRE(std::abs(x->value[1]) < 1e-3);
}

TEST_CASE("gradient clipping preserves direction") {
    auto x = make_leaf({1, 1, 1, 3}, true);
    x->ensure_grad();
    x->grad = {3.0, 4.0, 0.0};
    clip_grad_norm({x}, 1.0);
    REQUIRE(global_grad_norm({x}) == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(x->grad[0] / x->grad[1] == Catch::Approx(0.75).epsilon(1e-12));
    x->grad = {0.1, 0.0, 0.0};
    clip_grad_norm({x}, 1.0);
    REQUIRE(x->grad[0] == 0.1);
}
