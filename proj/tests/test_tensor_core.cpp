#include <doctest.h>

#include <cmath>
#include <random>
#include <string>

#include "oracles.hpp"
#include "waterseg/errors.hpp"
#include "waterseg/ops.hpp"
#include "waterseg/optim.hpp"
#include "waterseg/tensor.hpp"

using namespace waterseg;
using oracle::check_gradients;
using oracle::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<double> values(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

} // namespace

TEST_CASE("tensor construction keeps shape and data consistent") {
    auto t = Tensor::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.dim(-1) == 4);
    CHECK_FALSE(t.has_grad());
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
    auto c = t.clone();
    c.data()[0] = 5;
    CHECK(t.data()[0] == 0);
}

TEST_CASE("matmul values and errors") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto r = ops::matmul(eye, m);
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4});

    auto row = Tensor::from_data({1, 2}, {1, 2});
    auto col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(ops::matmul(row, col).item() == 11.0f);

    try {
        ops::matmul(Tensor::zeros({3, 4}), Tensor::zeros({3, 2}));
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[3,4]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    std::mt19937_64 rng(1);
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 2});
    auto g = check_gradients({a, b}, [&] { return ops::sum(ops::mul(ops::matmul(a, b), ops::matmul(a, b))); });
    CHECK(g.max_rel_error < kGradTol);

    // batched with broadcast of the right operand
    auto x = random_tensor(rng, {2, 3, 4});
    auto w = random_tensor(rng, {4, 5});
    auto g2 = check_gradients({x, w}, [&] { return ops::sum(ops::gelu(ops::matmul(x, w))); });
    CHECK(g2.max_rel_error < kGradTol);
}

TEST_CASE("elementwise ops broadcast and differentiate") {
    std::mt19937_64 rng(2);
    auto a = random_tensor(rng, {2, 3, 4});
    auto b = random_tensor(rng, {3, 1});
    auto c = random_tensor(rng, {4});
    auto g = check_gradients({a, b, c}, [&] {
        return ops::mean(ops::mul(ops::add(a, b), ops::sub(a, c)));
    });
    CHECK(g.max_rel_error < kGradTol);
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("shape ops: reshape, permute, transpose, concat") {
    std::mt19937_64 rng(3);
    auto a = random_tensor(rng, {2, 3, 4});
    auto b = random_tensor(rng, {2, 2, 4});
    auto r = ops::reshape(a, {6, -1});
    CHECK(r.shape() == Shape{6, 4});
    auto t = ops::transpose(a, 0, 2);
    CHECK(t.shape() == Shape{4, 3, 2});
    CHECK(t.data()[1 * 6 + 2 * 2 + 1] == a.data()[1 * 12 + 2 * 4 + 1]);
    auto cat = ops::concat<double>({a, b}, 1);
    CHECK(cat.shape() == Shape{2, 5, 4});
    CHECK(cat.data()[5 * 4 + 3 * 4] == b.data()[2 * 4]);
    CHECK_THROWS_AS(ops::reshape(a, {5, -1}), ShapeError);

    auto w = random_tensor(rng, {5});
    auto g = check_gradients({a, b, w}, [&] {
        auto joined = ops::concat<double>({a, b}, 1);                 // [2,5,4]
        auto moved = ops::permute(joined, {2, 0, 1});                  // [4,2,5]
        auto flat = ops::reshape(ops::transpose(moved, 0, 1), {8, 5}); // [8,5]
        return ops::sum(ops::mul(ops::mul(flat, flat), w));
    });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("conv2d values, sizes and errors") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0f);
    CHECK(ops::conv2d(x, w, Tensor(), {}).item() == 9.0f);
    CHECK(ops::conv_output_size(64, 7, 4, 3) == 16);
    auto big = Tensor::zeros({1, 3, 64, 64});
    auto k7 = Tensor::zeros({8, 3, 7, 7});
    CHECK(ops::conv2d(big, k7, Tensor(), {4, 3, 1}).shape() == Shape{1, 8, 16, 16});
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 1, 2, 2}), w, Tensor(), {}), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({4, 2, 3, 3}), Tensor(), {1, 1, 2}),
                    ShapeError);
}

TEST_CASE("conv2d with an identity 1x1 kernel is the identity map") {
    std::mt19937_64 rng(4);
    auto x = random_tensor(rng, {2, 3, 5, 6}, false);
    std::vector<double> eye(9, 0.0);
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    auto w = Tensor64::from_data({3, 3, 1, 1}, eye);
    CHECK(values(ops::conv2d(x, w, Tensor64(), {})) == values(x));
}

TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937_64 rng(5);
    SUBCASE("dense 1x2x5x5") {
        auto x = random_tensor(rng, {1, 2, 5, 5});
        auto w = random_tensor(rng, {3, 2, 3, 3});
        auto b = random_tensor(rng, {3});
        auto g = check_gradients({x, w, b}, [&] {
            auto y = ops::conv2d(x, w, b, {1, 1, 1});
            return ops::sum(ops::mul(y, y));
        });
        CHECK(g.max_rel_error < kGradTol);
    }
    SUBCASE("strided overlapping patches") {
        auto x = random_tensor(rng, {2, 3, 9, 9});
        auto w = random_tensor(rng, {4, 3, 7, 7});
        auto b = random_tensor(rng, {4});
        auto g = check_gradients({x, w, b}, [&] {
            auto y = ops::conv2d(x, w, b, {4, 3, 1});
            return ops::sum(ops::mul(y, y));
        });
        CHECK(g.max_rel_error < kGradTol);
    }
    SUBCASE("depthwise") {
        auto x = random_tensor(rng, {1, 4, 5, 5});
        auto w = random_tensor(rng, {4, 1, 3, 3});
        auto b = random_tensor(rng, {4});
        auto g = check_gradients({x, w, b}, [&] {
            auto y = ops::conv2d(x, w, b, {1, 1, 4});
            return ops::sum(ops::mul(y, y));
        });
        CHECK(g.max_rel_error < kGradTol);
    }
}

TEST_CASE("layer_norm values and gradients") {
    auto constant = Tensor64::full({1, 4}, 3.0);
    auto gamma = Tensor64::full({4}, 1.0);
    auto beta = Tensor64::zeros({4});
    for (double v : values(ops::layer_norm(constant, gamma, beta, 1e-6))) CHECK(v == doctest::Approx(0.0));

    auto pair = Tensor64::from_data({2}, {1.0, 3.0});
    auto out = values(ops::layer_norm(pair, Tensor64::full({2}, 1.0), Tensor64::zeros({2}), 1e-12));
    CHECK(out[0] == doctest::Approx(-1.0));
    CHECK(out[1] == doctest::Approx(1.0));

    std::mt19937_64 rng(6);
    auto x = random_tensor(rng, {3, 5, 6});
    auto g = random_tensor(rng, {6});
    auto b = random_tensor(rng, {6});
    auto w = random_tensor(rng, {3, 5, 6}, false);
    auto check = check_gradients({x, g, b}, [&] { return ops::sum(ops::mul(ops::layer_norm(x, g, b, 1e-6), w)); });
    CHECK(check.max_rel_error < kGradTol);
}

TEST_CASE("softmax values, stability and gradients") {
    auto half = values(ops::softmax(Tensor64::from_data({2}, {0.0, 0.0})));
    CHECK(half[0] == doctest::Approx(0.5));
    CHECK(half[1] == doctest::Approx(0.5));
    auto big = values(ops::softmax(Tensor64::from_data({2}, {1000.0, 0.0})));
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] == doctest::Approx(0.0));

    std::mt19937_64 rng(7);
    auto logits = Tensor::from_data({16, 33}, [&] {
        std::vector<float> v(16 * 33);
        std::normal_distribution<float> d(0, 4);
        for (auto& x : v) x = d(rng);
        return v;
    }());
    auto s = ops::softmax(logits);
    for (int r = 0; r < 16; ++r) {
        double total = 0;
        for (int c = 0; c < 33; ++c) {
            const float p = s.data()[r * 33 + c];
            CHECK(p > 0.0f);
            CHECK(p < 1.0f);
            total += p;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
    }

    auto x = random_tensor(rng, {4, 7}, true, -3, 3);
    auto w = random_tensor(rng, {4, 7}, false);
    auto g = check_gradients({x}, [&] { return ops::sum(ops::mul(ops::softmax(x), w)); });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("gelu values and gradients") {
    auto v = values(ops::gelu(Tensor64::from_data({3}, {0.0, 1.0, -1.0})));
    CHECK(v[0] == 0.0);
    CHECK(v[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK(v[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
    std::mt19937_64 rng(8);
    auto x = random_tensor(rng, {20}, true, -4, 4);
    auto g = check_gradients({x}, [&] { return ops::sum(ops::mul(ops::gelu(x), x)); });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("bilinear upsampling follows the align_corners=false grid") {
    auto flat = values(ops::bilinear_upsample2d(Tensor64::full({1, 2, 3, 3}, 2.5), 7, 5));
    for (double v : flat) CHECK(v == doctest::Approx(2.5));

    auto up = values(ops::bilinear_upsample2d(Tensor64::from_data({1, 1, 2, 2}, {0, 1, 2, 3}), 4, 4));
    const std::vector<double> expected{0,   0.25, 0.75, 1,    0.5, 0.75, 1.25, 1.5,
                                       1.5, 1.75, 2.25, 2.5,  2,   2.25, 2.75, 3};
    for (int i = 0; i < 16; ++i) CHECK(up[i] == doctest::Approx(expected[i]).epsilon(1e-12));

    std::mt19937_64 rng(9);
    auto img = random_tensor(rng, {1, 1, 3, 5}, false);
    auto ours = values(ops::bilinear_upsample2d(img, 12, 20));
    auto ref = oracle::bilinear(values(img), 3, 5, 12, 20);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(ours[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    auto x = random_tensor(rng, {2, 2, 3, 3});
    auto w = random_tensor(rng, {2, 2, 8, 6}, false);
    auto g = check_gradients({x}, [&] { return ops::sum(ops::mul(ops::bilinear_upsample2d(x, 8, 6), w)); });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("binary cross entropy with logits") {
    auto zero = Tensor64::zeros({1, 1, 2, 2});
    auto mixed = Tensor64::from_data({1, 1, 2, 2}, {0, 1, 1, 0});
    CHECK(ops::binary_cross_entropy_with_logits(zero, mixed).item() == doctest::Approx(std::log(2.0)));
    auto sure = Tensor64::full({1, 1, 2, 2}, 20.0);
    CHECK(ops::binary_cross_entropy_with_logits(sure, Tensor64::full({1, 1, 2, 2}, 1.0)).item() < 1e-8);
    auto far = Tensor64::full({1, 1, 1, 2}, -800.0);
    CHECK(std::isfinite(ops::binary_cross_entropy_with_logits(far, Tensor64::full({1, 1, 1, 2}, 1.0)).item()));
    CHECK_THROWS_AS(ops::binary_cross_entropy_with_logits(zero, Tensor64::full({1, 1, 2, 2}, 0.5)), ValidationError);
    CHECK_THROWS_AS(ops::binary_cross_entropy_with_logits(zero, Tensor64::zeros({1, 1, 2, 3})), ShapeError);

    std::mt19937_64 rng(10);
    auto logits = random_tensor(rng, {2, 1, 3, 3}, true, -5, 5);
    std::vector<double> t(18);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>((i * 7) % 3 == 0);
    auto target = Tensor64::from_data({2, 1, 3, 3}, t);
    auto g = check_gradients({logits}, [&] { return ops::binary_cross_entropy_with_logits(logits, target); });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("backward contracts") {
    reset_tape<double>();
    auto x = Tensor64::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto loss = ops::sum(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK_THROWS_AS(backward(loss), StateError);

    reset_tape<double>();
    auto y = Tensor64::from_data({2}, {1, 2}, true);
    backward(ops::sum(ops::mul(y, y)));
    CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4});

    reset_tape<double>();
    auto frozen = Tensor64::from_data({2}, {1, 2}, false);
    auto live = Tensor64::from_data({2}, {3, 4}, true);
    backward(ops::sum(ops::mul(frozen, live)));
    CHECK_FALSE(frozen.has_grad());
    CHECK(live.grad()[1] == 2.0);

    reset_tape<double>();
    CHECK_THROWS_AS(backward(ops::mul(live, live)), ShapeError);
    reset_tape<double>();
    CHECK_THROWS_AS(backward(ops::sum(frozen)), StateError);
    reset_tape<double>();
}

TEST_CASE("tape replays in reverse execution order") {
    reset_tape<double>();
    auto x = Tensor64::from_data({3}, {1, 2, 3}, true);
    auto y = ops::scale(x, 2.0);
    bool x_had_grad_when_probe_ran = true;
    bool probe_ran = false;
    Tape<double>::current().record({y.node_ptr()}, y.node_ptr(), [&] {
        probe_ran = true;
        x_had_grad_when_probe_ran = x.has_grad();
    });
    auto loss = ops::sum(y);
    backward(loss);
    CHECK(probe_ran);
    CHECK_FALSE(x_had_grad_when_probe_ran);
    CHECK(x.grad()[0] == 2.0);
    reset_tape<double>();

    {
        NoGradGuard guard;
        auto z = ops::sum(ops::mul(x, x));
        (void)z;
        CHECK(Tape<double>::current().size() == 0);
    }
}

TEST_CASE("two-layer network gradients match finite differences") {
    std::mt19937_64 rng(11);
    auto x = random_tensor(rng, {4, 6}, false);
    auto w1 = random_tensor(rng, {8, 6});
    auto b1 = random_tensor(rng, {8});
    auto w2 = random_tensor(rng, {1, 8});
    auto b2 = random_tensor(rng, {1});
    auto target = Tensor64::from_data({4, 1}, {1, 0, 0, 1});
    auto g = check_gradients({w1, b1, w2, b2}, [&] {
        auto h = ops::gelu(ops::linear(x, w1, b1));
        auto logits = ops::reshape(ops::linear(h, w2, b2), {4, 1, 1, 1});
        return ops::binary_cross_entropy_with_logits(logits, ops::reshape(target, {4, 1, 1, 1}));
    });
    CHECK(g.max_rel_error < kGradTol);
}

TEST_CASE("forward and backward are bit-identical across runs") {
    auto run = [] {
        std::mt19937_64 rng(12);
        auto x = random_tensor(rng, {2, 3, 8, 8});
        auto w = random_tensor(rng, {4, 3, 3, 3});
        reset_tape<double>();
        auto y = ops::softmax(ops::gelu(ops::conv2d(x, w, Tensor64(), {2, 1, 1})));
        auto loss = ops::sum(ops::mul(y, y));
        backward(loss);
        std::vector<double> out(w.grad().begin(), w.grad().end());
        out.push_back(loss.item());
        reset_tape<double>();
        return out;
    };
    CHECK(run() == run());
}

namespace {

// Textbook AdamW with decoupled decay.
void reference_adamw(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                     std::vector<double>& v, int step, const AdamWConfig& c) {
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= c.lr * c.weight_decay * p[i];
        m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / (1 - std::pow(c.beta1, step));
        const double vhat = v[i] / (1 - std::pow(c.beta2, step));
        p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
}

} // namespace

TEST_CASE("adamw step") {
    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        auto p = Tensor64::from_data({3}, {1, -2, 3}, true);
        p.node()->ensure_grad();
        AdamWState<double> state;
        AdamWConfig cfg;
        cfg.weight_decay = 0;
        std::vector<Tensor64> params{p};
        adamw_step(std::span(params), state, cfg);
        CHECK(values(p) == std::vector<double>{1, -2, 3});
    }
    SUBCASE("first step on a constant gradient moves by about lr") {
        auto p = Tensor64::from_data({1}, {0.5}, true);
        p.node()->ensure_grad();
        p.mutable_grad()[0] = 3.0;
        AdamWState<double> state;
        AdamWConfig cfg;
        cfg.weight_decay = 0;
        std::vector<Tensor64> params{p};
        adamw_step(std::span(params), state, cfg);
        CHECK(0.5 - p.data()[0] == doctest::Approx(cfg.lr).epsilon(1e-6));
    }
    SUBCASE("matches the reference update over several steps") {
        std::mt19937_64 rng(13);
        auto p = random_tensor(rng, {5});
        std::vector<double> ref = values(p), m(5, 0), v(5, 0);
        AdamWState<double> state;
        AdamWConfig cfg;
        cfg.lr = 1e-2;
        std::vector<Tensor64> params{p};
        for (int step = 1; step <= 6; ++step) {
            auto g = oracle::random_values(rng, 5);
            p.node()->ensure_grad();
            std::copy(g.begin(), g.end(), p.mutable_grad().begin());
            adamw_step(std::span(params), state, cfg);
            reference_adamw(ref, g, m, v, step, cfg);
        }
        for (int i = 0; i < 5; ++i) CHECK(p.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
    SUBCASE("frozen parameters and state mismatches") {
        auto live = Tensor64::from_data({1}, {1.0}, true);
        auto frozen = Tensor64::from_data({1}, {1.0}, false);
        live.node()->ensure_grad();
        live.mutable_grad()[0] = 1.0;
        AdamWState<double> state;
        std::vector<Tensor64> params{live, frozen};
        adamw_step(std::span(params), state, AdamWConfig{});
        CHECK(frozen.data()[0] == 1.0);
        CHECK(live.data()[0] != 1.0);
        std::vector<Tensor64> fewer{live};
        CHECK_THROWS_AS(adamw_step(std::span(fewer), state, AdamWConfig{}), StateError);
    }
    SUBCASE("ten steps are bit-identical across runs") {
        auto run = [] {
            std::mt19937_64 rng(14);
            auto p = Tensor::from_data({8}, std::vector<float>(8, 0.25f), true);
            AdamWState<float> state;
            std::vector<Tensor> params{p};
            for (int s = 0; s < 10; ++s) {
                p.node()->ensure_grad();
                for (auto& g : p.mutable_grad()) g = static_cast<float>(std::normal_distribution<double>(0, 1)(rng));
                adamw_step(std::span(params), state, AdamWConfig{});
            }
            return std::vector<float>(p.data().begin(), p.data().end());
        };
        CHECK(run() == run());
    }
}
