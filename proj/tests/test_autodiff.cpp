#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mqvtg/autodiff.hpp"
#include "mqvtg/rng.hpp"
#include "mqvtg/tensor.hpp"

using namespace mqvtg;

namespace {

// Gradient-check threshold. The checker itself uses central differences with
// eps = 1e-5, so 1e-6 relative error leaves two orders of headroom over
// double-precision truncation noise on these op sizes.
constexpr double kGradTol = 1e-6;

Tensor rand_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Wraps a vector-valued graph into a scalar by taking a fixed random
// projection, so grad_check exercises all output elements at once.
Var project_to_scalar(const Var& v, Rng& rng) {
    Tensor w(v->value.rows(), v->value.cols());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.5, 1.5);
    return sum(multiply(v, constant(w)));
}

}  // namespace

TEST_CASE("forward values match hand computations") {
    SECTION("matmul") {
        auto a = constant(Tensor(2, 3, {1, 2, 3, 4, 5, 6}));
        auto b = constant(Tensor(3, 2, {7, 8, 9, 10, 11, 12}));
        auto c = matmul(a, b);
        CHECK(c->value.at(0, 0) == 58.0);
        CHECK(c->value.at(0, 1) == 64.0);
        CHECK(c->value.at(1, 0) == 139.0);
        CHECK(c->value.at(1, 1) == 154.0);
    }
    SECTION("add with row broadcast") {
        auto a = constant(Tensor(2, 2, {1, 2, 3, 4}));
        auto b = constant(Tensor(1, 2, {10, 20}));
        auto c = add(a, b);
        CHECK(c->value.at(1, 0) == 13.0);
        CHECK(c->value.at(1, 1) == 24.0);
    }
    SECTION("softmax rows sum to one and are monotone in the input") {
        auto a = constant(Tensor(1, 3, {1.0, 2.0, 3.0}));
        auto s = softmax(a, 1);
        double total = s->value.at(0, 0) + s->value.at(0, 1) + s->value.at(0, 2);
        CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
        CHECK(s->value.at(0, 0) < s->value.at(0, 1));
        CHECK(s->value.at(0, 1) < s->value.at(0, 2));
    }
    SECTION("layer-normalize gives zero mean, unit variance rows") {
        Rng rng(7);
        auto a = constant(rand_tensor(rng, 3, 8, -2.0, 2.0));
        auto y = layer_normalize(a);
        for (std::size_t r = 0; r < 3; ++r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t c = 0; c < 8; ++c) mu += y->value.at(r, c);
            mu /= 8.0;
            for (std::size_t c = 0; c < 8; ++c) {
                double d = y->value.at(r, c) - mu;
                var += d * d;
            }
            var /= 8.0;
            CHECK(std::fabs(mu) < 1e-12);
            CHECK(var == Catch::Approx(1.0).margin(1e-4));  // eps shifts variance slightly
        }
    }
    SECTION("squared-L2-distance") {
        auto a = constant(Tensor(1, 3, {1, 2, 3}));
        auto b = constant(Tensor(1, 3, {4, 6, 3}));
        CHECK(squared_l2_distance(a, b)->value.item() == 25.0);
    }
    SECTION("max-pool breaks ties toward the lowest index") {
        // Two equal maxima: gradient must flow only to the first.
        auto a = make_leaf(Tensor(1, 4, {5.0, 2.0, 5.0, 1.0}), true);
        auto m = max_pool(a, 1);
        CHECK(m->value.item() == 5.0);
        backward(sum(m));
        CHECK(a->grad.at(0, 0) == 1.0);
        CHECK(a->grad.at(0, 2) == 0.0);
    }
    SECTION("row-gather duplicates accumulate in backward") {
        auto m = make_leaf(Tensor(3, 2, {1, 2, 3, 4, 5, 6}), true);
        auto g = row_gather(m, {1, 1, 0});
        CHECK(g->value.at(0, 0) == 3.0);
        CHECK(g->value.at(2, 1) == 2.0);
        backward(sum(g));
        CHECK(m->grad.at(1, 0) == 2.0);  // gathered twice
        CHECK(m->grad.at(0, 0) == 1.0);
        CHECK(m->grad.at(2, 0) == 0.0);
    }
    SECTION("cosine-similarity of identical rows is one") {
        auto a = constant(Tensor(1, 3, {0.3, -0.4, 0.5}));
        CHECK(cosine_similarity(a, a)->value.item() == Catch::Approx(1.0).epsilon(1e-9));
    }
    SECTION("softplus matches log1p(exp(x))") {
        auto a = constant(Tensor(1, 2, {-3.0, 2.5}));
        auto s = softplus(a);
        CHECK(s->value.at(0, 0) == Catch::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-12));
        CHECK(s->value.at(0, 1) == Catch::Approx(std::log1p(std::exp(2.5))).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradients agree with central differences") {
    Rng rng(42);

    SECTION("matmul") {
        auto err = grad_check(
            [](const std::vector<Var>& v) { return sum(matmul(v[0], v[1])); },
            {rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 2)});
        CHECK(err < kGradTol);
    }
    SECTION("add / subtract / multiply, same shape") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                return sum(multiply(add(v[0], v[1]), subtract(v[0], v[1])));
            },
            {rand_tensor(rng, 3, 3), rand_tensor(rng, 3, 3)});
        CHECK(err < kGradTol);
    }
    SECTION("row broadcast on both add and multiply") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                return sum(multiply(add(v[0], v[1]), v[2]));
            },
            {rand_tensor(rng, 4, 3), rand_tensor(rng, 1, 3), rand_tensor(rng, 1, 3)});
        CHECK(err < kGradTol);
    }
    SECTION("scalar broadcast") {
        auto err = grad_check(
            [](const std::vector<Var>& v) { return sum(multiply(v[0], v[1])); },
            {rand_tensor(rng, 2, 5), rand_tensor(rng, 1, 1)});
        CHECK(err < kGradTol);
    }
    SECTION("scale and relu") {
        // Keep values away from the relu kink where the derivative jumps.
        Tensor t = rand_tensor(rng, 3, 4);
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (std::fabs(t[i]) < 0.05) t[i] = 0.1;
        auto err = grad_check(
            [](const std::vector<Var>& v) { return sum(relu(scale(v[0], -1.7))); }, {t});
        CHECK(err < kGradTol);
    }
    SECTION("sigmoid / exponential / logarithm chain") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                return sum(logarithm(add(exponential(sigmoid(v[0])),
                                         constant(Tensor::ones(2, 3)))));
            },
            {rand_tensor(rng, 2, 3)});
        CHECK(err < kGradTol);
    }
    SECTION("softmax along both axes") {
        Rng local(3);
        for (int axis : {0, 1}) {
            auto err = grad_check(
                [axis, &local](const std::vector<Var>& v) {
                    Rng proj(17);
                    return project_to_scalar(softmax(v[0], axis), proj);
                },
                {rand_tensor(local, 3, 4, -2.0, 2.0)});
            CHECK(err < kGradTol);
        }
    }
    SECTION("layer-normalize") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(5);
                return project_to_scalar(layer_normalize(v[0]), proj);
            },
            {rand_tensor(rng, 3, 6, -2.0, 2.0)});
        CHECK(err < kGradTol);
    }
    SECTION("mean and sum along every axis") {
        for (int axis : {-1, 0, 1}) {
            auto err = grad_check(
                [axis](const std::vector<Var>& v) {
                    Rng proj(9);
                    return project_to_scalar(mean(v[0], axis), proj);
                },
                {rand_tensor(rng, 3, 4)});
            CHECK(err < kGradTol);
            err = grad_check(
                [axis](const std::vector<Var>& v) {
                    Rng proj(11);
                    return project_to_scalar(sum(v[0], axis), proj);
                },
                {rand_tensor(rng, 3, 4)});
            CHECK(err < kGradTol);
        }
    }
    SECTION("squared-L2-distance, both sides") {
        auto err = grad_check(
            [](const std::vector<Var>& v) { return squared_l2_distance(v[0], v[1]); },
            {rand_tensor(rng, 2, 4), rand_tensor(rng, 2, 4)});
        CHECK(err < kGradTol);
    }
    SECTION("concatenate along both axes") {
        for (int axis : {0, 1}) {
            auto err = grad_check(
                [axis](const std::vector<Var>& v) {
                    Rng proj(13);
                    return project_to_scalar(concatenate(v[0], v[1], axis), proj);
                },
                {rand_tensor(rng, 2, 3), rand_tensor(rng, 2, 3)});
            CHECK(err < kGradTol);
        }
    }
    SECTION("row-gather with repeats") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(15);
                return project_to_scalar(row_gather(v[0], {2, 0, 2, 1}), proj);
            },
            {rand_tensor(rng, 3, 4)});
        CHECK(err < kGradTol);
    }
    SECTION("max-pool over rows, columns, and groups") {
        // Perturb leaves to avoid exact ties; FD is invalid at tie points.
        auto t = rand_tensor(rng, 4, 4, -3.0, 3.0);
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(19);
                return project_to_scalar(max_pool(v[0], 0), proj);
            },
            {t});
        CHECK(err < kGradTol);
        err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(21);
                return project_to_scalar(max_pool(v[0], 1), proj);
            },
            {t});
        CHECK(err < kGradTol);
        err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(23);
                return project_to_scalar(max_pool_rows(v[0], 2), proj);
            },
            {t});
        CHECK(err < kGradTol);
    }
    SECTION("cosine-similarity, both sides") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(25);
                return project_to_scalar(cosine_similarity(v[0], v[1]), proj);
            },
            {rand_tensor(rng, 3, 5), rand_tensor(rng, 2, 5)});
        CHECK(err < kGradTol);
    }
    SECTION("transpose and reshape") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                Rng proj(27);
                return project_to_scalar(reshape(transpose(v[0]), 2, 6), proj);
            },
            {rand_tensor(rng, 3, 4)});
        CHECK(err < kGradTol);
    }
    SECTION("softplus composite") {
        auto err = grad_check(
            [](const std::vector<Var>& v) { return sum(softplus(v[0])); },
            {rand_tensor(rng, 2, 4, -3.0, 3.0)});
        CHECK(err < kGradTol);
    }
    SECTION("deep composite touching most of the catalog") {
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                auto h = relu(add(matmul(v[0], v[1]), v[2]));
                auto s = softmax(h, 1);
                auto n = layer_normalize(add(h, constant(Tensor::full(3, 3, 0.5))));
                auto c = cosine_similarity(n, n);
                return add(mean(multiply(s, c)), squared_l2_distance(n, s));
            },
            {rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 3), rand_tensor(rng, 1, 3)});
        CHECK(err < kGradTol);
    }
}

TEST_CASE("stop-gradient blocks the tape") {
    auto x = make_leaf(Tensor::scalar(2.0), true);
    auto y = make_leaf(Tensor::scalar(3.0), true);
    // loss = x * sg(x * y): gradient wrt x must be sg-value (3*2=6), wrt y zero.
    auto loss = multiply(x, stop_gradient(multiply(x, y)));
    backward(loss);
    CHECK(x->grad.item() == 6.0);
    CHECK(y->grad.numel() == 0);  // never touched
}

TEST_CASE("straight-through copies forward bits and reroutes backward") {
    Rng rng(8);
    Tensor q = rand_tensor(rng, 2, 3);
    Tensor z = rand_tensor(rng, 2, 3);
    auto qv = make_leaf(q, true);
    auto zv = make_leaf(z, true);
    auto st = straight_through(qv, zv);
    // Forward must be an exact bit copy of the discrete side.
    for (std::size_t i = 0; i < q.numel(); ++i) CHECK(st->value[i] == q[i]);
    backward(sum(st));
    CHECK(qv->grad.numel() == 0);  // discrete side untouched
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(zv->grad[i] == 1.0);
}

TEST_CASE("backward accumulates across shared subexpressions") {
    auto x = make_leaf(Tensor::scalar(3.0), true);
    auto y = add(x, x);             // dy/dx = 2
    auto loss = multiply(y, y);     // d/dx (2x)^2 = 8x = 24
    backward(loss);
    CHECK(x->grad.item() == 24.0);
}

TEST_CASE("NoGradGuard suppresses tape construction") {
    auto x = make_leaf(Tensor::scalar(2.0), true);
    {
        NoGradGuard ng;
        auto y = multiply(x, x);
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    auto z = multiply(x, x);
    CHECK(z->requires_grad);
}

TEST_CASE("non-finite forward values are rejected with the node name") {
    auto x = constant(Tensor::scalar(-1.0));
    try {
        logarithm(x);  // log(-1) = nan
        FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("logarithm") != std::string::npos);
    }
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = make_leaf(Tensor(2, 2, 1.0), true);
    CHECK_THROWS_AS(backward(multiply(x, x)), std::invalid_argument);
}

TEST_CASE("shape mismatches are rejected") {
    auto a = constant(Tensor(2, 3, 1.0));
    auto b = constant(Tensor(2, 2, 1.0));
    CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(squared_l2_distance(a, b), std::invalid_argument);
    CHECK_THROWS_AS(max_pool_rows(a, 4), std::invalid_argument);
}
