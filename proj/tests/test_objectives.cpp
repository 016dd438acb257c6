#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mqvtg/objectives.hpp"
#include "mqvtg/rng.hpp"

using namespace mqvtg;

namespace {

constexpr double kGradTol = 1e-6;

Tensor rand_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

HeadOutputs heads_from(const Var& logits, const Var& start, const Var& end) {
    HeadOutputs h;
    h.confidence_logits = logits;
    h.confidence = sigmoid(logits);
    h.start_offset = start;
    h.end_offset = end;
    return h;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("moment retrieval loss") {
    SECTION("perfect predictions drive the loss to zero") {
        // Window [1,3] over T=4 unit clips: clips 1,2 positive.
        const std::size_t T = 4;
        Tensor logits(T, 1, {-40.0, 40.0, 40.0, -40.0});
        Tensor start(T, 1), end(T, 1);
        start.at(1, 0) = 0.5;  end.at(1, 0) = 1.5;  // center 1.5, window [1,3]
        start.at(2, 0) = 1.5;  end.at(2, 0) = 0.5;  // center 2.5
        auto loss = moment_retrieval_loss(
            heads_from(constant(logits), constant(start), constant(end)), {{1.0, 3.0}}, 1.0);
        CHECK(loss->value.item() < 1e-10);
    }
    SECTION("gamma=0, alpha=0.5 reduces to half binary cross-entropy") {
        for (double p = 0.01; p < 1.0; p += 0.07) {
            const double logit = std::log(p / (1.0 - p));
            // One positive clip, no offset targets checked (offsets exact).
            Tensor lg(1, 1, {logit});
            Tensor off(1, 1, {0.5});
            auto h = heads_from(constant(lg), constant(off), constant(off));
            auto loss = moment_retrieval_loss(h, {{0.0, 1.0}}, 1.0, 0.5, 0);
            const double bce = -std::log(p);
            CHECK(loss->value.item() == Catch::Approx(0.5 * bce).margin(1e-10));
            // Negative clip: no windows at all.
            auto loss_neg = moment_retrieval_loss(h, {}, 1.0, 0.5, 0);
            const double bce_neg = -std::log(1.0 - p);
            CHECK(loss_neg->value.item() == Catch::Approx(0.5 * bce_neg).margin(1e-10));
        }
    }
    SECTION("random heads match a hand-computed per-clip sum at T=4") {
        Rng rng(41);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t T = 4;
            Tensor logits = rand_tensor(rng, T, 1, -3.0, 3.0);
            Tensor start = rand_tensor(rng, T, 1, 0.0, 3.0);
            Tensor end = rand_tensor(rng, T, 1, 0.0, 3.0);
            const std::vector<std::pair<double, double>> windows = {{1.0, 3.0}};
            auto h = heads_from(constant(logits), constant(start), constant(end));
            auto loss = moment_retrieval_loss(h, windows, 1.0, 0.25, 2);

            // Hand computation, plain doubles.
            double focal = 0.0, l1 = 0.0;
            std::size_t n_pos = 0;
            for (std::size_t t = 0; t < T; ++t) {
                const double center = t + 0.5;
                const bool pos = center >= 1.0 && center <= 3.0;
                const double x = logits.at(t, 0);
                const double p = sigmoid_ref(x);
                if (pos) {
                    focal += -0.25 * (1 - p) * (1 - p) * std::log(p);
                    ++n_pos;
                    const double gs = center - 1.0, ge = 3.0 - center;
                    l1 += std::fabs(start.at(t, 0) - gs) + std::fabs(end.at(t, 0) - ge);
                } else {
                    focal += -0.75 * p * p * std::log(1 - p);
                }
            }
            const double expected = focal / T + l1 / static_cast<double>(n_pos);
            CHECK(loss->value.item() == Catch::Approx(expected).margin(1e-10));
        }
    }
    SECTION("gradients agree with finite differences") {
        Rng rng(42);
        auto err = grad_check(
            [](const std::vector<Var>& v) {
                auto h = heads_from(v[0], v[1], v[2]);
                return moment_retrieval_loss(h, {{1.0, 3.0}}, 1.0);
            },
            {rand_tensor(rng, 4, 1, -2, 2), rand_tensor(rng, 4, 1, 3.0, 5.0),
             rand_tensor(rng, 4, 1, 3.0, 5.0)});  // offsets far from gt: |.| stays smooth
        CHECK(err < kGradTol);
    }
}

TEST_CASE("saliency loss") {
    SECTION("one positive among four equal scores costs log 4") {
        auto s = constant(Tensor(4, 1, 0.3));
        auto loss = saliency_loss(s, {0, 1, 0, 0});
        CHECK(loss->value.item() == Catch::Approx(std::log(4.0)).margin(1e-12));
    }
    SECTION("a dominant positive score drives the loss to zero") {
        auto s = constant(Tensor(4, 1, {0.0, 1e4, 0.0, 0.0}));
        auto loss = saliency_loss(s, {0, 1, 0, 0});
        CHECK(loss->value.item() < 1e-9);
        CHECK(loss->value.item() >= 0.0);
    }
    SECTION("no positive clips yields zero and sets the skip flag") {
        bool skipped = false;
        auto loss = saliency_loss(constant(Tensor(4, 1, 0.5)), {0, 0, 0, 0}, 0.07, &skipped);
        CHECK(loss->value.item() == 0.0);
        CHECK(skipped);
    }
    SECTION("matches direct per-term evaluation on random scores") {
        Rng rng(43);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor s = rand_tensor(rng, 6, 1, -1.0, 1.0);
            std::vector<double> labels = {1, 0, 0, 1, 0, 1};
            const double tau = 0.07;
            auto loss = saliency_loss(constant(s), labels, tau);
            double denom = 0.0;
            for (std::size_t t = 0; t < 6; ++t) denom += std::exp(s.at(t, 0) / tau);
            double expected = 0.0;
            std::size_t n_pos = 0;
            for (std::size_t t = 0; t < 6; ++t) {
                if (labels[t] <= 0) continue;
                expected += -std::log(std::exp(s.at(t, 0) / tau) / denom);
                ++n_pos;
            }
            expected /= static_cast<double>(n_pos);
            CHECK(loss->value.item() == Catch::Approx(expected).margin(1e-9));
        }
    }
    SECTION("invariant to constant shifts of all scores") {
        Rng rng(44);
        Tensor s = rand_tensor(rng, 5, 1);
        Tensor shifted = s;
        for (std::size_t i = 0; i < 5; ++i) shifted[i] += 123.456;
        std::vector<double> labels = {0, 1, 1, 0, 0};
        const double a = saliency_loss(constant(s), labels)->value.item();
        const double b = saliency_loss(constant(shifted), labels)->value.item();
        CHECK(a == Catch::Approx(b).margin(1e-10));
    }
    SECTION("gradient agrees with finite differences") {
        // Checked at a moderate temperature: at tau = 0.07 the coldest clips
        // carry softmax mass ~1e-13, so their true gradient entries sit below
        // what central differences can resolve against a loss of magnitude ~10.
        Rng rng(45);
        auto err = grad_check(
            [](const std::vector<Var>& v) { return saliency_loss(v[0], {1, 0, 0, 1, 0}, 0.5); },
            {rand_tensor(rng, 5, 1)});
        CHECK(err < kGradTol);
    }
    SECTION("gradient entries sum to zero at the default temperature") {
        // Shift invariance of the softmax makes the exact gradient sum to zero;
        // this holds for any tau and does not rely on finite differences.
        Rng rng(45);
        auto scores = make_leaf(rand_tensor(rng, 5, 1), "scores");
        auto loss = saliency_loss(scores, {1, 0, 0, 1, 0});
        backward(loss);
        double total = 0.0;
        double magnitude = 0.0;
        for (std::size_t t = 0; t < 5; ++t) {
            total += scores->grad[t];
            magnitude += std::abs(scores->grad[t]);
        }
        CHECK(magnitude > 1.0);  // tau = 0.07 sharpens, it must not flatten
        CHECK(std::abs(total) < 1e-9);
    }
}

TEST_CASE("alignment loss") {
    SECTION("uniform similarities at B=2 cost log 2") {
        auto sim = constant(Tensor(2, 2, 0.37));
        CHECK(infonce_from_similarity(sim)->value.item() ==
              Catch::Approx(std::log(2.0)).margin(1e-12));
    }
    SECTION("a dominant diagonal drives the loss to zero") {
        Tensor sim(3, 3, -1e4);
        for (std::size_t i = 0; i < 3; ++i) sim.at(i, i) = 1e4;
        auto loss = infonce_from_similarity(constant(sim));
        CHECK(loss->value.item() < 1e-9);
        CHECK(loss->value.item() >= 0.0);
    }
    SECTION("matches hand-computed row cross-entropies on a random 3x3 matrix") {
        Rng rng(46);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor sim = rand_tensor(rng, 3, 3);
            const double tau = 0.07;
            auto loss = infonce_from_similarity(constant(sim), tau);
            auto direction = [&](bool rows) {
                double total = 0.0;
                for (std::size_t i = 0; i < 3; ++i) {
                    double denom = 0.0;
                    for (std::size_t j = 0; j < 3; ++j)
                        denom += std::exp((rows ? sim.at(i, j) : sim.at(j, i)) / tau);
                    total += -std::log(std::exp(sim.at(i, i) / tau) / denom);
                }
                return total / 3.0;
            };
            const double expected = 0.5 * (direction(true) + direction(false));
            CHECK(loss->value.item() == Catch::Approx(expected).margin(1e-9));
        }
    }
    SECTION("shift invariance") {
        Rng rng(47);
        Tensor sim = rand_tensor(rng, 4, 4);
        Tensor shifted = sim;
        for (std::size_t i = 0; i < 16; ++i) shifted[i] += 55.5;
        CHECK(infonce_from_similarity(constant(sim))->value.item() ==
              Catch::Approx(infonce_from_similarity(constant(shifted))->value.item())
                  .margin(1e-10));
    }
    SECTION("single-pair batches are rejected") {
        CHECK_THROWS_AS(alignment_loss(constant(Tensor(1, 4, 0.5)), constant(Tensor(1, 4, 0.5))),
                        std::invalid_argument);
    }
    SECTION("embedding-level gradients agree with finite differences") {
        Rng rng(48);
        auto err = grad_check(
            [](const std::vector<Var>& v) { return alignment_loss(v[0], v[1], 0.5); },
            {rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)});
        CHECK(err < kGradTol);
    }
}

TEST_CASE("total loss combination") {
    auto scalars = [](double a, double b, double c, double d, double e) {
        LossParts p;
        p.l_mr = constant(Tensor::scalar(a));
        p.l_hd = constant(Tensor::scalar(b));
        p.l_cb = constant(Tensor::scalar(c));
        p.l_cmt = constant(Tensor::scalar(d));
        p.l_align = constant(Tensor::scalar(e));
        return p;
    };
    SECTION("all lambdas zero leaves only the retrieval term") {
        LossWeights w;
        w.lambda_hd = w.lambda_mq = w.lambda_align = 0.0;
        auto b = total_loss(scalars(0.7, 1.0, 1.0, 1.0, 1.0), w);
        CHECK(b.total_value == 0.7);
    }
    SECTION("quantization term arithmetic") {
        LossWeights w;
        w.lambda_mq = 1.0;
        w.lambda_cmt = 0.25;
        auto b = total_loss(scalars(0, 0, 0.4, 0.8, 0), w);
        CHECK(b.l_mq == Catch::Approx(0.6).margin(1e-15));
    }
    SECTION("matches an independent weighted sum on random inputs") {
        Rng rng(49);
        for (int trial = 0; trial < 30; ++trial) {
            const double mr = rng.uniform(0, 2), hd = rng.uniform(0, 2), cb = rng.uniform(0, 2),
                         cmt = rng.uniform(0, 2), al = rng.uniform(0, 2);
            LossWeights w;
            w.lambda_hd = rng.uniform(0, 2);
            w.lambda_mq = rng.uniform(0, 2);
            w.lambda_align = rng.uniform(0, 2);
            w.lambda_cmt = rng.uniform(0, 2);
            auto b = total_loss(scalars(mr, hd, cb, cmt, al), w);
            const double expected =
                mr + w.lambda_hd * hd + w.lambda_mq * (cb + w.lambda_cmt * cmt) +
                w.lambda_align * al;
            CHECK(b.total_value == Catch::Approx(expected).margin(1e-12));
            CHECK(b.total_value ==
                  Catch::Approx(b.l_mr + w.lambda_hd * b.l_hd + w.lambda_mq * b.l_mq +
                                w.lambda_align * b.l_align)
                      .margin(1e-12));
        }
    }
    SECTION("linear in each lambda") {
        auto parts_at = [&](double lam) {
            LossWeights w;
            w.lambda_mq = lam;
            return total_loss(scalars(0.5, 0.5, 0.5, 0.5, 0.5), w).total_value;
        };
        const double f0 = parts_at(0.0), f1 = parts_at(1.0), f2 = parts_at(2.0);
        CHECK(f2 - f1 == Catch::Approx(f1 - f0).margin(1e-12));
    }
    SECTION("non-finite part aborts with the part's name") {
        auto p = scalars(0.5, 0.5, 0.5, 0.5, 0.5);
        p.l_hd = make_leaf(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()), false);
        CHECK_THROWS_WITH(total_loss(p, LossWeights{}),
                          Catch::Matchers::ContainsSubstring("l_hd"));
    }
}
