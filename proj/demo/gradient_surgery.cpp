// Smallest possible tour of the quantization losses and their gradient
// partition: the codebook loss moves only the codebook, the commitment loss
// moves only the features, and the forward value is blind to either choice.

#include "mqvtg/codebook.hpp"

#include <cstdio>

using namespace mqvtg;

namespace {

double grad_norm(const Var& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v->grad.numel(); ++i) s += v->grad[i] * v->grad[i];
    return std::sqrt(s);
}

}  // namespace

int main() {
    Rng rng(9);
    const std::size_t T = 4, K = 3, d = 8;

    Tensor feats(T, d), words(K, d);
    for (std::size_t i = 0; i < feats.numel(); ++i) feats[i] = rng.normal();
    for (std::size_t i = 0; i < words.numel(); ++i) words[i] = rng.normal();

    Var z = make_leaf(feats, true, "features");
    Var entries = make_leaf(words, true, "codewords");

    Assignment a = lookup(z->value, entries);
    std::printf("assignments:");
    for (std::size_t t = 0; t < T; ++t) std::printf(" %zu", a.indices[t]);
    std::printf("\n");

    // Codebook loss: pull the selected codewords toward the (frozen) features.
    Var l_cb = codebook_loss(z, a);
    backward(l_cb);
    std::printf("L_cb = %.6f   |grad codewords| = %.4f   |grad features| = %.4f\n",
                l_cb->value.item(), grad_norm(entries), grad_norm(z));

    // Commitment loss: pull the features toward the (frozen) codewords.
    z->zero_grad();
    entries->zero_grad();
    Assignment b = lookup(z->value, entries);
    Var l_cmt = commitment_loss(z, b);
    backward(l_cmt);
    std::printf("L_cmt = %.6f   |grad codewords| = %.4f   |grad features| = %.4f\n",
                l_cmt->value.item(), grad_norm(entries), grad_norm(z));
    return 0;
}
