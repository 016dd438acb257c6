#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvtg/autodiff.hpp"
#include "mqvtg/model.hpp"
#include "mqvtg/tensor.hpp"

namespace mqvtg {

// Training objectives: focal+L1 moment retrieval, intra-video contrastive
// saliency, batch-level video-text InfoNCE, the two quantization losses
// (owned by the codebook module), and their weighted combination.

struct LossWeights {
    double lambda_hd = 1.0;
    double lambda_mq = 1.0;
    double lambda_align = 0.3;
    double lambda_cmt = 0.25;

    void validate() const {
        for (double l : {lambda_hd, lambda_mq, lambda_align, lambda_cmt})
            if (!(l >= 0.0) || !std::isfinite(l))
                throw std::invalid_argument("LossWeights: lambdas must be finite and >= 0");
    }
};

namespace detail {

// x^n for small integer n by repeated multiplication (keeps the graph free
// of log/exp round trips for the common gamma values).
inline Var pow_int(const Var& x, int n) {
    if (n == 0) return constant(Tensor::ones(x->value.rows(), x->value.cols()));
    Var acc = x;
    for (int i = 1; i < n; ++i) acc = multiply(acc, x);
    return acc;
}

// Elementwise |x| built from relu(x) + relu(-x).
inline Var absolute(const Var& x) { return add(relu(x), relu(scale(x, -1.0))); }

// Numerically safe row-wise log-softmax: shift by the per-row max (held as a
// constant, which is exact for any shift), exponentiate, and normalize in
// log space. Works through two transposes so the 1xR broadcasts line up.
inline Var log_softmax_rows(const Var& x) {
    const Tensor& X = x->value;
    Tensor row_max(1, X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        double mx = X.at(r, 0);
        for (std::size_t c = 1; c < X.cols(); ++c) mx = std::max(mx, X.at(r, c));
        row_max.at(0, r) = mx;
    }
    Var shifted_t = subtract(transpose(x), constant(row_max, "row_max"));  // C x R
    Var lse_t = logarithm(sum(exponential(shifted_t), 0));                 // 1 x R
    return transpose(subtract(shifted_t, lse_t));
}

}  // namespace detail

// Per-clip foreground assignment: a clip is positive iff its center lies
// inside some ground-truth window.
inline std::vector<bool> positive_clips(std::size_t T, double clip_len,
                                        const std::vector<std::pair<double, double>>& windows) {
    std::vector<bool> pos(T, false);
    for (std::size_t t = 0; t < T; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * clip_len;
        for (const auto& [s, e] : windows)
            if (center >= s && center <= e) {
                pos[t] = true;
                break;
            }
    }
    return pos;
}

// Focal loss (from logits, so no clamped logarithms are needed) over all
// clips, plus L1 on the start/end offsets averaged over positive clips.
// With no positive clips only the focal term remains.
inline Var moment_retrieval_loss(const HeadOutputs& heads,
                                 const std::vector<std::pair<double, double>>& gt_windows,
                                 double clip_len, double focal_alpha = 0.25,
                                 int focal_gamma = 2) {
    const std::size_t T = heads.confidence_logits->value.rows();
    const auto pos = positive_clips(T, clip_len, gt_windows);

    Tensor pos_mask(T, 1), neg_mask(T, 1);
    std::size_t n_pos = 0;
    for (std::size_t t = 0; t < T; ++t) {
        pos_mask.at(t, 0) = pos[t] ? 1.0 : 0.0;
        neg_mask.at(t, 0) = pos[t] ? 0.0 : 1.0;
        if (pos[t]) ++n_pos;
    }

    // Positive clips: -alpha (1-p)^g log p   =  alpha sigmoid(-x)^g softplus(-x)
    // Negative clips: -(1-a) p^g log(1-p)    =  (1-a) sigmoid(x)^g softplus(x)
    const Var& x = heads.confidence_logits;
    Var neg_x = scale(x, -1.0);
    Var per_clip = add(
        scale(multiply(multiply(detail::pow_int(sigmoid(neg_x), focal_gamma), softplus(neg_x)),
                       constant(pos_mask, "pos_mask")),
              focal_alpha),
        scale(multiply(multiply(detail::pow_int(sigmoid(x), focal_gamma), softplus(x)),
                       constant(neg_mask, "neg_mask")),
              1.0 - focal_alpha));
    Var loss = mean(per_clip);

    if (n_pos > 0) {
        // Ground-truth offsets in clip units for each positive clip; clips in
        // overlapping windows take the first window that contains them.
        Tensor gt_start(T, 1), gt_end(T, 1);
        for (std::size_t t = 0; t < T; ++t) {
            if (!pos[t]) continue;
            const double center = (static_cast<double>(t) + 0.5) * clip_len;
            for (const auto& [s, e] : gt_windows) {
                if (center >= s && center <= e) {
                    gt_start.at(t, 0) = (center - s) / clip_len;
                    gt_end.at(t, 0) = (e - center) / clip_len;
                    break;
                }
            }
        }
        Var mask = constant(pos_mask, "l1_mask");
        Var l1 = add(detail::absolute(
                         subtract(heads.start_offset, constant(gt_start, "gt_start"))),
                     detail::absolute(subtract(heads.end_offset, constant(gt_end, "gt_end"))));
        Var l1_pos = scale(sum(multiply(l1, mask)), 1.0 / static_cast<double>(n_pos));
        loss = add(loss, l1_pos);
    }
    return loss;
}

// Intra-video contrast: each positive clip against all clips of the same
// video. Returns a zero constant (and sets *skipped) when there is nothing
// to contrast against.
inline Var saliency_loss(const Var& saliency, const std::vector<double>& labels,
                         double tau = 0.07, bool* skipped = nullptr) {
    if (saliency->value.cols() != 1 || saliency->value.rows() != labels.size())
        throw std::invalid_argument("saliency_loss: expected Tx1 scores matching labels");
    if (tau <= 0.0) throw std::invalid_argument("saliency_loss: tau must be positive");
    const std::size_t T = labels.size();
    Tensor pos_mask(1, T);
    std::size_t n_pos = 0;
    for (std::size_t t = 0; t < T; ++t)
        if (labels[t] > 0.0) {
            pos_mask.at(0, t) = 1.0;
            ++n_pos;
        }
    if (skipped) *skipped = n_pos == 0;
    if (n_pos == 0) return constant(Tensor::scalar(0.0), "saliency_zero");

    Var logits = scale(transpose(saliency), 1.0 / tau);      // 1 x T
    Var logp = detail::log_softmax_rows(logits);             // 1 x T
    Var picked = sum(multiply(logp, constant(pos_mask, "saliency_pos")));
    return scale(picked, -1.0 / static_cast<double>(n_pos));
}

// Symmetric InfoNCE over a precomputed BxB similarity matrix whose rows are
// videos and columns texts; matching pairs sit on the diagonal.
inline Var infonce_from_similarity(const Var& sim, double tau = 0.07) {
    const std::size_t B = sim->value.rows();
    if (B < 2 || sim->value.cols() != B)
        throw std::invalid_argument("infonce_from_similarity: need a BxB matrix with B >= 2");
    if (tau <= 0.0) throw std::invalid_argument("infonce_from_similarity: tau must be positive");
    Var scaled = scale(sim, 1.0 / tau);
    Var diag = constant(Tensor::identity(B), "infonce_diag");
    // video -> text: softmax across each row; text -> video: across columns,
    // which is the row-softmax of the transpose.
    Var v2t = sum(multiply(detail::log_softmax_rows(scaled), diag));
    Var t2v = sum(multiply(detail::log_softmax_rows(transpose(scaled)), diag));
    return scale(add(v2t, t2v), -0.5 / static_cast<double>(B));
}

// Video/text alignment: cosine similarities between pooled per-video features
// (B x d) and pooled per-text features (B x d), then symmetric InfoNCE.
inline Var alignment_loss(const Var& video_pooled, const Var& text_pooled, double tau = 0.07) {
    if (video_pooled->value.rows() != text_pooled->value.rows())
        throw std::invalid_argument("alignment_loss: batch sizes differ");
    if (video_pooled->value.rows() < 2)
        throw std::invalid_argument("alignment_loss: needs a batch of at least 2 pairs");
    return infonce_from_similarity(cosine_similarity(video_pooled, text_pooled), tau);
}

// ---------------------------------------------------------------------------
// Weighted combination
// ---------------------------------------------------------------------------

struct LossParts {
    Var l_mr;     // moment retrieval (focal + L1)
    Var l_hd;     // highlight (saliency contrast)
    Var l_cb;     // codebook loss
    Var l_cmt;    // commitment loss
    Var l_align;  // video-text InfoNCE
};

struct LossBreakdown {
    Var total;  // scalar node for backward()
    double l_mr = 0.0, l_hd = 0.0, l_mq = 0.0, l_align = 0.0, total_value = 0.0;
};

inline LossBreakdown total_loss(const LossParts& parts, const LossWeights& w) {
    w.validate();
    auto check = [](const Var& v, const char* name) {
        if (!v || v->value.numel() != 1)
            throw std::invalid_argument(std::string("total_loss: ") + name + " must be scalar");
        if (!v->value.all_finite())
            throw std::runtime_error(std::string("total_loss: non-finite loss part ") + name);
    };
    check(parts.l_mr, "l_mr");
    check(parts.l_hd, "l_hd");
    check(parts.l_cb, "l_cb");
    check(parts.l_cmt, "l_cmt");
    check(parts.l_align, "l_align");

    Var l_mq = add(parts.l_cb, scale(parts.l_cmt, w.lambda_cmt));
    Var total = add(add(parts.l_mr, scale(parts.l_hd, w.lambda_hd)),
                    add(scale(l_mq, w.lambda_mq), scale(parts.l_align, w.lambda_align)));
    LossBreakdown b;
    b.total = total;
    b.l_mr = parts.l_mr->value.item();
    b.l_hd = parts.l_hd->value.item();
    b.l_mq = l_mq->value.item();
    b.l_align = parts.l_align->value.item();
    b.total_value = total->value.item();
    return b;
}

}  // namespace mqvtg
