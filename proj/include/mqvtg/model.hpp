#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvtg/autodiff.hpp"
#include "mqvtg/codebook.hpp"
#include "mqvtg/data.hpp"
#include "mqvtg/metrics.hpp"
#include "mqvtg/rng.hpp"

namespace mqvtg {

// Encoder-only grounding model: pooled visual features and text tokens go
// through a small self+cross-attention stack, quantization hooks in at one
// of three placements, and three heads read the final clip features.

enum class Placement { none, image, clip, moment };
enum class Fusion { hard, soft, add, concat };

inline Placement placement_from_string(const std::string& s) {
    if (s == "none") return Placement::none;
    if (s == "image") return Placement::image;
    if (s == "clip") return Placement::clip;
    if (s == "moment") return Placement::moment;
    throw std::invalid_argument("unknown placement '" + s + "' (none|image|clip|moment)");
}

inline std::string to_string(Placement p) {
    switch (p) {
        case Placement::none: return "none";
        case Placement::image: return "image";
        case Placement::clip: return "clip";
        default: return "moment";
    }
}

inline Fusion fusion_from_string(const std::string& s) {
    if (s == "hard") return Fusion::hard;
    if (s == "soft") return Fusion::soft;
    if (s == "add") return Fusion::add;
    if (s == "concat") return Fusion::concat;
    throw std::invalid_argument("unknown fusion '" + s + "' (hard|soft|add|concat)");
}

inline std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::hard: return "hard";
        case Fusion::soft: return "soft";
        case Fusion::add: return "add";
        default: return "concat";
    }
}

struct ModelConfig {
    std::size_t d = 64;
    std::size_t encoder_layers = 1;
    std::size_t attention_heads = 2;
    Placement placement = Placement::none;
    Fusion fusion = Fusion::soft;
    std::size_t K = 128;

    void validate() const {
        if (d == 0 || K == 0) throw std::invalid_argument("ModelConfig: d and K must be positive");
        if (attention_heads == 0 || d % attention_heads != 0)
            throw std::invalid_argument("ModelConfig: d must be divisible by attention_heads");
    }
};

struct HeadOutputs {
    Var confidence;         // T x 1 probabilities
    Var confidence_logits;  // T x 1, kept for the focal loss
    Var start_offset;       // T x 1, clip units, >= 0
    Var end_offset;         // T x 1, clip units, >= 0
    Var saliency;           // T x 1 raw scores
};

struct Model {
    ModelConfig cfg;
    Codebook codebook;
    // Registration order is fixed by construction; the optimizer and the
    // checkpoint format both iterate this list.
    std::vector<std::pair<std::string, Var>> params;

    Var param(const std::string& name) const {
        for (const auto& [n, v] : params)
            if (n == name) return v;
        throw std::out_of_range("no parameter named '" + name + "'");
    }
};

namespace detail {

inline Var register_param(Model& m, const std::string& name, Tensor init) {
    auto v = make_leaf(std::move(init), true, name);
    m.params.emplace_back(name, v);
    return v;
}

inline Tensor glorot(Rng& rng, std::size_t rows, std::size_t cols) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace detail

// Codebook entries are registered last so earlier parameter indices are
// stable across placement=none (codebook still exists; it is simply unused).
inline Model make_model(const ModelConfig& cfg, Rng& rng, Tensor codebook_entries = {},
                        bool projector_frozen = false, bool entries_frozen = false) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const std::size_t d = cfg.d;

    detail::register_param(m, "input_proj.weight", detail::glorot(rng, d, d));
    detail::register_param(m, "input_proj.bias", Tensor::zeros(1, d));
    detail::register_param(m, "text_proj.weight", detail::glorot(rng, d, d));
    detail::register_param(m, "text_proj.bias", Tensor::zeros(1, d));

    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
        const std::string p = "encoder." + std::to_string(l) + ".";
        for (const char* blk : {"self.", "cross."}) {
            detail::register_param(m, p + blk + "wq", detail::glorot(rng, d, d));
            detail::register_param(m, p + blk + "wk", detail::glorot(rng, d, d));
            detail::register_param(m, p + blk + "wv", detail::glorot(rng, d, d));
            detail::register_param(m, p + blk + "wo", detail::glorot(rng, d, d));
        }
        detail::register_param(m, p + "ffn.w1", detail::glorot(rng, d, 2 * d));
        detail::register_param(m, p + "ffn.b1", Tensor::zeros(1, 2 * d));
        detail::register_param(m, p + "ffn.w2", detail::glorot(rng, 2 * d, d));
        detail::register_param(m, p + "ffn.b2", Tensor::zeros(1, d));
    }

    detail::register_param(m, "head.confidence.weight", detail::glorot(rng, d, 1));
    detail::register_param(m, "head.confidence.bias", Tensor::zeros(1, 1));
    detail::register_param(m, "head.offset.weight", detail::glorot(rng, d, 2));
    detail::register_param(m, "head.offset.bias", Tensor::zeros(1, 2));
    detail::register_param(m, "head.saliency.scale", Tensor::scalar(1.0));

    // Concat fusion back-projection, initialized to pick out the continuous
    // half exactly, so concat starts out equivalent to soft.
    Tensor cat_w(2 * d, d);
    for (std::size_t i = 0; i < d; ++i) cat_w.at(d + i, i) = 1.0;
    detail::register_param(m, "fusion.concat.weight", cat_w);
    detail::register_param(m, "fusion.concat.bias", Tensor::zeros(1, d));

    if (codebook_entries.numel() == 0) {
        codebook_entries = Tensor(cfg.K, d);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < codebook_entries.numel(); ++i)
            codebook_entries[i] = rng.normal(0.0, stddev);
    }
    if (codebook_entries.rows() != cfg.K || codebook_entries.cols() != d)
        throw std::invalid_argument("make_model: codebook entries must be KxD = " +
                                    std::to_string(cfg.K) + "x" + std::to_string(d));
    m.codebook = make_codebook(std::move(codebook_entries), projector_frozen);
    if (entries_frozen) m.codebook.entries->requires_grad = false;
    m.params.emplace_back("codebook.entries", m.codebook.entries);
    m.params.emplace_back("codebook.projector_weight", m.codebook.projector_weight);
    m.params.emplace_back("codebook.projector_bias", m.codebook.projector_bias);
    return m;
}

namespace detail {

inline Var linear(const Model& m, const std::string& prefix, const Var& x) {
    return add(matmul(x, m.param(prefix + ".weight")), m.param(prefix + ".bias"));
}

// Standard sinusoidal position table, rows = positions.
inline Tensor sinusoidal_positions(std::size_t T, std::size_t d) {
    Tensor pe(T, d);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double rate =
                std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
            pe.at(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate)
                                       : std::cos(static_cast<double>(t) * rate);
        }
    return pe;
}

// Multi-head attention via constant column-selector matrices, with separate
// query/key/value sources so positions can ride on q/k without polluting the
// value stream. No masking (sequences are short).
inline Var attention(const Model& m, const std::string& prefix, const Var& q_in,
                     const Var& k_in, const Var& v_in) {
    const std::size_t d = m.cfg.d;
    const std::size_t h = m.cfg.attention_heads;
    const std::size_t dh = d / h;
    Var q = matmul(q_in, m.param(prefix + "wq"));
    Var k = matmul(k_in, m.param(prefix + "wk"));
    Var v = matmul(v_in, m.param(prefix + "wv"));
    std::vector<Var> heads;
    heads.reserve(h);
    for (std::size_t i = 0; i < h; ++i) {
        Tensor sel(d, dh);
        for (std::size_t j = 0; j < dh; ++j) sel.at(i * dh + j, j) = 1.0;
        Var selector = constant(sel, prefix + "head_sel" + std::to_string(i));
        Var qi = matmul(q, selector);
        Var ki = matmul(k, selector);
        Var vi = matmul(v, selector);
        Var scores = scale(matmul(qi, transpose(ki)), 1.0 / std::sqrt(static_cast<double>(dh)));
        heads.push_back(matmul(softmax(scores, 1), vi));
    }
    return matmul(h == 1 ? heads[0] : concatenate(heads, 1), m.param(prefix + "wo"));
}

// One pre-head encoder block. Positions enter self-attention through the
// query/key inputs only; keeping them out of the residual stream leaves z_t
// content-dominated, which is what nearest-codeword assignment keys on.
inline Var encoder_layer(const Model& m, std::size_t layer, const Var& x, const Var& text,
                         const Var& positions) {
    const std::string p = "encoder." + std::to_string(layer) + ".";
    Var xp = add(x, positions);
    Var h = layer_normalize(add(x, attention(m, p + "self.", xp, xp, x)));
    h = layer_normalize(add(h, attention(m, p + "cross.", h, text, text)));
    Var ff = add(matmul(relu(add(matmul(h, m.param(p + "ffn.w1")), m.param(p + "ffn.b1"))),
                        m.param(p + "ffn.w2")),
                 m.param(p + "ffn.b2"));
    return layer_normalize(add(h, ff));
}

}  // namespace detail

// Fuse a quantized tensor with its continuous source. The codebook never
// receives task-loss gradients: hard routes them to the continuous branch via
// the straight-through substitute, and add/concat stop the quantized branch.
inline Var fuse(const Model& m, Fusion fusion, const Var& quantized, const Var& continuous) {
    switch (fusion) {
        case Fusion::soft:
            return continuous;
        case Fusion::hard:
            return straight_through(quantized, continuous);
        case Fusion::add:
            return add(continuous, stop_gradient(quantized));
        case Fusion::concat: {
            Var cat = concatenate(stop_gradient(quantized), continuous, 1);
            return add(matmul(cat, m.param("fusion.concat.weight")),
                       m.param("fusion.concat.bias"));
        }
    }
    throw std::logic_error("fuse: unreachable");
}

struct ForwardResult {
    Var z_t;        // T x d final clip features
    Var text;       // N x d projected text tokens
    Var text_pooled;  // 1 x d mean-pooled text
    HeadOutputs heads;
    std::optional<Assignment> assignment;  // present iff placement != none
    Var l_cb;   // 1x1; constant zero when placement = none
    Var l_cmt;  // 1x1; constant zero when placement = none
};

// Temporal encoder on its own (placement handled by forward_video below).
// With zero layers this is exactly the identity on `pooled`.
inline Var encode_video(const Model& m, const Var& pooled, const Var& text) {
    if (pooled->value.cols() != m.cfg.d || text->value.cols() != m.cfg.d)
        throw std::invalid_argument("encode_video: feature width != configured d");
    if (m.cfg.encoder_layers == 0) return pooled;
    Var positions = constant(detail::sinusoidal_positions(pooled->value.rows(), m.cfg.d),
                             "positions");
    Var x = pooled;
    for (std::size_t l = 0; l < m.cfg.encoder_layers; ++l)
        x = detail::encoder_layer(m, l, x, text, positions);
    return x;
}

inline HeadOutputs predict_heads(const Model& m, const Var& z_t, const Var& text_pooled) {
    HeadOutputs h;
    h.confidence_logits = detail::linear(m, "head.confidence", z_t);
    h.confidence = sigmoid(h.confidence_logits);
    Var offsets = softplus(detail::linear(m, "head.offset", z_t));  // T x 2
    Tensor pick_start = Tensor::zeros(2, 1), pick_end = Tensor::zeros(2, 1);
    pick_start.at(0, 0) = 1.0;
    pick_end.at(1, 0) = 1.0;
    h.start_offset = matmul(offsets, constant(pick_start, "pick_start"));
    h.end_offset = matmul(offsets, constant(pick_end, "pick_end"));
    h.saliency = multiply(cosine_similarity(z_t, text_pooled), m.param("head.saliency.scale"));
    return h;
}

// Full per-video forward pass with the configured quantization placement.
inline ForwardResult forward_video(const Model& m, const VideoSample& video) {
    ForwardResult r;
    r.l_cb = constant(Tensor::scalar(0.0), "l_cb_zero");
    r.l_cmt = constant(Tensor::scalar(0.0), "l_cmt_zero");
    Var projected;  // created lazily; building it costs a K x d matmul
    auto quantize_at = [&](const Var& z) -> Var {
        projected = project(m.codebook);
        Assignment a = lookup(z->value, projected);
        r.l_cb = codebook_loss(z, a);
        r.l_cmt = commitment_loss(z, a);
        Var fused = fuse(m, m.cfg.fusion, a.quantized, z);
        r.assignment = std::move(a);
        return fused;
    };

    // Visual entry: patches (if present and needed) or precomputed clip rows.
    Var visual;
    if (m.cfg.placement == Placement::image) {
        if (video.patches == 0)
            throw std::invalid_argument("forward_video: image placement needs patch features");
        Var patches = constant(video.patch_features, "patches." + video.vid);
        visual = max_pool_rows(quantize_at(patches), video.patches);
    } else {
        visual = constant(video.clip_features, "clips." + video.vid);
    }
    Var z_s = detail::linear(m, "input_proj", visual);
    if (m.cfg.placement == Placement::clip) z_s = quantize_at(z_s);

    r.text = detail::linear(m, "text_proj", constant(video.query_features, "text." + video.vid));
    Var z_t = encode_video(m, z_s, r.text);
    if (m.cfg.placement == Placement::moment) z_t = quantize_at(z_t);

    r.z_t = z_t;
    r.text_pooled = mean(r.text, 0);
    r.heads = predict_heads(m, z_t, r.text_pooled);
    return r;
}

// ---------------------------------------------------------------------------
// Moment decoding
// ---------------------------------------------------------------------------

struct MomentPrediction {
    std::vector<ScoredSpan> spans;  // sorted by score, non-increasing
};

// Span for clip t: center +- offsets (clip units), scaled to seconds and
// clipped to the video; greedy NMS keeps the highest-scored spans.
inline MomentPrediction decode_moments(const HeadOutputs& heads, double clip_len, double duration,
                                       double nms_iou = 0.7, std::size_t top_k = 10) {
    if (nms_iou <= 0.0 || nms_iou > 1.0)
        throw std::invalid_argument("decode_moments: nms_iou must be in (0,1]");
    if (top_k == 0) throw std::invalid_argument("decode_moments: top_k must be >= 1");
    const Tensor& conf = heads.confidence->value;
    const Tensor& so = heads.start_offset->value;
    const Tensor& eo = heads.end_offset->value;
    std::vector<ScoredSpan> cands;
    cands.reserve(conf.rows());
    for (std::size_t t = 0; t < conf.rows(); ++t) {
        const double center = (static_cast<double>(t) + 0.5) * clip_len;
        ScoredSpan c;
        c.span.start = std::max(0.0, center - so.at(t, 0) * clip_len);
        c.span.end = std::min(duration, center + eo.at(t, 0) * clip_len);
        c.score = conf.at(t, 0);
        cands.push_back(c);
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const ScoredSpan& a, const ScoredSpan& b) { return a.score > b.score; });
    MomentPrediction out;
    for (const auto& c : cands) {
        if (out.spans.size() >= top_k) break;
        bool suppressed = false;
        for (const auto& kept : out.spans)
            if (temporal_iou(c.span, kept.span) > nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) out.spans.push_back(c);
    }
    return out;
}

}  // namespace mqvtg
