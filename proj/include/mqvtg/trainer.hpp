#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "mqvtg/codebook.hpp"
#include "mqvtg/data.hpp"
#include "mqvtg/io.hpp"
#include "mqvtg/metrics.hpp"
#include "mqvtg/model.hpp"
#include "mqvtg/objectives.hpp"
#include "mqvtg/rng.hpp"

namespace mqvtg {

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class CodebookInit { random, selection, kmeans };
enum class ProjectionMode { frozen, basic, projected };

inline CodebookInit codebook_init_from_string(const std::string& s) {
    if (s == "random") return CodebookInit::random;
    if (s == "selection") return CodebookInit::selection;
    if (s == "kmeans") return CodebookInit::kmeans;
    throw std::invalid_argument("unknown codebook init '" + s + "'");
}

inline std::string to_string(CodebookInit i) {
    switch (i) {
        case CodebookInit::random: return "random";
        case CodebookInit::selection: return "selection";
        case CodebookInit::kmeans: return "kmeans";
    }
    throw std::logic_error("unreachable");
}

inline ProjectionMode projection_from_string(const std::string& s) {
    if (s == "frozen") return ProjectionMode::frozen;
    if (s == "basic") return ProjectionMode::basic;
    if (s == "projected") return ProjectionMode::projected;
    throw std::invalid_argument("unknown projection mode '" + s + "'");
}

inline std::string to_string(ProjectionMode p) {
    switch (p) {
        case ProjectionMode::frozen: return "frozen";
        case ProjectionMode::basic: return "basic";
        case ProjectionMode::projected: return "projected";
    }
    throw std::logic_error("unreachable");
}

struct OptimSettings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (applied to weights, not gradients)

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("OptimSettings: lr must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("OptimSettings: betas must lie in [0,1)");
        if (!(eps > 0.0)) throw std::invalid_argument("OptimSettings: eps must be positive");
        if (weight_decay < 0.0)
            throw std::invalid_argument("OptimSettings: weight_decay must be >= 0");
    }
};

struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    OptimSettings optim;
    std::size_t epochs = 12;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    CodebookInit codebook_init = CodebookInit::kmeans;
    bool codebook_frozen = false;
    ProjectionMode projection = ProjectionMode::projected;
    std::size_t snapshot_every = 1;
    double tau = 0.07;         // saliency + alignment temperature
    double focal_alpha = 0.25;
    int focal_gamma = 2;
    double nms_iou = 0.7;
    std::size_t top_k = 10;
    std::size_t kmeans_iters = 25;
    // Epochs with the commitment pull disabled while the codebook tracks the
    // still-moving features through the codebook loss alone. Early commitment
    // drags features toward centers fitted before the encoder can separate
    // near-duplicate content, which costs exactly the hard-pair margins.
    std::size_t cmt_warmup_epochs = 0;

    // The projection axis folds into two freeze flags: "frozen" pins the whole
    // codebook after init, "basic" trains entries under the identity map only,
    // "projected" trains entries and the joint projection together.
    bool entries_frozen() const {
        return codebook_frozen || projection == ProjectionMode::frozen;
    }
    bool projector_frozen() const { return projection != ProjectionMode::projected; }

    void validate() const {
        model.validate();
        weights.validate();
        optim.validate();
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 2)
            throw std::invalid_argument("TrainConfig: batch_size must be >= 2 (alignment)");
        if (snapshot_every < 1)
            throw std::invalid_argument("TrainConfig: snapshot_every must be >= 1");
        if (!(tau > 0.0)) throw std::invalid_argument("TrainConfig: tau must be positive");
        if (focal_alpha <= 0.0 || focal_alpha >= 1.0)
            throw std::invalid_argument("TrainConfig: focal_alpha must lie in (0,1)");
        if (focal_gamma < 0) throw std::invalid_argument("TrainConfig: focal_gamma must be >= 0");
        if (nms_iou <= 0.0 || nms_iou > 1.0)
            throw std::invalid_argument("TrainConfig: nms_iou must lie in (0,1]");
        if (top_k == 0) throw std::invalid_argument("TrainConfig: top_k must be >= 1");
        if (kmeans_iters == 0)
            throw std::invalid_argument("TrainConfig: kmeans_iters must be >= 1");
        if (cmt_warmup_epochs > epochs)
            throw std::invalid_argument("TrainConfig: cmt_warmup_epochs exceeds epochs");
    }

    nlohmann::json to_json() const {
        return {{"model",
                 {{"d", model.d},
                  {"encoder_layers", model.encoder_layers},
                  {"attention_heads", model.attention_heads},
                  {"placement", to_string(model.placement)},
                  {"fusion", to_string(model.fusion)},
                  {"K", model.K}}},
                {"weights",
                 {{"lambda_hd", weights.lambda_hd},
                  {"lambda_mq", weights.lambda_mq},
                  {"lambda_align", weights.lambda_align},
                  {"lambda_cmt", weights.lambda_cmt}}},
                {"optim",
                 {{"lr", optim.lr},
                  {"beta1", optim.beta1},
                  {"beta2", optim.beta2},
                  {"eps", optim.eps},
                  {"weight_decay", optim.weight_decay}}},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"codebook_init", to_string(codebook_init)},
                {"codebook_frozen", codebook_frozen},
                {"projection", to_string(projection)},
                {"snapshot_every", snapshot_every},
                {"tau", tau},
                {"focal_alpha", focal_alpha},
                {"focal_gamma", focal_gamma},
                {"nms_iou", nms_iou},
                {"top_k", top_k},
                {"kmeans_iters", kmeans_iters},
                {"cmt_warmup_epochs", cmt_warmup_epochs}};
    }
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                        const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace detail

// Overlays `j` on top of `cfg`; unknown keys are errors so a typo in an
// ablation config cannot silently fall back to a default and poison a table.
inline void apply_config_json(TrainConfig& cfg, const nlohmann::json& j) {
    detail::expect_keys(j,
                        {"model", "weights", "optim", "epochs", "batch_size", "seed",
                         "codebook_init", "codebook_frozen", "projection", "snapshot_every",
                         "tau", "focal_alpha", "focal_gamma", "nms_iou", "top_k", "kmeans_iters",
                         "cmt_warmup_epochs"},
                        "config");
    if (j.contains("model")) {
        const auto& m = j["model"];
        detail::expect_keys(m, {"d", "encoder_layers", "attention_heads", "placement", "fusion", "K"},
                            "config.model");
        if (m.contains("d")) cfg.model.d = m["d"].get<std::size_t>();
        if (m.contains("encoder_layers"))
            cfg.model.encoder_layers = m["encoder_layers"].get<std::size_t>();
        if (m.contains("attention_heads"))
            cfg.model.attention_heads = m["attention_heads"].get<std::size_t>();
        if (m.contains("placement"))
            cfg.model.placement = placement_from_string(m["placement"].get<std::string>());
        if (m.contains("fusion"))
            cfg.model.fusion = fusion_from_string(m["fusion"].get<std::string>());
        if (m.contains("K")) cfg.model.K = m["K"].get<std::size_t>();
    }
    if (j.contains("weights")) {
        const auto& w = j["weights"];
        detail::expect_keys(w, {"lambda_hd", "lambda_mq", "lambda_align", "lambda_cmt"},
                            "config.weights");
        if (w.contains("lambda_hd")) cfg.weights.lambda_hd = w["lambda_hd"].get<double>();
        if (w.contains("lambda_mq")) cfg.weights.lambda_mq = w["lambda_mq"].get<double>();
        if (w.contains("lambda_align")) cfg.weights.lambda_align = w["lambda_align"].get<double>();
        if (w.contains("lambda_cmt")) cfg.weights.lambda_cmt = w["lambda_cmt"].get<double>();
    }
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        detail::expect_keys(o, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "config.optim");
        if (o.contains("lr")) cfg.optim.lr = o["lr"].get<double>();
        if (o.contains("beta1")) cfg.optim.beta1 = o["beta1"].get<double>();
        if (o.contains("beta2")) cfg.optim.beta2 = o["beta2"].get<double>();
        if (o.contains("eps")) cfg.optim.eps = o["eps"].get<double>();
        if (o.contains("weight_decay")) cfg.optim.weight_decay = o["weight_decay"].get<double>();
    }
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("codebook_init"))
        cfg.codebook_init = codebook_init_from_string(j["codebook_init"].get<std::string>());
    if (j.contains("codebook_frozen")) cfg.codebook_frozen = j["codebook_frozen"].get<bool>();
    if (j.contains("projection"))
        cfg.projection = projection_from_string(j["projection"].get<std::string>());
    if (j.contains("snapshot_every")) cfg.snapshot_every = j["snapshot_every"].get<std::size_t>();
    if (j.contains("tau")) cfg.tau = j["tau"].get<double>();
    if (j.contains("focal_alpha")) cfg.focal_alpha = j["focal_alpha"].get<double>();
    if (j.contains("focal_gamma")) cfg.focal_gamma = j["focal_gamma"].get<int>();
    if (j.contains("nms_iou")) cfg.nms_iou = j["nms_iou"].get<double>();
    if (j.contains("top_k")) cfg.top_k = j["top_k"].get<std::size_t>();
    if (j.contains("kmeans_iters")) cfg.kmeans_iters = j["kmeans_iters"].get<std::size_t>();
    if (j.contains("cmt_warmup_epochs"))
        cfg.cmt_warmup_epochs = j["cmt_warmup_epochs"].get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Config hashing (ties checkpoints to the exact configuration that made them)
// ---------------------------------------------------------------------------

inline std::array<unsigned char, 32> sha256_bytes(const std::string& data) {
    std::array<unsigned char, 32> out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size())
        throw std::runtime_error("sha256_bytes: digest failed");
    return out;
}

inline std::string hex_digest(const std::array<unsigned char, 32>& h) {
    static const char* digits = "0123456789abcdef";
    std::string s(64, '0');
    for (std::size_t i = 0; i < h.size(); ++i) {
        s[2 * i] = digits[h[i] >> 4];
        s[2 * i + 1] = digits[h[i] & 0xF];
    }
    return s;
}

// nlohmann::json keeps object keys sorted, so dump() is a canonical form.
inline std::array<unsigned char, 32> config_hash(const TrainConfig& cfg) {
    return sha256_bytes(cfg.to_json().dump());
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m, v;  // parallel to Model::params, zeros for frozen slots
    std::int64_t t = 0;        // completed steps

    static AdamState for_model(const Model& model) {
        AdamState s;
        s.m.reserve(model.params.size());
        s.v.reserve(model.params.size());
        for (const auto& [name, p] : model.params) {
            s.m.push_back(Tensor::zeros(p->value.rows(), p->value.cols()));
            s.v.push_back(Tensor::zeros(p->value.rows(), p->value.cols()));
        }
        return s;
    }
};

// One optimizer step over every trainable parameter. A parameter that did not
// participate in this batch's graph has an unallocated gradient and is treated
// as having gradient zero (its moments still decay, matching the usual
// framework behaviour for sparse participation).
inline void adam_step(Model& model, AdamState& opt, const OptimSettings& o) {
    opt.t += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(opt.t));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const Var& p = model.params[i].second;
        if (!p->requires_grad) continue;
        Tensor& m = opt.m[i];
        Tensor& v = opt.v[i];
        const bool has_grad = p->grad.numel() == p->value.numel();
        for (std::size_t k = 0; k < p->value.numel(); ++k) {
            const double g = has_grad ? p->grad[k] : 0.0;
            m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g;
            v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p->value[k] -= o.lr * (mhat / (std::sqrt(vhat) + o.eps) +
                                   o.weight_decay * p->value[k]);
        }
    }
}

// ---------------------------------------------------------------------------
// Codebook initialization from the training split
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor stack_clip_rows(const std::vector<VideoSample>& split, std::size_t d) {
    std::size_t total = 0;
    for (const auto& s : split) total += s.T();
    Tensor rows(total, d);
    std::size_t r = 0;
    for (const auto& s : split) {
        if (s.clip_features.cols() != d)
            throw std::invalid_argument("dataset feature width " +
                                        std::to_string(s.clip_features.cols()) +
                                        " != configured d " + std::to_string(d));
        for (std::size_t t = 0; t < s.T(); ++t, ++r)
            for (std::size_t c = 0; c < d; ++c) rows.at(r, c) = s.clip_features.at(t, c);
    }
    return rows;
}

// Feature rows at the model's quantization site, quantization bypassed. The
// codebook competes against these rows during lookup, so prior-style inits
// must cluster in this space; clip rows pass through input_proj and moment
// rows through the full temporal encoder, both of which reshape the geometry
// even at initialization.
inline Tensor quantization_site_rows(const Model& m, const std::vector<VideoSample>& split) {
    NoGradGuard guard;
    if (m.cfg.placement == Placement::image) {
        std::size_t total = 0;
        for (const auto& s : split) total += s.patch_features.rows();
        if (total == 0)
            throw std::invalid_argument("quantization_site_rows: image placement needs patches");
        Tensor rows(total, m.cfg.d);
        std::size_t r = 0;
        for (const auto& s : split)
            for (std::size_t p = 0; p < s.patch_features.rows(); ++p, ++r)
                for (std::size_t c = 0; c < m.cfg.d; ++c)
                    rows.at(r, c) = s.patch_features.at(p, c);
        return rows;
    }
    std::size_t total = 0;
    for (const auto& s : split) total += s.T();
    Tensor rows(total, m.cfg.d);
    std::size_t r = 0;
    for (const auto& s : split) {
        Var z = linear(m, "input_proj", constant(s.clip_features, "clips." + s.vid));
        if (m.cfg.placement == Placement::moment) {
            Var text = linear(m, "text_proj", constant(s.query_features, "text." + s.vid));
            z = encode_video(m, z, text);
        }
        for (std::size_t t = 0; t < s.T(); ++t, ++r)
            for (std::size_t c = 0; c < m.cfg.d; ++c) rows.at(r, c) = z->value.at(t, c);
    }
    return rows;
}

}  // namespace detail

// Initial K x d entries for the configured init mode, clustered or sampled in
// the space the codebook will actually serve (the model's quantization site
// at its freshly initialized weights). Call with the model built, before the
// first optimizer step; the returned tensor overwrites the drawn entries.
inline Tensor initial_codebook_entries(const TrainConfig& cfg, const Model& m,
                                       const std::vector<VideoSample>& train_split) {
    if (cfg.codebook_init == CodebookInit::random) return {};
    Tensor rows = detail::quantization_site_rows(m, train_split);
    if (cfg.codebook_init == CodebookInit::selection) {
        if (rows.rows() < cfg.model.K)
            throw std::invalid_argument("selection init needs at least K=" +
                                        std::to_string(cfg.model.K) + " clip rows, got " +
                                        std::to_string(rows.rows()));
        std::vector<std::size_t> idx(rows.rows());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(Rng::derive(cfg.seed, 2001));
        rng.shuffle(idx);
        Tensor entries(cfg.model.K, cfg.model.d);
        for (std::size_t k = 0; k < cfg.model.K; ++k)
            for (std::size_t c = 0; c < cfg.model.d; ++c)
                entries.at(k, c) = rows.at(idx[k], c);
        return entries;
    }
    return kmeans_init(rows, cfg.model.K, cfg.kmeans_iters, Rng::derive(cfg.seed, 2002));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOutputs {
    MetricsReport report;
    std::vector<QueryResult> queries;
    std::vector<HighlightResult> highlights;
    // Codeword ids assigned per video; empty inner vectors when placement=none.
    std::vector<std::vector<std::size_t>> assignments;
};

inline EvalOutputs evaluate(const Model& model, const std::vector<VideoSample>& split,
                            const TrainConfig& cfg) {
    NoGradGuard no_grad;
    EvalOutputs out;
    std::vector<std::size_t> all_indices;
    for (const auto& video : split) {
        ForwardResult r = forward_video(model, video);
        MomentPrediction pred =
            decode_moments(r.heads, video.clip_len, video.duration, cfg.nms_iou, cfg.top_k);
        QueryResult q;
        q.predictions = pred.spans;
        for (const auto& [s, e] : video.gt_windows) q.gts.push_back(Span{s, e});
        out.queries.push_back(std::move(q));

        HighlightResult h;
        h.labels = video.saliency_labels;
        h.scores.reserve(video.T());
        for (std::size_t t = 0; t < video.T(); ++t)
            h.scores.push_back(r.heads.saliency->value.at(t, 0));
        out.highlights.push_back(std::move(h));

        if (r.assignment) {
            out.assignments.push_back(r.assignment->indices);
            all_indices.insert(all_indices.end(), r.assignment->indices.begin(),
                               r.assignment->indices.end());
        } else {
            out.assignments.emplace_back();
        }
    }
    const double util =
        all_indices.empty()
            ? 0.0
            : utilization(histogram_from_indices(all_indices, model.cfg.K));
    out.report = compute_report(out.queries, out.highlights, util);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double l_mr = 0.0, l_hd = 0.0, l_mq = 0.0, l_align = 0.0, total = 0.0;  // epoch means
    double train_utilization = 0.0;
    std::size_t skipped_align_batches = 0;  // remainder batches of size 1
    MetricsReport val;
    bool is_best = false;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},
                {"loss",
                 {{"mr", l_mr},
                  {"hd", l_hd},
                  {"mq", l_mq},
                  {"align", l_align},
                  {"total", total}}},
                {"train_utilization", train_utilization},
                {"skipped_align_batches", skipped_align_batches},
                {"val", val.to_json()},
                {"is_best", is_best}};
    }
};

struct CodebookSnapshot {
    std::size_t epoch = 0;       // 0 = before any update
    Tensor entries;              // projected codebook C' at snapshot time
    std::vector<std::size_t> effective_ids;  // assigned >= 1 time on val
    double utilization = 0.0;
};

struct TrainResult {
    Model model;  // final state (last epoch)
    AdamState optim;
    std::vector<EpochRecord> log;
    std::vector<CodebookSnapshot> snapshots;
    // Best-by-val-map_avg state, kept for checkpointing.
    std::size_t best_epoch = 0;
    MetricsReport best_val;
    std::vector<std::pair<std::string, Tensor>> best_params;
    AdamState best_optim;
};

namespace detail {

inline std::vector<std::size_t> effective_ids_on_split(const Model& model,
                                                       const std::vector<VideoSample>& split) {
    if (model.cfg.placement == Placement::none) return {};
    NoGradGuard no_grad;
    std::vector<bool> seen(model.cfg.K, false);
    for (const auto& video : split) {
        // Only the assignment is needed, but re-running the full forward keeps
        // the assignment definition in one place (forward_video).
        ForwardResult r = forward_video(model, video);
        if (r.assignment)
            for (std::size_t id : r.assignment->indices) seen[id] = true;
    }
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < seen.size(); ++k)
        if (seen[k]) ids.push_back(k);
    return ids;
}

inline CodebookSnapshot take_snapshot(const Model& model, std::size_t epoch,
                                      const std::vector<std::size_t>& effective_ids) {
    CodebookSnapshot s;
    s.epoch = epoch;
    {
        NoGradGuard no_grad;
        s.entries = project(model.codebook)->value;
    }
    s.effective_ids = effective_ids;
    s.utilization = model.cfg.K == 0 ? 0.0
                                     : static_cast<double>(effective_ids.size()) /
                                           static_cast<double>(model.cfg.K);
    return s;
}

inline std::vector<std::size_t> ids_from_eval(const EvalOutputs& ev, std::size_t K) {
    std::vector<bool> seen(K, false);
    for (const auto& per_video : ev.assignments)
        for (std::size_t id : per_video) seen[id] = true;
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < K; ++k)
        if (seen[k]) ids.push_back(k);
    return ids;
}

inline std::vector<std::pair<std::string, Tensor>> copy_params(const Model& model) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(model.params.size());
    for (const auto& [name, p] : model.params) out.emplace_back(name, p->value);
    return out;
}

}  // namespace detail

// Runs the full loop: per-epoch shuffled minibatches, Adam on the total loss,
// validation each epoch, best-checkpoint tracking by val map_avg, and codebook
// snapshots (epoch 0 is the pre-update state). When `log_out` is given, each
// epoch record is streamed as one JSON line; for a fixed (seed, config,
// dataset) the byte stream is identical across runs.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds,
                         std::ostream* log_out = nullptr) {
    cfg.validate();
    if (ds.train.empty()) throw std::invalid_argument("train: empty training split");

    TrainResult res;
    Rng model_rng(Rng::derive(cfg.seed, 1));
    res.model = make_model(cfg.model, model_rng, {}, cfg.projector_frozen(),
                           cfg.entries_frozen());
    Model& model = res.model;
    // Prior-style inits cluster the freshly initialized model's own features,
    // so the model is built first (random entries) and then overwritten.
    if (cfg.model.placement != Placement::none && cfg.codebook_init != CodebookInit::random)
        model.codebook.entries->value = initial_codebook_entries(cfg, model, ds.train);
    res.optim = AdamState::for_model(model);

    // Snapshot 0: the initialized codebook, before any gradient step.
    if (cfg.model.placement != Placement::none && !ds.val.empty()) {
        res.snapshots.push_back(detail::take_snapshot(
            model, 0, detail::effective_ids_on_split(model, ds.val)));
    } else {
        res.snapshots.push_back(detail::take_snapshot(model, 0, {}));
    }

    double best_map_avg = -1.0;
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(cfg.seed, 1000 + epoch));
        shuffle_rng.shuffle(order);

        // Commitment stays off through the warmup epochs; the codebook keeps
        // tracking the still-moving features through the codebook loss alone.
        LossWeights w_eff = cfg.weights;
        if (epoch < cfg.cmt_warmup_epochs) w_eff.lambda_cmt = 0.0;

        EpochRecord rec;
        rec.epoch = epoch + 1;  // 0 is reserved for the pre-training state
        std::vector<std::size_t> train_indices;
        std::size_t samples_seen = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b_end = std::min(order.size(), start + cfg.batch_size);
            const std::size_t B = b_end - start;
            const std::size_t batch_id = start / cfg.batch_size;

            for (auto& [name, p] : model.params) p->zero_grad();

            try {
                Var l_mr, l_hd, l_cb, l_cmt;
                std::vector<Var> video_pooled, text_pooled;
                for (std::size_t i = start; i < b_end; ++i) {
                    const VideoSample& video = ds.train[order[i]];
                    ForwardResult r = forward_video(model, video);
                    Var mr = moment_retrieval_loss(r.heads, video.gt_windows, video.clip_len,
                                                   cfg.focal_alpha, cfg.focal_gamma);
                    Var hd = saliency_loss(r.heads.saliency, video.saliency_labels, cfg.tau);
                    l_mr = l_mr ? add(l_mr, mr) : mr;
                    l_hd = l_hd ? add(l_hd, hd) : hd;
                    l_cb = l_cb ? add(l_cb, r.l_cb) : r.l_cb;
                    l_cmt = l_cmt ? add(l_cmt, r.l_cmt) : r.l_cmt;
                    video_pooled.push_back(max_pool(r.z_t, 0));
                    text_pooled.push_back(r.text_pooled);
                    if (r.assignment)
                        train_indices.insert(train_indices.end(), r.assignment->indices.begin(),
                                             r.assignment->indices.end());
                }
                const double inv_b = 1.0 / static_cast<double>(B);
                LossParts parts;
                parts.l_mr = scale(l_mr, inv_b);
                parts.l_hd = scale(l_hd, inv_b);
                parts.l_cb = scale(l_cb, inv_b);
                parts.l_cmt = scale(l_cmt, inv_b);
                if (B >= 2) {
                    parts.l_align = alignment_loss(concatenate(video_pooled, 0),
                                                   concatenate(text_pooled, 0), cfg.tau);
                } else {
                    // A trailing batch of one video has no second sample to
                    // contrast against; drop the alignment term and say so.
                    parts.l_align = constant(Tensor::scalar(0.0), "align_skipped");
                    rec.skipped_align_batches += 1;
                }
                LossBreakdown b = total_loss(parts, w_eff);
                backward(b.total);
                adam_step(model, res.optim, cfg.optim);

                const double w = static_cast<double>(B);
                rec.l_mr += w * b.l_mr;
                rec.l_hd += w * b.l_hd;
                rec.l_mq += w * b.l_mq;
                rec.l_align += w * b.l_align;
                rec.total += w * b.total_value;
                samples_seen += B;
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("epoch " + std::to_string(epoch + 1) + " batch " +
                                         std::to_string(batch_id) + ": " + e.what());
            }
        }

        const double inv_n = 1.0 / static_cast<double>(samples_seen);
        rec.l_mr *= inv_n;
        rec.l_hd *= inv_n;
        rec.l_mq *= inv_n;
        rec.l_align *= inv_n;
        rec.total *= inv_n;
        rec.train_utilization =
            train_indices.empty()
                ? 0.0
                : utilization(histogram_from_indices(train_indices, cfg.model.K));

        EvalOutputs ev;
        if (!ds.val.empty()) ev = evaluate(model, ds.val, cfg);
        rec.val = ev.report;
        if (rec.val.map_avg > best_map_avg) {
            best_map_avg = rec.val.map_avg;
            rec.is_best = true;
            res.best_epoch = epoch + 1;
            res.best_val = rec.val;
            res.best_params = detail::copy_params(model);
            res.best_optim = res.optim;
        }

        if ((epoch + 1) % cfg.snapshot_every == 0 || epoch + 1 == cfg.epochs) {
            res.snapshots.push_back(detail::take_snapshot(
                model, epoch + 1, detail::ids_from_eval(ev, cfg.model.K)));
        }

        if (log_out) {
            *log_out << rec.to_json().dump() << "\n";
            log_out->flush();
        }
        res.log.push_back(std::move(rec));
    }
    if (res.best_params.empty()) {  // no val split: fall back to the final state
        res.best_epoch = cfg.epochs;
        res.best_params = detail::copy_params(model);
        res.best_optim = res.optim;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints (MQCK)
// ---------------------------------------------------------------------------
//
// Layout: magic "MQCK", u32 version, 32-byte SHA-256 of the canonical config
// JSON, then named blocks until EOF. Each block is a u16 name length, the
// UTF-8 name, and an MQFT v2 (f64) matrix. Model parameters are stored under
// their registration names, optimizer moments as optim.<name>.m/.v, and
// scalars epoch/adam step count as meta.* 1x1 blocks. Doubles round-trip
// bit-exactly, so a reloaded model's forward pass is bit-identical.

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::array<unsigned char, 32> config_hash{};
    std::vector<std::pair<std::string, Tensor>> blocks;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : blocks)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor& at(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw std::out_of_range("checkpoint has no block '" + name + "'");
        return *t;
    }
};

inline Checkpoint make_checkpoint(const TrainConfig& cfg,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  const AdamState& optim, std::size_t epoch) {
    if (params.size() != optim.m.size())
        throw std::invalid_argument("make_checkpoint: optimizer state does not match parameters");
    Checkpoint ck;
    ck.config_hash = config_hash(cfg);
    for (const auto& [name, value] : params) ck.blocks.emplace_back(name, value);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ck.blocks.emplace_back("optim." + params[i].first + ".m", optim.m[i]);
        ck.blocks.emplace_back("optim." + params[i].first + ".v", optim.v[i]);
    }
    ck.blocks.emplace_back("meta.epoch", Tensor::scalar(static_cast<double>(epoch)));
    ck.blocks.emplace_back("meta.adam_t", Tensor::scalar(static_cast<double>(optim.t)));
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write("MQCK", 4);
    detail::put_u32(f, ck.version);
    f.write(reinterpret_cast<const char*>(ck.config_hash.data()),
            static_cast<std::streamsize>(ck.config_hash.size()));
    for (const auto& [name, value] : ck.blocks) {
        if (name.size() > 0xFFFF)
            throw std::invalid_argument("save_checkpoint: block name too long");
        const std::uint16_t len = static_cast<std::uint16_t>(name.size());
        f.write(reinterpret_cast<const char*>(&len), 2);
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_features(f, value, 2);
    }
    if (!f) throw std::runtime_error("save_checkpoint: stream write failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "MQCK", 4) != 0)
        throw std::runtime_error("not an MQCK checkpoint: " + path);
    Checkpoint ck;
    ck.version = detail::take_u32(f, "checkpoint version");
    if (ck.version != kCheckpointVersion)
        throw std::runtime_error("unsupported MQCK version " + std::to_string(ck.version));
    if (!f.read(reinterpret_cast<char*>(ck.config_hash.data()),
                static_cast<std::streamsize>(ck.config_hash.size())))
        throw std::runtime_error("truncated MQCK file: missing config hash");
    while (true) {
        std::uint16_t len = 0;
        if (!f.read(reinterpret_cast<char*>(&len), 2)) {
            if (f.eof()) break;
            throw std::runtime_error("truncated MQCK file: bad block name length");
        }
        std::string name(len, '\0');
        if (!f.read(name.data(), len))
            throw std::runtime_error("truncated MQCK file: bad block name");
        ck.blocks.emplace_back(std::move(name), read_features(f));
    }
    return ck;
}

// Codebook snapshots ride in the same container format as checkpoints, one
// file per training run: a count block plus per-snapshot epoch / projected
// entries / effective-id blocks. Ids are stored as a 1 x n double row; they
// are small integers, so the round trip is exact.
inline void save_snapshots(const std::string& path, const TrainConfig& cfg,
                           const std::vector<CodebookSnapshot>& snapshots) {
    Checkpoint ck;
    ck.config_hash = config_hash(cfg);
    ck.blocks.emplace_back("count", Tensor::scalar(static_cast<double>(snapshots.size())));
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
        const std::string p = "snap." + std::to_string(i) + ".";
        ck.blocks.emplace_back(p + "epoch",
                               Tensor::scalar(static_cast<double>(snapshots[i].epoch)));
        ck.blocks.emplace_back(p + "entries", snapshots[i].entries);
        Tensor ids(1, snapshots[i].effective_ids.size());
        for (std::size_t k = 0; k < snapshots[i].effective_ids.size(); ++k)
            ids[k] = static_cast<double>(snapshots[i].effective_ids[k]);
        ck.blocks.emplace_back(p + "ids", std::move(ids));
    }
    save_checkpoint(path, ck);
}

inline std::vector<CodebookSnapshot> load_snapshots(const std::string& path,
                                                    const TrainConfig& cfg) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.config_hash != config_hash(cfg))
        throw std::runtime_error("snapshot file was written under a different config");
    const std::size_t count = static_cast<std::size_t>(ck.at("count").item());
    std::vector<CodebookSnapshot> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::string p = "snap." + std::to_string(i) + ".";
        out[i].epoch = static_cast<std::size_t>(ck.at(p + "epoch").item());
        out[i].entries = ck.at(p + "entries");
        const Tensor& ids = ck.at(p + "ids");
        out[i].effective_ids.resize(ids.numel());
        for (std::size_t k = 0; k < ids.numel(); ++k)
            out[i].effective_ids[k] = static_cast<std::size_t>(ids[k]);
        out[i].utilization = out[i].entries.rows() == 0
                                 ? 0.0
                                 : static_cast<double>(out[i].effective_ids.size()) /
                                       static_cast<double>(out[i].entries.rows());
    }
    return out;
}

// Rebuilds a model from a checkpoint. The caller supplies the TrainConfig the
// checkpoint was trained with; a hash mismatch is an error, not a warning,
// because silently evaluating under the wrong architecture would produce
// plausible-looking nonsense.
inline Model restore_model(const Checkpoint& ck, const TrainConfig& cfg,
                           AdamState* optim_out = nullptr, std::size_t* epoch_out = nullptr) {
    const auto expected = config_hash(cfg);
    if (ck.config_hash != expected)
        throw std::runtime_error("checkpoint config hash " + hex_digest(ck.config_hash) +
                                 " does not match the supplied config " + hex_digest(expected));
    Rng rng(Rng::derive(cfg.seed, 1));
    Model model = make_model(cfg.model, rng, {}, cfg.projector_frozen(), cfg.entries_frozen());
    for (auto& [name, p] : model.params) {
        const Tensor& stored = ck.at(name);
        if (stored.rows() != p->value.rows() || stored.cols() != p->value.cols())
            throw std::runtime_error("checkpoint block '" + name + "' has shape " +
                                     std::to_string(stored.rows()) + "x" +
                                     std::to_string(stored.cols()) + ", expected " +
                                     std::to_string(p->value.rows()) + "x" +
                                     std::to_string(p->value.cols()));
        p->value = stored;
    }
    if (optim_out) {
        *optim_out = AdamState::for_model(model);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            optim_out->m[i] = ck.at("optim." + model.params[i].first + ".m");
            optim_out->v[i] = ck.at("optim." + model.params[i].first + ".v");
        }
        optim_out->t = static_cast<std::int64_t>(ck.at("meta.adam_t").item());
    }
    if (epoch_out) *epoch_out = static_cast<std::size_t>(ck.at("meta.epoch").item());
    return model;
}

}  // namespace mqvtg
