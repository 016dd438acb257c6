#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mqvtg/io.hpp"
#include "mqvtg/parallel.hpp"
#include "mqvtg/rng.hpp"
#include "mqvtg/tensor.hpp"

namespace mqvtg {

// Synthetic stand-in for precomputed frame/text features. Each video mixes
// background clips (random scene prototypes + noise) with a few foreground
// segments drawn from a query-linked prototype. One "hard" background
// prototype is placed at a controlled cosine to the foreground prototype so
// nearest-neighbour reasoning alone cannot solve the task.

struct SyntheticSpec {
    std::size_t num_videos = 250;
    std::size_t T = 32;  // clips per video
    std::size_t P = 4;   // patches per clip
    std::size_t d = 64;
    std::size_t num_prototypes = 8;  // scene vocabulary
    std::size_t moments_min = 1;
    std::size_t moments_max = 3;
    double noise_sigma = 0.3;
    double foreground_similarity = 0.9;  // cos(foreground, hard background)
    std::uint64_t seed = 0;
    double clip_len = 1.0;  // seconds per clip

    void validate() const {
        if (num_prototypes < 2)
            throw std::invalid_argument("SyntheticSpec: num_prototypes must be >= 2");
        if (noise_sigma < 0.0) throw std::invalid_argument("SyntheticSpec: noise_sigma must be >= 0");
        if (T < 4) throw std::invalid_argument("SyntheticSpec: T must be >= 4");
        if (num_videos == 0 || d == 0 || P == 0)
            throw std::invalid_argument("SyntheticSpec: num_videos, d, P must be positive");
        if (moments_min == 0 || moments_min > moments_max)
            throw std::invalid_argument("SyntheticSpec: bad moments_per_video range");
        // Every moment is at least 2 clips with a 1-clip gap between moments.
        if (moments_max * 3 > T)
            throw std::invalid_argument("SyntheticSpec: moments do not fit into T clips");
        if (foreground_similarity < -1.0 || foreground_similarity > 1.0)
            throw std::invalid_argument("SyntheticSpec: foreground_similarity must be in [-1,1]");
        if (clip_len <= 0.0) throw std::invalid_argument("SyntheticSpec: clip_len must be positive");
    }

    nlohmann::json to_json() const {
        return {{"num_videos", num_videos},
                {"T", T},
                {"P", P},
                {"d", d},
                {"num_prototypes", num_prototypes},
                {"moments_min", moments_min},
                {"moments_max", moments_max},
                {"noise_sigma", noise_sigma},
                {"foreground_similarity", foreground_similarity},
                {"seed", seed},
                {"clip_len", clip_len}};
    }
};

struct VideoSample {
    std::string vid;
    std::int64_t qid = 0;
    std::string query;
    double duration = 0.0;
    double clip_len = 1.0;
    Tensor clip_features;   // T x d
    Tensor patch_features;  // (T*P) x d, may be empty when only clip features exist
    std::size_t patches = 0;
    Tensor query_features;  // N x d
    std::vector<std::pair<double, double>> gt_windows;  // seconds
    std::vector<double> saliency_labels;                // length T, binary

    std::size_t T() const { return clip_features.rows(); }
};

struct Dataset {
    std::vector<VideoSample> train;
    std::vector<VideoSample> val;
};

namespace detail {

// Round every element to its f32 representation so in-memory features are
// exactly what a v1 MQFT round trip yields; training from RAM or from disk
// then follows identical arithmetic.
inline void snap_f32(Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<double>(static_cast<float>(t[i]));
}

inline Tensor random_unit_vector(Rng& rng, std::size_t d) {
    Tensor v(1, d);
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            v[i] = rng.normal();
            norm2 += v[i] * v[i];
        }
    } while (norm2 < 1e-12);  // re-draw the (measure-zero) degenerate sample
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t i = 0; i < d; ++i) v[i] *= inv;
    return v;
}

// Unit vector at exactly the requested cosine to `anchor`: orthogonalize a
// second direction against the anchor and take the spherical combination.
inline Tensor at_cosine(const Tensor& anchor, const Tensor& other, double target_cos) {
    const std::size_t d = anchor.cols();
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += anchor[i] * other[i];
    Tensor perp(1, d);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        perp[i] = other[i] - dot * anchor[i];
        norm2 += perp[i] * perp[i];
    }
    if (norm2 < 1e-12)
        throw std::runtime_error("at_cosine: directions are parallel");
    const double inv = 1.0 / std::sqrt(norm2);
    const double s = std::sqrt(std::max(0.0, 1.0 - target_cos * target_cos));
    Tensor out(1, d);
    for (std::size_t i = 0; i < d; ++i) out[i] = target_cos * anchor[i] + s * perp[i] * inv;
    return out;
}

// Places `count` disjoint [first,last] clip ranges (inclusive) with at least
// a one-clip gap, by sampling and retrying; falls back to fewer moments only
// if space genuinely runs out (validate() makes that unreachable).
inline std::vector<std::pair<std::size_t, std::size_t>> place_moments(Rng& rng, std::size_t T,
                                                                      std::size_t count) {
    std::vector<std::pair<std::size_t, std::size_t>> placed;
    const std::size_t max_len = std::max<std::size_t>(2, T / 6);
    for (std::size_t m = 0; m < count; ++m) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            const std::size_t len = 2 + rng.next_below(max_len - 1);
            const std::size_t first = rng.next_below(T - len + 1);
            const std::size_t last = first + len - 1;
            ok = true;
            for (const auto& [a, b] : placed) {
                // require a >=1 clip gap so windows stay unambiguous
                if (!(last + 1 < a || first > b + 1)) {
                    ok = false;
                    break;
                }
            }
            if (ok) placed.emplace_back(first, last);
        }
    }
    std::sort(placed.begin(), placed.end());
    return placed;
}

}  // namespace detail

// Per-video generation internals, exposed for diagnostics and tests.
struct SyntheticDebug {
    std::vector<Tensor> fg_prototype;        // one 1xd row per video
    std::vector<Tensor> hard_bg_prototype;   // one 1xd row per video
};

// Deterministic for a fixed spec; parallelizes over videos with per-video
// derived seed streams, so the result is identical for any thread count.
inline Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticDebug* debug = nullptr) {
    spec.validate();

    // Dataset-level scene vocabulary, drawn on the unit sphere.
    Rng proto_rng(Rng::derive(spec.seed, 1));
    std::vector<Tensor> prototypes;
    prototypes.reserve(spec.num_prototypes);
    for (std::size_t i = 0; i < spec.num_prototypes; ++i)
        prototypes.push_back(detail::random_unit_vector(proto_rng, spec.d));

    std::vector<VideoSample> all(spec.num_videos);
    if (debug) {
        debug->fg_prototype.assign(spec.num_videos, Tensor());
        debug->hard_bg_prototype.assign(spec.num_videos, Tensor());
    }
    parallel_for(spec.num_videos, [&](std::size_t v) {
        Rng rng(Rng::derive(spec.seed, 2 + v));
        VideoSample& s = all[v];
        s.vid = "video" + std::to_string(v);
        s.qid = static_cast<std::int64_t>(v);
        s.duration = static_cast<double>(spec.T) * spec.clip_len;
        s.clip_len = spec.clip_len;

        const std::size_t fg_idx = rng.next_below(spec.num_prototypes);
        const Tensor& fg = prototypes[fg_idx];
        // Hard background: exact target cosine to the foreground prototype.
        std::size_t other_idx = rng.next_below(spec.num_prototypes - 1);
        if (other_idx >= fg_idx) ++other_idx;
        const Tensor hard_bg = detail::at_cosine(fg, prototypes[other_idx],
                                                 spec.foreground_similarity);
        if (debug) {
            debug->fg_prototype[v] = fg;
            debug->hard_bg_prototype[v] = hard_bg;
        }

        const std::size_t n_moments =
            spec.moments_min + rng.next_below(spec.moments_max - spec.moments_min + 1);
        const auto moments = detail::place_moments(rng, spec.T, n_moments);
        for (const auto& [a, b] : moments)
            s.gt_windows.emplace_back(static_cast<double>(a) * spec.clip_len,
                                      static_cast<double>(b + 1) * spec.clip_len);

        s.saliency_labels.assign(spec.T, 0.0);
        std::vector<bool> is_fg(spec.T, false);
        for (const auto& [a, b] : moments)
            for (std::size_t t = a; t <= b; ++t) {
                is_fg[t] = true;
                s.saliency_labels[t] = 1.0;
            }

        const double sigma_el = spec.noise_sigma / std::sqrt(static_cast<double>(spec.d));
        s.patches = spec.P;
        s.patch_features = Tensor(spec.T * spec.P, spec.d);
        s.clip_features = Tensor(spec.T, spec.d);
        for (std::size_t t = 0; t < spec.T; ++t) {
            const Tensor* base;
            if (is_fg[t]) {
                base = &fg;
            } else {
                // 0 selects the hard prototype; the rest map to the vocabulary
                // minus the foreground entry.
                const std::size_t pick = rng.next_below(spec.num_prototypes);
                if (pick == 0) {
                    base = &hard_bg;
                } else {
                    std::size_t bg = pick - 1;
                    if (bg >= fg_idx) ++bg;  // skip the foreground prototype
                    base = &prototypes[bg];
                }
            }
            for (std::size_t p = 0; p < spec.P; ++p)
                for (std::size_t c = 0; c < spec.d; ++c)
                    s.patch_features.at(t * spec.P + p, c) =
                        (*base)[c] + rng.normal(0.0, sigma_el);
            // Pooled clip feature: elementwise max over the clip's patches.
            for (std::size_t c = 0; c < spec.d; ++c) {
                double mx = s.patch_features.at(t * spec.P, c);
                for (std::size_t p = 1; p < spec.P; ++p)
                    mx = std::max(mx, s.patch_features.at(t * spec.P + p, c));
                s.clip_features.at(t, c) = mx;
            }
        }

        const std::size_t n_tokens = 4 + rng.next_below(4);
        s.query_features = Tensor(n_tokens, spec.d);
        for (std::size_t n = 0; n < n_tokens; ++n)
            for (std::size_t c = 0; c < spec.d; ++c)
                s.query_features.at(n, c) = fg[c] + rng.normal(0.0, sigma_el);
        s.query = "synthetic event " + std::to_string(fg_idx) + " in video " + std::to_string(v);

        detail::snap_f32(s.clip_features);
        detail::snap_f32(s.patch_features);
        detail::snap_f32(s.query_features);
    });

    // 80/20 split by index (250 videos -> 200 train / 50 val).
    Dataset ds;
    const std::size_t n_train = (spec.num_videos * 4) / 5;
    for (std::size_t v = 0; v < spec.num_videos; ++v)
        (v < n_train ? ds.train : ds.val).push_back(std::move(all[v]));
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/{train,val}.jsonl + <dir>/features/<vid>_{clip,patch,text}.mqft
// ---------------------------------------------------------------------------

namespace detail {

inline Annotation to_annotation(const VideoSample& s) {
    Annotation a;
    a.qid = s.qid;
    a.vid = s.vid;
    a.query = s.query;
    a.duration = s.duration;
    a.relevant_windows = s.gt_windows;
    a.saliency = s.saliency_labels;
    return a;
}

inline void save_split(const std::filesystem::path& dir, const std::string& split,
                       const std::vector<VideoSample>& videos) {
    std::vector<Annotation> anns;
    anns.reserve(videos.size());
    for (const auto& v : videos) anns.push_back(to_annotation(v));
    save_annotations((dir / (split + ".jsonl")).string(), anns);
    for (const auto& v : videos) {
        const auto base = dir / "features" / v.vid;
        write_features(base.string() + "_clip.mqft", v.clip_features);
        if (v.patches > 0)
            write_patch_features(base.string() + "_patch.mqft", v.patch_features,
                                 static_cast<std::uint32_t>(v.patches));
        write_features(base.string() + "_text.mqft", v.query_features);
    }
}

inline std::vector<VideoSample> load_split(const std::filesystem::path& dir,
                                           const std::string& split,
                                           std::vector<std::string>* rejected) {
    const auto ann_path = dir / (split + ".jsonl");
    auto anns = load_annotations(ann_path.string(), rejected);
    std::vector<VideoSample> out;
    out.reserve(anns.size());
    for (auto& a : anns) {
        VideoSample s;
        s.vid = a.vid;
        s.qid = a.qid;
        s.query = a.query;
        s.duration = a.duration;
        s.gt_windows = a.relevant_windows;
        s.saliency_labels = a.saliency;
        const auto base = dir / "features" / a.vid;
        s.clip_features = read_features(base.string() + "_clip.mqft");
        if (std::filesystem::exists(base.string() + "_patch.mqft")) {
            auto [m, p] = read_patch_features(base.string() + "_patch.mqft");
            s.patch_features = std::move(m);
            s.patches = p;
        }
        s.query_features = read_features(base.string() + "_text.mqft");
        if (s.saliency_labels.empty()) s.saliency_labels.assign(s.T(), 0.0);
        if (s.saliency_labels.size() != s.T())
            throw std::runtime_error("dataset " + a.vid + ": saliency length " +
                                     std::to_string(s.saliency_labels.size()) +
                                     " does not match T=" + std::to_string(s.T()));
        s.clip_len = s.duration / static_cast<double>(s.T());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace detail

inline void save_dataset(const std::string& dir, const Dataset& ds) {
    std::filesystem::create_directories(std::filesystem::path(dir) / "features");
    detail::save_split(dir, "train", ds.train);
    detail::save_split(dir, "val", ds.val);
}

inline Dataset load_dataset(const std::string& dir, std::vector<std::string>* rejected = nullptr) {
    Dataset ds;
    ds.train = detail::load_split(dir, "train", rejected);
    ds.val = detail::load_split(dir, "val", rejected);
    if (ds.train.empty()) throw std::runtime_error("load_dataset: empty train split in " + dir);
    return ds;
}

}  // namespace mqvtg
