#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mqvtg {

// Evaluation protocol: R1@IoU and mAP over a threshold grid for moment
// retrieval, mAP + HIT@1 for highlight detection, plus codebook utilization.

struct Span {
    double start = 0.0;
    double end = 0.0;
};

struct ScoredSpan {
    Span span;
    double score = 0.0;
};

struct MetricsReport {
    double r1_03 = 0.0, r1_05 = 0.0, r1_07 = 0.0;
    double map_05 = 0.0, map_075 = 0.0, map_avg = 0.0;
    double miou = 0.0;
    double hd_map = 0.0, hit_at_1 = 0.0;
    double codebook_utilization = 0.0;

    nlohmann::json to_json() const {
        return {{"r1@0.3", r1_03},   {"r1@0.5", r1_05},    {"r1@0.7", r1_07},
                {"map@0.5", map_05}, {"map@0.75", map_075}, {"map_avg", map_avg},
                {"miou", miou},      {"hd_map", hd_map},    {"hit@1", hit_at_1},
                {"codebook_utilization", codebook_utilization}};
    }
    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        r.r1_03 = j.at("r1@0.3");   r.r1_05 = j.at("r1@0.5");    r.r1_07 = j.at("r1@0.7");
        r.map_05 = j.at("map@0.5"); r.map_075 = j.at("map@0.75"); r.map_avg = j.at("map_avg");
        r.miou = j.at("miou");      r.hd_map = j.at("hd_map");    r.hit_at_1 = j.at("hit@1");
        r.codebook_utilization = j.at("codebook_utilization");
        return r;
    }
};

inline double temporal_iou(const Span& a, const Span& b) {
    if (a.start > a.end || b.start > b.end)
        throw std::invalid_argument("temporal_iou: reversed span");
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
    return uni > 0.0 ? inter / uni : 0.0;
}

// One evaluation unit: the ranked predictions and gt windows for a query.
struct QueryResult {
    std::vector<ScoredSpan> predictions;  // sorted by score descending by callers
    std::vector<Span> gts;
};

namespace detail {

inline std::vector<ScoredSpan> by_score(std::vector<ScoredSpan> preds) {
    std::stable_sort(preds.begin(), preds.end(),
                     [](const ScoredSpan& a, const ScoredSpan& b) { return a.score > b.score; });
    return preds;
}

}  // namespace detail

// Fraction of queries whose best-scored span clears the IoU threshold against
// any gt window. Queries without predictions count as misses.
inline double recall_at_1(const std::vector<QueryResult>& queries, double threshold) {
    if (queries.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& q : queries) {
        if (q.predictions.empty() || q.gts.empty()) continue;
        const auto ranked = detail::by_score(q.predictions);
        double best = 0.0;
        for (const auto& gt : q.gts) best = std::max(best, temporal_iou(ranked[0].span, gt));
        if (best >= threshold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

// Mean over queries of the top-1 prediction's best IoU against the gts.
inline double mean_iou(const std::vector<QueryResult>& queries) {
    if (queries.empty()) return 0.0;
    double total = 0.0;
    for (const auto& q : queries) {
        double best = 0.0;
        if (!q.predictions.empty()) {
            const auto ranked = detail::by_score(q.predictions);
            for (const auto& gt : q.gts) best = std::max(best, temporal_iou(ranked[0].span, gt));
        }
        total += best;
    }
    return total / static_cast<double>(queries.size());
}

// Average precision for one query at one IoU threshold: walk predictions in
// score order, greedily match each to the unmatched gt with the highest IoU
// (if it clears the threshold), then AP = sum of precision-at-k over true
// positives divided by the gt count.
inline double average_precision(const QueryResult& q, double threshold) {
    if (q.gts.empty()) return 0.0;
    const auto ranked = detail::by_score(q.predictions);
    std::vector<bool> gt_taken(q.gts.size(), false);
    double ap = 0.0;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        double best_iou = 0.0;
        std::size_t best_gt = q.gts.size();
        for (std::size_t g = 0; g < q.gts.size(); ++g) {
            if (gt_taken[g]) continue;
            const double iou = temporal_iou(ranked[k].span, q.gts[g]);
            if (iou > best_iou) {
                best_iou = iou;
                best_gt = g;
            }
        }
        if (best_gt < q.gts.size() && best_iou >= threshold) {
            gt_taken[best_gt] = true;
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(k + 1);
        }
    }
    return ap / static_cast<double>(q.gts.size());
}

// mAP per threshold (mean over queries) for a threshold list.
inline std::vector<double> map_moments(const std::vector<QueryResult>& queries,
                                       const std::vector<double>& thresholds) {
    std::vector<double> out;
    out.reserve(thresholds.size());
    for (double th : thresholds) {
        double total = 0.0;
        for (const auto& q : queries) total += average_precision(q, th);
        out.push_back(queries.empty() ? 0.0 : total / static_cast<double>(queries.size()));
    }
    return out;
}

inline std::vector<double> map_grid() {
    std::vector<double> g;
    for (int i = 0; i < 10; ++i) g.push_back(0.5 + 0.05 * i);
    return g;
}

// ---------------------------------------------------------------------------
// Highlight detection
// ---------------------------------------------------------------------------

struct HighlightResult {
    std::vector<double> scores;  // one per clip
    std::vector<double> labels;  // > 0 means positive
};

// Ranking AP of clips against binary labels, for one video.
inline double clip_ranking_ap(const std::vector<double>& scores,
                              const std::vector<double>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("clip_ranking_ap: scores/labels length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t positives = 0;
    for (double l : labels)
        if (l > 0.0) ++positives;
    if (positives == 0) return 0.0;
    double ap = 0.0;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (labels[order[k]] > 0.0) {
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(k + 1);
        }
    }
    return ap / static_cast<double>(positives);
}

struct HighlightMetrics {
    double hd_map = 0.0;
    double hit_at_1 = 0.0;
    std::size_t skipped_no_positive = 0;  // videos excluded for having no positive clip
};

inline HighlightMetrics highlight_metrics(const std::vector<HighlightResult>& videos) {
    HighlightMetrics m;
    std::size_t counted = 0;
    for (const auto& v : videos) {
        bool any_positive = false;
        for (double l : v.labels) any_positive |= l > 0.0;
        if (!any_positive || v.scores.empty()) {
            ++m.skipped_no_positive;
            continue;
        }
        ++counted;
        m.hd_map += clip_ranking_ap(v.scores, v.labels);
        std::size_t top = 0;
        for (std::size_t i = 1; i < v.scores.size(); ++i)
            if (v.scores[i] > v.scores[top]) top = i;  // ties keep the earliest clip
        if (v.labels[top] > 0.0) m.hit_at_1 += 1.0;
    }
    if (counted > 0) {
        m.hd_map /= static_cast<double>(counted);
        m.hit_at_1 /= static_cast<double>(counted);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

inline MetricsReport compute_report(const std::vector<QueryResult>& queries,
                                    const std::vector<HighlightResult>& highlights,
                                    double codebook_utilization) {
    MetricsReport r;
    r.r1_03 = recall_at_1(queries, 0.3);
    r.r1_05 = recall_at_1(queries, 0.5);
    r.r1_07 = recall_at_1(queries, 0.7);
    r.miou = mean_iou(queries);
    const auto grid = map_grid();
    const auto maps = map_moments(queries, grid);
    r.map_05 = maps[0];
    r.map_075 = maps[5];
    r.map_avg = std::accumulate(maps.begin(), maps.end(), 0.0) / static_cast<double>(maps.size());
    const auto hd = highlight_metrics(highlights);
    r.hd_map = hd.hd_map;
    r.hit_at_1 = hd.hit_at_1;
    r.codebook_utilization = codebook_utilization;
    return r;
}

}  // namespace mqvtg
