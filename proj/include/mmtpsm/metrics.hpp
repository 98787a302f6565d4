#pragma once

// Instance-segmentation metrics: Aggregated Jaccard Index with the standard
// greedy per-ground-truth matching, and COCO-style mAP over mask-IoU
// thresholds with 101-point interpolated precision.

#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmtpsm/core.hpp"
#include "mmtpsm/segmenter.hpp"
#include "mmtpsm/synth.hpp"

namespace mmtpsm {

struct ScoredInstance {
    Mask mask;
    int class_id = kCytoplasm;
    double score = 1.0;  // ground truth carries 1
};

using InstanceSet = std::vector<ScoredInstance>;

// ---------------------------------------------------------------------------
// AJI. Ground truths processed in index order; each takes its best-IoU still
// unmatched prediction (ties by lower prediction index). Aggregated
// intersection over aggregated union, unmatched areas added to the union.
// Single class; the caller filters. Empty-vs-empty is vacuously perfect.
// ---------------------------------------------------------------------------

struct AjiAccumulator {
    std::size_t intersection = 0;
    std::size_t union_ = 0;

    void add(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
        std::vector<bool> used(pred.size(), false);
        for (const Mask& g : gt) {
            double best_iou = 0.0;
            int best = -1;
            for (std::size_t p = 0; p < pred.size(); ++p) {
                if (used[p]) continue;
                double iou = mask_iou(g, pred[p]);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int>(p);
                }
            }
            if (best >= 0) {
                used[best] = true;
                std::size_t inter = 0, uni = 0;
                for (std::size_t i = 0; i < g.v.size(); ++i) {
                    bool a = g.v[i] != 0, b = pred[best].v[i] != 0;
                    inter += (a && b);
                    uni += (a || b);
                }
                intersection += inter;
                union_ += uni;
            } else {
                union_ += g.area();
            }
        }
        for (std::size_t p = 0; p < pred.size(); ++p)
            if (!used[p]) union_ += pred[p].area();
    }

    double value() const {
        if (union_ == 0) return 1.0;  // nothing predicted, nothing to find
        return static_cast<double>(intersection) / static_cast<double>(union_);
    }
};

inline double aji(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
    AjiAccumulator acc;
    acc.add(pred, gt);
    return acc.value();
}

// ---------------------------------------------------------------------------
// Average precision. Predictions sorted by descending score (ties by lower
// index) greedily match the best-IoU unmatched ground truth at or above the
// threshold. AP is 101-point interpolated precision, COCO convention.
// ---------------------------------------------------------------------------

inline std::vector<double> default_map_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

// One scored match attempt: tp flags in score order plus total gt count.
struct ApSample {
    double score;
    bool tp;
};

inline void match_at_threshold(const std::vector<Mask>& pred, const std::vector<double>& scores,
                               const std::vector<Mask>& gt, double threshold,
                               std::vector<ApSample>& out) {
    std::vector<std::size_t> order(pred.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<bool> used(gt.size(), false);
    for (std::size_t idx : order) {
        double best_iou = 0.0;
        int best = -1;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (used[g]) continue;
            double iou = mask_iou(pred[idx], gt[g]);
            if (iou >= threshold && iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) used[best] = true;
        out.push_back(ApSample{scores[idx], best >= 0});
    }
}

// AP from pooled samples (already matched per scene) and the total gt count.
inline double average_precision(std::vector<ApSample> samples, std::size_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::stable_sort(samples.begin(), samples.end(),
                     [](const ApSample& a, const ApSample& b) { return a.score > b.score; });
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& s : samples) {
        s.tp ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // precision envelope, then 101-point interpolation
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0.0;
    for (int i = 0; i <= 100; ++i) {
        double r = i / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) ap += precision[it - recall.begin()];
    }
    return ap / 101.0;
}

// Single-set mAP (one scene, one class). Returns nullopt when gt is empty.
inline std::optional<double> mean_ap(const std::vector<Mask>& pred, const std::vector<double>& scores,
                                     const std::vector<Mask>& gt,
                                     const std::vector<double>& thresholds = default_map_thresholds()) {
    if (gt.empty()) return std::nullopt;
    double sum = 0.0;
    for (double th : thresholds) {
        std::vector<ApSample> samples;
        match_at_threshold(pred, scores, gt, th, samples);
        sum += average_precision(std::move(samples), gt.size());
    }
    return sum / static_cast<double>(thresholds.size());
}

// ---------------------------------------------------------------------------
// Whole-set evaluation. AJI aggregates intersections/unions across scenes;
// mAP pools score-ranked matches across scenes per threshold (COCO-style).
// ---------------------------------------------------------------------------

struct MetricReport {
    double aji_cyto = 0, aji_nuc = 0, aji_avg = 0;
    double map_cyto = 0, map_nuc = 0, map_avg = 0;
    bool map_cyto_present = true, map_nuc_present = true;
};

inline nlohmann::ordered_json to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["aji_cyto"] = r.aji_cyto;
    j["aji_nuc"] = r.aji_nuc;
    j["aji_avg"] = r.aji_avg;
    j["map_cyto"] = r.map_cyto_present ? nlohmann::ordered_json(r.map_cyto) : nullptr;
    j["map_nuc"] = r.map_nuc_present ? nlohmann::ordered_json(r.map_nuc) : nullptr;
    j["map_avg"] = r.map_avg;
    return j;
}

inline std::string metric_csv_header() {
    return "aji_cyto,aji_nuc,aji_avg,map_cyto,map_nuc,map_avg";
}

inline std::string metric_csv_row(const MetricReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.aji_cyto, r.aji_nuc, r.aji_avg,
                  r.map_cyto, r.map_nuc, r.map_avg);
    return buf;
}

inline MetricReport evaluate(const std::vector<InstanceSet>& pred_sets,
                             const std::vector<InstanceSet>& gt_sets,
                             const std::vector<double>& thresholds = default_map_thresholds()) {
    if (pred_sets.size() != gt_sets.size())
        throw std::invalid_argument("evaluate: misaligned scene lists");
    MetricReport rep;
    for (int cls : {kCytoplasm, kNucleus}) {
        AjiAccumulator aji_acc;
        std::vector<std::vector<ApSample>> per_threshold(thresholds.size());
        std::size_t total_gt = 0;
        for (std::size_t s = 0; s < pred_sets.size(); ++s) {
            std::vector<Mask> pred, gt;
            std::vector<double> scores;
            for (const auto& p : pred_sets[s])
                if (p.class_id == cls) {
                    pred.push_back(p.mask);
                    scores.push_back(p.score);
                }
            for (const auto& g : gt_sets[s])
                if (g.class_id == cls) gt.push_back(g.mask);
            aji_acc.add(pred, gt);
            total_gt += gt.size();
            for (std::size_t ti = 0; ti < thresholds.size(); ++ti)
                match_at_threshold(pred, scores, gt, thresholds[ti], per_threshold[ti]);
        }
        double aji_v = aji_acc.value();
        bool map_present = total_gt > 0;
        double map_v = 0.0;
        if (map_present) {
            for (auto& samples : per_threshold)
                map_v += average_precision(std::move(samples), total_gt);
            map_v /= static_cast<double>(thresholds.size());
        }
        if (cls == kCytoplasm) {
            rep.aji_cyto = aji_v;
            rep.map_cyto = map_v;
            rep.map_cyto_present = map_present;
        } else {
            rep.aji_nuc = aji_v;
            rep.map_nuc = map_v;
            rep.map_nuc_present = map_present;
        }
    }
    rep.aji_avg = 0.5 * (rep.aji_cyto + rep.aji_nuc);
    if (rep.map_cyto_present && rep.map_nuc_present)
        rep.map_avg = 0.5 * (rep.map_cyto + rep.map_nuc);
    else if (rep.map_cyto_present)
        rep.map_avg = rep.map_cyto;
    else if (rep.map_nuc_present)
        rep.map_avg = rep.map_nuc;
    return rep;
}

inline InstanceSet predictions_to_instance_set(const std::vector<Prediction>& preds) {
    InstanceSet out;
    for (const auto& p : preds) out.push_back(ScoredInstance{p.mask, p.class_id, p.score});
    return out;
}

inline InstanceSet scene_to_instance_set(const Scene& scene) {
    InstanceSet out;
    for (const auto& inst : scene.instances)
        out.push_back(ScoredInstance{inst.mask, inst.class_id, 1.0});
    return out;
}

}  // namespace mmtpsm
