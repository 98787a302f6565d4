#pragma once

// Mean-teacher distillation machinery: EMA update and its alpha schedule,
// self-ensembled pseudo-labels with sharpening, perturbation variance,
// perturbation-sensitive sample mining, the mined classification loss, the
// mask-guided feature distillation loss, the lambda ramp and the total-loss
// combiner. Teacher quantities are constants here; gradients flow only into
// the student.

#include <vector>

#include "mmtpsm/augment.hpp"
#include "mmtpsm/core.hpp"
#include "mmtpsm/segmenter.hpp"

namespace mmtpsm {

// ---------------------------------------------------------------------------
// EMA: theta'_t = alpha * theta'_{t-1} + (1 - alpha) * theta_{t-1}
// ---------------------------------------------------------------------------

inline void ema_update(ParameterVector& teacher, const ParameterVector& student, double alpha) {
    if (!teacher.same_layout(student)) throw std::invalid_argument("ema_update: layout mismatch");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("ema_update: alpha outside [0,1]");
    for (std::size_t i = 0; i < teacher.values.size(); ++i)
        teacher.values[i] = alpha * teacher.values[i] + (1.0 - alpha) * student.values[i];
}

inline constexpr int kTeacherInitIter = 990;

// alpha(t) = min(1 - 1/(t - 990), 0.99), clamped below at 0.
inline double alpha_schedule(int t) {
    if (t <= kTeacherInitIter) throw std::invalid_argument("alpha_schedule: teacher exists from iter 990");
    double a = 1.0 - 1.0 / static_cast<double>(t - kTeacherInitIter);
    return std::clamp(a, 0.0, 0.99);
}

// ---------------------------------------------------------------------------
// Pseudo-labels
// ---------------------------------------------------------------------------

// Mean over K per-view distributions, per proposal.
inline std::vector<ClassDistribution> ensemble_pseudo_label(
    const std::vector<std::vector<ClassDistribution>>& per_view) {
    if (per_view.size() < 2) throw std::invalid_argument("ensemble_pseudo_label: K must be >= 2");
    const std::size_t n = per_view[0].size();
    for (const auto& view : per_view)
        if (view.size() != n)
            throw std::invalid_argument("ensemble_pseudo_label: mismatched proposal counts");
    std::vector<ClassDistribution> mean(n);
    const double k = static_cast<double>(per_view.size());
    for (std::size_t i = 0; i < n; ++i) {
        mean[i].probs.assign(per_view[0][i].probs.size(), 0.0);
        for (const auto& view : per_view)
            for (std::size_t j = 0; j < mean[i].probs.size(); ++j)
                mean[i].probs[j] += view[i].probs[j] / k;
    }
    return mean;
}

// S(p) = p^t / sum_j p_j^t
inline ClassDistribution sharpen(const ClassDistribution& dist, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("sharpen: temperature must be > 0");
    ClassDistribution out;
    out.probs.resize(dist.probs.size());
    double sum = 0;
    for (std::size_t j = 0; j < dist.probs.size(); ++j) {
        out.probs[j] = std::pow(dist.probs[j], temperature);
        sum += out.probs[j];
    }
    for (auto& p : out.probs) p /= sum;
    return out;
}

// Var = sum over classes of (1/K) sum_k (p_k - mean)^2, one scalar per proposal.
inline std::vector<double> perturbation_variance(
    const std::vector<std::vector<ClassDistribution>>& per_view,
    const std::vector<ClassDistribution>& mean) {
    if (per_view.size() < 2) throw std::invalid_argument("perturbation_variance: K must be >= 2");
    const double k = static_cast<double>(per_view.size());
    std::vector<double> var(mean.size(), 0.0);
    for (std::size_t i = 0; i < mean.size(); ++i)
        for (const auto& view : per_view)
            for (std::size_t j = 0; j < mean[i].probs.size(); ++j) {
                double d = view[i].probs[j] - mean[i].probs[j];
                var[i] += d * d / k;
            }
    return var;
}

struct PseudoLabelSet {
    std::vector<ClassDistribution> mean_dist;       // P-bar, per proposal
    std::vector<ClassDistribution> sharpened_dist;  // S(P-bar)
    std::vector<int> hard_label;                    // argmax, ties to lowest class id
    std::vector<double> variance;
    ProposalBatch proposals;
};

inline PseudoLabelSet make_pseudo_labels(const std::vector<std::vector<ClassDistribution>>& per_view,
                                         ProposalBatch proposals, double temperature) {
    PseudoLabelSet out;
    out.mean_dist = ensemble_pseudo_label(per_view);
    out.variance = perturbation_variance(per_view, out.mean_dist);
    out.proposals = std::move(proposals);
    out.sharpened_dist.reserve(out.mean_dist.size());
    out.hard_label.reserve(out.mean_dist.size());
    for (const auto& d : out.mean_dist) {
        out.sharpened_dist.push_back(sharpen(d, temperature));
        out.hard_label.push_back(d.arg_max());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sample mining: keep all foreground pseudo-labels plus the top-s
// highest-variance backgrounds, s = foreground count. Ties by lower index.
// ---------------------------------------------------------------------------

struct MinedSelection {
    std::vector<std::size_t> kept_indices;  // ascending
    int s_foreground = 0;
};

inline MinedSelection mine_samples(const PseudoLabelSet& pseudo) {
    MinedSelection sel;
    std::vector<std::size_t> background;
    for (std::size_t i = 0; i < pseudo.hard_label.size(); ++i) {
        if (pseudo.hard_label[i] != kBackground) {
            sel.kept_indices.push_back(i);
            ++sel.s_foreground;
        } else {
            background.push_back(i);
        }
    }
    std::stable_sort(background.begin(), background.end(), [&](std::size_t a, std::size_t b) {
        if (pseudo.variance[a] != pseudo.variance[b]) return pseudo.variance[a] > pseudo.variance[b];
        return a < b;
    });
    std::size_t take = std::min(background.size(), static_cast<std::size_t>(sel.s_foreground));
    for (std::size_t i = 0; i < take; ++i) sel.kept_indices.push_back(background[i]);
    std::sort(sel.kept_indices.begin(), sel.kept_indices.end());
    return sel;
}

// ---------------------------------------------------------------------------
// L_psm on pre-computed distributions: mean over (view, kept proposal) of
// w * CE(student, sharpened target), w = 1.5 for background hard labels.
// ---------------------------------------------------------------------------

struct PsmClassWeights {
    double background = 1.5;
    double foreground = 1.0;
};

inline double psm_loss_value(const std::vector<std::vector<ClassDistribution>>& student_per_view,
                             const std::vector<ClassDistribution>& targets,
                             const std::vector<int>& hard_labels, const PsmClassWeights& w) {
    if (student_per_view.empty() || targets.empty()) return 0.0;
    double loss = 0.0;
    std::size_t count = 0;
    for (const auto& view : student_per_view) {
        if (view.size() != targets.size())
            throw std::invalid_argument("psm_loss: mismatched proposal sets");
        for (std::size_t i = 0; i < targets.size(); ++i) {
            double wi = hard_labels[i] == kBackground ? w.background : w.foreground;
            loss += wi * cross_entropy(view[i].probs, targets[i].probs);
            ++count;
        }
    }
    return count ? loss / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Semantic masks: union of thresholded teacher masks pasted at image
// resolution, max-pooled to each stage's grid.
// ---------------------------------------------------------------------------

struct TeacherMaskedBox {
    Box box;
    std::vector<double> mask_probs;  // m x m
};

inline std::vector<Mask> semantic_mask(const SegmenterConfig& cfg,
                                       const std::vector<TeacherMaskedBox>& fg_predictions) {
    Mask full(cfg.height, cfg.width);
    const int ms = cfg.mask_size;
    for (const auto& p : fg_predictions) {
        const Box& b = p.box;
        int y0 = std::max(0, static_cast<int>(std::floor(b.y0)));
        int y1 = std::min(cfg.height, static_cast<int>(std::ceil(b.y1)));
        int x0 = std::max(0, static_cast<int>(std::floor(b.x0)));
        int x1 = std::min(cfg.width, static_cast<int>(std::ceil(b.x1)));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                int a = std::clamp(static_cast<int>((y + 0.5 - b.y0) / b.height() * ms), 0, ms - 1);
                int c = std::clamp(static_cast<int>((x + 0.5 - b.x0) / b.width() * ms), 0, ms - 1);
                if (p.mask_probs[static_cast<std::size_t>(a) * ms + c] >= 0.5) full.at(y, x) = 1;
            }
    }

    std::vector<Mask> stages;
    for (auto [sh, sw, stride] : {std::array<int, 3>{cfg.stage1_h(), cfg.stage1_w(), cfg.stride1},
                                  std::array<int, 3>{cfg.stage2_h(), cfg.stage2_w(), cfg.stride2}}) {
        Mask m(sh, sw);
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x)
                if (full.at(y, x)) {
                    int sy = std::min(y / stride, sh - 1);
                    int sx = std::min(x / stride, sw - 1);
                    m.at(sy, sx) = 1;
                }
        stages.push_back(std::move(m));
    }
    return stages;
}

// ---------------------------------------------------------------------------
// L_mgd: per stage, masked squared feature difference normalized by the mask
// area and the adapted channel count, averaged over stages. All-zero-mask
// stages contribute 0. Gradients (optional) flow into the student features.
// ---------------------------------------------------------------------------

inline double mgd_loss(const FeaturePyramid& teacher_adapted, const FeaturePyramid& student_adapted,
                       const std::vector<Mask>& masks,
                       std::vector<FeatureMap>* d_student = nullptr) {
    const std::size_t t_count = teacher_adapted.stages.size();
    if (student_adapted.stages.size() != t_count || masks.size() != t_count)
        throw std::invalid_argument("mgd_loss: stage count mismatch");
    double loss = 0.0;
    if (d_student) d_student->clear();
    for (std::size_t t = 0; t < t_count; ++t) {
        const FeatureMap& zt = teacher_adapted.stages[t];
        const FeatureMap& zs = student_adapted.stages[t];
        const Mask& m = masks[t];
        if (zt.c != zs.c || zt.h != zs.h || zt.w != zs.w || m.h != zt.h || m.w != zt.w)
            throw std::invalid_argument("mgd_loss: shape mismatch");
        FeatureMap d(zs.c, zs.h, zs.w);
        double mask_area = static_cast<double>(m.area());
        if (mask_area > 0) {
            double norm = mask_area * zt.c * static_cast<double>(t_count);
            double stage_sum = 0.0;
            for (int y = 0; y < zt.h; ++y)
                for (int x = 0; x < zt.w; ++x) {
                    if (!m.at(y, x)) continue;
                    for (int c = 0; c < zt.c; ++c) {
                        double diff = zt.at(c, y, x) - zs.at(c, y, x);
                        stage_sum += diff * diff;
                        d.at(c, y, x) = -2.0 * diff / norm;
                    }
                }
            loss += stage_sum / norm;
        }
        if (d_student) d_student->push_back(std::move(d));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Schedules and the total loss.
// ---------------------------------------------------------------------------

// Piecewise sigmoid-shaped ramp: 0 before 1000, exp(-125 (1 - t/1250)^2) on
// [1000, 1250], 1 on the plateau, exp(-12 (1 - (T-t)/250)^2) on [T-250, T].
inline double lambda_schedule(int t, int t_total) {
    if (t_total < 1500) throw std::invalid_argument("lambda_schedule: T_total must be >= 1500");
    if (t < 1000) return 0.0;
    if (t <= 1250) {
        double z = 1.0 - static_cast<double>(t) / 1250.0;
        return std::exp(-125.0 * z * z);
    }
    if (t < t_total - 250) return 1.0;
    double z = 1.0 - static_cast<double>(t_total - t) / 250.0;
    return std::exp(-12.0 * z * z);
}

// L_total = L_sup + lambda(t) * (L_psm + gamma * L_mgd)
inline double total_loss(double l_sup, double l_psm, double l_mgd, int t, int t_total,
                         double gamma = 5.0) {
    if (!std::isfinite(l_sup) || !std::isfinite(l_psm) || !std::isfinite(l_mgd))
        throw NumericalError("total_loss: non-finite component");
    if (gamma < 0.0) throw std::invalid_argument("total_loss: gamma must be >= 0");
    return l_sup + lambda_schedule(t, t_total) * (l_psm + gamma * l_mgd);
}

// ---------------------------------------------------------------------------
// Gradient-carrying wrappers that run the student network.
// ---------------------------------------------------------------------------

// Teacher class distributions for one view: inference only, no caches kept.
inline std::vector<ClassDistribution> classify_boxes(const SegmenterConfig& cfg,
                                                     const ParameterVector& params,
                                                     const Image& image,
                                                     const std::vector<Box>& boxes) {
    FeaturePyramid pyr = extract_features(cfg, params, image);
    std::vector<ClassDistribution> out;
    out.reserve(boxes.size());
    for (const Box& b : boxes) out.push_back(classify(cfg, params, roi_extract(cfg, pyr, b)));
    return out;
}

struct StudentPsmView {
    Image image;
    std::vector<Box> boxes;  // teacher proposals mapped into this view
};

// L_psm evaluated by running the student on its views; accumulates student
// parameter gradients scaled by `grad_scale` when grads != nullptr.
inline double psm_loss_student(const SegmenterConfig& cfg, const ParameterVector& student,
                               const std::vector<StudentPsmView>& views,
                               const std::vector<ClassDistribution>& targets,
                               const std::vector<int>& hard_labels, const PsmClassWeights& w,
                               ParameterVector* grads = nullptr, double grad_scale = 1.0) {
    if (views.empty() || targets.empty()) return 0.0;
    const std::size_t count = views.size() * targets.size();
    double loss = 0.0;
    for (const auto& view : views) {
        if (view.boxes.size() != targets.size())
            throw std::invalid_argument("psm_loss: mismatched proposal sets");
        FeatureCache fc;
        FeaturePyramid pyr = extract_features(cfg, student, view.image, &fc);
        FeatureMap d_y1(cfg.c1, cfg.stage1_h(), cfg.stage1_w());
        for (std::size_t i = 0; i < view.boxes.size(); ++i) {
            RoiCache rc;
            auto patch = roi_extract(cfg, pyr, view.boxes[i], &rc);
            auto dist = classify(cfg, student, patch);
            double wi = hard_labels[i] == kBackground ? w.background : w.foreground;
            loss += wi * cross_entropy(dist.probs, targets[i].probs);
            if (grads) {
                // d/dlogits of w * CE(softmax(z), q) = w * (p - q); the 1e-12
                // prediction floor leaves the gradient of the floored terms as
                // is (the floor only guards the log's value)
                std::vector<double> d_logits(dist.probs.size());
                for (std::size_t j = 0; j < d_logits.size(); ++j)
                    d_logits[j] = grad_scale * wi * (dist.probs[j] - targets[i].probs[j]) /
                                  static_cast<double>(count);
                std::vector<double> d_patch;
                nn::affine_backward(student.seg("head.cls.W"), patch, d_logits,
                                    grads->seg("head.cls.W"), grads->seg("head.cls.b"), &d_patch);
                roi_backward(cfg, rc, d_patch, d_y1);
            }
        }
        if (grads) backward_features(cfg, student, fc, pyr, std::move(d_y1), FeatureMap{}, *grads);
    }
    return loss / static_cast<double>(count);
}

// L_mgd evaluated by running the student on `image`; the teacher's adapted
// pyramid is a constant. Student grads cover both the adaptation layers and
// the feature extractor.
inline double mgd_loss_student(const SegmenterConfig& cfg, const ParameterVector& student,
                               const Image& image, const FeaturePyramid& teacher_adapted,
                               const std::vector<Mask>& masks, ParameterVector* grads = nullptr,
                               double grad_scale = 1.0) {
    FeatureCache fc;
    FeaturePyramid pyr = extract_features(cfg, student, image, &fc);
    FeaturePyramid adapted = adapt(cfg, student, pyr);
    std::vector<FeatureMap> d_adapted;
    double loss = mgd_loss(teacher_adapted, adapted, masks, grads ? &d_adapted : nullptr);
    if (grads) {
        for (auto& d : d_adapted)
            for (auto& g : d.v) g *= grad_scale;
        FeatureMap d_y1 = adapt_backward_stage(cfg, student, pyr.stages[0], d_adapted[0], 0, *grads);
        FeatureMap d_y2 = adapt_backward_stage(cfg, student, pyr.stages[1], d_adapted[1], 1, *grads);
        backward_features(cfg, student, fc, pyr, std::move(d_y1), d_y2, *grads);
    }
    return loss;
}

}  // namespace mmtpsm
