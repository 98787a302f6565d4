#pragma once

// Training orchestration: warmup, teacher initialization by copy, mixed
// labeled/unlabeled batches, schedules, SGD with momentum, checkpointing,
// telemetry, final evaluation, and the finite-difference gradient audit.
// Everything is a pure function of (config, manifest, seeds).

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmtpsm/augment.hpp"
#include "mmtpsm/core.hpp"
#include "mmtpsm/distill.hpp"
#include "mmtpsm/metrics.hpp"
#include "mmtpsm/segmenter.hpp"
#include "mmtpsm/synth.hpp"

namespace mmtpsm {

enum class TrainMode { mmt_psm, supervised_only };
enum class Ablation { full, no_mgd, no_psm };

inline std::string to_string(TrainMode m) {
    return m == TrainMode::mmt_psm ? "mmt_psm" : "supervised_only";
}
inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::no_mgd: return "no_mgd";
        case Ablation::no_psm: return "no_psm";
        default: return "full";
    }
}

struct TrainConfig {
    int total_iters = 2000;
    int warmup_iters = 1000;
    int teacher_init_iter = kTeacherInitIter;
    int k_teacher_views = 4;
    int l_student_views = 2;
    double gamma = 5.0;
    // sharpen() raises to this exponent directly; 2.0 is the MixMatch-style
    // 1/T with T = 0.5, which lowers target entropy (an exponent below one
    // would flatten the pseudo-labels instead)
    double temperature = 2.0;
    PsmClassWeights psm_weights;  // 1.5 background / 1.0 foreground
    double momentum = 0.9;
    std::uint64_t seed = 1;
    int eval_scenes = 16;
    int checkpoint_every = 0;  // 0 = final checkpoint only
    Ablation ablation = Ablation::full;
    SegmenterConfig segmenter;
    AugmentConfig augment;

    // lr milestones follow the published schedule
    double learning_rate(int t) const {
        if (t < 5000) return 1e-2;
        if (t < 7000) return 1e-3;
        return 1e-4;
    }

    void validate() const {
        if (!(teacher_init_iter < warmup_iters && warmup_iters < total_iters))
            throw ConfigError("trainer: need teacher_init_iter < warmup_iters < total_iters");
        if (k_teacher_views < 2) throw ConfigError("trainer: K must be >= 2");
        if (l_student_views < 1) throw ConfigError("trainer: L must be >= 1");
        segmenter.validate();
    }
};

struct TelemetryRecord {
    int t = 0;
    double lambda = 0, alpha = 0, lr = 0;
    int s_foreground = 0, kept = 0;
    double l_sup = 0, l_cls = 0, l_reg = 0, l_seg = 0, l_psm = 0, l_mgd = 0, total = 0;
};

inline nlohmann::ordered_json to_json(const TelemetryRecord& r) {
    nlohmann::ordered_json j;
    j["t"] = r.t;
    j["lambda"] = r.lambda;
    j["alpha"] = r.alpha;
    j["lr"] = r.lr;
    j["s_foreground"] = r.s_foreground;
    j["kept"] = r.kept;
    j["l_sup"] = r.l_sup;
    j["l_cls"] = r.l_cls;
    j["l_reg"] = r.l_reg;
    j["l_seg"] = r.l_seg;
    j["l_psm"] = r.l_psm;
    j["l_mgd"] = r.l_mgd;
    j["total"] = r.total;
    return j;
}

struct RunState {
    int t = 0;  // completed iterations
    ParameterVector student;
    std::optional<ParameterVector> teacher;  // absent before teacher_init_iter
    std::vector<double> momentum_buf;
    std::uint64_t seed = 0;  // root seed; all per-iteration streams derive from it
};

inline RunState make_run_state(const TrainConfig& cfg) {
    RunState st;
    st.seed = cfg.seed;
    st.student = init_params(cfg.segmenter, derive_seed(cfg.seed, "init"));
    st.momentum_buf.assign(st.student.values.size(), 0.0);
    return st;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary holding both parameter vectors, the layout,
// the iteration counter, optimizer state and the seed.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const RunState& st) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path.string());
    auto w_u64 = [&](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    auto w_vec = [&](const std::vector<double>& v) {
        w_u64(v.size());
        f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
    };
    f.write("MMTC", 4);
    w_u64(1);  // version
    w_u64(static_cast<std::uint64_t>(st.t));
    w_u64(st.seed);
    w_u64(st.student.layout.size());
    for (const auto& s : st.student.layout) {
        w_u64(s.name.size());
        f.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
        w_u64(s.offset);
        w_u64(s.length);
    }
    w_vec(st.student.values);
    w_u64(st.teacher.has_value() ? 1 : 0);
    if (st.teacher) w_vec(st.teacher->values);
    w_vec(st.momentum_buf);
    if (!f) throw DataError("checkpoint write failed: " + path.string());
}

inline RunState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path.string());
    auto r_u64 = [&]() {
        std::uint64_t v;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    auto r_vec = [&]() {
        std::vector<double> v(r_u64());
        f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
        return v;
    };
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string_view(magic, 4) != "MMTC") throw DataError("bad checkpoint magic");
    if (r_u64() != 1) throw DataError("unsupported checkpoint version");
    RunState st;
    st.t = static_cast<int>(r_u64());
    st.seed = r_u64();
    std::size_t n_seg = r_u64();
    for (std::size_t i = 0; i < n_seg; ++i) {
        ParamSegment s;
        s.name.resize(r_u64());
        f.read(s.name.data(), static_cast<std::streamsize>(s.name.size()));
        s.offset = r_u64();
        s.length = r_u64();
        st.student.layout.push_back(std::move(s));
    }
    st.student.values = r_vec();
    if (r_u64()) {
        ParameterVector t;
        t.layout = st.student.layout;
        t.values = r_vec();
        st.teacher = std::move(t);
    }
    st.momentum_buf = r_vec();
    if (!f) throw DataError("truncated checkpoint: " + path.string());
    return st;
}

// ---------------------------------------------------------------------------
// One training iteration.
// ---------------------------------------------------------------------------

inline TelemetryRecord train_step(RunState& state, const Scene& labeled, const Scene* unlabeled,
                                  const TrainConfig& cfg) {
    const int t = state.t;
    const SegmenterConfig& seg = cfg.segmenter;
    TelemetryRecord rec;
    rec.t = t;
    rec.lr = cfg.learning_rate(t);
    rec.lambda = t >= cfg.warmup_iters ? lambda_schedule(t, cfg.total_iters) : 0.0;

    ParameterVector grads = make_parameter_vector(seg);
    SupervisedLoss sup = supervised_loss(seg, state.student, labeled, &grads);
    rec.l_sup = sup.total;
    rec.l_cls = sup.cls;
    rec.l_reg = sup.reg;
    rec.l_seg = sup.seg;

    const bool unsupervised_phase = t >= cfg.warmup_iters && state.teacher.has_value() &&
                                    unlabeled != nullptr && rec.lambda > 0.0;
    if (unsupervised_phase) {
        const ParameterVector& teacher = *state.teacher;
        // teacher proposals on the clean unlabeled image, shared everywhere
        FeaturePyramid t_pyr = extract_features(seg, teacher, unlabeled->image);
        ProposalBatch proposals = propose(seg, teacher, t_pyr);

        ViewSet views = make_views(unlabeled->image, cfg.k_teacher_views, cfg.l_student_views,
                                   derive_seed(state.seed, "views", static_cast<std::uint64_t>(t)),
                                   cfg.augment);

        // K teacher views -> ensemble, sharpen, variance, mining
        std::vector<std::vector<ClassDistribution>> teacher_dists;
        for (const auto& view : views.teacher_views)
            teacher_dists.push_back(classify_boxes(
                seg, teacher, view.image, map_boxes(view.record, proposals.boxes, seg.width)));
        PseudoLabelSet pseudo = make_pseudo_labels(teacher_dists, proposals, cfg.temperature);
        MinedSelection mined = mine_samples(pseudo);
        rec.s_foreground = mined.s_foreground;
        rec.kept = static_cast<int>(mined.kept_indices.size());

        if (cfg.ablation != Ablation::no_psm && !mined.kept_indices.empty()) {
            std::vector<Box> kept_boxes;
            std::vector<ClassDistribution> targets;
            std::vector<int> hard;
            for (std::size_t idx : mined.kept_indices) {
                kept_boxes.push_back(proposals.boxes[idx]);
                targets.push_back(pseudo.sharpened_dist[idx]);
                hard.push_back(pseudo.hard_label[idx]);
            }
            std::vector<StudentPsmView> sviews;
            for (const auto& view : views.student_views)
                sviews.push_back(
                    StudentPsmView{view.image, map_boxes(view.record, kept_boxes, seg.width)});
            rec.l_psm = psm_loss_student(seg, state.student, sviews, targets, hard, cfg.psm_weights,
                                         &grads, rec.lambda);
        }

        if (cfg.ablation != Ablation::no_mgd) {
            // teacher masks for the kept foreground proposals drive the
            // semantic masks; features distilled on the clean unlabeled image
            std::vector<TeacherMaskedBox> fg;
            for (std::size_t idx : mined.kept_indices)
                if (pseudo.hard_label[idx] != kBackground) {
                    auto patch = roi_extract(seg, t_pyr, proposals.boxes[idx]);
                    fg.push_back(TeacherMaskedBox{proposals.boxes[idx],
                                                  segment(seg, teacher, patch)});
                }
            std::vector<Mask> masks = semantic_mask(seg, fg);
            FeaturePyramid teacher_adapted = adapt(seg, teacher, t_pyr);
            rec.l_mgd = mgd_loss_student(seg, state.student, unlabeled->image, teacher_adapted,
                                         masks, &grads, rec.lambda * cfg.gamma);
        }
    }

    rec.total = rec.l_sup + rec.lambda * (rec.l_psm + cfg.gamma * rec.l_mgd);
    if (!std::isfinite(rec.total))
        throw NumericalError("train_step: non-finite loss at t=" + std::to_string(t) +
                             " sup=" + std::to_string(rec.l_sup) + " psm=" + std::to_string(rec.l_psm) +
                             " mgd=" + std::to_string(rec.l_mgd));

    // SGD with momentum
    for (std::size_t i = 0; i < state.student.values.size(); ++i) {
        state.momentum_buf[i] = cfg.momentum * state.momentum_buf[i] - rec.lr * grads.values[i];
        state.student.values[i] += state.momentum_buf[i];
    }

    state.t = t + 1;
    if (state.t == cfg.teacher_init_iter) {
        state.teacher = state.student;  // teacher born as an exact copy
    } else if (state.t > cfg.teacher_init_iter && state.teacher) {
        rec.alpha = alpha_schedule(state.t);
        ema_update(*state.teacher, state.student, rec.alpha);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Full run.
// ---------------------------------------------------------------------------

struct RunResult {
    RunState final_state;
    MetricReport report;
    std::filesystem::path checkpoint_path;
    std::filesystem::path telemetry_path;
};

// Evaluation on freshly generated held-out scenes (never in the manifest).
inline MetricReport evaluate_params(const TrainConfig& cfg, const ParameterVector& params,
                                    const GeneratorConfig& gen) {
    std::vector<InstanceSet> preds, gts;
    for (int i = 0; i < cfg.eval_scenes; ++i) {
        Scene s = generate_scene(derive_seed(cfg.seed, "heldout_eval", static_cast<std::uint64_t>(i)),
                                 gen);
        preds.push_back(predictions_to_instance_set(predict(cfg.segmenter, params, s.image)));
        gts.push_back(scene_to_instance_set(s));
    }
    return evaluate(preds, gts);
}

inline RunResult run_training(const TrainConfig& cfg, const DatasetManifest& manifest, TrainMode mode,
                              const std::filesystem::path& out_dir,
                              const std::vector<std::string>* labeled_subset = nullptr) {
    cfg.validate();
    const std::vector<std::string>& labeled_ids =
        labeled_subset ? *labeled_subset : manifest.labeled_ids;
    if (labeled_ids.empty()) throw DataError("run_training: no labeled scenes");

    std::vector<Scene> labeled;
    for (const auto& id : labeled_ids) labeled.push_back(load_scene(manifest, id));
    std::vector<Scene> unlabeled;
    if (mode == TrainMode::mmt_psm)
        for (const auto& id : manifest.unlabeled_ids) unlabeled.push_back(load_scene(manifest, id));

    std::filesystem::create_directories(out_dir);
    std::ofstream telemetry(out_dir / "telemetry.jsonl");
    if (!telemetry) throw DataError("cannot write telemetry");

    RunState state = make_run_state(cfg);
    while (state.t < cfg.total_iters) {
        const Scene& lab =
            labeled[derive_seed(state.seed, "pick_labeled", static_cast<std::uint64_t>(state.t)) %
                    labeled.size()];
        const Scene* unlab = nullptr;
        if (!unlabeled.empty())
            unlab = &unlabeled[derive_seed(state.seed, "pick_unlabeled",
                                           static_cast<std::uint64_t>(state.t)) %
                               unlabeled.size()];
        TelemetryRecord rec = train_step(state, lab, unlab, cfg);
        telemetry << to_json(rec).dump() << "\n";
        if (cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0)
            save_checkpoint(out_dir / ("checkpoint_" + std::to_string(state.t) + ".bin"), state);
    }
    telemetry.flush();

    RunResult res;
    res.checkpoint_path = out_dir / "checkpoint_final.bin";
    save_checkpoint(res.checkpoint_path, state);
    res.telemetry_path = out_dir / "telemetry.jsonl";
    res.report = evaluate_params(cfg, state.student, manifest.generator_config);
    res.final_state = std::move(state);
    return res;
}

// ---------------------------------------------------------------------------
// Gradient audit: analytic vs central finite differences on a fixed scene.
// ---------------------------------------------------------------------------

struct GradientAuditEntry {
    std::string loss_name;
    double max_rel_error = 0.0;
    int coords_checked = 0;
};

struct GradientAuditReport {
    std::vector<GradientAuditEntry> entries;
    double max_rel_error() const {
        double m = 0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
};

inline nlohmann::ordered_json to_json(const GradientAuditReport& r) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& e : r.entries)
        arr.push_back({{"loss", e.loss_name},
                       {"max_rel_error", e.max_rel_error},
                       {"coords_checked", e.coords_checked}});
    return arr;
}

namespace detail {

inline double rel_error(double analytic, double numeric) {
    double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

inline GradientAuditEntry audit_one(const std::string& name, ParameterVector params,
                                    const std::function<double(const ParameterVector&,
                                                               ParameterVector*)>& loss_fn,
                                    int n_coords, std::uint64_t seed, double step = 1e-4) {
    ParameterVector grads = params;
    std::fill(grads.values.begin(), grads.values.end(), 0.0);
    loss_fn(params, &grads);

    // prefer coordinates with nonzero analytic gradient so the check is
    // informative; fall back to uniform draws
    Rng rng(seed);
    GradientAuditEntry entry;
    entry.loss_name = name;
    int tried = 0;
    while (entry.coords_checked < n_coords && tried < n_coords * 50) {
        std::size_t i = rng.uniform_index(params.values.size());
        ++tried;
        if (grads.values[i] == 0.0 && tried < n_coords * 25) continue;
        double saved = params.values[i];
        params.values[i] = saved + step;
        double up = loss_fn(params, nullptr);
        params.values[i] = saved - step;
        double down = loss_fn(params, nullptr);
        params.values[i] = saved;
        double numeric = (up - down) / (2.0 * step);
        entry.max_rel_error = std::max(entry.max_rel_error, rel_error(grads.values[i], numeric));
        ++entry.coords_checked;
    }
    return entry;
}

}  // namespace detail

inline GradientAuditReport gradient_audit(const TrainConfig& cfg, int n_coords = 20) {
    const SegmenterConfig& seg = cfg.segmenter;
    GeneratorConfig gen;
    gen.height = seg.height;
    gen.width = seg.width;
    Scene scene = generate_scene(derive_seed(cfg.seed, "audit_scene"), gen);

    ParameterVector params = init_params(seg, derive_seed(cfg.seed, "audit_init"));
    FeaturePyramid pyr = extract_features(seg, params, scene.image);
    ProposalBatch props = propose(seg, params, pyr);

    GradientAuditReport report;
    auto add = [&](const std::string& name,
                   std::function<double(const ParameterVector&, ParameterVector*)> fn) {
        report.entries.push_back(detail::audit_one(
            name, params, fn, n_coords, derive_seed(cfg.seed, "audit", report.entries.size())));
    };

    auto add_sup = [&](const std::string& name, SupComponents comp) {
        add(name, [&, comp](const ParameterVector& p, ParameterVector* g) {
            SupervisedLoss l = supervised_loss_at(seg, p, scene, props, g, comp);
            return l.cls + l.reg + l.seg;
        });
    };
    add_sup("l_cls", SupComponents{true, false, false});
    add_sup("l_reg", SupComponents{false, true, false});
    add_sup("l_seg", SupComponents{false, false, true});

    // L_psm and L_mgd: teacher quantities fixed, student differentiated
    {
        ParameterVector teacher = init_params(seg, derive_seed(cfg.seed, "audit_teacher"));
        FeaturePyramid tp = extract_features(seg, teacher, scene.image);
        ProposalBatch tprops = propose(seg, teacher, tp);
        ViewSet views = make_views(scene.image, 2, 2, derive_seed(cfg.seed, "audit_views"),
                                   cfg.augment);
        std::vector<std::vector<ClassDistribution>> tdists;
        for (const auto& v : views.teacher_views)
            tdists.push_back(
                classify_boxes(seg, teacher, v.image, map_boxes(v.record, tprops.boxes, seg.width)));
        PseudoLabelSet pseudo = make_pseudo_labels(tdists, tprops, cfg.temperature);
        MinedSelection mined = mine_samples(pseudo);
        auto kept = mined.kept_indices;
        if (kept.empty()) for (std::size_t i = 0; i < std::min<std::size_t>(4, tprops.boxes.size()); ++i) kept.push_back(i);
        std::vector<Box> kept_boxes;
        std::vector<ClassDistribution> targets;
        std::vector<int> hard;
        for (std::size_t idx : kept) {
            kept_boxes.push_back(tprops.boxes[idx]);
            targets.push_back(pseudo.sharpened_dist[idx]);
            hard.push_back(pseudo.hard_label[idx]);
        }
        std::vector<StudentPsmView> sviews;
        for (const auto& v : views.student_views)
            sviews.push_back(StudentPsmView{v.image, map_boxes(v.record, kept_boxes, seg.width)});
        add("l_psm", [&, sviews, targets, hard](const ParameterVector& p, ParameterVector* g) {
            return psm_loss_student(seg, p, sviews, targets, hard, cfg.psm_weights, g, 1.0);
        });

        // L_mgd with the same teacher
        std::vector<TeacherMaskedBox> fg;
        for (std::size_t idx : kept)
            fg.push_back(TeacherMaskedBox{tprops.boxes[idx],
                                          segment(seg, teacher, roi_extract(seg, tp, tprops.boxes[idx]))});
        std::vector<Mask> masks = semantic_mask(seg, fg);
        // guarantee a nonzero mask so the loss is not trivially flat
        if (masks[0].area() == 0)
            for (auto& m : masks)
                for (int y = 0; y < std::min(4, m.h); ++y)
                    for (int x = 0; x < std::min(4, m.w); ++x) m.at(y, x) = 1;
        FeaturePyramid teacher_adapted = adapt(seg, teacher, tp);
        add("l_mgd", [&, masks, teacher_adapted](const ParameterVector& p, ParameterVector* g) {
            return mgd_loss_student(seg, p, scene.image, teacher_adapted, masks, g, 1.0);
        });
    }

    return report;
}

}  // namespace mmtpsm
