#include "doctest.h"

#include "mmtpsm/distill.hpp"
#include "mmtpsm/synth.hpp"

using namespace mmtpsm;

namespace {

ClassDistribution dist(std::initializer_list<double> p) { return ClassDistribution{p}; }

std::vector<ClassDistribution> random_dists(std::size_t n, std::uint64_t seed, int c = 3) {
    Rng r(seed);
    std::vector<ClassDistribution> out(n);
    for (auto& d : out) {
        d.probs.resize(c);
        double sum = 0;
        for (auto& p : d.probs) {
            p = r.uniform(1e-4, 1.0);
            sum += p;
        }
        for (auto& p : d.probs) p /= sum;
    }
    return out;
}

double entropy(const ClassDistribution& d) {
    double h = 0;
    for (double p : d.probs)
        if (p > 0) h -= p * std::log(p);
    return h;
}

}  // namespace

TEST_CASE("ema_update endpoints and formula") {
    SegmenterConfig cfg;
    auto teacher = make_parameter_vector(cfg);
    auto student = init_params(cfg, 1);

    SUBCASE("alpha=0 copies the student") {
        ema_update(teacher, student, 0.0);
        CHECK(teacher.values == student.values);
    }
    SUBCASE("alpha=1 leaves the teacher unchanged") {
        auto before = teacher.values;
        ema_update(teacher, student, 1.0);
        CHECK(teacher.values == before);
    }
    SUBCASE("scalar case 0.99") {
        teacher.values.assign(teacher.values.size(), 1.0);
        auto zero = student;
        zero.values.assign(zero.values.size(), 0.0);
        ema_update(teacher, zero, 0.99);
        for (double v : teacher.values) CHECK(v == doctest::Approx(0.99).epsilon(1e-15));
    }
    SUBCASE("invalid inputs") {
        CHECK_THROWS(ema_update(teacher, student, 1.5));
        SegmenterConfig other;
        other.c1 = 4;
        auto mismatched = make_parameter_vector(other);
        CHECK_THROWS(ema_update(mismatched, student, 0.5));
    }
}

TEST_CASE("ema geometric convergence with a frozen student") {
    SegmenterConfig cfg;
    auto student = init_params(cfg, 2);
    for (double alpha : {0.5, 0.9, 0.99}) {
        auto teacher = init_params(cfg, 3);
        double gap0 = 0;
        for (std::size_t i = 0; i < teacher.values.size(); ++i)
            gap0 = std::max(gap0, std::fabs(teacher.values[i] - student.values[i]));
        const int n = 50;
        for (int k = 0; k < n; ++k) ema_update(teacher, student, alpha);
        double gap = 0;
        for (std::size_t i = 0; i < teacher.values.size(); ++i)
            gap = std::max(gap, std::fabs(teacher.values[i] - student.values[i]));
        CHECK(std::fabs(gap - std::pow(alpha, n) * gap0) <= 1e-12);
    }
}

TEST_CASE("alpha schedule values") {
    CHECK(alpha_schedule(991) == doctest::Approx(0.0));
    CHECK(alpha_schedule(1090) == doctest::Approx(0.99));
    CHECK(alpha_schedule(10000) == doctest::Approx(0.99));
    CHECK_THROWS(alpha_schedule(990));
}

TEST_CASE("ensemble pseudo-label averaging") {
    SUBCASE("identical views") {
        auto views = std::vector<std::vector<ClassDistribution>>{
            {dist({0.2, 0.5, 0.3})}, {dist({0.2, 0.5, 0.3})}};
        auto mean = ensemble_pseudo_label(views);
        CHECK(mean[0].probs[1] == doctest::Approx(0.5));
    }
    SUBCASE("hand average of two one-hots") {
        auto views = std::vector<std::vector<ClassDistribution>>{
            {dist({1, 0, 0})}, {dist({0, 1, 0})}};
        auto mean = ensemble_pseudo_label(views);
        CHECK(mean[0].probs[0] == doctest::Approx(0.5));
        CHECK(mean[0].probs[1] == doctest::Approx(0.5));
        CHECK(mean[0].probs[2] == doctest::Approx(0.0));
    }
    SUBCASE("mean of valid distributions sums to one") {
        std::vector<std::vector<ClassDistribution>> views;
        for (int k = 0; k < 5; ++k) views.push_back(random_dists(7, 10 + k));
        auto mean = ensemble_pseudo_label(views);
        for (const auto& d : mean) {
            double sum = 0;
            for (double p : d.probs) sum += p;
            CHECK(std::fabs(sum - 1.0) <= 1e-12);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS(ensemble_pseudo_label({{dist({1, 0})}}));
        CHECK_THROWS(ensemble_pseudo_label({{dist({1, 0})}, {}}));
    }
}

TEST_CASE("sharpen formula and properties") {
    SUBCASE("uniform stays uniform") {
        auto out = sharpen(dist({1.0 / 3, 1.0 / 3, 1.0 / 3}), 0.5);
        for (double p : out.probs) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
    SUBCASE("temperature one is the identity") {
        auto d = dist({0.2, 0.5, 0.3});
        auto out = sharpen(d, 1.0);
        for (int j = 0; j < 3; ++j) CHECK(out.probs[j] == doctest::Approx(d.probs[j]).epsilon(1e-12));
    }
    SUBCASE("hand evaluation at temperature 0.5") {
        auto out = sharpen(dist({0.64, 0.36}), 0.5);
        CHECK(out.probs[0] == doctest::Approx(0.8 / 1.4).epsilon(1e-12));
        CHECK(out.probs[1] == doctest::Approx(0.6 / 1.4).epsilon(1e-12));
    }
    SUBCASE("argmax preserved on random distributions") {
        for (std::uint64_t s = 0; s < 200; ++s) {
            auto d = random_dists(1, s)[0];
            CHECK(sharpen(d, 0.5).arg_max() == d.arg_max());
        }
    }
    SUBCASE("temperature 0.5 never decreases entropy") {
        // exponent t < 1 flattens toward uniform, as the worked example shows
        for (std::uint64_t s = 0; s < 200; ++s) {
            auto d = random_dists(1, 1000 + s)[0];
            CHECK(entropy(sharpen(d, 0.5)) >= entropy(d) - 1e-12);
        }
    }
    SUBCASE("invalid temperature") { CHECK_THROWS(sharpen(dist({1, 0}), 0.0)); }
}

TEST_CASE("perturbation variance") {
    SUBCASE("identical views give zero") {
        std::vector<std::vector<ClassDistribution>> views{{dist({0.3, 0.7})}, {dist({0.3, 0.7})}};
        auto mean = ensemble_pseudo_label(views);
        CHECK(perturbation_variance(views, mean)[0] == doctest::Approx(0.0));
    }
    SUBCASE("hand case: opposite one-hots") {
        std::vector<std::vector<ClassDistribution>> views{{dist({1, 0})}, {dist({0, 1})}};
        auto mean = ensemble_pseudo_label(views);
        CHECK(perturbation_variance(views, mean)[0] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("invariant under view permutation") {
        std::vector<std::vector<ClassDistribution>> views;
        for (int k = 0; k < 4; ++k) views.push_back(random_dists(5, 40 + k));
        auto mean = ensemble_pseudo_label(views);
        auto v1 = perturbation_variance(views, mean);
        std::swap(views[0], views[3]);
        std::swap(views[1], views[2]);
        auto v2 = perturbation_variance(views, ensemble_pseudo_label(views));
        for (std::size_t i = 0; i < v1.size(); ++i)
            CHECK(v1[i] == doctest::Approx(v2[i]).epsilon(1e-12));
    }
    SUBCASE("zero iff all views equal") {
        // forward direction covered above; reverse: nonzero when views differ
        std::vector<std::vector<ClassDistribution>> views{{dist({0.6, 0.4})}, {dist({0.5, 0.5})}};
        auto mean = ensemble_pseudo_label(views);
        CHECK(perturbation_variance(views, mean)[0] > 0.0);
    }
    SUBCASE("K < 2 rejected") {
        std::vector<std::vector<ClassDistribution>> one{{dist({1, 0})}};
        CHECK_THROWS(perturbation_variance(one, {dist({1, 0})}));
    }
}

TEST_CASE("mine_samples") {
    auto make_pseudo = [](std::vector<int> hard, std::vector<double> var) {
        PseudoLabelSet p;
        p.hard_label = std::move(hard);
        p.variance = std::move(var);
        p.mean_dist.resize(p.hard_label.size());
        p.sharpened_dist.resize(p.hard_label.size());
        return p;
    };

    SUBCASE("all foreground kept, no background") {
        auto sel = mine_samples(make_pseudo({1, 2, 1}, {0.1, 0.2, 0.3}));
        CHECK(sel.s_foreground == 3);
        CHECK(sel.kept_indices == std::vector<std::size_t>{0, 1, 2});
    }
    SUBCASE("zero foreground keeps nothing") {
        auto sel = mine_samples(make_pseudo({0, 0, 0}, {0.5, 0.4, 0.3}));
        CHECK(sel.s_foreground == 0);
        CHECK(sel.kept_indices.empty());
    }
    SUBCASE("top-s background by variance") {
        // 2 foreground + 5 background with variances .1 .4 .2 .3 .05
        auto sel = mine_samples(
            make_pseudo({1, 0, 0, 2, 0, 0, 0}, {0.0, 0.1, 0.4, 0.0, 0.2, 0.3, 0.05}));
        CHECK(sel.s_foreground == 2);
        // background indices 2 (var .4) and 5 (var .3) kept
        CHECK(sel.kept_indices == std::vector<std::size_t>{0, 2, 3, 5});
    }
    SUBCASE("variance ties break by lower index") {
        auto sel = mine_samples(make_pseudo({1, 0, 0}, {0.0, 0.2, 0.2}));
        CHECK(sel.kept_indices == std::vector<std::size_t>{0, 1});
    }
}

TEST_CASE("psm loss hand values") {
    PsmClassWeights w;
    SUBCASE("matching one-hot costs zero") {
        std::vector<std::vector<ClassDistribution>> student{{dist({0, 1, 0})}};
        std::vector<ClassDistribution> targets{dist({0, 1, 0})};
        CHECK(psm_loss_value(student, targets, {1}, w) == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("uniform prediction vs foreground one-hot costs ln 3") {
        std::vector<std::vector<ClassDistribution>> student{
            {dist({1.0 / 3, 1.0 / 3, 1.0 / 3})}};
        std::vector<ClassDistribution> targets{dist({0, 1, 0})};
        CHECK(psm_loss_value(student, targets, {1}, w) ==
              doctest::Approx(std::log(3.0)).epsilon(1e-12));
    }
    SUBCASE("background one-hot carries weight 1.5") {
        std::vector<std::vector<ClassDistribution>> student{
            {dist({1.0 / 3, 1.0 / 3, 1.0 / 3})}};
        std::vector<ClassDistribution> targets{dist({1, 0, 0})};
        CHECK(psm_loss_value(student, targets, {0}, w) ==
              doctest::Approx(1.5 * std::log(3.0)).epsilon(1e-12));
    }
    SUBCASE("mismatched proposal sets rejected") {
        std::vector<std::vector<ClassDistribution>> student{{dist({1, 0, 0}), dist({1, 0, 0})}};
        std::vector<ClassDistribution> targets{dist({1, 0, 0})};
        CHECK_THROWS(psm_loss_value(student, targets, {0}, w));
    }
}

TEST_CASE("semantic mask construction") {
    SegmenterConfig cfg;
    SUBCASE("no foreground gives all-zero masks") {
        auto masks = semantic_mask(cfg, {});
        CHECK(masks.size() == 2);
        for (const auto& m : masks) CHECK(m.area() == 0);
    }
    SUBCASE("full-image all-ones box gives all-ones masks") {
        TeacherMaskedBox b;
        b.box = Box{0, 0, 96, 96};
        b.mask_probs.assign(cfg.mask_size * cfg.mask_size, 1.0);
        auto masks = semantic_mask(cfg, {b});
        for (const auto& m : masks) CHECK(m.area() == m.v.size());
    }
    SUBCASE("8x8 box at origin, stride 4 stage: exactly the 2x2 corner") {
        TeacherMaskedBox b;
        b.box = Box{0, 0, 8, 8};
        b.mask_probs.assign(cfg.mask_size * cfg.mask_size, 1.0);
        auto masks = semantic_mask(cfg, {b});
        const Mask& s0 = masks[0];  // stride 4
        CHECK(s0.area() == 4);
        CHECK(s0.at(0, 0));
        CHECK(s0.at(0, 1));
        CHECK(s0.at(1, 0));
        CHECK(s0.at(1, 1));
    }
}

TEST_CASE("mgd loss") {
    auto make_pyr = [](int c, int h, int w, double fill) {
        FeaturePyramid p;
        p.strides = {4};
        p.stages.push_back(FeatureMap(c, h, w));
        for (auto& v : p.stages[0].v) v = fill;
        return p;
    };

    SUBCASE("equal features cost zero") {
        auto t = make_pyr(2, 3, 3, 0.5);
        auto s = make_pyr(2, 3, 3, 0.5);
        std::vector<Mask> masks(1, Mask(3, 3));
        masks[0].at(1, 1) = 1;
        CHECK(mgd_loss(t, s, masks) == doctest::Approx(0.0));
    }
    SUBCASE("all-zero mask costs zero") {
        auto t = make_pyr(2, 3, 3, 1.0);
        auto s = make_pyr(2, 3, 3, 0.0);
        std::vector<Mask> masks(1, Mask(3, 3));
        CHECK(mgd_loss(t, s, masks) == doctest::Approx(0.0));
    }
    SUBCASE("hand case: one masked cell, diff (1,2), T=1, C=2") {
        auto t = make_pyr(2, 3, 3, 0.0);
        auto s = make_pyr(2, 3, 3, 0.0);
        t.stages[0].at(0, 1, 1) = 1.0;
        t.stages[0].at(1, 1, 1) = 2.0;
        std::vector<Mask> masks(1, Mask(3, 3));
        masks[0].at(1, 1) = 1;
        CHECK(mgd_loss(t, s, masks) == doctest::Approx(2.5).epsilon(1e-12));
    }
    SUBCASE("invariant to feature changes where the mask is zero") {
        auto t = make_pyr(2, 4, 4, 0.3);
        auto s = make_pyr(2, 4, 4, 0.9);
        std::vector<Mask> masks(1, Mask(4, 4));
        masks[0].at(2, 2) = 1;
        double base = mgd_loss(t, s, masks);
        Rng r(6);
        for (int trial = 0; trial < 20; ++trial) {
            auto s2 = s;
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x)
                    if (!masks[0].at(y, x))
                        for (int c = 0; c < 2; ++c) s2.stages[0].at(c, y, x) = r.uniform(-5, 5);
            CHECK(mgd_loss(t, s2, masks) == base);
        }
    }
    SUBCASE("shape mismatch rejected") {
        auto t = make_pyr(2, 3, 3, 0.0);
        auto s = make_pyr(4, 3, 3, 0.0);
        std::vector<Mask> masks(1, Mask(3, 3));
        CHECK_THROWS(mgd_loss(t, s, masks));
    }
}

TEST_CASE("lambda schedule") {
    CHECK(lambda_schedule(1250, 2000) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lambda_schedule(1000, 2000) == doctest::Approx(std::exp(-5.0)).epsilon(1e-12));
    CHECK(lambda_schedule(1125, 2000) == doctest::Approx(std::exp(-1.25)).epsilon(1e-12));
    CHECK(lambda_schedule(999, 2000) == 0.0);
    CHECK(lambda_schedule(1500, 2000) == 1.0);
    // continuity at the plateau edges
    CHECK(lambda_schedule(1750, 2000) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(lambda_schedule(2000, 2000) == doctest::Approx(std::exp(-12.0)).epsilon(1e-12));
    CHECK_THROWS(lambda_schedule(100, 1000));
}

TEST_CASE("total loss combiner") {
    CHECK(total_loss(1.0, 5.0, 5.0, 500, 2000) == 1.0);  // warmup: exactly l_sup
    CHECK(total_loss(1.0, 0.2, 0.1, 1250, 2000, 5.0) == doctest::Approx(1.7).epsilon(1e-12));
    for (int t : {0, 500, 1100, 1600, 1999})
        CHECK(total_loss(0.7, 0.0, 0.0, t, 2000) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK_THROWS(total_loss(std::numeric_limits<double>::quiet_NaN(), 0, 0, 10, 2000));
    CHECK_THROWS(total_loss(1, 0, 0, 10, 2000, -1.0));
}

TEST_CASE("psm and mgd student gradients match finite differences") {
    SegmenterConfig cfg;
    cfg.height = cfg.width = 96;
    auto student = init_params(cfg, 11);
    auto teacher = init_params(cfg, 12);
    GeneratorConfig gen;
    Scene scene = generate_scene(9, gen);

    auto t_pyr = extract_features(cfg, teacher, scene.image);
    auto props = propose(cfg, teacher, t_pyr);
    std::vector<Box> boxes(props.boxes.begin(), props.boxes.begin() + 6);

    auto rel = [](double a, double b) {
        return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
    };
    const double step = 1e-4;

    SUBCASE("psm") {
        auto targets = random_dists(boxes.size(), 21);
        std::vector<int> hard;
        for (const auto& d : targets) hard.push_back(d.arg_max());
        std::vector<StudentPsmView> views{{scene.image, boxes}};
        PsmClassWeights w;

        ParameterVector grads = make_parameter_vector(cfg);
        psm_loss_student(cfg, student, views, targets, hard, w, &grads);
        Rng pick(31);
        int checked = 0;
        while (checked < 20) {
            std::size_t i = pick.uniform_index(student.values.size());
            if (grads.values[i] == 0.0) continue;
            double saved = student.values[i];
            student.values[i] = saved + step;
            double up = psm_loss_student(cfg, student, views, targets, hard, w);
            student.values[i] = saved - step;
            double down = psm_loss_student(cfg, student, views, targets, hard, w);
            student.values[i] = saved;
            CHECK(rel(grads.values[i], (up - down) / (2 * step)) <= 1e-4);
            ++checked;
        }
    }

    SUBCASE("mgd") {
        std::vector<TeacherMaskedBox> fg;
        for (const auto& b : boxes)
            fg.push_back(TeacherMaskedBox{b, segment(cfg, teacher, roi_extract(cfg, t_pyr, b))});
        auto masks = semantic_mask(cfg, fg);
        if (masks[0].area() == 0) masks[0].at(3, 3) = 1;
        if (masks[1].area() == 0) masks[1].at(1, 1) = 1;
        auto teacher_adapted = adapt(cfg, teacher, t_pyr);

        ParameterVector grads = make_parameter_vector(cfg);
        mgd_loss_student(cfg, student, scene.image, teacher_adapted, masks, &grads);
        Rng pick(41);
        int checked = 0;
        while (checked < 20) {
            std::size_t i = pick.uniform_index(student.values.size());
            if (grads.values[i] == 0.0) continue;
            double saved = student.values[i];
            student.values[i] = saved + step;
            double up = mgd_loss_student(cfg, student, scene.image, teacher_adapted, masks);
            student.values[i] = saved - step;
            double down = mgd_loss_student(cfg, student, scene.image, teacher_adapted, masks);
            student.values[i] = saved;
            CHECK(rel(grads.values[i], (up - down) / (2 * step)) <= 1e-4);
            ++checked;
        }
    }
}
