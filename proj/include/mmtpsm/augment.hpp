#pragma once

// Stochastic augmentor: brightness / contrast / hue jitter, random erasing,
// horizontal flip. Every draw is recorded in a TransformRecord so a view can
// be reproduced exactly and geometry can be mapped between original and
// augmented coordinates.

#include <optional>
#include <vector>

#include "json.hpp"

#include "mmtpsm/core.hpp"

namespace mmtpsm {

struct AugmentConfig {
    double brightness_lo = -0.15, brightness_hi = 0.15;
    double contrast_lo = 0.80, contrast_hi = 1.25;
    double hue_lo_deg = -18.0, hue_hi_deg = 18.0;
    double erase_prob = 0.5;
    double erase_area_lo = 0.02, erase_area_hi = 0.20;
    double flip_prob = 0.5;

    static AugmentConfig identity() {
        AugmentConfig c;
        c.brightness_lo = c.brightness_hi = 0.0;
        c.contrast_lo = c.contrast_hi = 1.0;
        c.hue_lo_deg = c.hue_hi_deg = 0.0;
        c.erase_prob = 0.0;
        c.flip_prob = 0.0;
        return c;
    }
};

struct TransformRecord {
    double brightness_delta = 0.0;
    double contrast_factor = 1.0;
    double hue_shift_deg = 0.0;
    std::optional<Box> erase_box;
    std::uint64_t erase_seed = 0;  // noise fill for the erased region
    bool flipped = false;

    bool is_identity() const {
        return brightness_delta == 0.0 && contrast_factor == 1.0 && hue_shift_deg == 0.0 &&
               !erase_box.has_value() && !flipped;
    }
};

inline nlohmann::ordered_json to_json(const TransformRecord& r) {
    nlohmann::ordered_json j;
    j["brightness_delta"] = r.brightness_delta;
    j["contrast_factor"] = r.contrast_factor;
    j["hue_shift_deg"] = r.hue_shift_deg;
    if (r.erase_box) {
        j["erase_box"] = {r.erase_box->x0, r.erase_box->y0, r.erase_box->x1, r.erase_box->y1};
        j["erase_seed"] = r.erase_seed;
    } else {
        j["erase_box"] = nullptr;
    }
    j["flipped"] = r.flipped;
    return j;
}

inline TransformRecord transform_record_from_json(const nlohmann::json& j) {
    TransformRecord r;
    r.brightness_delta = j.at("brightness_delta").get<double>();
    r.contrast_factor = j.at("contrast_factor").get<double>();
    r.hue_shift_deg = j.at("hue_shift_deg").get<double>();
    if (!j.at("erase_box").is_null()) {
        auto b = j.at("erase_box");
        r.erase_box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                          b.at(3).get<double>()};
        r.erase_seed = j.at("erase_seed").get<std::uint64_t>();
    }
    r.flipped = j.at("flipped").get<bool>();
    return r;
}

// Draws one transform. The erase box is sampled in image coordinates, so the
// image size is part of the draw.
inline TransformRecord sample_transform(std::uint64_t seed, const AugmentConfig& cfg, int h, int w) {
    Rng rng(derive_seed(seed, "transform"));
    TransformRecord r;
    r.brightness_delta = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
    r.contrast_factor = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
    r.hue_shift_deg = rng.uniform(cfg.hue_lo_deg, cfg.hue_hi_deg);
    if (rng.bernoulli(cfg.erase_prob)) {
        double area_frac = rng.uniform(cfg.erase_area_lo, cfg.erase_area_hi);
        double aspect = rng.uniform(0.5, 2.0);
        double target = area_frac * h * w;
        double lo = cfg.erase_area_lo * h * w, hi = cfg.erase_area_hi * h * w;
        int eh = std::clamp(static_cast<int>(std::lround(std::sqrt(target * aspect))), 1, h);
        int ew = std::clamp(static_cast<int>(std::lround(target / eh)), 1, w);
        // keep the integer area inside the configured fraction range
        if (eh * ew < lo) ew = std::min(w, static_cast<int>(std::ceil(lo / eh)));
        if (eh * ew > hi) ew = std::max(1, static_cast<int>(std::floor(hi / eh)));
        int y0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(h - eh + 1)));
        int x0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(w - ew + 1)));
        r.erase_box = Box{static_cast<double>(x0), static_cast<double>(y0),
                          static_cast<double>(x0 + ew), static_cast<double>(y0 + eh)};
        r.erase_seed = rng.next_u64();
    }
    r.flipped = rng.bernoulli(cfg.flip_prob);
    return r;
}

namespace detail {

// RGB <-> HSV, all channels in [0,1], hue in degrees [0,360).
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = 60.0 * ((b - r) / d + 2.0);
    else
        h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0.0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double c = v * s;
    double hp = h / 60.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1)      { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else             { r1 = c; b1 = x; }
    double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

}  // namespace detail

// Applies color ops, then erasing, then flip. Pure function of (image, record).
inline Image apply_transform(const Image& img, const TransformRecord& rec) {
    Image out = img;
    const bool color = rec.brightness_delta != 0.0 || rec.contrast_factor != 1.0 ||
                       rec.hue_shift_deg != 0.0;
    if (color) {
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) {
                double r = out.at(y, x, 0), g = out.at(y, x, 1), b = out.at(y, x, 2);
                if (rec.hue_shift_deg != 0.0) {
                    double h, s, v;
                    detail::rgb_to_hsv(r, g, b, h, s, v);
                    if (s > 0.0) {
                        h = std::fmod(h + rec.hue_shift_deg + 720.0, 360.0);
                        detail::hsv_to_rgb(h, s, v, r, g, b);
                    }
                }
                r = 0.5 + (r - 0.5) * rec.contrast_factor + rec.brightness_delta;
                g = 0.5 + (g - 0.5) * rec.contrast_factor + rec.brightness_delta;
                b = 0.5 + (b - 0.5) * rec.contrast_factor + rec.brightness_delta;
                out.at(y, x, 0) = clamp01(r);
                out.at(y, x, 1) = clamp01(g);
                out.at(y, x, 2) = clamp01(b);
            }
    }
    if (rec.erase_box) {
        Rng noise(rec.erase_seed);
        int ex0 = static_cast<int>(rec.erase_box->x0), ey0 = static_cast<int>(rec.erase_box->y0);
        int ex1 = static_cast<int>(rec.erase_box->x1), ey1 = static_cast<int>(rec.erase_box->y1);
        for (int y = ey0; y < ey1; ++y)
            for (int x = ex0; x < ex1; ++x)
                for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) = noise.uniform();
    }
    if (rec.flipped) {
        Image flipped(out.h, out.w, out.c);
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x)
                for (int ch = 0; ch < out.c; ++ch)
                    flipped.at(y, x, ch) = out.at(y, out.w - 1 - x, ch);
        out = std::move(flipped);
    }
    return out;
}

inline Mask flip_mask(const Mask& m) {
    Mask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) out.at(y, x) = m.at(y, m.w - 1 - x);
    return out;
}

// Maps boxes from original-image coordinates into the view's coordinates.
// Only the flip moves geometry; this map is its own inverse.
inline std::vector<Box> map_boxes(const TransformRecord& rec, const std::vector<Box>& boxes,
                                  int image_width) {
    std::vector<Box> out;
    out.reserve(boxes.size());
    for (const Box& b : boxes) {
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > image_width || b.x0 >= b.x1)
            throw std::invalid_argument("map_boxes: box outside image bounds");
        if (rec.flipped)
            out.push_back(Box{image_width - b.x1, b.y0, image_width - b.x0, b.y1});
        else
            out.push_back(b);
    }
    return out;
}

struct View {
    Image image;
    TransformRecord record;
};

struct ViewSet {
    std::vector<View> teacher_views;  // K >= 2
    std::vector<View> student_views;  // L >= 1
    std::string source_id;
};

inline ViewSet make_views(const Image& img, int k, int l, std::uint64_t seed,
                          const AugmentConfig& cfg, std::string source_id = {}) {
    if (k < 2) throw ConfigError("make_views: K must be >= 2");
    if (l < 1) throw ConfigError("make_views: L must be >= 1");
    ViewSet vs;
    vs.source_id = std::move(source_id);
    for (int i = 0; i < k; ++i) {
        TransformRecord r = sample_transform(derive_seed(seed, "teacher_view", i), cfg, img.h, img.w);
        vs.teacher_views.push_back(View{apply_transform(img, r), r});
    }
    for (int i = 0; i < l; ++i) {
        TransformRecord r = sample_transform(derive_seed(seed, "student_view", i), cfg, img.h, img.w);
        vs.student_views.push_back(View{apply_transform(img, r), r});
    }
    return vs;
}

}  // namespace mmtpsm
