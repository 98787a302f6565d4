#pragma once

// Minimal differentiable two-stage instance segmenter: a two-stage strided
// conv feature extractor, an anchor-grid proposal generator with greedy
// suppression, bilinear RoI extraction, three linear heads (class / box
// revision / mask) and per-stage 1x1 adaptation layers. Forward passes cache
// what the hand-written backward passes need; all math is double precision.

#include <array>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmtpsm/core.hpp"
#include "mmtpsm/synth.hpp"

namespace mmtpsm {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct ParameterVector {
    std::vector<double> values;
    std::vector<ParamSegment> layout;

    std::span<double> seg(std::string_view name) {
        for (const auto& s : layout)
            if (s.name == name) return std::span<double>(values.data() + s.offset, s.length);
        throw std::invalid_argument("unknown parameter segment: " + std::string(name));
    }
    std::span<const double> seg(std::string_view name) const {
        for (const auto& s : layout)
            if (s.name == name) return std::span<const double>(values.data() + s.offset, s.length);
        throw std::invalid_argument("unknown parameter segment: " + std::string(name));
    }

    bool same_layout(const ParameterVector& o) const {
        if (layout.size() != o.layout.size()) return false;
        for (std::size_t i = 0; i < layout.size(); ++i)
            if (layout[i].name != o.layout[i].name || layout[i].offset != o.layout[i].offset ||
                layout[i].length != o.layout[i].length)
                return false;
        return true;
    }
    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

struct SegmenterConfig {
    int height = 96, width = 96;
    int c1 = 8, c2 = 16;        // stage channel counts, both even
    int stride1 = 4, stride2 = 8;  // strides relative to the input image
    int roi_size = 7;           // r
    int mask_size = 14;         // m
    int num_proposals = 64;     // N returned by propose(); 0 keeps every NMS survivor
    double nms_iou = 0.7;
    double anchor1 = 11.0, anchor2 = 28.0;  // one anchor size per stage
    int num_classes = kNumClasses;
    double fg_iou = 0.5, bg_iou = 0.3;  // proposal-to-gt matching

    int stage1_h() const { return (height - 1) / stride1 + 1; }
    int stage1_w() const { return (width - 1) / stride1 + 1; }
    int stage2_h() const { return (stage1_h() - 1) / (stride2 / stride1) + 1; }
    int stage2_w() const { return (stage1_w() - 1) / (stride2 / stride1) + 1; }
    int patch_dim() const { return c1 * roi_size * roi_size; }

    void validate() const {
        if (c1 % 2 || c2 % 2) throw ConfigError("segmenter: channel counts must be even");
        if (stride2 % stride1) throw ConfigError("segmenter: stride2 must be a multiple of stride1");
    }
};

inline ParameterVector make_parameter_vector(const SegmenterConfig& cfg) {
    cfg.validate();
    const int p = cfg.patch_dim();
    const int m2 = cfg.mask_size * cfg.mask_size;
    std::vector<std::pair<std::string, std::size_t>> spec = {
        {"feat.conv1.W", static_cast<std::size_t>(cfg.c1) * 3 * 3 * 3},
        {"feat.conv1.b", static_cast<std::size_t>(cfg.c1)},
        {"feat.conv2.W", static_cast<std::size_t>(cfg.c2) * cfg.c1 * 3 * 3},
        {"feat.conv2.b", static_cast<std::size_t>(cfg.c2)},
        {"rpn.stage1.w", static_cast<std::size_t>(cfg.c1)},
        {"rpn.stage1.b", 1},
        {"rpn.stage2.w", static_cast<std::size_t>(cfg.c2)},
        {"rpn.stage2.b", 1},
        {"head.cls.W", static_cast<std::size_t>(cfg.num_classes) * p},
        {"head.cls.b", static_cast<std::size_t>(cfg.num_classes)},
        {"head.box.W", static_cast<std::size_t>(4) * p},
        {"head.box.b", 4},
        {"head.mask.W", static_cast<std::size_t>(m2) * p},
        {"head.mask.b", static_cast<std::size_t>(m2)},
        {"adapt.stage1.W", static_cast<std::size_t>(cfg.c1 / 2) * cfg.c1},
        {"adapt.stage1.b", static_cast<std::size_t>(cfg.c1 / 2)},
        {"adapt.stage2.W", static_cast<std::size_t>(cfg.c2 / 2) * cfg.c2},
        {"adapt.stage2.b", static_cast<std::size_t>(cfg.c2 / 2)},
    };
    ParameterVector pv;
    std::size_t off = 0;
    for (auto& [name, len] : spec) {
        pv.layout.push_back(ParamSegment{name, off, len});
        off += len;
    }
    pv.values.assign(off, 0.0);
    return pv;
}

// Fan-in scaled uniform init; biases zero.
inline ParameterVector init_params(const SegmenterConfig& cfg, std::uint64_t seed) {
    ParameterVector pv = make_parameter_vector(cfg);
    const int p = cfg.patch_dim();
    std::map<std::string, int> fan_in = {
        {"feat.conv1.W", 27},          {"feat.conv2.W", cfg.c1 * 9},
        {"rpn.stage1.w", cfg.c1},      {"rpn.stage2.w", cfg.c2},
        {"head.cls.W", p},             {"head.box.W", p},
        {"head.mask.W", p},            {"adapt.stage1.W", cfg.c1},
        {"adapt.stage2.W", cfg.c2},
    };
    for (const auto& s : pv.layout) {
        auto it = fan_in.find(s.name);
        if (it == fan_in.end()) continue;  // bias segments stay zero
        double a = 1.0 / std::sqrt(static_cast<double>(it->second));
        Rng rng(derive_seed(seed, s.name));
        for (std::size_t i = 0; i < s.length; ++i) pv.values[s.offset + i] = rng.uniform(-a, a);
    }
    return pv;
}

// ---------------------------------------------------------------------------
// Feature maps
// ---------------------------------------------------------------------------

struct FeatureMap {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    FeatureMap() = default;
    FeatureMap(int c_, int h_, int w_)
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, 0.0) {}

    double& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
};

struct FeaturePyramid {
    std::vector<FeatureMap> stages;
    std::vector<int> strides;
};

namespace nn {

// 3x3 convolution, zero padding 1.
inline void conv3x3(const FeatureMap& in, std::span<const double> W, std::span<const double> b,
                    int stride, FeatureMap& out) {
    for (int oc = 0; oc < out.c; ++oc)
        for (int oy = 0; oy < out.h; ++oy)
            for (int ox = 0; ox < out.w; ++ox) {
                double acc = b[oc];
                for (int ic = 0; ic < in.c; ++ic)
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= in.w) continue;
                            acc += W[((static_cast<std::size_t>(oc) * in.c + ic) * 3 + ky) * 3 + kx] *
                                   in.at(ic, iy, ix);
                        }
                    }
                out.at(oc, oy, ox) = acc;
            }
}

inline void conv3x3_backward(const FeatureMap& in, std::span<const double> W, int stride,
                             const FeatureMap& d_out, FeatureMap* d_in, std::span<double> dW,
                             std::span<double> db) {
    for (int oc = 0; oc < d_out.c; ++oc)
        for (int oy = 0; oy < d_out.h; ++oy)
            for (int ox = 0; ox < d_out.w; ++ox) {
                double g = d_out.at(oc, oy, ox);
                if (g == 0.0) continue;
                db[oc] += g;
                for (int ic = 0; ic < in.c; ++ic)
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= in.w) continue;
                            std::size_t wi =
                                ((static_cast<std::size_t>(oc) * in.c + ic) * 3 + ky) * 3 + kx;
                            dW[wi] += g * in.at(ic, iy, ix);
                            if (d_in) d_in->at(ic, iy, ix) += g * W[wi];
                        }
                    }
            }
}

inline void tanh_inplace(FeatureMap& f) {
    for (auto& x : f.v) x = std::tanh(x);
}

// d(pre-activation) from d(output) given the tanh output y.
inline void tanh_backward(const FeatureMap& y, FeatureMap& d) {
    for (std::size_t i = 0; i < y.v.size(); ++i) d.v[i] *= 1.0 - y.v[i] * y.v[i];
}

inline FeatureMap image_to_map(const Image& img) {
    FeatureMap f(img.c, img.h, img.w);
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) f.at(ch, y, x) = img.at(y, x, ch);
    return f;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Feature extraction (two tanh conv stages, strides 4 and 8 w.r.t. input)
// ---------------------------------------------------------------------------

struct FeatureCache {
    FeatureMap input;  // C x H x W copy of the image
    // stage outputs live in the pyramid; tanh backward only needs outputs
};

inline FeaturePyramid extract_features(const SegmenterConfig& cfg, const ParameterVector& params,
                                       const Image& img, FeatureCache* cache = nullptr) {
    if (img.h != cfg.height || img.w != cfg.width || img.c != 3)
        throw std::invalid_argument("extract_features: image size mismatch");
    FeatureMap in = nn::image_to_map(img);
    FeaturePyramid pyr;
    pyr.strides = {cfg.stride1, cfg.stride2};
    FeatureMap y1(cfg.c1, cfg.stage1_h(), cfg.stage1_w());
    nn::conv3x3(in, params.seg("feat.conv1.W"), params.seg("feat.conv1.b"), cfg.stride1, y1);
    nn::tanh_inplace(y1);
    FeatureMap y2(cfg.c2, cfg.stage2_h(), cfg.stage2_w());
    nn::conv3x3(y1, params.seg("feat.conv2.W"), params.seg("feat.conv2.b"), cfg.stride2 / cfg.stride1,
                y2);
    nn::tanh_inplace(y2);
    pyr.stages.push_back(std::move(y1));
    pyr.stages.push_back(std::move(y2));
    if (cache) cache->input = std::move(in);
    return pyr;
}

// Backpropagates gradients w.r.t. both stage outputs into parameter grads.
// d_y1 / d_y2 may be empty (treated as zero).
inline void backward_features(const SegmenterConfig& cfg, const ParameterVector& params,
                              const FeatureCache& cache, const FeaturePyramid& pyr, FeatureMap d_y1,
                              const FeatureMap& d_y2, ParameterVector& grads) {
    const FeatureMap& y1 = pyr.stages[0];
    const FeatureMap& y2 = pyr.stages[1];
    if (d_y1.v.empty()) d_y1 = FeatureMap(y1.c, y1.h, y1.w);
    if (!d_y2.v.empty()) {
        FeatureMap dz2 = d_y2;
        nn::tanh_backward(y2, dz2);
        nn::conv3x3_backward(y1, params.seg("feat.conv2.W"), cfg.stride2 / cfg.stride1, dz2, &d_y1,
                             grads.seg("feat.conv2.W"), grads.seg("feat.conv2.b"));
    }
    FeatureMap dz1 = std::move(d_y1);
    nn::tanh_backward(y1, dz1);
    nn::conv3x3_backward(cache.input, params.seg("feat.conv1.W"), cfg.stride1, dz1, nullptr,
                         grads.seg("feat.conv1.W"), grads.seg("feat.conv1.b"));
}

// ---------------------------------------------------------------------------
// Proposals: one anchor size per stage on the stage's cell grid, scored by a
// linear map of the cell's feature vector, greedily suppressed at IoU 0.7.
// Ties break by anchor index, so an untrained scorer is still deterministic.
// ---------------------------------------------------------------------------

struct ProposalBatch {
    std::vector<Box> boxes;  // input-image coordinates
};

inline std::vector<Box> anchor_grid(const SegmenterConfig& cfg) {
    std::vector<Box> anchors;
    auto add_stage = [&](int sh, int sw, int stride, double size) {
        for (int i = 0; i < sh; ++i)
            for (int j = 0; j < sw; ++j) {
                double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
                Box b{cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2};
                b.x0 = std::max(0.0, b.x0);
                b.y0 = std::max(0.0, b.y0);
                b.x1 = std::min(static_cast<double>(cfg.width), b.x1);
                b.y1 = std::min(static_cast<double>(cfg.height), b.y1);
                if (b.area() > 0) anchors.push_back(b);
            }
    };
    add_stage(cfg.stage1_h(), cfg.stage1_w(), cfg.stride1, cfg.anchor1);
    add_stage(cfg.stage2_h(), cfg.stage2_w(), cfg.stride2, cfg.anchor2);
    return anchors;
}

inline ProposalBatch propose(const SegmenterConfig& cfg, const ParameterVector& params,
                             const FeaturePyramid& pyr) {
    std::vector<Box> anchors;
    std::vector<double> scores;
    auto score_stage = [&](const FeatureMap& f, int stride, double size, std::string_view wname,
                           std::string_view bname) {
        auto w = params.seg(wname);
        double b0 = params.seg(bname)[0];
        for (int i = 0; i < f.h; ++i)
            for (int j = 0; j < f.w; ++j) {
                double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
                Box b{cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2};
                b.x0 = std::max(0.0, b.x0);
                b.y0 = std::max(0.0, b.y0);
                b.x1 = std::min(static_cast<double>(cfg.width), b.x1);
                b.y1 = std::min(static_cast<double>(cfg.height), b.y1);
                if (b.area() <= 0) continue;
                double s = b0;
                for (int ch = 0; ch < f.c; ++ch) s += w[ch] * f.at(ch, i, j);
                anchors.push_back(b);
                scores.push_back(s);
            }
    };
    score_stage(pyr.stages[0], cfg.stride1, cfg.anchor1, "rpn.stage1.w", "rpn.stage1.b");
    score_stage(pyr.stages[1], cfg.stride2, cfg.anchor2, "rpn.stage2.w", "rpn.stage2.b");

    std::vector<std::size_t> order(anchors.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });

    ProposalBatch out;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (const Box& kept : out.boxes)
            if (box_iou(anchors[idx], kept) > cfg.nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) {
            out.boxes.push_back(anchors[idx]);
            if (cfg.num_proposals > 0 && static_cast<int>(out.boxes.size()) == cfg.num_proposals)
                break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// RoI extraction: r x r bilinear samples at cell centers, from stage 0.
// ---------------------------------------------------------------------------

struct RoiTap {
    int x0, y0, x1, y1;       // clamped neighbor indices
    double fx, fy;            // interpolation fractions
};

struct RoiCache {
    std::vector<RoiTap> taps;  // r*r entries, shared across channels
};

inline std::vector<double> roi_extract(const SegmenterConfig& cfg, const FeaturePyramid& pyr,
                                       const Box& box, RoiCache* cache = nullptr, int stage = 0) {
    if (box.area() <= 0) throw std::invalid_argument("roi_extract: degenerate box");
    const FeatureMap& f = pyr.stages[stage];
    const int stride = pyr.strides[stage];
    const int r = cfg.roi_size;
    std::vector<double> patch(static_cast<std::size_t>(f.c) * r * r, 0.0);
    std::vector<RoiTap> taps;
    taps.reserve(static_cast<std::size_t>(r) * r);
    for (int a = 0; a < r; ++a)
        for (int b = 0; b < r; ++b) {
            double x = box.x0 + (b + 0.5) * box.width() / r;
            double y = box.y0 + (a + 0.5) * box.height() / r;
            double u = std::clamp(x / stride - 0.5, 0.0, static_cast<double>(f.w - 1));
            double v = std::clamp(y / stride - 0.5, 0.0, static_cast<double>(f.h - 1));
            RoiTap t;
            t.x0 = static_cast<int>(std::floor(u));
            t.y0 = static_cast<int>(std::floor(v));
            t.x1 = std::min(t.x0 + 1, f.w - 1);
            t.y1 = std::min(t.y0 + 1, f.h - 1);
            t.fx = u - t.x0;
            t.fy = v - t.y0;
            taps.push_back(t);
        }
    for (int ch = 0; ch < f.c; ++ch)
        for (int i = 0; i < r * r; ++i) {
            const RoiTap& t = taps[i];
            double top = f.at(ch, t.y0, t.x0) * (1 - t.fx) + f.at(ch, t.y0, t.x1) * t.fx;
            double bot = f.at(ch, t.y1, t.x0) * (1 - t.fx) + f.at(ch, t.y1, t.x1) * t.fx;
            patch[static_cast<std::size_t>(ch) * r * r + i] = top * (1 - t.fy) + bot * t.fy;
        }
    if (cache) cache->taps = std::move(taps);
    return patch;
}

inline void roi_backward(const SegmenterConfig& cfg, const RoiCache& cache,
                         std::span<const double> d_patch, FeatureMap& d_stage) {
    const int r = cfg.roi_size;
    for (int ch = 0; ch < d_stage.c; ++ch)
        for (int i = 0; i < r * r; ++i) {
            double g = d_patch[static_cast<std::size_t>(ch) * r * r + i];
            if (g == 0.0) continue;
            const RoiTap& t = cache.taps[i];
            d_stage.at(ch, t.y0, t.x0) += g * (1 - t.fx) * (1 - t.fy);
            d_stage.at(ch, t.y0, t.x1) += g * t.fx * (1 - t.fy);
            d_stage.at(ch, t.y1, t.x0) += g * (1 - t.fx) * t.fy;
            d_stage.at(ch, t.y1, t.x1) += g * t.fx * t.fy;
        }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

struct ClassDistribution {
    std::vector<double> probs;
    int arg_max() const {
        int best = 0;
        for (int i = 1; i < static_cast<int>(probs.size()); ++i)
            if (probs[i] > probs[best]) best = i;  // ties keep the lower class id
        return best;
    }
};

namespace nn {

inline std::vector<double> affine(std::span<const double> W, std::span<const double> b,
                                  std::span<const double> x) {
    const std::size_t n_out = b.size(), n_in = x.size();
    std::vector<double> y(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        double acc = b[i];
        const double* row = W.data() + i * n_in;
        for (std::size_t j = 0; j < n_in; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

// Accumulates dW, db and (optionally) dx from dy.
inline void affine_backward(std::span<const double> W, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dW, std::span<double> db,
                            std::vector<double>* dx) {
    const std::size_t n_out = db.size(), n_in = x.size();
    if (dx && dx->empty()) dx->assign(n_in, 0.0);
    for (std::size_t i = 0; i < n_out; ++i) {
        double g = dy[i];
        if (g == 0.0) continue;
        db[i] += g;
        double* drow = dW.data() + i * n_in;
        const double* row = W.data() + i * n_in;
        for (std::size_t j = 0; j < n_in; ++j) {
            drow[j] += g * x[j];
            if (dx) (*dx)[j] += g * row[j];
        }
    }
}

inline std::vector<double> softmax(std::vector<double> z) {
    double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (auto& v : z) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : z) v /= sum;
    return z;
}

}  // namespace nn

inline ClassDistribution classify(const SegmenterConfig& cfg, const ParameterVector& params,
                                  std::span<const double> patch) {
    (void)cfg;
    return ClassDistribution{
        nn::softmax(nn::affine(params.seg("head.cls.W"), params.seg("head.cls.b"), patch))};
}

inline std::vector<double> revise_box(const SegmenterConfig& cfg, const ParameterVector& params,
                                      std::span<const double> patch) {
    (void)cfg;
    return nn::affine(params.seg("head.box.W"), params.seg("head.box.b"), patch);
}

// m x m mask probabilities over the proposal's box, row-major.
inline std::vector<double> segment(const SegmenterConfig& cfg, const ParameterVector& params,
                                   std::span<const double> patch) {
    (void)cfg;
    auto z = nn::affine(params.seg("head.mask.W"), params.seg("head.mask.b"), patch);
    for (auto& v : z) v = 1.0 / (1.0 + std::exp(-v));
    return z;
}

// ---------------------------------------------------------------------------
// Adaptation layers: per-stage 1x1 linear map halving the channel count.
// ---------------------------------------------------------------------------

inline FeaturePyramid adapt(const SegmenterConfig& cfg, const ParameterVector& params,
                            const FeaturePyramid& pyr) {
    FeaturePyramid out;
    out.strides = pyr.strides;
    const std::array<std::pair<std::string, std::string>, 2> names = {
        {{"adapt.stage1.W", "adapt.stage1.b"}, {"adapt.stage2.W", "adapt.stage2.b"}}};
    for (std::size_t t = 0; t < pyr.stages.size(); ++t) {
        const FeatureMap& in = pyr.stages[t];
        if (in.c % 2) throw std::invalid_argument("adapt: odd channel count");
        auto W = params.seg(names[t].first);
        auto b = params.seg(names[t].second);
        FeatureMap o(in.c / 2, in.h, in.w);
        for (int oc = 0; oc < o.c; ++oc)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x) {
                    double acc = b[oc];
                    for (int ic = 0; ic < in.c; ++ic)
                        acc += W[static_cast<std::size_t>(oc) * in.c + ic] * in.at(ic, y, x);
                    o.at(oc, y, x) = acc;
                }
        out.stages.push_back(std::move(o));
    }
    return out;
}

// d(adapted) -> accumulates adaptation-weight grads and returns d(stage input).
inline FeatureMap adapt_backward_stage(const SegmenterConfig& cfg, const ParameterVector& params,
                                       const FeatureMap& in, const FeatureMap& d_out, int stage,
                                       ParameterVector& grads) {
    (void)cfg;
    std::string wname = stage == 0 ? "adapt.stage1.W" : "adapt.stage2.W";
    std::string bname = stage == 0 ? "adapt.stage1.b" : "adapt.stage2.b";
    auto W = params.seg(wname);
    auto dW = grads.seg(wname);
    auto db = grads.seg(bname);
    FeatureMap d_in(in.c, in.h, in.w);
    for (int oc = 0; oc < d_out.c; ++oc)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) {
                double g = d_out.at(oc, y, x);
                if (g == 0.0) continue;
                db[oc] += g;
                for (int ic = 0; ic < in.c; ++ic) {
                    dW[static_cast<std::size_t>(oc) * in.c + ic] += g * in.at(ic, y, x);
                    d_in.at(ic, y, x) += g * W[static_cast<std::size_t>(oc) * in.c + ic];
                }
            }
    return d_in;
}

// ---------------------------------------------------------------------------
// Proposal-to-ground-truth matching and the supervised loss.
// ---------------------------------------------------------------------------

struct ProposalMatch {
    int label = kBackground;  // class id, kBackground for background
    int gt_index = -1;        // >= 0 for foreground matches
    bool ignored = false;
};

inline std::vector<ProposalMatch> match_proposals(const SegmenterConfig& cfg,
                                                  const ProposalBatch& proposals,
                                                  const std::vector<Instance>& gt) {
    std::vector<ProposalMatch> out(proposals.boxes.size());
    for (std::size_t i = 0; i < proposals.boxes.size(); ++i) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            double iou = box_iou(proposals.boxes[i], gt[g].bbox);
            if (iou > best) {
                best = iou;
                best_gt = static_cast<int>(g);
            }
        }
        if (best >= cfg.fg_iou) {
            out[i].label = gt[best_gt].class_id;
            out[i].gt_index = best_gt;
        } else if (best >= cfg.bg_iou) {
            out[i].ignored = true;
        }
    }
    return out;
}

inline std::array<double, 4> box_regression_target(const Box& proposal, const Box& gt) {
    double pw = proposal.width(), ph = proposal.height();
    return {(gt.cx() - proposal.cx()) / pw, (gt.cy() - proposal.cy()) / ph,
            std::log(gt.width() / pw), std::log(gt.height() / ph)};
}

inline Box apply_box_revision(const Box& proposal, std::span<const double> t, int img_w, int img_h) {
    double pw = proposal.width(), ph = proposal.height();
    double cx = proposal.cx() + t[0] * pw;
    double cy = proposal.cy() + t[1] * ph;
    double w = pw * std::exp(std::clamp(t[2], -4.0, 4.0));
    double h = ph * std::exp(std::clamp(t[3], -4.0, 4.0));
    Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    b.x0 = std::clamp(b.x0, 0.0, static_cast<double>(img_w));
    b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(img_w));
    b.y0 = std::clamp(b.y0, 0.0, static_cast<double>(img_h));
    b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(img_h));
    return b;
}

// Binary mask target: gt instance mask sampled at the m x m cell centers of
// the proposal box.
inline std::vector<double> mask_target(const SegmenterConfig& cfg, const Box& box, const Mask& gt) {
    const int m = cfg.mask_size;
    std::vector<double> t(static_cast<std::size_t>(m) * m, 0.0);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            int x = static_cast<int>(box.x0 + (b + 0.5) * box.width() / m);
            int y = static_cast<int>(box.y0 + (a + 0.5) * box.height() / m);
            x = std::clamp(x, 0, gt.w - 1);
            y = std::clamp(y, 0, gt.h - 1);
            t[static_cast<std::size_t>(a) * m + b] = gt.at(y, x) ? 1.0 : 0.0;
        }
    return t;
}

inline double smooth_l1(double z) { return std::fabs(z) < 1.0 ? 0.5 * z * z : std::fabs(z) - 0.5; }
inline double smooth_l1_grad(double z) { return std::fabs(z) < 1.0 ? z : (z > 0 ? 1.0 : -1.0); }

inline constexpr double kLogFloor = 1e-12;

inline double cross_entropy(std::span<const double> pred, std::span<const double> target) {
    double l = 0;
    for (std::size_t j = 0; j < pred.size(); ++j)
        if (target[j] != 0.0) l -= target[j] * std::log(std::max(pred[j], kLogFloor));
    return l;
}

struct SupervisedLoss {
    double total = 0, cls = 0, reg = 0, seg = 0;
};

// Component toggle, used by the gradient audit to isolate one term.
struct SupComponents {
    bool cls = true, reg = true, seg = true;
};

// Loss at fixed proposals; smooth in params, so finite differences apply.
// When `grads` is non-null, parameter gradients are accumulated into it.
inline SupervisedLoss supervised_loss_at(const SegmenterConfig& cfg, const ParameterVector& params,
                                         const Scene& scene, const ProposalBatch& proposals,
                                         ParameterVector* grads = nullptr,
                                         const SupComponents& comp = {}) {
    if (!scene.labeled) throw std::invalid_argument("supervised_loss: scene has no annotations");
    FeatureCache fc;
    FeaturePyramid pyr = extract_features(cfg, params, scene.image, &fc);
    auto matches = match_proposals(cfg, proposals, scene.instances);

    int n_matched = 0, n_fg = 0;
    for (const auto& m : matches) {
        if (m.ignored) continue;
        ++n_matched;
        if (m.gt_index >= 0) ++n_fg;
    }

    const int m2 = cfg.mask_size * cfg.mask_size;
    SupervisedLoss loss;
    FeatureMap d_y1(cfg.c1, cfg.stage1_h(), cfg.stage1_w());

    for (std::size_t i = 0; i < proposals.boxes.size(); ++i) {
        const auto& match = matches[i];
        if (match.ignored) continue;
        RoiCache rc;
        auto patch = roi_extract(cfg, pyr, proposals.boxes[i], &rc);
        std::vector<double> d_patch;

        // classification, all matched proposals
        auto dist = classify(cfg, params, patch);
        if (comp.cls) loss.cls += -std::log(std::max(dist.probs[match.label], kLogFloor)) / n_matched;
        if (grads && comp.cls) {
            std::vector<double> d_logits(dist.probs);
            d_logits[match.label] -= 1.0;
            for (auto& g : d_logits) g /= n_matched;
            nn::affine_backward(params.seg("head.cls.W"), patch, d_logits, grads->seg("head.cls.W"),
                                grads->seg("head.cls.b"), &d_patch);
        }

        if (match.gt_index >= 0) {
            const Instance& gt = scene.instances[match.gt_index];
            // box revision
            if (comp.reg) {
                auto pred_t = revise_box(cfg, params, patch);
                auto target_t = box_regression_target(proposals.boxes[i], gt.bbox);
                std::vector<double> d_t(4, 0.0);
                for (int j = 0; j < 4; ++j) {
                    double z = pred_t[j] - target_t[j];
                    loss.reg += smooth_l1(z) / (4.0 * n_fg);
                    d_t[j] = smooth_l1_grad(z) / (4.0 * n_fg);
                }
                if (grads)
                    nn::affine_backward(params.seg("head.box.W"), patch, d_t,
                                        grads->seg("head.box.W"), grads->seg("head.box.b"), &d_patch);
            }

            // mask
            if (comp.seg) {
                auto probs = segment(cfg, params, patch);
                auto target = mask_target(cfg, proposals.boxes[i], gt.mask);
                std::vector<double> d_logit(m2, 0.0);
                for (int j = 0; j < m2; ++j) {
                    double p = probs[j], t = target[j];
                    loss.seg += -(t * std::log(std::max(p, kLogFloor)) +
                                  (1 - t) * std::log(std::max(1 - p, kLogFloor))) /
                                (static_cast<double>(m2) * n_fg);
                    d_logit[j] = (p - t) / (static_cast<double>(m2) * n_fg);
                }
                if (grads)
                    nn::affine_backward(params.seg("head.mask.W"), patch, d_logit,
                                        grads->seg("head.mask.W"), grads->seg("head.mask.b"), &d_patch);
            }
        }

        if (grads && !d_patch.empty()) roi_backward(cfg, rc, d_patch, d_y1);
    }

    loss.total = loss.cls + loss.reg + loss.seg;
    if (grads) backward_features(cfg, params, fc, pyr, std::move(d_y1), FeatureMap{}, *grads);
    return loss;
}

inline SupervisedLoss supervised_loss(const SegmenterConfig& cfg, const ParameterVector& params,
                                      const Scene& scene, ParameterVector* grads = nullptr) {
    FeaturePyramid pyr = extract_features(cfg, params, scene.image);
    ProposalBatch props = propose(cfg, params, pyr);
    return supervised_loss_at(cfg, params, scene, props, grads);
}

// ---------------------------------------------------------------------------
// Inference: proposals -> classify -> revise -> per-class suppression -> mask.
// ---------------------------------------------------------------------------

struct Prediction {
    Mask mask;
    int class_id = kCytoplasm;
    double score = 0.0;
    Box box;
};

inline std::vector<Prediction> predict(const SegmenterConfig& cfg, const ParameterVector& params,
                                       const Image& image, double score_threshold = 0.0) {
    FeaturePyramid pyr = extract_features(cfg, params, image);
    ProposalBatch props = propose(cfg, params, pyr);

    struct Cand {
        Box box;
        int cls;
        double score;
    };
    std::vector<Cand> cands;
    for (const Box& b : props.boxes) {
        auto patch = roi_extract(cfg, pyr, b);
        auto dist = classify(cfg, params, patch);
        int cls = dist.arg_max();
        if (cls == kBackground || dist.probs[cls] < score_threshold) continue;
        auto t = revise_box(cfg, params, patch);
        Box rb = apply_box_revision(b, t, cfg.width, cfg.height);
        if (rb.area() < 4.0) continue;
        cands.push_back(Cand{rb, cls, dist.probs[cls]});
    }

    std::vector<std::size_t> order(cands.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (cands[a].score != cands[b].score) return cands[a].score > cands[b].score;
        return a < b;
    });

    std::vector<Prediction> out;
    std::vector<Cand> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.cls == cands[idx].cls && box_iou(k.box, cands[idx].box) > 0.5) {
                suppressed = true;
                break;
            }
        if (suppressed) continue;
        kept.push_back(cands[idx]);

        auto patch = roi_extract(cfg, pyr, cands[idx].box);
        auto probs = segment(cfg, params, patch);
        Mask m(cfg.height, cfg.width);
        const Box& b = cands[idx].box;
        const int ms = cfg.mask_size;
        int y0 = std::max(0, static_cast<int>(std::floor(b.y0)));
        int y1 = std::min(cfg.height, static_cast<int>(std::ceil(b.y1)));
        int x0 = std::max(0, static_cast<int>(std::floor(b.x0)));
        int x1 = std::min(cfg.width, static_cast<int>(std::ceil(b.x1)));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                int a = std::clamp(static_cast<int>((y + 0.5 - b.y0) / b.height() * ms), 0, ms - 1);
                int c = std::clamp(static_cast<int>((x + 0.5 - b.x0) / b.width() * ms), 0, ms - 1);
                if (probs[static_cast<std::size_t>(a) * ms + c] >= 0.5) m.at(y, x) = 1;
            }
        if (m.empty_mask()) continue;
        Prediction p;
        p.mask = std::move(m);
        p.class_id = cands[idx].cls;
        p.score = cands[idx].score;
        p.box = cands[idx].box;
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace mmtpsm
