#pragma once

// Procedural generator for overlapping translucent cell scenes. Each cell is
// a rotated translucent cytoplasm ellipse containing one concentric-frame
// opaque nucleus ellipse; scenes carry exact per-instance masks and boxes.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmtpsm/augment.hpp"  // rgb<->hsv helpers for the stain shift
#include "mmtpsm/core.hpp"

namespace mmtpsm {

enum ClassId : int { kBackground = 0, kCytoplasm = 1, kNucleus = 2 };
inline constexpr int kNumClasses = 3;

struct Instance {
    Mask mask;
    int class_id = kCytoplasm;
    Box bbox;  // tight bounding box of mask
};

struct Scene {
    Image image;  // H x W x 3, intensities in [0,1]
    std::vector<Instance> instances;
    std::uint64_t seed = 0;
    bool labeled = true;  // false for scenes loaded without annotations
};

struct GeneratorConfig {
    int height = 96, width = 96;
    int cells_lo = 2, cells_hi = 4;
    double cyto_axis_lo = 10.0, cyto_axis_hi = 18.0;
    double nucleus_axis_lo = 4.0, nucleus_axis_hi = 6.0;
    double opacity_lo = 0.60, opacity_hi = 0.85;
    double overlap_prob = 0.5;       // chance a new cell is placed next to an existing one
    double contrast_reduction = 0.0; // 0 = full contrast, 1 = flat gray
    double noise_amplitude = 0.02;
    double stain_hue_deg = 0.0;      // per-scene pigment hue rotation drawn from +-this range;
                                     // emulates stain variability across specimens (0 disables)

    void validate() const {
        if (height < 32 || width < 32) throw ConfigError("generator: image size must be >= 32x32");
        if (cells_lo < 0 || cells_hi < cells_lo) throw ConfigError("generator: bad cell count range");
        if (cyto_axis_lo <= 0 || cyto_axis_hi < cyto_axis_lo)
            throw ConfigError("generator: bad cytoplasm axis range");
        if (nucleus_axis_lo <= 0 || nucleus_axis_hi < nucleus_axis_lo)
            throw ConfigError("generator: bad nucleus axis range");
        if (nucleus_axis_hi >= cyto_axis_lo)
            throw ConfigError("generator: nucleus axes may exceed cytoplasm axes, containment impossible");
        if (opacity_lo < 0 || opacity_hi > 1 || opacity_hi < opacity_lo)
            throw ConfigError("generator: bad opacity range");
        if (contrast_reduction < 0 || contrast_reduction > 1)
            throw ConfigError("generator: contrast_reduction outside [0,1]");
        if (stain_hue_deg < 0 || stain_hue_deg > 180)
            throw ConfigError("generator: stain_hue_deg outside [0,180]");
        if (2.0 * (cyto_axis_hi + 1.0) >= std::min(height, width))
            throw ConfigError("generator: cytoplasm axes too large for the image size");
    }
};

inline nlohmann::ordered_json to_json(const GeneratorConfig& c) {
    return {{"height", c.height},
            {"width", c.width},
            {"cells_lo", c.cells_lo},
            {"cells_hi", c.cells_hi},
            {"cyto_axis_lo", c.cyto_axis_lo},
            {"cyto_axis_hi", c.cyto_axis_hi},
            {"nucleus_axis_lo", c.nucleus_axis_lo},
            {"nucleus_axis_hi", c.nucleus_axis_hi},
            {"opacity_lo", c.opacity_lo},
            {"opacity_hi", c.opacity_hi},
            {"overlap_prob", c.overlap_prob},
            {"contrast_reduction", c.contrast_reduction},
            {"noise_amplitude", c.noise_amplitude},
            {"stain_hue_deg", c.stain_hue_deg}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.cells_lo = j.at("cells_lo").get<int>();
    c.cells_hi = j.at("cells_hi").get<int>();
    c.cyto_axis_lo = j.at("cyto_axis_lo").get<double>();
    c.cyto_axis_hi = j.at("cyto_axis_hi").get<double>();
    c.nucleus_axis_lo = j.at("nucleus_axis_lo").get<double>();
    c.nucleus_axis_hi = j.at("nucleus_axis_hi").get<double>();
    c.opacity_lo = j.at("opacity_lo").get<double>();
    c.opacity_hi = j.at("opacity_hi").get<double>();
    c.overlap_prob = j.at("overlap_prob").get<double>();
    c.contrast_reduction = j.at("contrast_reduction").get<double>();
    c.noise_amplitude = j.at("noise_amplitude").get<double>();
    c.stain_hue_deg = j.value("stain_hue_deg", 0.0);  // absent in older manifests
    return c;
}

namespace detail {

struct Ellipse {
    double cx, cy, ax, ay, rot;  // rot in radians

    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        double u = dx * std::cos(rot) + dy * std::sin(rot);
        double v = -dx * std::sin(rot) + dy * std::cos(rot);
        return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
    }
};

inline Mask rasterize(const Ellipse& e, int h, int w) {
    Mask m(h, w);
    int y0 = std::max(0, static_cast<int>(std::floor(e.cy - std::max(e.ax, e.ay) - 1)));
    int y1 = std::min(h, static_cast<int>(std::ceil(e.cy + std::max(e.ax, e.ay) + 2)));
    int x0 = std::max(0, static_cast<int>(std::floor(e.cx - std::max(e.ax, e.ay) - 1)));
    int x1 = std::min(w, static_cast<int>(std::ceil(e.cx + std::max(e.ax, e.ay) + 2)));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            if (e.contains(x + 0.5, y + 0.5)) m.at(y, x) = 1;
    return m;
}

}  // namespace detail

inline Scene generate_scene(std::uint64_t seed, const GeneratorConfig& cfg) {
    cfg.validate();
    const int h = cfg.height, w = cfg.width;
    Rng rng(derive_seed(seed, "scene"));
    Scene scene;
    scene.seed = seed;
    scene.image = Image(h, w, 3);

    // Smooth background: base tint plus a linear gradient of random direction.
    double base = rng.uniform(0.80, 0.90);
    double grad_angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double grad_amp = rng.uniform(0.0, 0.05);
    double gx = std::cos(grad_angle), gy = std::sin(grad_angle);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double t = ((x - w / 2.0) * gx + (y - h / 2.0) * gy) / std::max(h, w);
            double val = base + grad_amp * t;
            scene.image.at(y, x, 0) = clamp01(val);
            scene.image.at(y, x, 1) = clamp01(val * rng.uniform(0.999, 1.0));
            scene.image.at(y, x, 2) = clamp01(val);
        }

    int n_cells = cfg.cells_lo +
                  static_cast<int>(rng.uniform_index(
                      static_cast<std::uint64_t>(cfg.cells_hi - cfg.cells_lo + 1)));

    // Scene-level stain shift: every pigment in this scene rotates by the same
    // hue angle. Drawn from its own derived stream so scene geometry is
    // independent of the knob.
    double stain = 0.0;
    if (cfg.stain_hue_deg > 0.0) {
        Rng stain_rng(derive_seed(seed, "stain"));
        stain = stain_rng.uniform(-cfg.stain_hue_deg, cfg.stain_hue_deg);
    }
    auto stain_shift = [&](double& r, double& g, double& b) {
        if (stain == 0.0) return;
        double h, s, v;
        detail::rgb_to_hsv(r, g, b, h, s, v);
        h = std::fmod(h + stain + 720.0, 360.0);
        detail::hsv_to_rgb(h, s, v, r, g, b);
    };

    std::vector<detail::Ellipse> placed;
    double margin = cfg.cyto_axis_hi + 1.0;
    for (int i = 0; i < n_cells; ++i) {
        double ax = rng.uniform(cfg.cyto_axis_lo, cfg.cyto_axis_hi);
        double ay = rng.uniform(cfg.cyto_axis_lo, cfg.cyto_axis_hi);
        double rot = rng.uniform(0.0, 3.14159265358979323846);
        double cx, cy;
        if (!placed.empty() && rng.bernoulli(cfg.overlap_prob)) {
            // place near an existing cell to force occlusion
            const auto& nb = placed[rng.uniform_index(placed.size())];
            double dist = rng.uniform(0.4, 0.9) * (std::max(nb.ax, nb.ay) + std::max(ax, ay));
            double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            cx = std::clamp(nb.cx + dist * std::cos(ang), margin, w - margin);
            cy = std::clamp(nb.cy + dist * std::sin(ang), margin, h - margin);
        } else {
            cx = rng.uniform(margin, w - margin);
            cy = rng.uniform(margin, h - margin);
        }
        detail::Ellipse cyto{cx, cy, ax, ay, rot};
        placed.push_back(cyto);

        // Nucleus shares the cytoplasm frame; offset bounded so that
        // (|du|+na)/ax and (|dv|+nb)/ay stay inside the unit disc, which is
        // sufficient for exact pixel containment.
        double na = rng.uniform(cfg.nucleus_axis_lo, cfg.nucleus_axis_hi);
        double nb_ax = rng.uniform(cfg.nucleus_axis_lo, cfg.nucleus_axis_hi);
        double slack_u = 0.6 * (ax / std::sqrt(2.0) - na);
        double slack_v = 0.6 * (ay / std::sqrt(2.0) - nb_ax);
        double du = slack_u > 0 ? rng.uniform(-slack_u, slack_u) : 0.0;
        double dv = slack_v > 0 ? rng.uniform(-slack_v, slack_v) : 0.0;
        double ncx = cx + du * std::cos(rot) - dv * std::sin(rot);
        double ncy = cy + du * std::sin(rot) + dv * std::cos(rot);
        detail::Ellipse nuc{ncx, ncy, na, nb_ax, rot};

        Mask cyto_mask = detail::rasterize(cyto, h, w);
        Mask nuc_mask = detail::rasterize(nuc, h, w);
        // containment is guaranteed by the offset bound; enforce it anyway
        for (std::size_t p = 0; p < nuc_mask.v.size(); ++p)
            if (nuc_mask.v[p] && !cyto_mask.v[p]) nuc_mask.v[p] = 0;

        double opacity = rng.uniform(cfg.opacity_lo, cfg.opacity_hi);
        double cr = rng.uniform(0.45, 0.65), cg = rng.uniform(0.55, 0.70), cb = rng.uniform(0.70, 0.85);
        stain_shift(cr, cg, cb);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (cyto_mask.at(y, x)) {
                    scene.image.at(y, x, 0) = scene.image.at(y, x, 0) * (1 - opacity) + cr * opacity;
                    scene.image.at(y, x, 1) = scene.image.at(y, x, 1) * (1 - opacity) + cg * opacity;
                    scene.image.at(y, x, 2) = scene.image.at(y, x, 2) * (1 - opacity) + cb * opacity;
                }
        double nop = rng.uniform(0.85, 0.95);
        double nr = rng.uniform(0.15, 0.30), ng = rng.uniform(0.10, 0.22), nbl = rng.uniform(0.35, 0.50);
        stain_shift(nr, ng, nbl);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (nuc_mask.at(y, x)) {
                    scene.image.at(y, x, 0) = scene.image.at(y, x, 0) * (1 - nop) + nr * nop;
                    scene.image.at(y, x, 1) = scene.image.at(y, x, 1) * (1 - nop) + ng * nop;
                    scene.image.at(y, x, 2) = scene.image.at(y, x, 2) * (1 - nop) + nbl * nop;
                }

        Instance ci;
        ci.mask = std::move(cyto_mask);
        ci.class_id = kCytoplasm;
        ci.bbox = tight_bbox(ci.mask);
        Instance ni;
        ni.mask = std::move(nuc_mask);
        ni.class_id = kNucleus;
        ni.bbox = tight_bbox(ni.mask);
        scene.instances.push_back(std::move(ci));
        scene.instances.push_back(std::move(ni));
    }

    if (cfg.contrast_reduction > 0.0)
        for (auto& p : scene.image.v) p = 0.5 + (p - 0.5) * (1.0 - cfg.contrast_reduction);

    for (auto& p : scene.image.v)
        p = clamp01(p + rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude));

    return scene;
}

// ---------------------------------------------------------------------------
// On-disk formats.
//   image.bin      little-endian: magic "MMTI", u32 H, W, C, then H*W*C f64
//   instances.json [{class_id, bbox, rle, size}]
//   manifest.json  schema_version, image_size, ids, per-id seeds, config
// ---------------------------------------------------------------------------

inline void write_image_bin(const std::filesystem::path& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path.string());
    f.write("MMTI", 4);
    std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.h), static_cast<std::uint32_t>(img.w),
                             static_cast<std::uint32_t>(img.c)};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(img.v.data()),
            static_cast<std::streamsize>(img.v.size() * sizeof(double)));
    if (!f) throw DataError("write failed: " + path.string());
}

inline Image read_image_bin(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string_view(magic, 4) != "MMTI") throw DataError("bad image magic: " + path.string());
    std::uint32_t dims[3];
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
    f.read(reinterpret_cast<char*>(img.v.data()),
           static_cast<std::streamsize>(img.v.size() * sizeof(double)));
    if (!f) throw DataError("truncated image file: " + path.string());
    return img;
}

inline nlohmann::ordered_json instances_to_json(const std::vector<Instance>& instances) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& inst : instances) {
        nlohmann::ordered_json j;
        j["class_id"] = inst.class_id;
        j["bbox"] = {inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1};
        j["size"] = {inst.mask.h, inst.mask.w};
        j["rle"] = rle_encode(inst.mask);
        arr.push_back(std::move(j));
    }
    return arr;
}

inline std::vector<Instance> instances_from_json(const nlohmann::json& arr) {
    std::vector<Instance> out;
    for (const auto& j : arr) {
        Instance inst;
        inst.class_id = j.at("class_id").get<int>();
        auto b = j.at("bbox");
        inst.bbox = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                        b.at(3).get<double>()};
        auto sz = j.at("size");
        inst.mask = rle_decode(j.at("rle").get<std::vector<std::uint32_t>>(), sz.at(0).get<int>(),
                               sz.at(1).get<int>());
        out.push_back(std::move(inst));
    }
    return out;
}

struct DatasetManifest {
    int schema_version = 1;
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
    int height = 0, width = 0;
    GeneratorConfig generator_config;
    std::map<std::string, std::uint64_t> scene_seeds;
    std::filesystem::path root;  // directory holding manifest + scene dirs
};

inline nlohmann::ordered_json to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["schema_version"] = m.schema_version;
    j["image_size"] = {m.height, m.width};
    j["labeled_ids"] = m.labeled_ids;
    j["unlabeled_ids"] = m.unlabeled_ids;
    j["scene_seeds"] = m.scene_seeds;
    j["generator_config"] = to_json(m.generator_config);
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path root) {
    DatasetManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) throw DataError("unsupported manifest schema version");
    m.height = j.at("image_size").at(0).get<int>();
    m.width = j.at("image_size").at(1).get<int>();
    m.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
    m.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
    m.scene_seeds = j.at("scene_seeds").get<std::map<std::string, std::uint64_t>>();
    m.generator_config = generator_config_from_json(j.at("generator_config"));
    m.root = std::move(root);
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest: " + path.string());
    nlohmann::json j;
    f >> j;
    return manifest_from_json(j, path.parent_path());
}

// Writes all scene files first and the manifest last, so a failed build never
// leaves a manifest pointing at partial data.
inline DatasetManifest build_dataset(const GeneratorConfig& cfg, int n_labeled, int n_unlabeled,
                                     std::uint64_t root_seed, const std::filesystem::path& out_dir) {
    cfg.validate();
    if (n_labeled < 1) throw ConfigError("build_dataset: n_labeled must be >= 1");
    if (n_unlabeled < 0) throw ConfigError("build_dataset: n_unlabeled must be >= 0");

    std::filesystem::create_directories(out_dir);
    DatasetManifest m;
    m.height = cfg.height;
    m.width = cfg.width;
    m.generator_config = cfg;
    m.root = out_dir;

    char buf[32];
    for (int i = 0; i < n_labeled + n_unlabeled; ++i) {
        bool labeled = i < n_labeled;
        std::snprintf(buf, sizeof(buf), "scene_%04d", i);
        std::string id(buf);
        std::uint64_t seed = derive_seed(root_seed, "dataset_scene", static_cast<std::uint64_t>(i));
        Scene scene = generate_scene(seed, cfg);

        auto dir = out_dir / id;
        std::filesystem::create_directories(dir);
        write_image_bin(dir / "image.bin", scene.image);
        if (labeled) {
            std::ofstream jf(dir / "instances.json");
            if (!jf) throw DataError("cannot write instances: " + (dir / "instances.json").string());
            jf << instances_to_json(scene.instances).dump(0) << "\n";
            if (!jf) throw DataError("write failed: " + (dir / "instances.json").string());
        }
        (labeled ? m.labeled_ids : m.unlabeled_ids).push_back(id);
        m.scene_seeds[id] = seed;
    }

    std::ofstream mf(out_dir / "manifest.json");
    if (!mf) throw DataError("cannot write manifest");
    mf << to_json(m).dump(1) << "\n";
    if (!mf) throw DataError("manifest write failed");
    return m;
}

inline Scene load_scene(const DatasetManifest& m, const std::string& id) {
    auto dir = m.root / id;
    Scene s;
    s.image = read_image_bin(dir / "image.bin");
    s.seed = m.scene_seeds.count(id) ? m.scene_seeds.at(id) : 0;
    auto inst_path = dir / "instances.json";
    if (std::filesystem::exists(inst_path)) {
        std::ifstream f(inst_path);
        nlohmann::json j;
        f >> j;
        if (!f) throw DataError("bad instances file: " + inst_path.string());
        s.instances = instances_from_json(j);
    } else {
        s.labeled = false;
    }
    return s;
}

}  // namespace mmtpsm
