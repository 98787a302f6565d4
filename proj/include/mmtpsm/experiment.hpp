#pragma once

// Experiment harness: labeled-fraction sweeps, ablation sweeps and report
// emission (CSV rows plus a JSON aggregate). Deterministic for a fixed spec.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmtpsm/metrics.hpp"
#include "mmtpsm/synth.hpp"
#include "mmtpsm/trainer.hpp"

namespace mmtpsm {

struct ExperimentSpec {
    GeneratorConfig generator;
    // experiments keep the full anchor grid as proposals: the proposal scorer
    // receives no supervised gradient, so a capped top-N would be an arbitrary
    // frozen subset that starves the heads of foreground matches
    TrainConfig train = [] {
        TrainConfig t;
        t.segmenter.num_proposals = 0;
        return t;
    }();
    int n_labeled = 20, n_unlabeled = 200;
    std::vector<double> labeled_fractions = {0.1, 0.2, 0.4, 0.8, 1.0};
    std::vector<std::uint64_t> replicate_seeds = {1};
    std::filesystem::path out_dir = "out";

    void validate() const {
        for (double f : labeled_fractions)
            if (f <= 0.0 || f > 1.0) throw ConfigError("spec: fractions must lie in (0,1]");
        if (replicate_seeds.empty()) throw ConfigError("spec: at least one replicate seed required");
        train.validate();
    }
};

// Seed-shuffled prefix; larger fractions are supersets of smaller ones.
inline std::vector<std::string> fraction_subset(const std::vector<std::string>& ids, double fraction,
                                                std::uint64_t seed) {
    std::vector<std::string> shuffled = ids;
    Rng rng(derive_seed(seed, "fraction_shuffle"));
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
    std::size_t take = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(shuffled.size())));
    take = std::clamp<std::size_t>(take, 1, shuffled.size());
    shuffled.resize(take);
    return shuffled;
}

struct SweepCell {
    double fraction = 1.0;
    std::string method;  // supervised_only / mmt_psm / no_mgd / no_psm
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    MetricReport report;
};

struct SweepReport {
    std::vector<SweepCell> cells;
};

inline nlohmann::ordered_json to_json(const SweepReport& r) {
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& c : r.cells) {
        nlohmann::ordered_json j;
        j["fraction"] = c.fraction;
        j["method"] = c.method;
        j["seed"] = c.seed;
        if (c.failed) {
            j["status"] = "failed";
            j["error"] = c.error;
        } else {
            j["status"] = "ok";
            j["report"] = to_json(c.report);
        }
        cells.push_back(std::move(j));
    }

    // aggregate mean / std of avg-AJI and avg-mAP per (fraction, method)
    nlohmann::ordered_json agg = nlohmann::ordered_json::array();
    std::vector<std::pair<double, std::string>> groups;
    for (const auto& c : r.cells) {
        auto key = std::make_pair(c.fraction, c.method);
        if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
    }
    for (const auto& [fraction, method] : groups) {
        std::vector<double> ajis, maps;
        for (const auto& c : r.cells)
            if (!c.failed && c.fraction == fraction && c.method == method) {
                ajis.push_back(c.report.aji_avg);
                maps.push_back(c.report.map_avg);
            }
        auto mean_std = [](const std::vector<double>& v) {
            double mean = 0, sd = 0;
            if (!v.empty()) {
                for (double x : v) mean += x;
                mean /= static_cast<double>(v.size());
                for (double x : v) sd += (x - mean) * (x - mean);
                sd = std::sqrt(sd / static_cast<double>(v.size()));
            }
            return std::make_pair(mean, sd);
        };
        auto [am, as] = mean_std(ajis);
        auto [mm, ms] = mean_std(maps);
        agg.push_back({{"fraction", fraction},
                       {"method", method},
                       {"replicates", ajis.size()},
                       {"aji_avg_mean", am},
                       {"aji_avg_std", as},
                       {"map_avg_mean", mm},
                       {"map_avg_std", ms}});
    }
    return {{"cells", std::move(cells)}, {"aggregate", std::move(agg)}};
}

inline std::string sweep_csv(const SweepReport& r) {
    std::string csv = "fraction,method,seed," + metric_csv_header() + "\n";
    char buf[64];
    for (const auto& c : r.cells) {
        if (c.failed) continue;
        std::snprintf(buf, sizeof(buf), "%.4f,%s,%llu,", c.fraction, c.method.c_str(),
                      static_cast<unsigned long long>(c.seed));
        csv += buf;
        csv += metric_csv_row(c.report) + "\n";
    }
    return csv;
}

inline SweepCell run_cell(const ExperimentSpec& spec, const DatasetManifest& manifest,
                          double fraction, std::uint64_t seed, TrainMode mode, Ablation ablation,
                          const std::string& method_name) {
    SweepCell cell;
    cell.fraction = fraction;
    cell.method = method_name;
    cell.seed = seed;
    try {
        TrainConfig cfg = spec.train;
        cfg.seed = seed;
        cfg.ablation = ablation;
        auto subset = fraction_subset(manifest.labeled_ids, fraction, seed);
        auto out = spec.out_dir / ("run_" + method_name + "_f" + std::to_string(fraction) + "_s" +
                                   std::to_string(seed));
        RunResult res = run_training(cfg, manifest, mode, out, &subset);
        cell.report = res.report;
    } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
    }
    return cell;
}

// Table-1 analogue: supervised_only vs mmt_psm per (fraction, seed).
inline SweepReport run_sweep(const ExperimentSpec& spec, const DatasetManifest& manifest) {
    spec.validate();
    SweepReport rep;
    for (double fraction : spec.labeled_fractions)
        for (std::uint64_t seed : spec.replicate_seeds) {
            rep.cells.push_back(run_cell(spec, manifest, fraction, seed, TrainMode::supervised_only,
                                         Ablation::full, "supervised_only"));
            rep.cells.push_back(run_cell(spec, manifest, fraction, seed, TrainMode::mmt_psm,
                                         Ablation::full, "mmt_psm"));
        }
    return rep;
}

// Table-3 analogue: full vs no_mgd vs no_psm under identical seeds.
inline SweepReport run_ablation(const ExperimentSpec& spec, const DatasetManifest& manifest,
                                double fraction) {
    spec.validate();
    SweepReport rep;
    for (std::uint64_t seed : spec.replicate_seeds)
        for (Ablation ab : {Ablation::full, Ablation::no_mgd, Ablation::no_psm})
            rep.cells.push_back(
                run_cell(spec, manifest, fraction, seed, TrainMode::mmt_psm, ab, to_string(ab)));
    return rep;
}

inline void write_sweep_outputs(const SweepReport& rep, const std::filesystem::path& out_dir,
                                const std::string& stem) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream f(out_dir / (stem + ".csv"));
        if (!f) throw DataError("cannot write sweep csv");
        f << sweep_csv(rep);
    }
    {
        std::ofstream f(out_dir / (stem + ".json"));
        if (!f) throw DataError("cannot write sweep json");
        f << to_json(rep).dump(1) << "\n";
    }
}

}  // namespace mmtpsm
