// Experiment front end: dataset generation, labeled-fraction sweeps,
// ablations, checkpoint evaluation and the gradient audit.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mmtpsm/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

mmtpsm::ExperimentSpec spec_from_config(const fs::path& config_path) {
    mmtpsm::ExperimentSpec spec;
    if (config_path.empty()) return spec;
    std::ifstream f(config_path);
    if (!f) throw mmtpsm::ConfigError("cannot open config: " + config_path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw mmtpsm::ConfigError(std::string("config parse error: ") + e.what());
    }
    if (j.contains("generator")) spec.generator = mmtpsm::generator_config_from_json(j.at("generator"));
    if (j.contains("dataset")) {
        maybe(j.at("dataset"), "n_labeled", spec.n_labeled);
        maybe(j.at("dataset"), "n_unlabeled", spec.n_unlabeled);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        maybe(t, "total_iters", spec.train.total_iters);
        maybe(t, "warmup_iters", spec.train.warmup_iters);
        maybe(t, "teacher_init_iter", spec.train.teacher_init_iter);
        maybe(t, "k_teacher_views", spec.train.k_teacher_views);
        maybe(t, "l_student_views", spec.train.l_student_views);
        maybe(t, "gamma", spec.train.gamma);
        maybe(t, "temperature", spec.train.temperature);
        maybe(t, "momentum", spec.train.momentum);
        maybe(t, "eval_scenes", spec.train.eval_scenes);
        maybe(t, "num_proposals", spec.train.segmenter.num_proposals);
        maybe(t, "w_background", spec.train.psm_weights.background);
    }
    maybe(j, "fractions", spec.labeled_fractions);
    maybe(j, "seeds", spec.replicate_seeds);
    // keep segmenter geometry in sync with the generator
    spec.train.segmenter.height = spec.generator.height;
    spec.train.segmenter.width = spec.generator.width;
    return spec;
}

void apply_overrides(mmtpsm::ExperimentSpec& spec, const std::vector<double>& fractions,
                     const std::vector<std::uint64_t>& seeds, const std::string& out_dir) {
    if (!fractions.empty()) spec.labeled_fractions = fractions;
    if (!seeds.empty()) spec.replicate_seeds = seeds;
    if (!out_dir.empty()) spec.out_dir = out_dir;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MMT-PSM semi-supervised instance segmentation experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, manifest_path, checkpoint_path, mode = "mmt_psm",
                ablation = "full";
    std::vector<double> fractions;
    std::vector<std::uint64_t> seeds;
    double ablate_fraction = 1.0;
    bool oracle = false;

    app.add_option("--config", config_path, "JSON config file; flags override file values");
    app.add_option("--out-dir", out_dir, "output directory");
    app.add_option("--seed", seeds, "replicate seed(s)");

    auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
    auto* sweep = app.add_subcommand("sweep", "labeled-fraction sweep (supervised vs mmt_psm)");
    sweep->add_option("--fractions", fractions, "labeled fractions in (0,1]");
    sweep->add_option("--manifest", manifest_path, "dataset manifest path")->required();
    sweep->add_option("--mode", mode, "both | supervised_only | mmt_psm")->default_val("both");
    auto* ablate = app.add_subcommand("ablate", "ablation sweep (full / no_mgd / no_psm)");
    ablate->add_option("--manifest", manifest_path, "dataset manifest path")->required();
    ablate->add_option("--fraction", ablate_fraction, "labeled fraction for the ablation");
    ablate->add_option("--ablation", ablation, "all | full | no_mgd | no_psm")->default_val("all");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file");
    eval->add_option("--manifest", manifest_path, "dataset manifest path")->required();
    eval->add_flag("--oracle", oracle, "evaluate ground truth against itself");
    auto* audit = app.add_subcommand("audit", "finite-difference gradient audit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        mmtpsm::ExperimentSpec spec = spec_from_config(config_path);
        apply_overrides(spec, fractions, seeds, out_dir);

        if (gen->parsed()) {
            auto manifest =
                mmtpsm::build_dataset(spec.generator, spec.n_labeled, spec.n_unlabeled,
                                      spec.replicate_seeds.front(), spec.out_dir / "dataset");
            std::cout << (spec.out_dir / "dataset" / "manifest.json").string() << " ("
                      << manifest.labeled_ids.size() << " labeled, "
                      << manifest.unlabeled_ids.size() << " unlabeled)\n";
        } else if (sweep->parsed()) {
            auto manifest = mmtpsm::load_manifest(manifest_path);
            spec.train.segmenter.height = manifest.height;
            spec.train.segmenter.width = manifest.width;
            spec.generator = manifest.generator_config;
            mmtpsm::SweepReport rep;
            if (mode == "both") {
                rep = mmtpsm::run_sweep(spec, manifest);
            } else {
                if (mode != "supervised_only" && mode != "mmt_psm")
                    throw mmtpsm::ConfigError("sweep: unknown --mode " + mode);
                spec.validate();
                mmtpsm::TrainMode m = mode == "mmt_psm" ? mmtpsm::TrainMode::mmt_psm
                                                        : mmtpsm::TrainMode::supervised_only;
                for (double fraction : spec.labeled_fractions)
                    for (std::uint64_t seed : spec.replicate_seeds)
                        rep.cells.push_back(mmtpsm::run_cell(spec, manifest, fraction, seed, m,
                                                             mmtpsm::Ablation::full, mode));
            }
            mmtpsm::write_sweep_outputs(rep, spec.out_dir, "sweep");
            std::cout << (spec.out_dir / "sweep.csv").string() << "\n";
        } else if (ablate->parsed()) {
            auto manifest = mmtpsm::load_manifest(manifest_path);
            spec.train.segmenter.height = manifest.height;
            spec.train.segmenter.width = manifest.width;
            spec.generator = manifest.generator_config;
            mmtpsm::SweepReport rep;
            if (ablation == "all") {
                rep = mmtpsm::run_ablation(spec, manifest, ablate_fraction);
            } else {
                mmtpsm::Ablation ab;
                if (ablation == "full") ab = mmtpsm::Ablation::full;
                else if (ablation == "no_mgd") ab = mmtpsm::Ablation::no_mgd;
                else if (ablation == "no_psm") ab = mmtpsm::Ablation::no_psm;
                else throw mmtpsm::ConfigError("ablate: unknown --ablation " + ablation);
                spec.validate();
                for (std::uint64_t seed : spec.replicate_seeds)
                    rep.cells.push_back(mmtpsm::run_cell(spec, manifest, ablate_fraction, seed,
                                                         mmtpsm::TrainMode::mmt_psm, ab, ablation));
            }
            mmtpsm::write_sweep_outputs(rep, spec.out_dir, "ablation");
            std::cout << (spec.out_dir / "ablation.csv").string() << "\n";
        } else if (eval->parsed()) {
            auto manifest = mmtpsm::load_manifest(manifest_path);
            spec.train.segmenter.height = manifest.height;
            spec.train.segmenter.width = manifest.width;
            mmtpsm::MetricReport report;
            if (oracle) {
                std::vector<mmtpsm::InstanceSet> sets;
                for (const auto& id : manifest.labeled_ids)
                    sets.push_back(mmtpsm::scene_to_instance_set(mmtpsm::load_scene(manifest, id)));
                report = mmtpsm::evaluate(sets, sets);
            } else {
                if (checkpoint_path.empty())
                    throw mmtpsm::ConfigError("eval: --checkpoint required unless --oracle");
                auto state = mmtpsm::load_checkpoint(checkpoint_path);
                spec.train.seed = state.seed;
                report = mmtpsm::evaluate_params(spec.train, state.student,
                                                 manifest.generator_config);
            }
            std::cout << mmtpsm::to_json(report).dump(1) << "\n";
            if (!spec.out_dir.empty()) {
                std::filesystem::create_directories(spec.out_dir);
                std::ofstream csv(spec.out_dir / "eval.csv");
                csv << mmtpsm::metric_csv_header() << "\n" << mmtpsm::metric_csv_row(report) << "\n";
                std::ofstream js(spec.out_dir / "eval.json");
                js << mmtpsm::to_json(report).dump(1) << "\n";
            }
        } else if (audit->parsed()) {
            if (!seeds.empty()) spec.train.seed = seeds.front();
            auto report = mmtpsm::gradient_audit(spec.train);
            std::cout << mmtpsm::to_json(report).dump(1) << "\n";
            if (report.max_rel_error() > 1e-4) {
                std::cerr << "gradient audit FAILED: max rel error " << report.max_rel_error()
                          << "\n";
                return 4;
            }
        }
        return 0;
    } catch (const mmtpsm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mmtpsm::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const mmtpsm::NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
