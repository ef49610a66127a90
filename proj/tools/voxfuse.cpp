#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "voxfuse/checkpoint.hpp"
#include "voxfuse/encoders.hpp"
#include "voxfuse/errors.hpp"
#include "voxfuse/evaluate.hpp"
#include "voxfuse/gradcheck.hpp"
#include "voxfuse/sequence.hpp"
#include "voxfuse/trainer.hpp"

using namespace voxfuse;

namespace {

RunConfig config_from(const std::string& path) {
    if (path.empty()) {
        RunConfig cfg;
        cfg.validate();
        return cfg;
    }
    return load_config(path);
}

int cmd_synth(const std::string& config_path, uint64_t seed, bool seed_set,
              const std::string& out_dir) {
    RunConfig cfg = config_from(config_path);
    if (seed_set) cfg.seed = seed;
    const std::string dir = out_dir.empty() ? cfg.data_dir : out_dir;
    write_scene_datasets(cfg, dir);
    std::printf("wrote %d train + %d eval scenes (%d frames each) to %s\n", cfg.train_scenes,
                cfg.eval_scenes, cfg.frames_per_scene, dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& run_dir,
              const std::string& data_dir) {
    RunConfig cfg = config_from(config_path);
    if (!run_dir.empty()) cfg.run_dir = run_dir;
    std::vector<TrainScene> scenes = data_dir.empty()
                                         ? build_training_scenes(cfg, false)
                                         : load_scenes(data_dir, "train", cfg);
    if (scenes.empty()) throw ConfigError("no training scenes under " + data_dir);
    std::printf("training %zu scenes, %d epochs -> %s\n", scenes.size(), cfg.epochs,
                cfg.run_dir.c_str());
    Trainer trainer(cfg, std::move(scenes));
    const auto history = trainer.run();
    for (const EpochMetrics& m : history)
        if ((m.epoch + 1) % 5 == 0 || m.epoch == 0 || m.epoch + 1 == cfg.epochs)
            std::printf("%s\n", metrics_line(m).c_str());
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& split) {
    RunConfig cfg = config_from(config_path);
    Model model = make_model(cfg);
    load_checkpoint(checkpoint_path, model.ps);
    std::vector<TrainScene> scenes = data_dir.empty()
                                         ? build_training_scenes(cfg, split == "eval")
                                         : load_scenes(data_dir, split, cfg);
    if (scenes.empty()) throw ConfigError("no scenes to evaluate");
    const BranchEval ev = evaluate_branches(scenes, model, cfg);
    std::printf("%s", evaluation_report(ev).c_str());
    std::printf("{\"miou_2d\": %.6f, \"miou_3d\": %.6f, \"miou_fused\": %.6f}\n",
                ev.cm_2d.summary().miou, ev.cm_3d.summary().miou, ev.cm_expert.summary().miou);
    return 0;
}

int cmd_fuse(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& sequence_dir, const std::string& map_path,
             const std::string& diagnostics_path) {
    RunConfig cfg = config_from(config_path);
    int n = 0;
    try {
        n = count_sequence_frames(sequence_dir);
    } catch (const FormatError&) {
        throw;
    }
    if (n == 0) throw FormatError("no frames found in " + sequence_dir);

    Model model = make_model(cfg);
    if (!checkpoint_path.empty()) load_checkpoint(checkpoint_path, model.ps);
    const Intrinsics intr = read_intrinsics_txt(sequence_dir + "/intrinsics.txt");
    const LossConfig loss = loss_config_of(cfg);

    std::ofstream diag_file;
    if (!diagnostics_path.empty()) {
        diag_file.open(diagnostics_path);
        if (!diag_file) throw FormatError("cannot open for writing: " + diagnostics_path);
    }
    std::ostream& diag = diagnostics_path.empty() ? std::cout : diag_file;

    SceneMap map(cfg.voxel_resolution, cfg.feat_dim);
    for (int i = 0; i < n; ++i) {
        const Frame frame = load_sequence_frame(sequence_dir, i, intr);
        const FuseResult r = fuse_frame(map, frame, model, loss, cfg.depth_cutoff, false, nullptr);
        diag << diagnostics_line(r, i) << "\n";
    }
    save_map(map, map_path);
    std::fprintf(stderr, "fused %d frames into %zu voxels -> %s\n", n, map.size(),
                 map_path.c_str());
    return 0;
}

int cmd_export(const std::string& map_path, const std::string& ply_path,
               const std::string& config_path, const std::string& checkpoint_path) {
    SceneMap map = load_map(map_path);
    if (!checkpoint_path.empty()) {
        RunConfig cfg = config_from(config_path);
        Model model = make_model(cfg);
        load_checkpoint(checkpoint_path, model.ps);
        classify_map(map,
                     [&](const std::vector<double>& f) {
                         return aux_head_apply(model.ps, model.expert.head, f);
                     },
                     cfg.classes);
    }
    export_ply(map, ply_path);
    std::printf("exported %zu voxels to %s\n", map.size(), ply_path.c_str());
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    const auto results = run_gradient_suite(seed);
    std::printf("%s", gradcheck_report(results).c_str());
    if (worst_of(results) >= 1e-5) throw NumericError("gradient check failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-voxel semantic fusion toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, run_dir, data_dir, checkpoint_path, sequence_dir;
    std::string map_path = "map.bin", ply_path, diagnostics_path, split = "eval";
    uint64_t seed = 0;

    auto* synth = app.add_subcommand("synth", "generate synthetic scenes and sequences");
    synth->add_option("--config", config_path, "config file");
    auto* seed_opt = synth->add_option("--seed", seed, "override the config seed");
    synth->add_option("--out", out_dir, "output directory (default: config data_dir)");

    auto* train = app.add_subcommand("train", "run training");
    train->add_option("--config", config_path, "config file");
    train->add_option("--run-dir", run_dir, "override the config run_dir");
    train->add_option("--data", data_dir, "load train_NNN sequences instead of generating");

    auto* eval = app.add_subcommand("eval", "branch metrics report for a checkpoint");
    eval->add_option("--config", config_path, "config file");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "load <split>_NNN sequences instead of generating");
    eval->add_option("--split", split, "eval or train")
        ->check(CLI::IsMember({"eval", "train"}));

    auto* fuse = app.add_subcommand("fuse", "stream a sequence into a map");
    fuse->add_option("--config", config_path, "config file");
    fuse->add_option("--sequence", sequence_dir, "sequence directory")->required();
    fuse->add_option("--checkpoint", checkpoint_path, "checkpoint file");
    fuse->add_option("--out", map_path, "output map file");
    fuse->add_option("--diagnostics", diagnostics_path, "per-frame JSONL (default: stdout)");

    auto* exp = app.add_subcommand("export", "map snapshot to labeled point PLY");
    exp->add_option("--map", map_path, "map file")->required();
    exp->add_option("--out", ply_path, "output PLY")->required();
    exp->add_option("--config", config_path, "config file (with --checkpoint)");
    exp->add_option("--checkpoint", checkpoint_path, "classify features before export");

    auto* grad = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
    grad->add_option("--seed", seed, "suite seed")->default_val(1234);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(config_path, seed, seed_opt->count() > 0, out_dir);
        if (train->parsed()) return cmd_train(config_path, run_dir, data_dir);
        if (eval->parsed()) return cmd_eval(config_path, checkpoint_path, data_dir, split);
        if (fuse->parsed())
            return cmd_fuse(config_path, checkpoint_path, sequence_dir, map_path,
                            diagnostics_path);
        if (exp->parsed()) return cmd_export(map_path, ply_path, config_path, checkpoint_path);
        if (grad->parsed()) return cmd_gradcheck(seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
