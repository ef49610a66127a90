#include "voxfuse/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "voxfuse/checkpoint.hpp"
#include "voxfuse/errors.hpp"
#include "voxfuse/sequence.hpp"

namespace voxfuse {

Intrinsics make_intrinsics(const RunConfig& cfg) {
    Intrinsics intr;
    intr.width = cfg.image_width;
    intr.height = cfg.image_height;
    intr.fx = 0.9 * cfg.image_width;
    intr.fy = 0.9 * cfg.image_width;
    intr.cx = cfg.image_width / 2.0;
    intr.cy = cfg.image_height / 2.0;
    intr.validate();
    return intr;
}

uint64_t scene_seed(const RunConfig& cfg, bool eval_split, int index) {
    return cfg.seed + 1 + (eval_split ? static_cast<uint64_t>(cfg.train_scenes) : 0) +
           static_cast<uint64_t>(index);
}

std::vector<TrainScene> build_training_scenes(const RunConfig& cfg, bool eval_split) {
    cfg.validate();
    SceneSpec spec;
    spec.frames = cfg.frames_per_scene;
    spec.depth_noise = cfg.depth_noise;
    const Intrinsics intr = make_intrinsics(cfg);
    const int count = eval_split ? cfg.eval_scenes : cfg.train_scenes;

    std::vector<TrainScene> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        SyntheticScene scene = generate_scene(scene_seed(cfg, eval_split, i), spec);
        TrainScene ts(cfg.voxel_resolution, cfg.feat_dim);
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%03d", eval_split ? "eval" : "train", i);
        ts.name = buf;
        ts.intr = intr;
        Rng noise(scene.seed ^ 0xdeb7'0000ULL);
        Rng* np = cfg.depth_noise > 0.0 ? &noise : nullptr;
        ts.frames.reserve(scene.trajectory.size());
        for (const Pose& pose : scene.trajectory) {
            Frame f;
            f.intr = intr;
            f.pose = pose;
            render_frame(scene, pose, intr, f.color, f.depth, 10.0, np);
            ts.frames.push_back(std::move(f));
        }
        ts.mesh = std::move(scene.mesh);
        ts.labeler = std::make_unique<VoxelLabeler>(ts.mesh, cfg.voxel_resolution);
        out.push_back(std::move(ts));
    }
    return out;
}

void write_scene_datasets(const RunConfig& cfg, const std::string& dir) {
    cfg.validate();
    SceneSpec spec;
    spec.frames = cfg.frames_per_scene;
    spec.depth_noise = cfg.depth_noise;
    const Intrinsics intr = make_intrinsics(cfg);
    for (const bool eval_split : {false, true}) {
        const int count = eval_split ? cfg.eval_scenes : cfg.train_scenes;
        for (int i = 0; i < count; ++i) {
            const SyntheticScene scene = generate_scene(scene_seed(cfg, eval_split, i), spec);
            char buf[32];
            std::snprintf(buf, sizeof buf, "/%s_%03d", eval_split ? "eval" : "train", i);
            Rng noise(scene.seed ^ 0xdeb7'0000ULL);
            write_scene_sequence(dir + buf, scene, intr,
                                 cfg.depth_noise > 0.0 ? &noise : nullptr);
        }
    }
}

std::vector<TrainScene> load_scenes(const std::string& data_dir, const std::string& prefix,
                                    const RunConfig& cfg) {
    namespace fs = std::filesystem;
    std::vector<TrainScene> out;
    for (int i = 0;; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s_%03d", prefix.c_str(), i);
        const std::string dir = data_dir + "/" + buf;
        if (!fs::exists(dir)) break;
        const Intrinsics intr = read_intrinsics_txt(dir + "/intrinsics.txt");
        const int n = count_sequence_frames(dir);
        if (n == 0) throw FormatError("no frames found in " + dir);
        TrainScene ts(cfg.voxel_resolution, cfg.feat_dim);
        ts.name = buf;
        ts.intr = intr;
        ts.frames.reserve(static_cast<size_t>(n));
        for (int k = 0; k < n; ++k) ts.frames.push_back(load_sequence_frame(dir, k, intr));
        ts.mesh = read_labeled_ply(dir + "/mesh.ply");
        ts.labeler = std::make_unique<VoxelLabeler>(ts.mesh, cfg.voxel_resolution);
        out.push_back(std::move(ts));
    }
    return out;
}

EpochPlan plan_epoch(int n_scenes, int frames_per_scene, const RunConfig& cfg, Rng& rng) {
    if (n_scenes < 1 || frames_per_scene < 1)
        throw ConfigError("plan_epoch: need at least one scene and one frame");
    EpochPlan plan;
    plan.reset.resize(static_cast<size_t>(n_scenes));
    std::vector<std::vector<int>> perms(static_cast<size_t>(n_scenes));
    for (int s = 0; s < n_scenes; ++s) {
        plan.reset[static_cast<size_t>(s)] = rng.uniform() < cfg.scene_reset_probability ? 1 : 0;
        perms[static_cast<size_t>(s)] = rng.permutation(frames_per_scene);
    }

    const int fpss = cfg.frames_per_scene_step;
    const int chunks = (frames_per_scene + fpss - 1) / fpss;
    for (int g0 = 0; g0 < n_scenes; g0 += cfg.micro_batch_scenes) {
        const int g1 = std::min(n_scenes, g0 + cfg.micro_batch_scenes);
        int micro_in_step = 0;
        for (int chunk = 0; chunk < chunks; ++chunk) {
            for (int s = g0; s < g1; ++s)
                for (int k = chunk * fpss; k < std::min((chunk + 1) * fpss, frames_per_scene); ++k)
                    plan.visits.push_back({s, perms[static_cast<size_t>(s)][static_cast<size_t>(k)]});
            if (++micro_in_step == cfg.micro_batches) {
                plan.step_boundaries.push_back(plan.visits.size());
                micro_in_step = 0;
            }
        }
        if (micro_in_step != 0) plan.step_boundaries.push_back(plan.visits.size());
    }
    return plan;
}

int steps_per_epoch(int n_scenes, int frames_per_scene, const RunConfig& cfg) {
    const int chunks = (frames_per_scene + cfg.frames_per_scene_step - 1) / cfg.frames_per_scene_step;
    const int per_group = (chunks + cfg.micro_batches - 1) / cfg.micro_batches;
    const int groups = (n_scenes + cfg.micro_batch_scenes - 1) / cfg.micro_batch_scenes;
    return per_group * groups;
}

std::string metrics_line(const EpochMetrics& m) {
    nlohmann::json j;
    j["epoch"] = m.epoch;
    j["steps"] = m.steps;
    j["frames"] = m.frames;
    j["resets"] = m.resets;
    j["loss_2d"] = m.loss_2d;
    j["loss_3d"] = m.loss_3d;
    j["loss_expert"] = m.loss_expert;
    j["loss_total"] = m.loss_total;
    j["acc_2d"] = m.acc_2d;
    j["acc_3d"] = m.acc_3d;
    j["acc_expert"] = m.acc_expert;
    j["lr_core"] = m.lr_core;
    j["lr_2d"] = m.lr_2d;
    return j.dump();
}

Trainer::Trainer(const RunConfig& cfg, std::vector<TrainScene> scenes)
    : cfg_(cfg), loss_(loss_config_of(cfg)), model_(make_model(cfg)),
      scenes_(std::move(scenes)), rng_(cfg.seed ^ 0x7ea1'0001ULL) {
    if (scenes_.empty()) throw ConfigError("trainer: no scenes");
    for (const TrainScene& s : scenes_) {
        if (s.frames.empty()) throw ConfigError("trainer: scene without frames: " + s.name);
        if (s.labeler == nullptr) throw ConfigError("trainer: scene without GT labels: " + s.name);
        if (static_cast<int>(s.frames.size()) != static_cast<int>(scenes_[0].frames.size()))
            throw ConfigError("trainer: scenes must share a frame count");
    }
    schedule_.max_lr = {cfg_.lr_core, cfg_.lr_pretrained_2d};
    schedule_.total_steps = cfg_.epochs * steps_per_epoch(static_cast<int>(scenes_.size()),
                                                          static_cast<int>(scenes_[0].frames.size()),
                                                          cfg_);
    schedule_.warmup_fraction = cfg_.warmup_fraction;
    schedule_.initial_divisor = cfg_.initial_lr_divisor;
    schedule_.final_divisor = cfg_.final_lr_divisor;
    model_.ps.zero_grad();
}

EpochMetrics Trainer::run_epoch() {
    EpochMetrics m;
    m.epoch = epoch_;
    const int frames_per_scene = static_cast<int>(scenes_[0].frames.size());
    const EpochPlan plan =
        plan_epoch(static_cast<int>(scenes_.size()), frames_per_scene, cfg_, rng_);

    for (size_t s = 0; s < scenes_.size(); ++s) {
        if (plan.reset[s]) {
            scenes_[s].map.clear();
            ++m.resets;
        }
    }

    int64_t gt_total[3] = {0, 0, 0};
    int64_t gt_correct[3] = {0, 0, 0};
    size_t boundary = 0;
    for (size_t v = 0; v < plan.visits.size(); ++v) {
        TrainScene& ts = scenes_[static_cast<size_t>(plan.visits[v].scene)];
        const Frame& frame = ts.frames[static_cast<size_t>(plan.visits[v].frame)];
        const FuseResult r = fuse_frame(ts.map, frame, model_, loss_, cfg_.depth_cutoff, true,
                                        ts.labeler.get());
        ++m.frames;
        if (r.has_loss) {
            m.loss_2d += r.loss_2d;
            m.loss_3d += r.loss_3d;
            m.loss_expert += r.loss_expert;
            m.loss_total += r.loss_total;
            for (size_t i = 0; i < r.gt_labels.size(); ++i) {
                for (int b = 0; b < 3; ++b) ++gt_total[b];
                gt_correct[0] += r.labels_2d[i] == r.gt_labels[i];
                gt_correct[1] += r.labels_3d[i] == r.gt_labels[i];
                gt_correct[2] += r.labels_expert[i] == r.gt_labels[i];
            }
        }

        while (boundary < plan.step_boundaries.size() && plan.step_boundaries[boundary] == v + 1) {
            m.lr_core = onecycle_lr(static_cast<int>(step_), schedule_, kGroupCore);
            m.lr_2d = onecycle_lr(static_cast<int>(step_), schedule_, kGroupPretrained2D);
            model_.ps.adam_step_groups({m.lr_core, m.lr_2d});
            model_.ps.zero_grad();
            ++step_;
            ++m.steps;
            ++boundary;
        }
    }

    const double n = std::max(1, m.frames);
    m.loss_2d /= n;
    m.loss_3d /= n;
    m.loss_expert /= n;
    m.loss_total /= n;
    if (gt_total[0] > 0) {
        m.acc_2d = static_cast<double>(gt_correct[0]) / static_cast<double>(gt_total[0]);
        m.acc_3d = static_cast<double>(gt_correct[1]) / static_cast<double>(gt_total[1]);
        m.acc_expert = static_cast<double>(gt_correct[2]) / static_cast<double>(gt_total[2]);
    }
    ++epoch_;
    return m;
}

std::vector<EpochMetrics> Trainer::run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.run_dir);
    save_config(cfg_.run_dir + "/config.cfg", cfg_);
    std::ofstream log(cfg_.run_dir + "/metrics.jsonl");
    if (!log) throw ConfigError("trainer: cannot open metrics log in " + cfg_.run_dir);

    std::vector<EpochMetrics> history;
    history.reserve(static_cast<size_t>(cfg_.epochs));
    for (int e = 0; e < cfg_.epochs; ++e) {
        history.push_back(run_epoch());
        log << metrics_line(history.back()) << "\n";
        log.flush();
        if ((e + 1) % cfg_.checkpoint_every == 0 && e + 1 < cfg_.epochs) {
            char buf[48];
            std::snprintf(buf, sizeof buf, "/checkpoint_%04d.bin", e + 1);
            save_checkpoint(cfg_.run_dir + buf, model_.ps, false, true);
        }
    }
    save_checkpoint(cfg_.run_dir + "/checkpoint_final.bin", model_.ps, false, true);
    return history;
}

}  // namespace voxfuse
