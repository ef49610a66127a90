#pragma once

#include <memory>
#include <string>
#include <vector>

#include "voxfuse/pipeline.hpp"

namespace voxfuse {

/// One scene's training assets: frames, GT mesh, label cache, and the
/// persistent map carried across epochs.
struct TrainScene {
    std::string name;
    Intrinsics intr;
    std::vector<Frame> frames;
    LabeledMesh mesh;
    std::unique_ptr<VoxelLabeler> labeler;
    SceneMap map;

    TrainScene(double resolution, int feat_dim) : map(resolution, feat_dim) {}
};

Intrinsics make_intrinsics(const RunConfig& cfg);

/// Seed of the index-th scene of a split. The eval split is offset past the
/// train seeds, so splits never overlap.
uint64_t scene_seed(const RunConfig& cfg, bool eval_split, int index);

/// Procedural in-memory scene sets, one TrainScene per scene_seed.
std::vector<TrainScene> build_training_scenes(const RunConfig& cfg, bool eval_split = false);

/// Renders every scene of both splits to sequence directories
/// (`train_NNN`, `eval_NNN`) under dir, byte-identical for a config.
void write_scene_datasets(const RunConfig& cfg, const std::string& dir);

/// Loads sequence directories `<data_dir>/<prefix>_NNN` (three-digit indices
/// from 000, contiguous) written by the synth tool.
std::vector<TrainScene> load_scenes(const std::string& data_dir, const std::string& prefix,
                                    const RunConfig& cfg);

/// One epoch's processing order. Scenes advance in fixed groups of
/// micro_batch_scenes; each micro-batch takes frames_per_scene_step frames
/// from every scene in the group, and an optimizer step fires after
/// micro_batches micro-batches (plus a flush at each group boundary).
struct EpochPlan {
    struct Visit {
        int scene = 0;
        int frame = 0;
        bool operator==(const Visit&) const = default;
    };
    std::vector<uint8_t> reset;           // per scene: clear the map this epoch
    std::vector<Visit> visits;            // every (scene, frame) exactly once
    std::vector<size_t> step_boundaries;  // optimizer step after this many visits
};

EpochPlan plan_epoch(int n_scenes, int frames_per_scene, const RunConfig& cfg, Rng& rng);
int steps_per_epoch(int n_scenes, int frames_per_scene, const RunConfig& cfg);

struct EpochMetrics {
    int epoch = 0;
    int steps = 0;
    int frames = 0;
    int resets = 0;
    double loss_2d = 0, loss_3d = 0, loss_expert = 0, loss_total = 0;  // per-frame means
    double acc_2d = 0, acc_3d = 0, acc_expert = 0;  // voxel-weighted label accuracy
    double lr_core = 0, lr_2d = 0;                  // rates of the epoch's last step
};

std::string metrics_line(const EpochMetrics& m);

/// Sequential trainer: owns the model, the protocol RNG, and the step
/// counter. Same config and scenes reproduce the same trajectory bit for bit.
class Trainer {
public:
    Trainer(const RunConfig& cfg, std::vector<TrainScene> scenes);

    EpochMetrics run_epoch();

    /// Full run: config snapshot, metrics log, periodic and final
    /// checkpoints under cfg.run_dir.
    std::vector<EpochMetrics> run();

    Model& model() { return model_; }
    std::vector<TrainScene>& scenes() { return scenes_; }
    int64_t step() const { return step_; }
    int epoch() const { return epoch_; }
    const ScheduleConfig& schedule() const { return schedule_; }

private:
    RunConfig cfg_;
    LossConfig loss_;
    Model model_;
    std::vector<TrainScene> scenes_;
    Rng rng_;
    ScheduleConfig schedule_;
    int64_t step_ = 0;
    int epoch_ = 0;
};

}  // namespace voxfuse
