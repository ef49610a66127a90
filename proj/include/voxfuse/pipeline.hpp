#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxfuse/config.hpp"
#include "voxfuse/encoders.hpp"
#include "voxfuse/expert.hpp"
#include "voxfuse/losses.hpp"
#include "voxfuse/scene_map.hpp"
#include "voxfuse/synth.hpp"

namespace voxfuse {

/// Parameter groups: core weights train at the full rate, the 2D backbone at
/// the reduced rate reserved for pretrained weights.
enum : int { kGroupCore = 0, kGroupPretrained2D = 1 };

struct Model {
    ParamStore ps;
    Encoder2DParams enc2d;
    Encoder3DParams enc3d;
    ExpertParams expert;
    int feat_dim = 0;
    int classes = 0;
};

/// Builds all parameters from cfg.seed. Same config, same bytes.
Model make_model(const RunConfig& cfg);

LossConfig loss_config_of(const RunConfig& cfg);

/// Nearest-mesh-vertex class at voxel centers, memoized per key. One
/// instance per scene amortizes the kd-tree across frames and epochs.
class VoxelLabeler {
public:
    VoxelLabeler(const LabeledMesh& mesh, double resolution);

    int label_of(int64_t key) const;
    std::vector<int> labels_of(const std::vector<int64_t>& keys) const;

private:
    KdTree3 tree_;
    std::vector<int> vertex_labels_;
    double resolution_;
    mutable std::unordered_map<int64_t, int> cache_;
};

struct FuseResult {
    int lifted_points = 0;
    int block_size = 0;
    int novel_voxels = 0;
    std::vector<int64_t> keys;
    std::vector<int> labels_2d, labels_3d, labels_expert;  // per-voxel argmax
    std::vector<int> gt_labels;                            // filled when a labeler is given
    std::vector<std::array<double, 3>> mean_attention;     // per layer: g, 3D, 2D
    bool has_loss = false;
    double loss_2d = 0.0, loss_3d = 0.0, loss_expert = 0.0, loss_total = 0.0;
};

/// One frame through the full pipeline: 2D encode, lift, voxelize, 3D encode,
/// history crop, expert fusion, write-back. With `train` the composite loss
/// gradient is accumulated into the model's parameter store (the caller zeros
/// and steps). A frame with no usable depth is a no-op. The cropped history
/// enters the graph as a constant: no gradient flows into past frames.
FuseResult fuse_frame(SceneMap& map, const Frame& frame, Model& model, const LossConfig& loss_cfg,
                      double depth_cutoff, bool train, const VoxelLabeler* labeler = nullptr);

/// One JSON object per frame for the diagnostics stream.
std::string diagnostics_line(const FuseResult& r, int64_t frame_index);

}  // namespace voxfuse
