#pragma once

#include <string>
#include <vector>

#include "voxfuse/metrics.hpp"
#include "voxfuse/pipeline.hpp"
#include "voxfuse/trainer.hpp"

namespace voxfuse {

struct BranchEval {
    ConfusionMatrix cm_2d;
    ConfusionMatrix cm_3d;
    ConfusionMatrix cm_expert;

    BranchEval(int classes, int ignore_label)
        : cm_2d(classes, ignore_label), cm_3d(classes, ignore_label),
          cm_expert(classes, ignore_label) {}
};

// Runs each scene through a fresh map in natural frame order without
// recording gradients. The 2D and 3D branches cast one per-frame vote per
// touched voxel (majority wins, ties to the lowest class); the fused branch
// is read from the final map. All three are scored against the same
// mesh-transferred voxel ground truth.
BranchEval evaluate_branches(std::vector<TrainScene>& scenes, Model& model,
                             const RunConfig& cfg);

std::string evaluation_report(const BranchEval& ev);

}  // namespace voxfuse
