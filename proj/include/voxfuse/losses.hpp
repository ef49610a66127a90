#pragma once

#include <vector>

#include "voxfuse/autograd.hpp"

namespace voxfuse {

struct LossConfig {
    double lambda_2d = 1.0, lambda_3d = 1.0, lambda_expert = 1.0;
    double gamma = 1.0;
    int ignore_label = -1;
    int num_classes = 8;

    void validate() const;
};

/// (1 - p)^gamma * (-ln max(p, 1e-12)) for one probability vector.
double focal_loss(const std::vector<double>& probs, int target, double gamma);

/// Batched focal loss over logits [N x C]: softmax per row, rows with
/// target == ignore_label dropped, mean over the rest. No contributing rows
/// yields a constant zero.
VarId focal_loss_rows(Tape& t, VarId logits, const std::vector<int>& targets,
                      const LossConfig& cfg);

double composite_loss(double l2d, double l3d, double lexpert, const LossConfig& cfg);
VarId composite_loss(Tape& t, VarId l2d, VarId l3d, VarId lexpert, const LossConfig& cfg);

}  // namespace voxfuse
