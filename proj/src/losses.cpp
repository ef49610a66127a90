#include "voxfuse/losses.hpp"

#include <cmath>

#include "voxfuse/errors.hpp"

namespace voxfuse {

void LossConfig::validate() const {
    if (lambda_2d < 0.0 || lambda_3d < 0.0 || lambda_expert < 0.0)
        throw ConfigError("loss weights must be nonnegative");
    if (gamma < 0.0) throw ConfigError("focal gamma must be nonnegative");
    if (num_classes < 2) throw ConfigError("need at least two classes");
}

double focal_loss(const std::vector<double>& probs, int target, double gamma) {
    if (target < 0 || target >= static_cast<int>(probs.size()))
        throw DimensionError("focal_loss: target out of range");
    const double p = probs[static_cast<size_t>(target)];
    if (!std::isfinite(p) || p < 0.0 || p > 1.0 + 1e-9)
        throw NumericError("focal_loss: probability outside [0,1]");
    return std::pow(1.0 - p, gamma) * -std::log(std::max(p, 1e-12));
}

VarId focal_loss_rows(Tape& t, VarId logits, const std::vector<int>& targets,
                      const LossConfig& cfg) {
    const Tensor& v = t.val(logits);
    if (v.ndim() != 2 || v.cols() != cfg.num_classes)
        throw DimensionError("focal_loss_rows: logits must be [N x num_classes]");
    if (static_cast<int>(targets.size()) != v.rows())
        throw DimensionError("focal_loss_rows: one target per row required");

    std::vector<int> keep_rows;
    std::vector<int> keep_targets;
    for (size_t i = 0; i < targets.size(); ++i) {
        const int label = targets[i];
        if (label == cfg.ignore_label) continue;
        if (label < 0 || label >= cfg.num_classes)
            throw DimensionError("focal_loss_rows: target out of range");
        keep_rows.push_back(static_cast<int>(i));
        keep_targets.push_back(label);
    }
    if (keep_rows.empty()) return t.constant(Tensor::scalar(0.0));

    const VarId kept = t.gather_rows(logits, std::move(keep_rows));
    const VarId probs = t.softmax_rows(kept);
    const VarId p = t.gather_target(probs, std::move(keep_targets));
    return t.mean_all(t.focal_term(p, cfg.gamma));
}

double composite_loss(double l2d, double l3d, double lexpert, const LossConfig& cfg) {
    return cfg.lambda_2d * l2d + cfg.lambda_3d * l3d + cfg.lambda_expert * lexpert;
}

VarId composite_loss(Tape& t, VarId l2d, VarId l3d, VarId lexpert, const LossConfig& cfg) {
    return t.add(t.add(t.scale(l2d, cfg.lambda_2d), t.scale(l3d, cfg.lambda_3d)),
                 t.scale(lexpert, cfg.lambda_expert));
}

}  // namespace voxfuse
