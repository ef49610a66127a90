#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

namespace voxfuse {

/// Rows are ground truth, columns predictions. Points whose GT equals the
/// ignore label never enter the counts.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes, int ignore_label = -1);

    void add(int pred, int gt);
    void merge(const ConfusionMatrix& other);

    int num_classes() const { return classes_; }
    int ignore_label() const { return ignore_; }
    int64_t at(int gt, int pred) const;
    int64_t total() const;

    /// IoU per class; classes absent from both GT and predictions come back
    /// as NaN and are skipped by summary().
    std::vector<double> iou_per_class() const;

    struct Summary {
        double miou = 0.0, macc = 0.0, wiou = 0.0;
    };
    Summary summary() const;

private:
    int classes_;
    int ignore_;
    std::vector<int64_t> counts_;
};

/// Per-voxel class-vote histograms for one branch.
class BranchVotes {
public:
    explicit BranchVotes(int num_classes) : classes_(num_classes) {}

    void add(int64_t key, int label);
    /// Majority label; ties resolve to the lowest class id, unseen keys to -1.
    int majority(int64_t key) const;
    int num_classes() const { return classes_; }
    const std::unordered_map<int64_t, std::vector<int64_t>>& histograms() const { return votes_; }

private:
    int classes_;
    std::unordered_map<int64_t, std::vector<int64_t>> votes_;
};

}  // namespace voxfuse
