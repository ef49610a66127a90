#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxfuse/tensor.hpp"

namespace voxfuse {

struct ParamEntry {
    std::string name;
    Tensor value;
    Tensor grad;   // accumulates across frames until zero_grad
    Tensor m, v;   // Adam moments
    int group = 0;
};

/// Ordered collection of named parameters. Insertion order is the canonical
/// iteration order everywhere (updates, checkpoints), which keeps training
/// trajectories bit-identical across runs.
class ParamStore {
public:
    int add(std::string name, Tensor init, int group = 0);

    ParamEntry& entry(int i) { return entries_[static_cast<size_t>(i)]; }
    const ParamEntry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
    int find(const std::string& name) const;  // -1 when absent
    int count() const { return static_cast<int>(entries_.size()); }
    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t s) { step_count_ = s; }
    size_t num_scalars() const;

    void zero_grad();

    /// One Adam update with bias correction at a single rate. Gradients are
    /// left intact; callers zero them explicitly.
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Same update with one rate per parameter group.
    void adam_step_groups(const std::vector<double>& group_lrs, double beta1 = 0.9,
                          double beta2 = 0.999, double eps = 1e-8);

private:
    std::vector<ParamEntry> entries_;
    int64_t step_count_ = 0;
};

struct ScheduleConfig {
    std::vector<double> max_lr{1e-3};  // one per parameter group
    int total_steps = 1;
    double warmup_fraction = 0.3;
    double initial_divisor = 25.0;
    double final_divisor = 1e4;
};

/// One-cycle rate for a parameter group: cosine ramp from max/initial_divisor
/// to max over the warmup span, cosine decay to max/final_divisor after.
/// Steps beyond total_steps clamp to the final value.
double onecycle_lr(int step, const ScheduleConfig& cfg, int group = 0);

}  // namespace voxfuse
