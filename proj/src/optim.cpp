#include "voxfuse/optim.hpp"

#include <cmath>
#include <numbers>

#include "voxfuse/errors.hpp"

namespace voxfuse {

int ParamStore::add(std::string name, Tensor init, int group) {
    if (name.empty()) throw ConfigError("param name must not be empty");
    if (find(name) >= 0) throw ConfigError("duplicate param name: " + name);
    if (group < 0) throw ConfigError("param group must be >= 0");
    ParamEntry e;
    e.name = std::move(name);
    e.grad = Tensor::zeros(init.shape());
    e.m = Tensor::zeros(init.shape());
    e.v = Tensor::zeros(init.shape());
    e.value = std::move(init);
    e.group = group;
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size() - 1);
}

int ParamStore::find(const std::string& name) const {
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

size_t ParamStore::num_scalars() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps) {
    int max_group = 0;
    for (const auto& e : entries_) max_group = std::max(max_group, e.group);
    adam_step_groups(std::vector<double>(static_cast<size_t>(max_group) + 1, lr), beta1, beta2, eps);
}

void ParamStore::adam_step_groups(const std::vector<double>& group_lrs, double beta1, double beta2,
                                  double eps) {
    for (double lr : group_lrs) {
        if (lr <= 0.0) throw ConfigError("adam_step: learning rate must be positive");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0)
        throw ConfigError("adam_step: invalid betas/eps");
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (auto& e : entries_) {
        if (static_cast<size_t>(e.group) >= group_lrs.size())
            throw ConfigError("adam_step: missing learning rate for group of " + e.name);
        const double lr = group_lrs[static_cast<size_t>(e.group)];
        for (size_t i = 0; i < e.value.size(); ++i) {
            const double g = e.grad[i];
            e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g;
            e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g * g;
            const double mhat = e.m[i] / bc1;
            const double vhat = e.v[i] / bc2;
            e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double onecycle_lr(int step, const ScheduleConfig& cfg, int group) {
    if (group < 0 || static_cast<size_t>(group) >= cfg.max_lr.size())
        throw ConfigError("onecycle_lr: unknown parameter group");
    const double max_lr = cfg.max_lr[static_cast<size_t>(group)];
    if (max_lr <= 0.0) throw ConfigError("onecycle_lr: max_lr must be positive");
    if (cfg.total_steps < 1) throw ConfigError("onecycle_lr: total_steps must be >= 1");
    if (!(cfg.warmup_fraction > 0.0 && cfg.warmup_fraction < 1.0))
        throw ConfigError("onecycle_lr: warmup_fraction must lie in (0, 1)");
    if (cfg.initial_divisor < 1.0 || cfg.final_divisor < 1.0)
        throw ConfigError("onecycle_lr: divisors must be >= 1");
    if (step < 0) throw ConfigError("onecycle_lr: negative step");

    const double lo = max_lr / cfg.initial_divisor;
    const double fin = max_lr / cfg.final_divisor;
    const double warmup = cfg.warmup_fraction * cfg.total_steps;
    const double s = static_cast<double>(step);
    if (s <= warmup) {
        const double u = s / warmup;
        return lo + (max_lr - lo) * 0.5 * (1.0 - std::cos(std::numbers::pi * u));
    }
    double u = (s - warmup) / (cfg.total_steps - warmup);
    u = std::min(u, 1.0);
    return fin + (max_lr - fin) * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

}  // namespace voxfuse
