#include "voxfuse/metrics.hpp"

#include <cmath>
#include <limits>

#include "voxfuse/errors.hpp"

namespace voxfuse {

ConfusionMatrix::ConfusionMatrix(int num_classes, int ignore_label)
    : classes_(num_classes), ignore_(ignore_label),
      counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 2) throw ConfigError("confusion matrix needs at least two classes");
}

void ConfusionMatrix::add(int pred, int gt) {
    if (gt == ignore_) return;
    if (gt < 0 || gt >= classes_ || pred < 0 || pred >= classes_)
        throw DimensionError("confusion matrix: class id out of range");
    ++counts_[static_cast<size_t>(gt) * classes_ + pred];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("confusion matrix: size mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionMatrix::at(int gt, int pred) const {
    if (gt < 0 || gt >= classes_ || pred < 0 || pred >= classes_)
        throw DimensionError("confusion matrix: class id out of range");
    return counts_[static_cast<size_t>(gt) * classes_ + pred];
}

int64_t ConfusionMatrix::total() const {
    int64_t n = 0;
    for (const int64_t c : counts_) n += c;
    return n;
}

std::vector<double> ConfusionMatrix::iou_per_class() const {
    std::vector<double> iou(static_cast<size_t>(classes_),
                            std::numeric_limits<double>::quiet_NaN());
    for (int c = 0; c < classes_; ++c) {
        const int64_t tp = counts_[static_cast<size_t>(c) * classes_ + c];
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < classes_; ++o) {
            if (o == c) continue;
            fp += counts_[static_cast<size_t>(o) * classes_ + c];
            fn += counts_[static_cast<size_t>(c) * classes_ + o];
        }
        const int64_t denom = tp + fp + fn;
        if (denom > 0)
            iou[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return iou;
}

ConfusionMatrix::Summary ConfusionMatrix::summary() const {
    const int64_t n = total();
    if (n == 0) throw DimensionError("summary of an empty confusion matrix");
    const std::vector<double> iou = iou_per_class();

    Summary s;
    int defined = 0;
    for (const double v : iou)
        if (!std::isnan(v)) {
            s.miou += v;
            ++defined;
        }
    s.miou /= defined;  // defined >= 1 whenever n > 0

    int present = 0;
    for (int c = 0; c < classes_; ++c) {
        const int64_t tp = counts_[static_cast<size_t>(c) * classes_ + c];
        int64_t gt_total = 0;
        for (int p = 0; p < classes_; ++p) gt_total += counts_[static_cast<size_t>(c) * classes_ + p];
        if (gt_total == 0) continue;
        s.macc += static_cast<double>(tp) / static_cast<double>(gt_total);
        ++present;
        s.wiou += static_cast<double>(gt_total) / static_cast<double>(n) * iou[static_cast<size_t>(c)];
    }
    s.macc /= present;
    return s;
}

void BranchVotes::add(int64_t key, int label) {
    if (label < 0 || label >= classes_) throw DimensionError("branch vote: label out of range");
    const auto it = votes_.try_emplace(key, static_cast<size_t>(classes_), 0).first;
    ++it->second[static_cast<size_t>(label)];
}

int BranchVotes::majority(int64_t key) const {
    const auto it = votes_.find(key);
    if (it == votes_.end()) return -1;
    int best = 0;
    for (int c = 1; c < classes_; ++c)
        if (it->second[static_cast<size_t>(c)] > it->second[static_cast<size_t>(best)]) best = c;
    return best;
}

}  // namespace voxfuse
