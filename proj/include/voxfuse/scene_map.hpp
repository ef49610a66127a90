#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxfuse/tensor.hpp"

namespace voxfuse {

struct VoxelRecord {
    std::vector<double> feature;
    uint32_t obs_count = 0;
    int cached_label = -1;  // -1 until classify_map runs
};

/// Aligned per-voxel features for one frame's working set. Rows follow keys;
/// novel marks keys that were absent from the map at crop time.
struct FeatureBlock {
    std::vector<int64_t> keys;
    Tensor features;  // [N x D]
    std::vector<uint32_t> counts;
    std::vector<uint8_t> novel;

    int size() const { return static_cast<int>(keys.size()); }
};

/// Sparse voxel hash grid holding the learned global scene state. Only the
/// fusion step writes; crops are read-only and O(|keys|) regardless of how
/// large the map has grown.
class SceneMap {
public:
    SceneMap(double resolution, int feature_dim);

    double resolution() const { return resolution_; }
    int feature_dim() const { return feature_dim_; }
    size_t size() const { return cells_.size(); }
    int64_t frame_counter() const { return frame_counter_; }
    void advance_frame() { ++frame_counter_; }
    void set_frame_counter(int64_t v) { frame_counter_ = v; }
    void clear();

    bool contains(int64_t key) const { return cells_.count(key) != 0; }
    const VoxelRecord* find(int64_t key) const;
    VoxelRecord& record(int64_t key);  // throws if absent

    FeatureBlock crop(const std::vector<int64_t>& keys) const;
    void write_back(const FeatureBlock& block);

    std::vector<int64_t> sorted_keys() const;

private:
    double resolution_;
    int feature_dim_;
    int64_t frame_counter_ = 0;
    std::unordered_map<int64_t, VoxelRecord> cells_;
};

/// Per-voxel classification: runs the supplied head on each stored feature,
/// caches the argmax label (ties to the lowest class index), and returns
/// (key, label) pairs in sorted key order.
using LogitsFn = std::function<std::vector<double>(const std::vector<double>&)>;
std::vector<std::pair<int64_t, int>> classify_map(SceneMap& map, const LogitsFn& head,
                                                  int num_classes);

int argmax_lowest(const std::vector<double>& logits);  // tie -> lowest index

/// Snapshot persistence: versioned, CRC-checked, little-endian, canonical
/// (sorted-key) layout so identical maps produce identical bytes.
void save_map(const SceneMap& map, const std::string& path);
SceneMap load_map(const std::string& path);

/// ASCII PLY of voxel centers with palette colors and a label property.
void export_ply(const SceneMap& map, const std::string& path);

/// Fixed 20-color palette used by exports; labels beyond it wrap around.
std::array<uint8_t, 3> class_color(int label);

}  // namespace voxfuse
