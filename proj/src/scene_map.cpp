#include "voxfuse/scene_map.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "voxfuse/errors.hpp"
#include "voxfuse/geometry.hpp"

namespace voxfuse {

namespace {

uint32_t crc32(const char* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i)
        crc = table[(crc ^ static_cast<uint8_t>(data[i])) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

constexpr char kMagic[4] = {'V', 'X', 'M', 'P'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
    std::string buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw FormatError("truncated map snapshot: " + path);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
};

}  // namespace

SceneMap::SceneMap(double resolution, int feature_dim)
    : resolution_(resolution), feature_dim_(feature_dim) {
    if (!(resolution > 0.0)) throw ConfigError("scene map resolution must be positive");
    if (feature_dim < 1) throw ConfigError("scene map feature dimension must be positive");
}

void SceneMap::clear() {
    cells_.clear();
    // the frame counter keeps running; resets only clear contents
}

const VoxelRecord* SceneMap::find(int64_t key) const {
    const auto it = cells_.find(key);
    return it == cells_.end() ? nullptr : &it->second;
}

VoxelRecord& SceneMap::record(int64_t key) {
    const auto it = cells_.find(key);
    if (it == cells_.end()) throw DimensionError("scene map: key not present");
    return it->second;
}

FeatureBlock SceneMap::crop(const std::vector<int64_t>& keys) const {
    FeatureBlock block;
    block.keys = keys;
    block.features = Tensor::zeros({static_cast<int>(keys.size()), feature_dim_});
    block.counts.assign(keys.size(), 0);
    block.novel.assign(keys.size(), 1);
    std::unordered_map<int64_t, int> dedup;
    dedup.reserve(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) {
        if (!dedup.try_emplace(keys[i], static_cast<int>(i)).second)
            throw DimensionError("crop: duplicate voxel key");
        const auto it = cells_.find(keys[i]);
        if (it == cells_.end()) continue;
        const VoxelRecord& rec = it->second;
        for (int c = 0; c < feature_dim_; ++c)
            block.features.at(static_cast<int>(i), c) = rec.feature[static_cast<size_t>(c)];
        block.counts[i] = rec.obs_count;
        block.novel[i] = 0;
    }
    return block;
}

void SceneMap::write_back(const FeatureBlock& block) {
    if (block.features.ndim() != 2 || block.features.rows() != block.size() ||
        block.features.cols() != feature_dim_)
        throw DimensionError("write_back: block shape does not match map");
    if (!block.features.all_finite()) throw NumericError("write_back: non-finite feature");
    for (int i = 0; i < block.size(); ++i) {
        VoxelRecord& rec = cells_[block.keys[static_cast<size_t>(i)]];
        if (rec.feature.empty()) rec.feature.resize(static_cast<size_t>(feature_dim_));
        for (int c = 0; c < feature_dim_; ++c)
            rec.feature[static_cast<size_t>(c)] = block.features.at(i, c);
        ++rec.obs_count;
    }
}

std::vector<int64_t> SceneMap::sorted_keys() const {
    std::vector<int64_t> keys;
    keys.reserve(cells_.size());
    for (const auto& [key, rec] : cells_) keys.push_back(key);
    std::sort(keys.begin(), keys.end());
    return keys;
}

int argmax_lowest(const std::vector<double>& logits) {
    if (logits.empty()) throw DimensionError("argmax on empty logits");
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
        if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

std::vector<std::pair<int64_t, int>> classify_map(SceneMap& map, const LogitsFn& head,
                                                  int num_classes) {
    if (num_classes < 1) throw ConfigError("classify_map: class count must be positive");
    std::vector<std::pair<int64_t, int>> out;
    out.reserve(map.size());
    for (const int64_t key : map.sorted_keys()) {
        VoxelRecord& rec = map.record(key);
        const std::vector<double> logits = head(rec.feature);
        if (static_cast<int>(logits.size()) != num_classes)
            throw DimensionError("classify_map: head produced wrong class count");
        rec.cached_label = argmax_lowest(logits);
        out.emplace_back(key, rec.cached_label);
    }
    return out;
}

void save_map(const SceneMap& map, const std::string& path) {
    std::string payload;
    put_u64(payload, static_cast<uint64_t>(map.frame_counter()));
    put_f64(payload, map.resolution());
    put_u32(payload, static_cast<uint32_t>(map.feature_dim()));
    const auto keys = map.sorted_keys();
    put_u64(payload, keys.size());
    for (const int64_t key : keys) {
        const VoxelRecord* rec = map.find(key);
        put_u64(payload, static_cast<uint64_t>(key));
        put_u32(payload, rec->obs_count);
        put_u32(payload, static_cast<uint32_t>(rec->cached_label));
        for (double v : rec->feature) put_f64(payload, v);
    }

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, crc32(payload.data(), payload.size()));
    out.append(payload);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("write failed: " + path);
}

SceneMap load_map(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{std::move(buf), 0, path};

    {
        r.need(4);
        const std::string magic = r.buf.substr(0, 4);
        r.pos = 4;
        if (magic != std::string(kMagic, 4)) throw FormatError("not a map snapshot: " + path);
    }
    if (r.u32() != kVersion) throw FormatError("unsupported map snapshot version: " + path);
    const uint32_t stored_crc = r.u32();
    if (crc32(r.buf.data() + r.pos, r.buf.size() - r.pos) != stored_crc)
        throw FormatError("map snapshot checksum mismatch: " + path);

    const int64_t frame_counter = static_cast<int64_t>(r.u64());
    const double resolution = r.f64();
    const uint32_t dim = r.u32();
    if (!(resolution > 0.0) || dim == 0 || dim > 4096)
        throw FormatError("implausible map snapshot header: " + path);
    const uint64_t count = r.u64();

    SceneMap map(resolution, static_cast<int>(dim));
    for (uint64_t i = 0; i < count; ++i) {
        const int64_t key = static_cast<int64_t>(r.u64());
        FeatureBlock block;
        block.keys = {key};
        block.features = Tensor::zeros({1, static_cast<int>(dim)});
        const uint32_t obs = r.u32();
        const int label = static_cast<int>(r.u32());
        for (uint32_t c = 0; c < dim; ++c) block.features.at(0, static_cast<int>(c)) = r.f64();
        map.write_back(block);
        VoxelRecord& rec = map.record(key);
        rec.obs_count = obs;
        rec.cached_label = label;
    }
    if (r.pos != r.buf.size()) throw FormatError("trailing bytes in map snapshot: " + path);
    map.set_frame_counter(frame_counter);
    return map;
}

std::array<uint8_t, 3> class_color(int label) {
    static constexpr std::array<std::array<uint8_t, 3>, 20> palette{{
        {31, 119, 180},  {255, 127, 14},  {44, 160, 44},   {214, 39, 40},   {148, 103, 189},
        {140, 86, 75},   {227, 119, 194}, {127, 127, 127}, {188, 189, 34},  {23, 190, 207},
        {174, 199, 232}, {255, 187, 120}, {152, 223, 138}, {255, 152, 150}, {197, 176, 213},
        {196, 156, 148}, {247, 182, 210}, {199, 199, 199}, {219, 219, 141}, {158, 218, 229},
    }};
    if (label < 0) return {128, 128, 128};
    return palette[static_cast<size_t>(label % 20)];
}

void export_ply(const SceneMap& map, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot open for writing: " + path);
    const auto keys = map.sorted_keys();
    f << "ply\nformat ascii 1.0\n";
    f << "element vertex " << keys.size() << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    f << "property int label\nend_header\n";
    for (const int64_t key : keys) {
        const VoxelRecord* rec = map.find(key);
        const Vec3 c = voxel_center(key, map.resolution());
        const auto rgb = class_color(rec->cached_label);
        f << c.x << " " << c.y << " " << c.z << " " << static_cast<int>(rgb[0]) << " "
          << static_cast<int>(rgb[1]) << " " << static_cast<int>(rgb[2]) << " "
          << rec->cached_label << "\n";
    }
    if (!f) throw FormatError("write failed: " + path);
}

}  // namespace voxfuse
