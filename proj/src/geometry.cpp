#include "voxfuse/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "voxfuse/errors.hpp"

namespace voxfuse {

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
    const double n = norm();
    if (n < 1e-300) throw NumericError("cannot normalize a zero vector");
    return {x / n, y / n, z / n};
}

void Intrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("intrinsics: image size must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
        throw ConfigError("intrinsics: principal point outside the image");
}

void Pose::validate() const {
    // R^T R = I and det R = 1, both within 1e-9
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) dot += r[static_cast<size_t>(k * 3 + i)] * r[static_cast<size_t>(k * 3 + j)];
            const double expect = i == j ? 1.0 : 0.0;
            if (std::abs(dot - expect) > 1e-9) throw NumericError("pose rotation is not orthonormal");
        }
    }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (std::abs(det - 1.0) > 1e-9) throw NumericError("pose rotation is not proper (det != 1)");
    if (!std::isfinite(t.x) || !std::isfinite(t.y) || !std::isfinite(t.z))
        throw NumericError("pose translation is not finite");
}

Vec3 Pose::apply(const Vec3& c) const {
    return {r[0] * c.x + r[1] * c.y + r[2] * c.z + t.x,
            r[3] * c.x + r[4] * c.y + r[5] * c.z + t.y,
            r[6] * c.x + r[7] * c.y + r[8] * c.z + t.z};
}

Vec3 Pose::apply_inverse(const Vec3& w) const {
    const Vec3 d = w - t;
    return {r[0] * d.x + r[3] * d.y + r[6] * d.z,
            r[1] * d.x + r[4] * d.y + r[7] * d.z,
            r[2] * d.x + r[5] * d.y + r[8] * d.z};
}

Vec3 backproject(const Intrinsics& intr, double u, double v, double d) {
    return {(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d};
}

std::array<double, 3> project(const Intrinsics& intr, const Vec3& cam) {
    if (cam.z <= 0.0) throw NumericError("project: point behind the camera");
    return {intr.fx * cam.x / cam.z + intr.cx, intr.fy * cam.y / cam.z + intr.cy, cam.z};
}

Image estimate_normals(const Image& depth, const Intrinsics& intr) {
    if (depth.channels != 1) throw DimensionError("estimate_normals: depth must be single-channel");
    if (depth.width != intr.width || depth.height != intr.height)
        throw DimensionError("estimate_normals: depth size does not match intrinsics");
    Image normals(depth.width, depth.height, 3);
    const auto valid = [&](int y, int x) { return depth.at(y, x) > 0.0; };
    for (int v = 1; v < depth.height - 1; ++v) {
        for (int u = 1; u < depth.width - 1; ++u) {
            if (!valid(v, u) || !valid(v, u - 1) || !valid(v, u + 1) || !valid(v - 1, u) ||
                !valid(v + 1, u))
                continue;
            const Vec3 px0 = backproject(intr, u - 1, v, depth.at(v, u - 1));
            const Vec3 px1 = backproject(intr, u + 1, v, depth.at(v, u + 1));
            const Vec3 py0 = backproject(intr, u, v - 1, depth.at(v - 1, u));
            const Vec3 py1 = backproject(intr, u, v + 1, depth.at(v + 1, u));
            const Vec3 n = (px1 - px0).cross(py1 - py0);
            const double len = n.norm();
            if (len < 1e-12) continue;
            Vec3 unit = n * (1.0 / len);
            // orient toward the camera at the origin of the camera frame
            const Vec3 p = backproject(intr, u, v, depth.at(v, u));
            if (unit.dot(p) > 0.0) unit = unit * -1.0;
            normals.at(v, u, 0) = unit.x;
            normals.at(v, u, 1) = unit.y;
            normals.at(v, u, 2) = unit.z;
        }
    }
    return normals;
}

std::vector<LiftedPixel> lift_pixels(const Image& depth, const Intrinsics& intr, const Pose& pose,
                                     double depth_cutoff) {
    if (depth.channels != 1) throw DimensionError("lift: depth must be single-channel");
    if (depth.width != intr.width || depth.height != intr.height)
        throw DimensionError("lift: depth size does not match intrinsics");
    if (depth_cutoff <= 0.0) throw ConfigError("lift: depth cutoff must be positive");
    std::vector<LiftedPixel> out;
    out.reserve(depth.pixel_count() / 2);
    for (int v = 0; v < depth.height; ++v) {
        for (int u = 0; u < depth.width; ++u) {
            const double d = depth.at(v, u);
            if (d <= 0.0 || d > depth_cutoff) continue;
            out.push_back({v * depth.width + u, pose.apply(backproject(intr, u, v, d))});
        }
    }
    return out;
}

std::vector<PointSample> lift(const Frame& frame, const Tensor& features, double depth_cutoff) {
    if (features.ndim() != 2 ||
        features.rows() != static_cast<int>(frame.depth.pixel_count()))
        throw DimensionError("lift: feature rows must match depth resolution");
    const int d = features.cols();
    std::vector<PointSample> out;
    for (const LiftedPixel& lp : lift_pixels(frame.depth, frame.intr, frame.pose, depth_cutoff)) {
        PointSample s;
        s.position = lp.world;
        s.feature.resize(static_cast<size_t>(d));
        for (int c = 0; c < d; ++c) s.feature[static_cast<size_t>(c)] = features.at(lp.pixel, c);
        out.push_back(std::move(s));
    }
    return out;
}

// --- voxel keys -------------------------------------------------------------

namespace {
constexpr int64_t kKeyBits = 21;
constexpr int64_t kKeyOffset = int64_t{1} << (kKeyBits - 1);  // 2^20
constexpr int64_t kKeyRange = int64_t{1} << kKeyBits;
constexpr int64_t kKeyMask = kKeyRange - 1;
}  // namespace

int64_t pack_voxel_key(int64_t ix, int64_t iy, int64_t iz) {
    const int64_t bx = ix + kKeyOffset, by = iy + kKeyOffset, bz = iz + kKeyOffset;
    if (bx < 0 || bx >= kKeyRange || by < 0 || by >= kKeyRange || bz < 0 || bz >= kKeyRange)
        throw NumericError("voxel coordinate overflows the 21-bit key range");
    return (bx << (2 * kKeyBits)) | (by << kKeyBits) | bz;
}

std::array<int64_t, 3> unpack_voxel_key(int64_t key) {
    return {((key >> (2 * kKeyBits)) & kKeyMask) - kKeyOffset,
            ((key >> kKeyBits) & kKeyMask) - kKeyOffset, (key & kKeyMask) - kKeyOffset};
}

int64_t voxel_key_of(const Vec3& p, double resolution) {
    if (!(resolution > 0.0)) throw ConfigError("voxel resolution must be positive");
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        throw NumericError("voxelize: non-finite position");
    return pack_voxel_key(static_cast<int64_t>(std::floor(p.x / resolution)),
                          static_cast<int64_t>(std::floor(p.y / resolution)),
                          static_cast<int64_t>(std::floor(p.z / resolution)));
}

Vec3 voxel_center(int64_t key, double resolution) {
    const auto [ix, iy, iz] = unpack_voxel_key(key);
    return {(static_cast<double>(ix) + 0.5) * resolution,
            (static_cast<double>(iy) + 0.5) * resolution,
            (static_cast<double>(iz) + 0.5) * resolution};
}

VoxelizeResult voxelize(const std::vector<Vec3>& positions, const Tensor& features,
                        double resolution) {
    if (features.ndim() != 2 || features.rows() != static_cast<int>(positions.size()))
        throw DimensionError("voxelize: feature rows must match point count");
    const int d = features.cols();
    VoxelizeResult res;
    res.point_to_cell.resize(positions.size());
    std::unordered_map<int64_t, int> cell_of;
    cell_of.reserve(positions.size());
    for (size_t p = 0; p < positions.size(); ++p) {
        const int64_t key = voxel_key_of(positions[p], resolution);
        auto [it, inserted] = cell_of.try_emplace(key, static_cast<int>(res.keys.size()));
        if (inserted) {
            res.keys.push_back(key);
            res.counts.push_back(0);
        }
        res.point_to_cell[p] = it->second;
        ++res.counts[static_cast<size_t>(it->second)];
    }
    const int n = static_cast<int>(res.keys.size());
    res.features = Tensor::zeros({n, d});
    for (size_t p = 0; p < positions.size(); ++p) {
        const int cell = res.point_to_cell[p];
        for (int c = 0; c < d; ++c) res.features.at(cell, c) += features.at(static_cast<int>(p), c);
    }
    for (int cell = 0; cell < n; ++cell) {
        const double inv = 1.0 / res.counts[static_cast<size_t>(cell)];
        for (int c = 0; c < d; ++c) res.features.at(cell, c) *= inv;
    }
    return res;
}

VoxelizeResult voxelize(const std::vector<PointSample>& points, double resolution) {
    if (points.empty()) return voxelize(std::vector<Vec3>{}, Tensor::zeros({0, 0}), resolution);
    const int d = static_cast<int>(points[0].feature.size());
    std::vector<Vec3> pos(points.size());
    Tensor feats({static_cast<int>(points.size()), d});
    for (size_t p = 0; p < points.size(); ++p) {
        if (static_cast<int>(points[p].feature.size()) != d)
            throw DimensionError("voxelize: inconsistent feature dimensions");
        pos[p] = points[p].position;
        for (int c = 0; c < d; ++c) feats.at(static_cast<int>(p), c) = points[p].feature[static_cast<size_t>(c)];
    }
    return voxelize(pos, feats, resolution);
}

// --- exact kd-tree ----------------------------------------------------------

KdTree3::KdTree3(std::vector<Vec3> points) : pts_(std::move(points)) {
    if (pts_.empty()) throw DimensionError("kd-tree: empty point set");
    std::vector<int> idx(pts_.size());
    for (size_t i = 0; i < pts_.size(); ++i) idx[i] = static_cast<int>(i);
    nodes_.reserve(pts_.size());
    root_ = build(idx, 0, static_cast<int>(pts_.size()), 0);
}

int KdTree3::build(std::vector<int>& idx, int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const int mid = lo + (hi - lo) / 2;
    const auto coord = [&](int i) {
        const Vec3& p = pts_[static_cast<size_t>(i)];
        return axis == 0 ? p.x : axis == 1 ? p.y : p.z;
    };
    std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                     [&](int a, int b) { return coord(a) < coord(b); });
    Node node;
    node.point = idx[static_cast<size_t>(mid)];
    node.axis = axis;
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    nodes_[static_cast<size_t>(self)].left = build(idx, lo, mid, depth + 1);
    nodes_[static_cast<size_t>(self)].right = build(idx, mid + 1, hi, depth + 1);
    return self;
}

void KdTree3::search(int node, const Vec3& q, double& best_d2, int& best_idx) const {
    if (node < 0) return;
    const Node& n = nodes_[static_cast<size_t>(node)];
    const Vec3& p = pts_[static_cast<size_t>(n.point)];
    const Vec3 diff = q - p;
    const double d2 = diff.dot(diff);
    if (d2 < best_d2 || (d2 == best_d2 && n.point < best_idx)) {
        best_d2 = d2;
        best_idx = n.point;
    }
    const double qc = n.axis == 0 ? q.x : n.axis == 1 ? q.y : q.z;
    const double pc = n.axis == 0 ? p.x : n.axis == 1 ? p.y : p.z;
    const double plane = qc - pc;
    const int near = plane < 0.0 ? n.left : n.right;
    const int far = plane < 0.0 ? n.right : n.left;
    search(near, q, best_d2, best_idx);
    // equal plane distance can still hide an equal-distance lower index
    if (plane * plane <= best_d2) search(far, q, best_d2, best_idx);
}

int KdTree3::nearest(const Vec3& q) const {
    double best_d2 = std::numeric_limits<double>::infinity();
    int best_idx = static_cast<int>(pts_.size());
    search(root_, q, best_d2, best_idx);
    return best_idx;
}

std::vector<int> transfer_labels(const std::vector<Vec3>& vertex_positions,
                                 const std::vector<int>& vertex_labels,
                                 const std::vector<Vec3>& queries) {
    if (vertex_positions.empty()) throw DimensionError("transfer_labels: empty vertex set");
    if (vertex_positions.size() != vertex_labels.size())
        throw DimensionError("transfer_labels: vertex/label count mismatch");
    KdTree3 tree(vertex_positions);
    std::vector<int> out(queries.size());
    for (size_t i = 0; i < queries.size(); ++i)
        out[i] = vertex_labels[static_cast<size_t>(tree.nearest(queries[i]))];
    return out;
}

}  // namespace voxfuse
