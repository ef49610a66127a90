#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxfuse/image.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const;
    Vec3 normalized() const;  // throws NumericError on (near-)zero length
};

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 0, height = 0;

    void validate() const;
};

/// Camera-to-world transform: world = R * cam + t.
struct Pose {
    std::array<double, 9> r{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major rotation
    Vec3 t;

    void validate() const;  // orthonormality and det within 1e-9
    Vec3 apply(const Vec3& cam) const;
    Vec3 apply_inverse(const Vec3& world) const;
};

struct PointSample {
    Vec3 position;  // world frame
    std::vector<double> feature;
    int label = -1;
};

struct Frame {
    Image color;    // 3 channels in [0,1]
    Image depth;    // meters, 0 invalid
    Image normals;  // camera-frame unit vectors, (0,0,0) invalid
    Intrinsics intr;
    Pose pose;
};

/// Back-projects a pixel (u, v) with depth d into the camera frame.
Vec3 backproject(const Intrinsics& intr, double u, double v, double d);

/// Camera-frame point -> (u, v, depth).
std::array<double, 3> project(const Intrinsics& intr, const Vec3& cam);

/// Per-pixel normals from central differences of back-projected points,
/// unit length, oriented toward the camera. A pixel is invalid (0,0,0) when
/// it sits on the border or any depth in its 5-point stencil is invalid.
Image estimate_normals(const Image& depth, const Intrinsics& intr);

/// One valid pixel after depth filtering: its flat pixel index and world point.
struct LiftedPixel {
    int pixel = 0;  // v * width + u
    Vec3 world;
};

/// Pixels with 0 < depth <= cutoff, back-projected through the pose.
/// Row-major pixel order.
std::vector<LiftedPixel> lift_pixels(const Image& depth, const Intrinsics& intr, const Pose& pose,
                                     double depth_cutoff);

/// Same filtering, carrying per-pixel feature rows [H*W x D] into samples.
std::vector<PointSample> lift(const Frame& frame, const Tensor& features, double depth_cutoff);

// --- voxel keys: three signed 21-bit cell coordinates packed into 64 bits ---

int64_t pack_voxel_key(int64_t ix, int64_t iy, int64_t iz);  // overflow -> NumericError
std::array<int64_t, 3> unpack_voxel_key(int64_t key);
int64_t voxel_key_of(const Vec3& p, double resolution);      // floor convention
Vec3 voxel_center(int64_t key, double resolution);

/// Deduplicated cells in first-occurrence order with per-cell mean features.
struct VoxelizeResult {
    std::vector<int64_t> keys;
    Tensor features;                // [N x D] per-cell means
    std::vector<int> counts;        // points per cell
    std::vector<int> point_to_cell; // input point -> row index
};

VoxelizeResult voxelize(const std::vector<Vec3>& positions, const Tensor& features,
                        double resolution);
VoxelizeResult voxelize(const std::vector<PointSample>& points, double resolution);

/// Exact 3-D nearest neighbor with ties broken by smallest point index.
class KdTree3 {
public:
    explicit KdTree3(std::vector<Vec3> points);  // throws DimensionError on empty
    int nearest(const Vec3& query) const;
    size_t size() const { return pts_.size(); }

private:
    struct Node {
        int point = -1;
        int axis = 0;
        int left = -1, right = -1;
    };
    int build(std::vector<int>& idx, int lo, int hi, int depth);
    void search(int node, const Vec3& q, double& best_d2, int& best_idx) const;

    std::vector<Vec3> pts_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Label of the Euclidean-nearest vertex for each query point.
std::vector<int> transfer_labels(const std::vector<Vec3>& vertex_positions,
                                 const std::vector<int>& vertex_labels,
                                 const std::vector<Vec3>& queries);

}  // namespace voxfuse
