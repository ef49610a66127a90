#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxfuse/geometry.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/rng.hpp"

namespace voxfuse {

// Synthetic benchmark class ids.
enum : int {
    kClassFloor = 0,
    kClassWall = 1,
    kClassBoxFurniture = 2,
    kClassCylinderFurniture = 3,
    kClassSphereObject = 4,
    kClassTableSlab = 5,
    kClassDoorPanel = 6,
    kClassClutter = 7,
    kNumClasses = 8,
};

struct SceneSpec {
    double room_x = 4.0, room_y = 3.2, room_z = 2.4;  // interior extent, meters; z up
    int furniture_boxes = 2;
    int cylinders = 2;
    int spheres = 2;
    int tables = 1;
    int clutter = 3;
    bool door = true;
    int frames = 40;
    double mesh_step = 0.06;     // GT tessellation target edge length
    double depth_noise = 0.0;    // stddev in meters, 0 = off
};

struct SynthBox {
    Vec3 lo, hi;
    int label = 0;
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
};

struct SynthCylinder {  // axis +z from base
    Vec3 base;
    double radius = 0.1, height = 0.5;
    int label = 0;
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
};

struct SynthSphere {
    Vec3 center;
    double radius = 0.1;
    int label = 0;
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
};

struct LabeledMesh {
    std::vector<Vec3> vertices;
    std::vector<int> vertex_labels;
    std::vector<std::array<int, 3>> triangles;
};

struct SyntheticScene {
    uint64_t seed = 0;
    SceneSpec spec;
    std::vector<SynthBox> boxes;
    std::vector<SynthCylinder> cylinders;
    std::vector<SynthSphere> spheres;
    LabeledMesh mesh;
    std::vector<Pose> trajectory;
};

/// Deterministic room: floor and walls always, the other classes per spec
/// counts. Throws ConfigError when objects cannot be placed without overlap.
SyntheticScene generate_scene(uint64_t seed, const SceneSpec& spec);

struct RayHit {
    bool hit = false;
    double depth = 0.0;  // camera-z, not ray length
    Vec3 normal;         // world frame, unit
    int label = -1;
    std::array<double, 3> albedo{0, 0, 0};
};

/// Analytic nearest intersection along the pixel ray; depth is camera z.
RayHit cast_ray(const SyntheticScene& scene, const Pose& pose, const Intrinsics& intr, double u,
                double v, double max_depth);

/// Lambert-shaded color and metric depth (0 where no surface is hit).
/// noise, when nonzero, perturbs depth with centered Gaussian draws.
void render_frame(const SyntheticScene& scene, const Pose& pose, const Intrinsics& intr,
                  Image& color, Image& depth, double max_depth = 10.0, Rng* noise = nullptr);

/// Camera-to-world pose looking from eye toward target, world z up, image
/// y pointing down in world.
Pose look_at(const Vec3& eye, const Vec3& target);

}  // namespace voxfuse
