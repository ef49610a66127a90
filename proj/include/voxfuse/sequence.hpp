#pragma once

#include <string>

#include "voxfuse/geometry.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/synth.hpp"

namespace voxfuse {

// On-disk sequence layout, one directory per scene:
//   intrinsics.txt              fx/fy/cx/cy/width/height, key-value text
//   color_00000.ppm             binary P6, 8-bit
//   depth_00000.pgm             binary P5, 16-bit big-endian, millimeters, 0 = invalid
//   pose_00000.txt              4x4 row-major camera-to-world, text
//   mesh.ply                    labeled ground-truth mesh (when available)
// Frame indices are contiguous from zero; a frame exists iff all three of its
// files exist.

std::string frame_color_path(const std::string& dir, int index);
std::string frame_depth_path(const std::string& dir, int index);
std::string frame_pose_path(const std::string& dir, int index);

void write_ppm(const std::string& path, const Image& color);
Image read_ppm(const std::string& path);

/// Depth in meters goes to disk as rounded integer millimeters and back.
void write_depth_pgm(const std::string& path, const Image& depth);
Image read_depth_pgm(const std::string& path);

void write_pose_txt(const std::string& path, const Pose& pose);
Pose read_pose_txt(const std::string& path);  // orthonormality checked within 1e-6

void write_intrinsics_txt(const std::string& path, const Intrinsics& intr);
Intrinsics read_intrinsics_txt(const std::string& path);

void write_labeled_ply(const std::string& path, const LabeledMesh& mesh);
LabeledMesh read_labeled_ply(const std::string& path);

/// Number of contiguous complete frames starting at index 0.
int count_sequence_frames(const std::string& dir);

void write_sequence_frame(const std::string& dir, int index, const Image& color,
                          const Image& depth, const Pose& pose);

/// Loads color, depth, pose, and intrinsics; normals are left empty for the
/// caller to estimate.
Frame load_sequence_frame(const std::string& dir, int index, const Intrinsics& intr);

/// Renders a whole scene to `dir`: intrinsics, every trajectory frame, and
/// the labeled mesh. Depth noise is drawn from the scene spec when `noise`
/// is given.
void write_scene_sequence(const std::string& dir, const SyntheticScene& scene,
                          const Intrinsics& intr, Rng* noise = nullptr);

}  // namespace voxfuse
