#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "voxfuse/autograd.hpp"
#include "voxfuse/geometry.hpp"
#include "voxfuse/optim.hpp"
#include "voxfuse/rng.hpp"

namespace voxfuse {

/// Tape leaf for a stored parameter; gradient flows to its slot when train.
VarId param(Tape& t, ParamStore& ps, int idx, bool train);

Tensor init_normal(Rng& rng, std::vector<int> shape, double stddev);

// Small enough that normalized activations sit within 1e-6 of unit variance
// even for low-variance features (the bounded-state checks need that slack).
constexpr double kLayerNormEps = 1e-12;

/// Two affine layers with a layer norm and rectifier between: the shared
/// classifier architecture hung off the 2D, 3D, and expert features.
struct AuxHeadParams {
    int in_dim = 0, hidden = 0, classes = 0;
    int w1 = -1, b1 = -1, ln_g = -1, ln_b = -1, w2 = -1, b2 = -1;
};

AuxHeadParams make_aux_head(ParamStore& ps, Rng& rng, const std::string& prefix, int in_dim,
                            int hidden, int classes, int group = 0);
VarId aux_head(Tape& t, ParamStore& ps, const AuxHeadParams& p, VarId features, bool train);

/// Inference-path head on one stored feature vector (used by map labeling).
std::vector<double> aux_head_apply(ParamStore& ps, const AuxHeadParams& p,
                                   const std::vector<double>& feature);

// --- 2D encoder --------------------------------------------------------------

/// Small reference net over RGB + depth + normals: four stride-preserving 3x3
/// convolutions, one stride-2/up-2 context pair, a 1x1 projection to the map
/// feature width, and a final per-pixel layer norm.
struct Encoder2DParams {
    int in_ch = 7, width = 16, feat_dim = 40, classes = 8;
    double depth_scale = 1.0 / 3.0;
    int conv1_w = -1, conv1_b = -1, ln1_g = -1, ln1_b = -1;
    int conv2_w = -1, conv2_b = -1, ln2_g = -1, ln2_b = -1;
    int down_w = -1, down_b = -1, lnd_g = -1, lnd_b = -1;
    int conv3_w = -1, conv3_b = -1, ln3_g = -1, ln3_b = -1;
    int conv4_w = -1, conv4_b = -1, ln4_g = -1, ln4_b = -1;
    int proj_w = -1, proj_b = -1, lnf_g = -1, lnf_b = -1;
    AuxHeadParams head;
};

Encoder2DParams make_encoder2d(ParamStore& ps, Rng& rng, int width, int feat_dim, int classes,
                               int aux_hidden, int group = 0);

struct EncodeOut {
    VarId features = 0;  // [pixels or voxels x feat_dim]
    VarId logits = 0;    // [... x classes]
};

/// Per-pixel features and aux logits, both [H*W x .]. Image sides must be
/// even (the context pair halves and doubles them).
EncodeOut encode_2d(Tape& t, ParamStore& ps, const Encoder2DParams& p, const Frame& frame,
                    bool train);

/// Stand-in for an external heavyweight backbone: per-frame features and
/// logits are read from tensor-container files instead of being computed.
struct PrecomputedEncoder2D {
    std::string dir;
    int feat_dim = 40, classes = 8;
};

EncodeOut encode_2d_precomputed(Tape& t, const PrecomputedEncoder2D& p, int frame_index,
                                int pixels);
std::string precomputed_feature_path(const std::string& dir, int frame_index);

// --- sparse 3D UNet ----------------------------------------------------------

/// Gather patterns over voxel key sets. Tap order is fixed (lexicographic
/// offsets) so replays are bit-identical.
std::shared_ptr<const ConvPattern> build_conv3_pattern(const std::vector<int64_t>& keys);

struct DownsamplePlan {
    std::vector<int64_t> coarse_keys;  // first-occurrence order
    std::shared_ptr<const ConvPattern> pattern;  // fine -> coarse, 8 taps
};
DownsamplePlan build_downsample_pattern(const std::vector<int64_t>& fine_keys);

/// Transposed stride-2 expansion: each fine voxel pulls from its parent via
/// the tap given by its coordinate parity.
std::shared_ptr<const ConvPattern> build_upsample_pattern(const std::vector<int64_t>& fine_keys,
                                                          const std::vector<int64_t>& coarse_keys);

struct ResidualLayerParams {
    int conv1_w = -1, conv1_b = -1, ln1_g = -1, ln1_b = -1;
    int conv2_w = -1, conv2_b = -1, ln2_g = -1, ln2_b = -1;
};

struct Unet3DLevelParams {
    ResidualLayerParams res1, res2;
    // downward path to the next level (absent on the deepest level)
    int down_w = -1, down_b = -1, lnd_g = -1, lnd_b = -1;
    int up_w = -1, up_b = -1, lnu_g = -1, lnu_b = -1;
    int fuse_w = -1, fuse_b = -1, lnf_g = -1, lnf_b = -1;
};

/// Sparse encoder-decoder over the frame's voxel set. levels=2 means one
/// stride-2 downsample with a transposed-convolution upsample and skip.
struct Encoder3DParams {
    int feat_dim = 40, width = 16, levels = 2, classes = 8;
    int stem_w = -1, stem_b = -1, ln_stem_g = -1, ln_stem_b = -1;
    std::vector<Unet3DLevelParams> level;
    int out_w = -1, out_b = -1, lnf_g = -1, lnf_b = -1;
    AuxHeadParams head;
};

Encoder3DParams make_encoder3d(ParamStore& ps, Rng& rng, int width, int levels, int feat_dim,
                               int classes, int aux_hidden, int group = 0);

/// Refines per-voxel features over the given key set; keys in = keys out.
EncodeOut encode_3d(Tape& t, ParamStore& ps, const Encoder3DParams& p,
                    const std::vector<int64_t>& keys, VarId features, bool train);

}  // namespace voxfuse
