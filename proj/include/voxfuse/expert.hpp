#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxfuse/autograd.hpp"
#include "voxfuse/encoders.hpp"
#include "voxfuse/optim.hpp"

namespace voxfuse {

enum class Source { global_prev, three_d, two_d };

/// One voxel's three fusion inputs. Absent sources (novel voxels have no
/// history) contribute a zero vector; the learned source encoding still
/// marks which slot they came from.
struct SourceTriplet {
    std::vector<double> g, x3, x2;
    bool g_present = true, x3_present = true, x2_present = true;
};

struct ExpertLayerParams {
    int qw = -1, qb = -1, kw = -1, kb = -1, vw = -1, vb = -1;
    int ln1_g = -1, ln1_b = -1;
    int ff1_w = -1, ff1_b = -1, ff2_w = -1, ff2_b = -1;
    int ln2_g = -1, ln2_b = -1;
};

/// Per-voxel cross-attention fusion stack. The source-encoded triplet forms
/// the fixed token set; the query starts from the previous global feature
/// and evolves through the layers. softmax_attention=false keeps the raw
/// dot-product weights instead of normalizing them.
struct ExpertParams {
    int feat_dim = 40, layers = 5, hidden = 128, classes = 8, heads = 1;
    bool softmax_attention = true;
    int e_g = -1, e_3 = -1, e_2 = -1;
    std::vector<ExpertLayerParams> layer;
    int out_ln_g = -1, out_ln_b = -1;
    AuxHeadParams head;
};

ExpertParams make_expert(ParamStore& ps, Rng& rng, int feat_dim, int layers, int hidden,
                         int classes, int aux_hidden, int heads = 1, bool softmax_attention = true,
                         int group = 0);

/// Attention weights per layer: each entry is [N x 3*heads] with columns
/// ordered (source-major) g-heads, 3D-heads, 2D-heads.
using AttentionTrace = std::vector<Tensor>;

struct ExpertOut {
    VarId features = 0;  // [N x D], post output-norm
    VarId logits = 0;    // [N x C]
    AttentionTrace trace;
};

/// Batched forward over aligned [N x D] source matrices. Rows are voxels;
/// absent history rows must already be zero.
ExpertOut expert_forward(Tape& t, ParamStore& ps, const ExpertParams& p, VarId g, VarId x3,
                         VarId x2, bool train);

/// x + e_source (learned additive). Absent sources encode a zero vector.
std::vector<double> source_encode(const std::vector<double>& x, bool present, Source source,
                                  const ParamStore& ps, const ExpertParams& p);

/// Single-voxel single-layer reference entry point: applies layer `layer_idx`
/// to one query/triplet (triplet already source-encoded). Returns the new
/// query state and the attention weights (3*heads, source-major).
struct LayerResult {
    std::vector<double> query;
    std::vector<double> weights;
};
LayerResult cross_attention_layer(ParamStore& ps, const ExpertParams& p, int layer_idx,
                                  const std::vector<double>& query_state,
                                  const std::vector<double>& g_enc,
                                  const std::vector<double>& x3_enc,
                                  const std::vector<double>& x2_enc);

}  // namespace voxfuse
