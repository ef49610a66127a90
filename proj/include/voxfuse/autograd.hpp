#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "voxfuse/tensor.hpp"

namespace voxfuse {

using VarId = int32_t;

/// Sparse-convolution gather pattern: per kernel tap, the (output row,
/// input row) pairs that exist in the voxel key sets. Built once per frame
/// from key hashing; absent neighbors simply contribute no pair.
struct ConvPattern {
    int n_in = 0;
    int n_out = 0;
    int taps = 0;
    std::vector<std::vector<std::pair<int, int>>> pairs;  // pairs[tap] -> (out, in)
};

/// Reverse-mode tape. Nodes are appended in forward order (a valid
/// topological order), each holding its value and a closure that routes the
/// node's gradient to its parents. Leaf nodes with a sink pointer flush
/// accumulated gradients into external storage (ParamStore slots) so that
/// gradients add up across frames until explicitly zeroed.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    VarId constant(Tensor value);
    VarId leaf(Tensor value, Tensor* grad_sink);

    const Tensor& val(VarId v) const { return nodes_[static_cast<size_t>(v)].value; }
    Tensor& grad_of(VarId v);
    bool needs_grad(VarId v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise / shape ----
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId mul(VarId a, VarId b);
    VarId scale(VarId a, double s);
    VarId relu(VarId a);
    VarId add_rowvec(VarId x, VarId v);                  // [N x D] + [D] broadcast over rows
    VarId concat_cols(VarId a, VarId b);                 // [N x D1],[N x D2] -> [N x (D1+D2)]
    VarId cols_slice(VarId x, int c0, int c1);           // [N x D] -> [N x (c1-c0)]
    VarId colcat(const std::vector<VarId>& cols);        // k vectors [N] -> [N x k]
    VarId gather_rows(VarId x, std::vector<int> idx);
    VarId chw_to_rows(VarId x);                          // [C,H,W] -> [H*W x C]
    VarId rows_to_chw(VarId x, int c, int h, int w);

    // ---- linear algebra ----
    VarId affine_rows(VarId x, VarId w, VarId b);        // x[N x Din] * w[Din x Dout] + b[Dout]
    VarId rows_dot_heads(VarId a, VarId b, int heads);   // [N x D]x2 -> [N x heads]
    VarId scale_rows_heads(VarId x, VarId s, int heads); // row segment h of x scaled by s[n,h]

    // ---- normalization / activations ----
    VarId layer_norm_rows(VarId x, VarId gain, VarId bias, double eps);
    VarId softmax_rows(VarId x);
    VarId softmax_interleaved(VarId x, int groups, int stride);

    // ---- reductions / losses ----
    VarId sum_all(VarId x);
    VarId mean_all(VarId x);
    VarId gather_target(VarId probs, std::vector<int> targets);  // [N x C] -> [N]
    VarId focal_term(VarId p, double gamma);             // (1-p)^g * (-ln max(p, 1e-12))

    // ---- convolutions / pooling ----
    VarId conv2d(VarId x, VarId w, VarId b, int stride, int pad);
    VarId upsample2x_chw(VarId x);
    VarId sparse_conv(VarId x, VarId w, VarId b, std::shared_ptr<const ConvPattern> pattern);
    VarId pooled_mean_rows(VarId x, std::vector<int> group, int n_groups);

    /// Reverse pass from a scalar output. Gradients of leaves are added into
    /// their sinks. The graph is consumed unless retain is set.
    void backward(VarId output, bool retain = false);

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated on first accumulation
        std::function<void(Tape&, const Tensor&)> back;
        Tensor* sink = nullptr;
        bool needs_grad = false;
    };

    VarId push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back);
    void accum(VarId v, const Tensor& delta);
    void accum_into(VarId v, const std::function<void(Tensor&)>& add_fn);

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Plain (non-tape) numerically stable softmax, max-subtracted.
std::vector<double> softmax(const std::vector<double>& logits);

/// Plain layer normalization of one vector: gain * (x - mean)/sqrt(var + eps) + bias,
/// population variance. Throws on dimension < 2 or non-finite input.
std::vector<double> layer_norm(const std::vector<double>& x, double eps,
                               const std::vector<double>& gain, const std::vector<double>& bias);

}  // namespace voxfuse
