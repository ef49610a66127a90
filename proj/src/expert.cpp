#include "voxfuse/expert.hpp"

#include <cmath>
#include <cstdio>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {

std::string lname(int l, const char* field) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "exp.l%d.%s", l, field);
    return buf;
}

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

/// One attention layer on already source-encoded tokens. Shared by the
/// batched forward and the single-voxel reference wrapper so both run the
/// exact same graph.
struct LayerOut {
    VarId query = 0;
    VarId weights = 0;  // [N x 3*heads], columns g-heads | 3-heads | 2-heads
};

LayerOut layer_step(Tape& t, ParamStore& ps, const ExpertParams& p, int l, VarId q, VarId tg,
                    VarId t3, VarId t2, bool train) {
    const ExpertLayerParams& lp = p.layer[static_cast<size_t>(l)];
    const VarId qw = param(t, ps, lp.qw, train), qb = param(t, ps, lp.qb, train);
    const VarId kw = param(t, ps, lp.kw, train), kb = param(t, ps, lp.kb, train);
    const VarId vw = param(t, ps, lp.vw, train), vb = param(t, ps, lp.vb, train);

    const VarId qp = t.affine_rows(q, qw, qb);
    const VarId kg = t.affine_rows(tg, kw, kb);
    const VarId k3 = t.affine_rows(t3, kw, kb);
    const VarId k2 = t.affine_rows(t2, kw, kb);
    const VarId vg = t.affine_rows(tg, vw, vb);
    const VarId v3 = t.affine_rows(t3, vw, vb);
    const VarId v2 = t.affine_rows(t2, vw, vb);

    const double scale = 1.0 / std::sqrt(static_cast<double>(p.feat_dim) / p.heads);
    const VarId lg = t.scale(t.rows_dot_heads(qp, kg, p.heads), scale);
    const VarId l3 = t.scale(t.rows_dot_heads(qp, k3, p.heads), scale);
    const VarId l2 = t.scale(t.rows_dot_heads(qp, k2, p.heads), scale);
    const VarId logits = t.concat_cols(t.concat_cols(lg, l3), l2);
    const VarId w = p.softmax_attention ? t.softmax_interleaved(logits, 3, p.heads) : logits;

    const int h = p.heads;
    VarId fused = t.scale_rows_heads(vg, t.cols_slice(w, 0, h), h);
    fused = t.add(fused, t.scale_rows_heads(v3, t.cols_slice(w, h, 2 * h), h));
    fused = t.add(fused, t.scale_rows_heads(v2, t.cols_slice(w, 2 * h, 3 * h), h));

    const VarId res = t.layer_norm_rows(t.add(q, fused), param(t, ps, lp.ln1_g, train),
                                        param(t, ps, lp.ln1_b, train), kLayerNormEps);
    VarId ff = t.affine_rows(res, param(t, ps, lp.ff1_w, train), param(t, ps, lp.ff1_b, train));
    ff = t.affine_rows(t.relu(ff), param(t, ps, lp.ff2_w, train), param(t, ps, lp.ff2_b, train));
    const VarId out = t.layer_norm_rows(t.add(res, ff), param(t, ps, lp.ln2_g, train),
                                        param(t, ps, lp.ln2_b, train), kLayerNormEps);
    return {out, w};
}

}  // namespace

ExpertParams make_expert(ParamStore& ps, Rng& rng, int feat_dim, int layers, int hidden,
                         int classes, int aux_hidden, int heads, bool softmax_attention,
                         int group) {
    if (feat_dim < 2 || layers < 1 || hidden < 1 || classes < 1 || heads < 1)
        throw ConfigError("make_expert: bad sizes");
    if (feat_dim % heads != 0) throw ConfigError("make_expert: feat_dim not divisible by heads");
    ExpertParams p;
    p.feat_dim = feat_dim;
    p.layers = layers;
    p.hidden = hidden;
    p.classes = classes;
    p.heads = heads;
    p.softmax_attention = softmax_attention;

    p.e_g = ps.add("exp.e_g", init_normal(rng, {feat_dim}, 0.02), group);
    p.e_3 = ps.add("exp.e_3", init_normal(rng, {feat_dim}, 0.02), group);
    p.e_2 = ps.add("exp.e_2", init_normal(rng, {feat_dim}, 0.02), group);

    const double proj_std = std::sqrt(1.0 / feat_dim);
    for (int l = 0; l < layers; ++l) {
        ExpertLayerParams lp;
        lp.qw = ps.add(lname(l, "qw"), init_normal(rng, {feat_dim, feat_dim}, proj_std), group);
        lp.qb = ps.add(lname(l, "qb"), Tensor({feat_dim}), group);
        lp.kw = ps.add(lname(l, "kw"), init_normal(rng, {feat_dim, feat_dim}, proj_std), group);
        lp.kb = ps.add(lname(l, "kb"), Tensor({feat_dim}), group);
        lp.vw = ps.add(lname(l, "vw"), init_normal(rng, {feat_dim, feat_dim}, proj_std), group);
        lp.vb = ps.add(lname(l, "vb"), Tensor({feat_dim}), group);
        lp.ln1_g = ps.add(lname(l, "ln1_g"), Tensor::full({feat_dim}, 1.0), group);
        lp.ln1_b = ps.add(lname(l, "ln1_b"), Tensor({feat_dim}), group);
        lp.ff1_w = ps.add(lname(l, "ff1_w"),
                          init_normal(rng, {feat_dim, hidden}, std::sqrt(2.0 / feat_dim)), group);
        lp.ff1_b = ps.add(lname(l, "ff1_b"), Tensor({hidden}), group);
        lp.ff2_w = ps.add(lname(l, "ff2_w"),
                          init_normal(rng, {hidden, feat_dim}, std::sqrt(1.0 / hidden)), group);
        lp.ff2_b = ps.add(lname(l, "ff2_b"), Tensor({feat_dim}), group);
        lp.ln2_g = ps.add(lname(l, "ln2_g"), Tensor::full({feat_dim}, 1.0), group);
        lp.ln2_b = ps.add(lname(l, "ln2_b"), Tensor({feat_dim}), group);
        p.layer.push_back(lp);
    }
    p.out_ln_g = ps.add("exp.out_ln_g", Tensor::full({feat_dim}, 1.0), group);
    p.out_ln_b = ps.add("exp.out_ln_b", Tensor({feat_dim}), group);
    p.head = make_aux_head(ps, rng, "exp.head", feat_dim, aux_hidden, classes, group);
    return p;
}

std::vector<double> source_encode(const std::vector<double>& x, bool present, Source source,
                                  const ParamStore& ps, const ExpertParams& p) {
    int idx = p.e_g;
    if (source == Source::three_d) idx = p.e_3;
    if (source == Source::two_d) idx = p.e_2;
    const Tensor& e = ps.entry(idx).value;
    if (present && static_cast<int>(x.size()) != p.feat_dim)
        throw DimensionError("source_encode: input dimension mismatch");
    std::vector<double> out(e.raw().begin(), e.raw().end());
    if (present)
        for (int i = 0; i < p.feat_dim; ++i) out[static_cast<size_t>(i)] += x[static_cast<size_t>(i)];
    return out;
}

ExpertOut expert_forward(Tape& t, ParamStore& ps, const ExpertParams& p, VarId g, VarId x3,
                         VarId x2, bool train) {
    const Tensor& gv = t.val(g);
    const Tensor& v3 = t.val(x3);
    const Tensor& v2 = t.val(x2);
    if (gv.ndim() != 2 || !v3.same_shape(gv) || !v2.same_shape(gv) || gv.cols() != p.feat_dim)
        throw DimensionError("expert_forward: sources must share shape [N x feat_dim]");
    const int n = gv.rows();

    ExpertOut out;
    if (n == 0) {
        out.features = t.constant(Tensor({0, p.feat_dim}));
        out.logits = t.constant(Tensor({0, p.classes}));
        out.trace.assign(static_cast<size_t>(p.layers), Tensor({0, 3 * p.heads}));
        return out;
    }

    const VarId tg = t.add_rowvec(g, param(t, ps, p.e_g, train));
    const VarId t3 = t.add_rowvec(x3, param(t, ps, p.e_3, train));
    const VarId t2 = t.add_rowvec(x2, param(t, ps, p.e_2, train));

    VarId q = tg;
    for (int l = 0; l < p.layers; ++l) {
        LayerOut lo = layer_step(t, ps, p, l, q, tg, t3, t2, train);
        q = lo.query;
        out.trace.push_back(t.val(lo.weights));
    }
    out.features = t.layer_norm_rows(q, param(t, ps, p.out_ln_g, train),
                                     param(t, ps, p.out_ln_b, train), kLayerNormEps);
    out.logits = aux_head(t, ps, p.head, out.features, train);
    return out;
}

LayerResult cross_attention_layer(ParamStore& ps, const ExpertParams& p, int layer_idx,
                                  const std::vector<double>& query_state,
                                  const std::vector<double>& g_enc,
                                  const std::vector<double>& x3_enc,
                                  const std::vector<double>& x2_enc) {
    if (layer_idx < 0 || layer_idx >= p.layers)
        throw ConfigError("cross_attention_layer: layer index out of range");
    const auto dim_ok = [&](const std::vector<double>& v) {
        return static_cast<int>(v.size()) == p.feat_dim;
    };
    if (!dim_ok(query_state) || !dim_ok(g_enc) || !dim_ok(x3_enc) || !dim_ok(x2_enc))
        throw DimensionError("cross_attention_layer: inputs must be feat_dim-dimensional");
    check_finite(query_state, "cross_attention_layer query");
    check_finite(g_enc, "cross_attention_layer g");
    check_finite(x3_enc, "cross_attention_layer x3");
    check_finite(x2_enc, "cross_attention_layer x2");

    const auto as_row = [&](const std::vector<double>& v) {
        Tensor m({1, p.feat_dim});
        m.raw() = v;
        return m;
    };
    Tape t;
    const VarId q = t.constant(as_row(query_state));
    const VarId tg = t.constant(as_row(g_enc));
    const VarId t3 = t.constant(as_row(x3_enc));
    const VarId t2 = t.constant(as_row(x2_enc));
    LayerOut lo = layer_step(t, ps, p, layer_idx, q, tg, t3, t2, false);

    LayerResult r;
    r.query = t.val(lo.query).raw();
    r.weights = t.val(lo.weights).raw();
    check_finite(r.query, "cross_attention_layer output");
    return r;
}

}  // namespace voxfuse
