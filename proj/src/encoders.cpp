#include "voxfuse/encoders.hpp"

#include <cmath>
#include <cstdio>
#include <tuple>
#include <unordered_map>

#include "voxfuse/checkpoint.hpp"
#include "voxfuse/errors.hpp"

namespace voxfuse {

VarId param(Tape& t, ParamStore& ps, int idx, bool train) {
    ParamEntry& e = ps.entry(idx);
    return t.leaf(e.value, train ? &e.grad : nullptr);
}

Tensor init_normal(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

namespace {

// He-style fan-in scaling for the rectifier nets
double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

struct LnPair {
    int g = -1, b = -1;
};

LnPair make_ln(ParamStore& ps, const std::string& prefix, int dim, int group) {
    LnPair p;
    p.g = ps.add(prefix + ".g", Tensor::full({dim}, 1.0), group);
    p.b = ps.add(prefix + ".b", Tensor::zeros({dim}), group);
    return p;
}

// layer norm across channels at every pixel of a [C,H,W] activation
VarId ln_relu_chw(Tape& t, ParamStore& ps, int g, int b, VarId x, bool train) {
    const Tensor& v = t.val(x);
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    VarId rows = t.chw_to_rows(x);
    rows = t.layer_norm_rows(rows, param(t, ps, g, train), param(t, ps, b, train), kLayerNormEps);
    return t.rows_to_chw(t.relu(rows), c, h, w);
}

VarId ln_rows(Tape& t, ParamStore& ps, int g, int b, VarId x, bool train) {
    return t.layer_norm_rows(x, param(t, ps, g, train), param(t, ps, b, train), kLayerNormEps);
}

}  // namespace

// --- aux head -----------------------------------------------------------------

AuxHeadParams make_aux_head(ParamStore& ps, Rng& rng, const std::string& prefix, int in_dim,
                            int hidden, int classes, int group) {
    if (in_dim < 2 || hidden < 2 || classes < 1) throw ConfigError("aux head: bad dimensions");
    AuxHeadParams p;
    p.in_dim = in_dim;
    p.hidden = hidden;
    p.classes = classes;
    p.w1 = ps.add(prefix + ".w1", init_normal(rng, {in_dim, hidden}, he_std(in_dim)), group);
    p.b1 = ps.add(prefix + ".b1", Tensor::zeros({hidden}), group);
    const LnPair ln = make_ln(ps, prefix + ".ln", hidden, group);
    p.ln_g = ln.g;
    p.ln_b = ln.b;
    p.w2 = ps.add(prefix + ".w2", init_normal(rng, {hidden, classes}, he_std(hidden)), group);
    p.b2 = ps.add(prefix + ".b2", Tensor::zeros({classes}), group);
    return p;
}

VarId aux_head(Tape& t, ParamStore& ps, const AuxHeadParams& p, VarId features, bool train) {
    const Tensor& v = t.val(features);
    if (v.ndim() != 2 || v.cols() != p.in_dim) throw DimensionError("aux head: input dimension mismatch");
    VarId h = t.affine_rows(features, param(t, ps, p.w1, train), param(t, ps, p.b1, train));
    h = t.relu(ln_rows(t, ps, p.ln_g, p.ln_b, h, train));
    return t.affine_rows(h, param(t, ps, p.w2, train), param(t, ps, p.b2, train));
}

std::vector<double> aux_head_apply(ParamStore& ps, const AuxHeadParams& p,
                                   const std::vector<double>& feature) {
    if (static_cast<int>(feature.size()) != p.in_dim)
        throw DimensionError("aux head: input dimension mismatch");
    Tape t;
    Tensor row({1, p.in_dim});
    for (int c = 0; c < p.in_dim; ++c) row.at(0, c) = feature[static_cast<size_t>(c)];
    const Tensor& out = t.val(aux_head(t, ps, p, t.constant(std::move(row)), false));
    return std::vector<double>(out.data(), out.data() + out.size());
}

// --- 2D encoder -----------------------------------------------------------------

Encoder2DParams make_encoder2d(ParamStore& ps, Rng& rng, int width, int feat_dim, int classes,
                               int aux_hidden, int group) {
    if (width < 2 || feat_dim < 2) throw ConfigError("encoder2d: bad dimensions");
    Encoder2DParams p;
    p.width = width;
    p.feat_dim = feat_dim;
    p.classes = classes;
    const int ic = p.in_ch;
    const auto conv = [&](const std::string& name, int cin, int cout, int k) {
        const int w = ps.add(name + ".w", init_normal(rng, {cout, cin, k, k}, he_std(cin * k * k)), group);
        const int b = ps.add(name + ".b", Tensor::zeros({cout}), group);
        return std::pair<int, int>(w, b);
    };
    std::tie(p.conv1_w, p.conv1_b) = conv("e2d.conv1", ic, width, 3);
    LnPair ln = make_ln(ps, "e2d.ln1", width, group);
    p.ln1_g = ln.g; p.ln1_b = ln.b;
    std::tie(p.conv2_w, p.conv2_b) = conv("e2d.conv2", width, width, 3);
    ln = make_ln(ps, "e2d.ln2", width, group);
    p.ln2_g = ln.g; p.ln2_b = ln.b;
    std::tie(p.down_w, p.down_b) = conv("e2d.down", width, width, 3);
    ln = make_ln(ps, "e2d.lnd", width, group);
    p.lnd_g = ln.g; p.lnd_b = ln.b;
    std::tie(p.conv3_w, p.conv3_b) = conv("e2d.conv3", 2 * width, width, 3);
    ln = make_ln(ps, "e2d.ln3", width, group);
    p.ln3_g = ln.g; p.ln3_b = ln.b;
    std::tie(p.conv4_w, p.conv4_b) = conv("e2d.conv4", width, width, 3);
    ln = make_ln(ps, "e2d.ln4", width, group);
    p.ln4_g = ln.g; p.ln4_b = ln.b;
    std::tie(p.proj_w, p.proj_b) = conv("e2d.proj", width, feat_dim, 1);
    ln = make_ln(ps, "e2d.lnf", feat_dim, group);
    p.lnf_g = ln.g; p.lnf_b = ln.b;
    p.head = make_aux_head(ps, rng, "e2d.head", feat_dim, aux_hidden, classes, group);
    return p;
}

EncodeOut encode_2d(Tape& t, ParamStore& ps, const Encoder2DParams& p, const Frame& frame,
                    bool train) {
    const int h = frame.depth.height, w = frame.depth.width;
    if (h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0)
        throw DimensionError("encode_2d: image sides must be even and >= 4");
    if (frame.color.channels != 3 || !frame.color.same_size(frame.depth))
        throw DimensionError("encode_2d: color plane mismatch");
    if (frame.normals.channels != 3 || !frame.normals.same_size(frame.depth))
        throw DimensionError("encode_2d: normals missing or misaligned");

    Tensor input({p.in_ch, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t pix = static_cast<size_t>(y) * w + x;
            for (int c = 0; c < 3; ++c) input[static_cast<size_t>(c) * h * w + pix] = frame.color.at(y, x, c);
            input[3 * static_cast<size_t>(h) * w + pix] = frame.depth.at(y, x) * p.depth_scale;
            for (int c = 0; c < 3; ++c)
                input[static_cast<size_t>(4 + c) * h * w + pix] = frame.normals.at(y, x, c);
        }
    }

    VarId x = t.conv2d(t.constant(std::move(input)), param(t, ps, p.conv1_w, train),
                       param(t, ps, p.conv1_b, train), 1, 1);
    x = ln_relu_chw(t, ps, p.ln1_g, p.ln1_b, x, train);
    x = t.conv2d(x, param(t, ps, p.conv2_w, train), param(t, ps, p.conv2_b, train), 1, 1);
    x = ln_relu_chw(t, ps, p.ln2_g, p.ln2_b, x, train);

    // context pair: halve, normalize, bring back to full resolution
    VarId ctx = t.conv2d(x, param(t, ps, p.down_w, train), param(t, ps, p.down_b, train), 2, 1);
    ctx = ln_relu_chw(t, ps, p.lnd_g, p.lnd_b, ctx, train);
    ctx = t.upsample2x_chw(ctx);

    VarId cat = t.concat_cols(t.chw_to_rows(x), t.chw_to_rows(ctx));
    cat = t.rows_to_chw(cat, 2 * p.width, h, w);
    x = t.conv2d(cat, param(t, ps, p.conv3_w, train), param(t, ps, p.conv3_b, train), 1, 1);
    x = ln_relu_chw(t, ps, p.ln3_g, p.ln3_b, x, train);
    x = t.conv2d(x, param(t, ps, p.conv4_w, train), param(t, ps, p.conv4_b, train), 1, 1);
    x = ln_relu_chw(t, ps, p.ln4_g, p.ln4_b, x, train);
    x = t.conv2d(x, param(t, ps, p.proj_w, train), param(t, ps, p.proj_b, train), 1, 0);

    EncodeOut out;
    out.features = ln_rows(t, ps, p.lnf_g, p.lnf_b, t.chw_to_rows(x), train);
    out.logits = aux_head(t, ps, p.head, out.features, train);
    return out;
}

std::string precomputed_feature_path(const std::string& dir, int frame_index) {
    char name[32];
    std::snprintf(name, sizeof(name), "features_%05d.bin", frame_index);
    return dir + "/" + name;
}

EncodeOut encode_2d_precomputed(Tape& t, const PrecomputedEncoder2D& p, int frame_index,
                                int pixels) {
    const TensorFile file = load_tensor_file(precomputed_feature_path(p.dir, frame_index));
    const Tensor* feats = nullptr;
    const Tensor* logits = nullptr;
    for (const auto& e : file.entries) {
        if (e.name == "features") feats = &e.value;
        if (e.name == "logits") logits = &e.value;
    }
    if (feats == nullptr || logits == nullptr)
        throw FormatError("precomputed feature file lacks features/logits entries");
    if (feats->ndim() != 2 || feats->rows() != pixels || feats->cols() != p.feat_dim ||
        logits->ndim() != 2 || logits->rows() != pixels || logits->cols() != p.classes)
        throw DimensionError("precomputed feature shapes do not match the frame");
    EncodeOut out;
    out.features = t.constant(*feats);
    out.logits = t.constant(*logits);
    return out;
}

// --- sparse patterns ------------------------------------------------------------

std::shared_ptr<const ConvPattern> build_conv3_pattern(const std::vector<int64_t>& keys) {
    auto pattern = std::make_shared<ConvPattern>();
    pattern->n_in = static_cast<int>(keys.size());
    pattern->n_out = static_cast<int>(keys.size());
    pattern->taps = 27;
    pattern->pairs.resize(27);
    std::unordered_map<int64_t, int> index;
    index.reserve(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) index.emplace(keys[i], static_cast<int>(i));
    for (size_t i = 0; i < keys.size(); ++i) {
        const auto [kx, ky, kz] = unpack_voxel_key(keys[i]);
        int tap = 0;
        for (int dx = -1; dx <= 1; ++dx) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dz = -1; dz <= 1; ++dz, ++tap) {
                    const auto it = index.find(pack_voxel_key(kx + dx, ky + dy, kz + dz));
                    if (it != index.end())
                        pattern->pairs[static_cast<size_t>(tap)].push_back(
                            {static_cast<int>(i), it->second});
                }
            }
        }
    }
    return pattern;
}

namespace {
int64_t floor_div2(int64_t v) { return v >= 0 ? v / 2 : (v - 1) / 2; }
}  // namespace

DownsamplePlan build_downsample_pattern(const std::vector<int64_t>& fine_keys) {
    DownsamplePlan plan;
    auto pattern = std::make_shared<ConvPattern>();
    pattern->n_in = static_cast<int>(fine_keys.size());
    pattern->taps = 8;
    pattern->pairs.resize(8);
    std::unordered_map<int64_t, int> coarse_index;
    for (size_t i = 0; i < fine_keys.size(); ++i) {
        const auto [kx, ky, kz] = unpack_voxel_key(fine_keys[i]);
        const int64_t ckey = pack_voxel_key(floor_div2(kx), floor_div2(ky), floor_div2(kz));
        auto [it, inserted] = coarse_index.try_emplace(ckey, static_cast<int>(plan.coarse_keys.size()));
        if (inserted) plan.coarse_keys.push_back(ckey);
        const int tap = static_cast<int>(((kx & 1) << 2) | ((ky & 1) << 1) | (kz & 1));
        pattern->pairs[static_cast<size_t>(tap)].push_back({it->second, static_cast<int>(i)});
    }
    pattern->n_out = static_cast<int>(plan.coarse_keys.size());
    plan.pattern = std::move(pattern);
    return plan;
}

std::shared_ptr<const ConvPattern> build_upsample_pattern(const std::vector<int64_t>& fine_keys,
                                                          const std::vector<int64_t>& coarse_keys) {
    auto pattern = std::make_shared<ConvPattern>();
    pattern->n_in = static_cast<int>(coarse_keys.size());
    pattern->n_out = static_cast<int>(fine_keys.size());
    pattern->taps = 8;
    pattern->pairs.resize(8);
    std::unordered_map<int64_t, int> coarse_index;
    for (size_t i = 0; i < coarse_keys.size(); ++i) coarse_index.emplace(coarse_keys[i], static_cast<int>(i));
    for (size_t i = 0; i < fine_keys.size(); ++i) {
        const auto [kx, ky, kz] = unpack_voxel_key(fine_keys[i]);
        const auto it = coarse_index.find(pack_voxel_key(floor_div2(kx), floor_div2(ky), floor_div2(kz)));
        if (it == coarse_index.end())
            throw DimensionError("upsample pattern: fine key without a parent coarse key");
        const int tap = static_cast<int>(((kx & 1) << 2) | ((ky & 1) << 1) | (kz & 1));
        pattern->pairs[static_cast<size_t>(tap)].push_back({static_cast<int>(i), it->second});
    }
    return pattern;
}

// --- sparse 3D UNet ---------------------------------------------------------------

namespace {

ResidualLayerParams make_residual(ParamStore& ps, Rng& rng, const std::string& prefix, int width,
                                  int group) {
    ResidualLayerParams p;
    p.conv1_w = ps.add(prefix + ".c1.w", init_normal(rng, {27, width, width}, he_std(27 * width)), group);
    p.conv1_b = ps.add(prefix + ".c1.b", Tensor::zeros({width}), group);
    LnPair ln = make_ln(ps, prefix + ".ln1", width, group);
    p.ln1_g = ln.g; p.ln1_b = ln.b;
    p.conv2_w = ps.add(prefix + ".c2.w", init_normal(rng, {27, width, width}, he_std(27 * width)), group);
    p.conv2_b = ps.add(prefix + ".c2.b", Tensor::zeros({width}), group);
    ln = make_ln(ps, prefix + ".ln2", width, group);
    p.ln2_g = ln.g; p.ln2_b = ln.b;
    return p;
}

// conv -> norm -> relu -> conv -> norm, plus skip, then relu
VarId residual_layer(Tape& t, ParamStore& ps, const ResidualLayerParams& p, VarId x,
                     const std::shared_ptr<const ConvPattern>& pattern, bool train) {
    VarId h = t.sparse_conv(x, param(t, ps, p.conv1_w, train), param(t, ps, p.conv1_b, train), pattern);
    h = t.relu(ln_rows(t, ps, p.ln1_g, p.ln1_b, h, train));
    h = t.sparse_conv(h, param(t, ps, p.conv2_w, train), param(t, ps, p.conv2_b, train), pattern);
    h = ln_rows(t, ps, p.ln2_g, p.ln2_b, h, train);
    return t.relu(t.add(h, x));
}

// the recursive encoder-decoder body; returns features at this level's keys
VarId unet_level(Tape& t, ParamStore& ps, const Encoder3DParams& p, int level,
                 const std::vector<int64_t>& keys, VarId x, bool train) {
    const Unet3DLevelParams& lp = p.level[static_cast<size_t>(level)];
    const auto pattern = build_conv3_pattern(keys);
    x = residual_layer(t, ps, lp.res1, x, pattern, train);
    x = residual_layer(t, ps, lp.res2, x, pattern, train);
    if (level + 1 >= p.levels) return x;

    const DownsamplePlan down = build_downsample_pattern(keys);
    VarId deep = t.sparse_conv(x, param(t, ps, lp.down_w, train), param(t, ps, lp.down_b, train),
                               down.pattern);
    deep = t.relu(ln_rows(t, ps, lp.lnd_g, lp.lnd_b, deep, train));
    deep = unet_level(t, ps, p, level + 1, down.coarse_keys, deep, train);

    const auto up = build_upsample_pattern(keys, down.coarse_keys);
    VarId lifted = t.sparse_conv(deep, param(t, ps, lp.up_w, train), param(t, ps, lp.up_b, train), up);
    lifted = t.relu(ln_rows(t, ps, lp.lnu_g, lp.lnu_b, lifted, train));

    VarId fused = t.affine_rows(t.concat_cols(x, lifted), param(t, ps, lp.fuse_w, train),
                                param(t, ps, lp.fuse_b, train));
    return t.relu(ln_rows(t, ps, lp.lnf_g, lp.lnf_b, fused, train));
}

}  // namespace

Encoder3DParams make_encoder3d(ParamStore& ps, Rng& rng, int width, int levels, int feat_dim,
                               int classes, int aux_hidden, int group) {
    if (width < 2 || feat_dim < 2 || levels < 1) throw ConfigError("encoder3d: bad dimensions");
    Encoder3DParams p;
    p.feat_dim = feat_dim;
    p.width = width;
    p.levels = levels;
    p.classes = classes;
    p.stem_w = ps.add("e3d.stem.w", init_normal(rng, {27, feat_dim, width}, he_std(27 * feat_dim)), group);
    p.stem_b = ps.add("e3d.stem.b", Tensor::zeros({width}), group);
    LnPair ln = make_ln(ps, "e3d.stem.ln", width, group);
    p.ln_stem_g = ln.g; p.ln_stem_b = ln.b;

    for (int l = 0; l < levels; ++l) {
        const int wl = width << l;
        const std::string prefix = "e3d.l" + std::to_string(l);
        Unet3DLevelParams lp;
        lp.res1 = make_residual(ps, rng, prefix + ".r1", wl, group);
        lp.res2 = make_residual(ps, rng, prefix + ".r2", wl, group);
        if (l + 1 < levels) {
            const int wn = width << (l + 1);
            lp.down_w = ps.add(prefix + ".down.w", init_normal(rng, {8, wl, wn}, he_std(8 * wl)), group);
            lp.down_b = ps.add(prefix + ".down.b", Tensor::zeros({wn}), group);
            ln = make_ln(ps, prefix + ".down.ln", wn, group);
            lp.lnd_g = ln.g; lp.lnd_b = ln.b;
            lp.up_w = ps.add(prefix + ".up.w", init_normal(rng, {8, wn, wl}, he_std(wn)), group);
            lp.up_b = ps.add(prefix + ".up.b", Tensor::zeros({wl}), group);
            ln = make_ln(ps, prefix + ".up.ln", wl, group);
            lp.lnu_g = ln.g; lp.lnu_b = ln.b;
            lp.fuse_w = ps.add(prefix + ".fuse.w", init_normal(rng, {2 * wl, wl}, he_std(2 * wl)), group);
            lp.fuse_b = ps.add(prefix + ".fuse.b", Tensor::zeros({wl}), group);
            ln = make_ln(ps, prefix + ".fuse.ln", wl, group);
            lp.lnf_g = ln.g; lp.lnf_b = ln.b;
        }
        p.level.push_back(lp);
    }

    p.out_w = ps.add("e3d.out.w", init_normal(rng, {width, feat_dim}, he_std(width)), group);
    p.out_b = ps.add("e3d.out.b", Tensor::zeros({feat_dim}), group);
    ln = make_ln(ps, "e3d.out.ln", feat_dim, group);
    p.lnf_g = ln.g; p.lnf_b = ln.b;
    p.head = make_aux_head(ps, rng, "e3d.head", feat_dim, aux_hidden, classes, group);
    return p;
}

EncodeOut encode_3d(Tape& t, ParamStore& ps, const Encoder3DParams& p,
                    const std::vector<int64_t>& keys, VarId features, bool train) {
    if (keys.empty()) throw DimensionError("encode_3d: empty voxel set");
    const Tensor& v = t.val(features);
    if (v.ndim() != 2 || v.rows() != static_cast<int>(keys.size()) || v.cols() != p.feat_dim)
        throw DimensionError("encode_3d: features misaligned with keys");

    VarId x = t.sparse_conv(features, param(t, ps, p.stem_w, train), param(t, ps, p.stem_b, train),
                            build_conv3_pattern(keys));
    x = t.relu(ln_rows(t, ps, p.ln_stem_g, p.ln_stem_b, x, train));
    x = unet_level(t, ps, p, 0, keys, x, train);
    x = t.affine_rows(x, param(t, ps, p.out_w, train), param(t, ps, p.out_b, train));

    EncodeOut out;
    out.features = ln_rows(t, ps, p.lnf_g, p.lnf_b, x, train);
    out.logits = aux_head(t, ps, p.head, out.features, train);
    return out;
}

}  // namespace voxfuse
