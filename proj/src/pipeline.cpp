#include "voxfuse/pipeline.hpp"

#include <algorithm>

#include <json.hpp>

#include "voxfuse/errors.hpp"

namespace voxfuse {

Model make_model(const RunConfig& cfg) {
    cfg.validate();
    Model m;
    m.feat_dim = cfg.feat_dim;
    m.classes = cfg.classes;
    Rng rng(cfg.seed);
    m.enc2d = make_encoder2d(m.ps, rng, cfg.enc_width, cfg.feat_dim, cfg.classes, cfg.aux_hidden,
                             kGroupPretrained2D);
    m.enc3d = make_encoder3d(m.ps, rng, cfg.enc_width, cfg.enc3d_levels, cfg.feat_dim, cfg.classes,
                             cfg.aux_hidden, kGroupCore);
    m.expert = make_expert(m.ps, rng, cfg.feat_dim, cfg.expert_layers, cfg.expert_hidden,
                           cfg.classes, cfg.aux_hidden, cfg.expert_heads, cfg.softmax_attention,
                           kGroupCore);
    return m;
}

LossConfig loss_config_of(const RunConfig& cfg) {
    LossConfig lc;
    lc.lambda_2d = cfg.lambda_2d;
    lc.lambda_3d = cfg.lambda_3d;
    lc.lambda_expert = cfg.lambda_expert;
    lc.gamma = cfg.gamma;
    lc.ignore_label = cfg.ignore_label;
    lc.num_classes = cfg.classes;
    lc.validate();
    return lc;
}

VoxelLabeler::VoxelLabeler(const LabeledMesh& mesh, double resolution)
    : tree_(mesh.vertices), vertex_labels_(mesh.vertex_labels), resolution_(resolution) {
    if (mesh.vertices.size() != mesh.vertex_labels.size())
        throw DimensionError("VoxelLabeler: one label per vertex required");
    if (resolution <= 0.0) throw ConfigError("VoxelLabeler: resolution must be positive");
}

int VoxelLabeler::label_of(int64_t key) const {
    const auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const int idx = tree_.nearest(voxel_center(key, resolution_));
    const int label = vertex_labels_[static_cast<size_t>(idx)];
    cache_.emplace(key, label);
    return label;
}

std::vector<int> VoxelLabeler::labels_of(const std::vector<int64_t>& keys) const {
    std::vector<int> out(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) out[i] = label_of(keys[i]);
    return out;
}

namespace {

std::vector<int> row_argmax(const Tensor& t) {
    std::vector<int> out(static_cast<size_t>(t.rows()));
    std::vector<double> row(static_cast<size_t>(t.cols()));
    for (int i = 0; i < t.rows(); ++i) {
        for (int c = 0; c < t.cols(); ++c) row[static_cast<size_t>(c)] = t.at(i, c);
        out[static_cast<size_t>(i)] = argmax_lowest(row);
    }
    return out;
}

double agreement(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.empty() || a.size() != b.size()) return 0.0;
    int same = 0;
    for (size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace

FuseResult fuse_frame(SceneMap& map, const Frame& frame, Model& model, const LossConfig& loss_cfg,
                      double depth_cutoff, bool train, const VoxelLabeler* labeler) {
    frame.intr.validate();
    frame.pose.validate();
    if (train && labeler == nullptr)
        throw ConfigError("fuse_frame: training requires a voxel labeler");
    if (map.feature_dim() != model.feat_dim)
        throw DimensionError("fuse_frame: map feature width does not match the model");

    FuseResult out;
    const auto lifted = lift_pixels(frame.depth, frame.intr, frame.pose, depth_cutoff);
    out.lifted_points = static_cast<int>(lifted.size());
    if (lifted.empty()) return out;

    const Frame* fp = &frame;
    Frame with_normals;
    if (frame.normals.data.empty()) {
        with_normals = frame;
        with_normals.normals = estimate_normals(frame.depth, frame.intr);
        fp = &with_normals;
    }

    Tape t;
    const EncodeOut e2 = encode_2d(t, model.ps, model.enc2d, *fp, train);

    std::vector<Vec3> positions(lifted.size());
    std::vector<int> pix(lifted.size());
    for (size_t i = 0; i < lifted.size(); ++i) {
        positions[i] = lifted[i].world;
        pix[i] = lifted[i].pixel;
    }
    const VoxelizeResult vox =
        voxelize(positions, Tensor::zeros({static_cast<int>(positions.size()), 1}),
                 map.resolution());
    const int n = static_cast<int>(vox.keys.size());

    // Per-voxel 2D features/logits: mean over the pixels that landed in each
    // cell, kept on the tape so the 2D branch trains through the pooling.
    const VarId px_feat = t.gather_rows(e2.features, pix);
    const VarId px_logit = t.gather_rows(e2.logits, pix);
    const VarId f2 = t.pooled_mean_rows(px_feat, vox.point_to_cell, n);
    const VarId l2 = t.pooled_mean_rows(px_logit, vox.point_to_cell, n);

    const EncodeOut e3 = encode_3d(t, model.ps, model.enc3d, vox.keys, f2, train);

    FeatureBlock block = map.crop(vox.keys);
    const VarId g = t.constant(block.features);  // truncated temporal credit
    const ExpertOut ex = expert_forward(t, model.ps, model.expert, g, e3.features, f2, train);

    out.block_size = n;
    out.keys = vox.keys;
    out.novel_voxels =
        static_cast<int>(std::count(block.novel.begin(), block.novel.end(), uint8_t{1}));
    out.labels_2d = row_argmax(t.val(l2));
    out.labels_3d = row_argmax(t.val(e3.logits));
    out.labels_expert = row_argmax(t.val(ex.logits));

    const int heads = model.expert.heads;
    for (const Tensor& layer : ex.trace) {
        std::array<double, 3> mean{0.0, 0.0, 0.0};
        for (int i = 0; i < layer.rows(); ++i)
            for (int s = 0; s < 3; ++s)
                for (int h = 0; h < heads; ++h) mean[static_cast<size_t>(s)] += layer.at(i, s * heads + h);
        for (double& v : mean) v /= static_cast<double>(layer.rows()) * heads;
        out.mean_attention.push_back(mean);
    }

    if (labeler != nullptr) {
        out.gt_labels = labeler->labels_of(vox.keys);
        const VarId loss2 = focal_loss_rows(t, l2, out.gt_labels, loss_cfg);
        const VarId loss3 = focal_loss_rows(t, e3.logits, out.gt_labels, loss_cfg);
        const VarId lossx = focal_loss_rows(t, ex.logits, out.gt_labels, loss_cfg);
        const VarId total = composite_loss(t, loss2, loss3, lossx, loss_cfg);
        out.has_loss = true;
        out.loss_2d = t.val(loss2).raw()[0];
        out.loss_3d = t.val(loss3).raw()[0];
        out.loss_expert = t.val(lossx).raw()[0];
        out.loss_total = t.val(total).raw()[0];
        if (train) t.backward(total);
    }

    block.features = t.val(ex.features);
    map.write_back(block);
    map.advance_frame();
    return out;
}

std::string diagnostics_line(const FuseResult& r, int64_t frame_index) {
    nlohmann::json j;
    j["frame"] = frame_index;
    j["lifted"] = r.lifted_points;
    j["block"] = r.block_size;
    j["novel"] = r.novel_voxels;
    j["attention"] = r.mean_attention;
    j["agree_2d_expert"] = agreement(r.labels_2d, r.labels_expert);
    j["agree_3d_expert"] = agreement(r.labels_3d, r.labels_expert);
    if (r.has_loss) {
        j["loss_2d"] = r.loss_2d;
        j["loss_3d"] = r.loss_3d;
        j["loss_expert"] = r.loss_expert;
        j["loss_total"] = r.loss_total;
    }
    return j.dump();
}

}  // namespace voxfuse
