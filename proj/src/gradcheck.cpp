#include "voxfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "voxfuse/encoders.hpp"
#include "voxfuse/expert.hpp"
#include "voxfuse/losses.hpp"
#include "voxfuse/pipeline.hpp"
#include "voxfuse/synth.hpp"
#include "voxfuse/trainer.hpp"

namespace voxfuse {
namespace {

constexpr double kStep = 1e-5;
constexpr double kRetryStep = 1e-6;  // rules out ReLU-kink crossings of the wide step
constexpr double kDenomFloor = 1e-4;

double fd_rel(double analytic, double fp, double fm, double h) {
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic), std::abs(fd), kDenomFloor});
    return std::abs(analytic - fd) / denom;
}

struct FdCheck {
    std::string name;
    ParamStore ps;
    std::vector<Tensor> inputs;
    // Scalar objective. Input ids parallel `inputs`; train toggles whether
    // parameters enter the tape as gradient-carrying leaves.
    std::function<VarId(Tape&, ParamStore&, const std::vector<VarId>&, bool)> build;
    int budget = 1 << 30;  // deterministic stride subsample above this
};

double eval_value(FdCheck& c) {
    Tape t;
    std::vector<VarId> ids;
    ids.reserve(c.inputs.size());
    for (const Tensor& in : c.inputs) ids.push_back(t.constant(in));
    const VarId s = c.build(t, c.ps, ids, false);
    return t.val(s).raw()[0];
}

GradCheckResult run_check(FdCheck& c) {
    c.ps.zero_grad();
    std::vector<Tensor> sinks;
    sinks.reserve(c.inputs.size());
    for (const Tensor& in : c.inputs) sinks.push_back(Tensor::zeros(in.shape()));
    {
        Tape t;
        std::vector<VarId> ids;
        ids.reserve(c.inputs.size());
        for (size_t i = 0; i < c.inputs.size(); ++i) ids.push_back(t.leaf(c.inputs[i], &sinks[i]));
        t.backward(c.build(t, c.ps, ids, true));
    }

    // Coordinate list: every parameter scalar, then every input scalar.
    std::vector<std::pair<double*, double>> coords;
    for (int i = 0; i < c.ps.count(); ++i) {
        ParamEntry& e = c.ps.entry(i);
        for (size_t k = 0; k < e.value.size(); ++k)
            coords.push_back({&e.value.raw()[k], e.grad.raw()[k]});
    }
    for (size_t i = 0; i < c.inputs.size(); ++i)
        for (size_t k = 0; k < c.inputs[i].size(); ++k)
            coords.push_back({&c.inputs[i].raw()[k], sinks[i].raw()[k]});

    const size_t stride =
        coords.size() > static_cast<size_t>(c.budget)
            ? (coords.size() + static_cast<size_t>(c.budget) - 1) / static_cast<size_t>(c.budget)
            : 1;

    GradCheckResult r;
    r.name = c.name;
    for (size_t i = 0; i < coords.size(); i += stride) {
        double* slot = coords[i].first;
        const double analytic = coords[i].second;
        const double orig = *slot;
        double rel = 0.0;
        for (const double h : {kStep, kRetryStep}) {
            *slot = orig + h;
            const double fp = eval_value(c);
            *slot = orig - h;
            const double fm = eval_value(c);
            *slot = orig;
            rel = h == kStep ? fd_rel(analytic, fp, fm, h)
                             : std::min(rel, fd_rel(analytic, fp, fm, h));
            if (rel < 1e-6) break;
        }
        r.max_rel = std::max(r.max_rel, rel);
        ++r.coords;
    }
    return r;
}

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

std::vector<int> random_targets(Rng& rng, int n, int classes) {
    std::vector<int> tg(static_cast<size_t>(n));
    for (int& v : tg) v = rng.below_int(classes);
    return tg;
}

FdCheck check_aux_head(Rng& rng) {
    FdCheck c;
    c.name = "aux_head";
    Rng r = rng.fork();
    const int rows = 5, in_dim = 6, classes = 4;
    const AuxHeadParams p = make_aux_head(c.ps, r, "head", in_dim, 8, classes);
    c.inputs.push_back(random_tensor(r, {rows, in_dim}));
    LossConfig loss;
    loss.num_classes = classes;
    const auto targets = random_targets(r, rows, classes);
    c.build = [p, loss, targets](Tape& t, ParamStore& ps, const std::vector<VarId>& in,
                                 bool train) {
        return focal_loss_rows(t, aux_head(t, ps, p, in[0], train), targets, loss);
    };
    return c;
}

FdCheck check_focal_loss(Rng& rng, double gamma) {
    FdCheck c;
    char buf[32];
    std::snprintf(buf, sizeof buf, "focal_loss_gamma_%g", gamma);
    c.name = buf;
    Rng r = rng.fork();
    const int rows = 7, classes = 5;
    c.inputs.push_back(random_tensor(r, {rows, classes}, -2.0, 2.0));
    LossConfig loss;
    loss.num_classes = classes;
    loss.gamma = gamma;
    auto targets = random_targets(r, rows, classes);
    targets[2] = loss.ignore_label;  // dropped row must carry zero gradient
    c.build = [loss, targets](Tape& t, ParamStore&, const std::vector<VarId>& in, bool) {
        return focal_loss_rows(t, in[0], targets, loss);
    };
    return c;
}

FdCheck check_composite(Rng& rng) {
    FdCheck c;
    c.name = "composite_loss";
    Rng r = rng.fork();
    const int rows = 6, classes = 4;
    for (int k = 0; k < 3; ++k) c.inputs.push_back(random_tensor(r, {rows, classes}, -2.0, 2.0));
    LossConfig loss;
    loss.num_classes = classes;
    loss.lambda_2d = 0.7;
    loss.lambda_3d = 1.3;
    loss.lambda_expert = 2.1;
    const auto targets = random_targets(r, rows, classes);
    c.build = [loss, targets](Tape& t, ParamStore&, const std::vector<VarId>& in, bool) {
        return composite_loss(t, focal_loss_rows(t, in[0], targets, loss),
                              focal_loss_rows(t, in[1], targets, loss),
                              focal_loss_rows(t, in[2], targets, loss), loss);
    };
    return c;
}

FdCheck check_encoder2d(Rng& rng) {
    FdCheck c;
    c.name = "encoder_2d";
    Rng r = rng.fork();
    const int classes = 4;
    const Encoder2DParams p = make_encoder2d(c.ps, r, 4, 6, classes, 6);

    Frame frame;
    frame.intr.width = 6;
    frame.intr.height = 4;
    frame.intr.fx = frame.intr.fy = 5.0;
    frame.intr.cx = 3.0;
    frame.intr.cy = 2.0;
    frame.color = Image(6, 4, 3);
    frame.depth = Image(6, 4, 1);
    frame.normals = Image(6, 4, 3);
    for (double& v : frame.color.data) v = r.uniform();
    for (double& v : frame.depth.data) v = r.uniform(0.5, 2.5);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) {
            Vec3 n{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(0.2, 1)};
            n = n.normalized();
            frame.normals.at(y, x, 0) = n.x;
            frame.normals.at(y, x, 1) = n.y;
            frame.normals.at(y, x, 2) = n.z;
        }

    LossConfig loss;
    loss.num_classes = classes;
    const auto targets = random_targets(r, 24, classes);
    c.build = [p, frame, loss, targets](Tape& t, ParamStore& ps, const std::vector<VarId>&,
                                        bool train) {
        const EncodeOut out = encode_2d(t, ps, p, frame, train);
        return t.add(t.scale(t.sum_all(out.features), 0.05),
                     focal_loss_rows(t, out.logits, targets, loss));
    };
    return c;
}

FdCheck check_encoder3d(Rng& rng) {
    FdCheck c;
    c.name = "encoder_3d";
    Rng r = rng.fork();
    const int classes = 4, feat = 6, n = 14;
    const Encoder3DParams p = make_encoder3d(c.ps, r, 4, 2, feat, classes, 6);

    std::vector<int64_t> keys;
    while (keys.size() < static_cast<size_t>(n)) {
        const int64_t k = pack_voxel_key(r.below(5), r.below(5), r.below(5));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    c.inputs.push_back(random_tensor(r, {n, feat}));
    LossConfig loss;
    loss.num_classes = classes;
    const auto targets = random_targets(r, n, classes);
    c.build = [p, keys, loss, targets](Tape& t, ParamStore& ps, const std::vector<VarId>& in,
                                       bool train) {
        const EncodeOut out = encode_3d(t, ps, p, keys, in[0], train);
        return t.add(t.scale(t.sum_all(out.features), 0.05),
                     focal_loss_rows(t, out.logits, targets, loss));
    };
    return c;
}

FdCheck check_expert(Rng& rng, int heads, bool softmax) {
    FdCheck c;
    c.name = softmax ? (heads == 1 ? "fusion_stack" : "fusion_stack_multihead")
                     : "fusion_stack_linear_attention";
    Rng r = rng.fork();
    const int classes = 4, feat = 6, n = 8;
    const ExpertParams p = make_expert(c.ps, r, feat, 2, 8, classes, 6, heads, softmax);
    for (int k = 0; k < 3; ++k) c.inputs.push_back(random_tensor(r, {n, feat}));
    LossConfig loss;
    loss.num_classes = classes;
    const auto targets = random_targets(r, n, classes);
    c.build = [p, loss, targets](Tape& t, ParamStore& ps, const std::vector<VarId>& in,
                                 bool train) {
        const ExpertOut out = expert_forward(t, ps, p, in[0], in[1], in[2], train);
        return t.add(t.scale(t.sum_all(out.features), 0.05),
                     focal_loss_rows(t, out.logits, targets, loss));
    };
    return c;
}

// Samples parameter coordinates of a whole model and differentiates the
// composite loss of a real fused frame against a one-frame history.
GradCheckResult full_pipeline_check(uint64_t seed) {
    Rng r(seed * 0x9e37u + 15);

    RunConfig cfg;
    cfg.voxel_resolution = 0.12;
    cfg.feat_dim = 8;
    cfg.enc_width = 4;
    cfg.enc3d_levels = 2;
    cfg.aux_hidden = 8;
    cfg.expert_layers = 2;
    cfg.expert_hidden = 16;
    cfg.image_width = 12;
    cfg.image_height = 8;
    cfg.seed = r.below(1 << 30);
    cfg.validate();

    SceneSpec spec;
    spec.frames = 2;
    spec.mesh_step = 0.12;
    const SyntheticScene scene = generate_scene(r.below(1 << 20), spec);
    const Intrinsics intr = make_intrinsics(cfg);

    Model model = make_model(cfg);
    const VoxelLabeler labeler(scene.mesh, cfg.voxel_resolution);
    std::vector<Frame> frames(2);
    for (int i = 0; i < 2; ++i) {
        frames[static_cast<size_t>(i)].intr = intr;
        frames[static_cast<size_t>(i)].pose = scene.trajectory[static_cast<size_t>(i)];
        render_frame(scene, frames[static_cast<size_t>(i)].pose, intr,
                     frames[static_cast<size_t>(i)].color, frames[static_cast<size_t>(i)].depth);
    }
    const LossConfig loss = loss_config_of(cfg);

    // One untracked frame seeds the map so the fused history is nontrivial.
    SceneMap base_map(cfg.voxel_resolution, cfg.feat_dim);
    fuse_frame(base_map, frames[0], model, loss, cfg.depth_cutoff, false, nullptr);

    model.ps.zero_grad();
    {
        SceneMap map = base_map;
        fuse_frame(map, frames[1], model, loss, cfg.depth_cutoff, true, &labeler);
    }

    const auto value = [&]() {
        SceneMap map = base_map;
        return fuse_frame(map, frames[1], model, loss, cfg.depth_cutoff, false, &labeler)
            .loss_total;
    };

    std::vector<std::pair<int, size_t>> coords;
    for (int i = 0; i < model.ps.count(); ++i)
        for (size_t k = 0; k < model.ps.entry(i).value.size(); ++k) coords.push_back({i, k});
    const size_t budget = 220;
    const size_t stride = coords.size() > budget ? (coords.size() + budget - 1) / budget : 1;

    GradCheckResult res;
    res.name = "fused_frame_end_to_end";
    for (size_t i = 0; i < coords.size(); i += stride) {
        ParamEntry& e = model.ps.entry(coords[i].first);
        double* slot = &e.value.raw()[coords[i].second];
        const double analytic = e.grad.raw()[coords[i].second];
        const double orig = *slot;
        double rel = 0.0;
        for (const double h : {kStep, kRetryStep}) {
            *slot = orig + h;
            const double fp = value();
            *slot = orig - h;
            const double fm = value();
            *slot = orig;
            rel = h == kStep ? fd_rel(analytic, fp, fm, h)
                             : std::min(rel, fd_rel(analytic, fp, fm, h));
            if (rel < 1e-6) break;
        }
        res.max_rel = std::max(res.max_rel, rel);
        ++res.coords;
    }
    return res;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCheckResult> out;
    std::vector<FdCheck> checks;
    checks.push_back(check_aux_head(rng));
    checks.push_back(check_focal_loss(rng, 1.0));
    checks.push_back(check_focal_loss(rng, 2.0));
    checks.push_back(check_composite(rng));
    checks.push_back(check_encoder2d(rng));
    checks.push_back(check_encoder3d(rng));
    checks.push_back(check_expert(rng, 1, true));
    checks.push_back(check_expert(rng, 2, true));
    checks.push_back(check_expert(rng, 1, false));
    for (FdCheck& c : checks) out.push_back(run_check(c));
    out.push_back(full_pipeline_check(seed));
    return out;
}

std::string gradcheck_report(const std::vector<GradCheckResult>& results) {
    std::string s = "check                          coords   max_rel\n";
    char buf[96];
    for (const GradCheckResult& r : results) {
        std::snprintf(buf, sizeof buf, "%-30s %6d   %.3e\n", r.name.c_str(), r.coords, r.max_rel);
        s += buf;
    }
    std::snprintf(buf, sizeof buf, "worst: %.3e\n", worst_of(results));
    s += buf;
    return s;
}

double worst_of(const std::vector<GradCheckResult>& results) {
    double w = 0.0;
    for (const GradCheckResult& r : results) w = std::max(w, r.max_rel);
    return w;
}

}  // namespace voxfuse
