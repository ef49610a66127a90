#include "voxfuse/evaluate.hpp"

#include <cstdio>

#include "voxfuse/encoders.hpp"
#include "voxfuse/errors.hpp"

namespace voxfuse {

BranchEval evaluate_branches(std::vector<TrainScene>& scenes, Model& model,
                             const RunConfig& cfg) {
    const LossConfig loss = loss_config_of(cfg);
    BranchEval ev(cfg.classes, cfg.ignore_label);

    for (TrainScene& ts : scenes) {
        if (ts.labeler == nullptr) throw ConfigError("evaluate: scene without GT labels: " + ts.name);
        ts.map.clear();
        BranchVotes votes_2d(cfg.classes);
        BranchVotes votes_3d(cfg.classes);
        for (const Frame& frame : ts.frames) {
            const FuseResult r =
                fuse_frame(ts.map, frame, model, loss, cfg.depth_cutoff, false, nullptr);
            for (size_t i = 0; i < r.keys.size(); ++i) {
                votes_2d.add(r.keys[i], r.labels_2d[i]);
                votes_3d.add(r.keys[i], r.labels_3d[i]);
            }
        }

        const auto head = [&](const std::vector<double>& feature) {
            return aux_head_apply(model.ps, model.expert.head, feature);
        };
        const auto fused = classify_map(ts.map, head, cfg.classes);

        std::vector<int64_t> keys;
        keys.reserve(fused.size());
        for (const auto& kv : fused) keys.push_back(kv.first);
        const std::vector<int> gt = ts.labeler->labels_of(keys);

        for (size_t i = 0; i < keys.size(); ++i) {
            ev.cm_2d.add(votes_2d.majority(keys[i]), gt[i]);
            ev.cm_3d.add(votes_3d.majority(keys[i]), gt[i]);
            ev.cm_expert.add(fused[i].second, gt[i]);
        }
    }
    return ev;
}

std::string evaluation_report(const BranchEval& ev) {
    const auto s2 = ev.cm_2d.summary();
    const auto s3 = ev.cm_3d.summary();
    const auto sx = ev.cm_expert.summary();
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "branch   mIoU    mAcc    wIoU\n"
                  "2d      %6.4f  %6.4f  %6.4f\n"
                  "3d      %6.4f  %6.4f  %6.4f\n"
                  "fused   %6.4f  %6.4f  %6.4f\n",
                  s2.miou, s2.macc, s2.wiou, s3.miou, s3.macc, s3.wiou, sx.miou, sx.macc, sx.wiou);
    std::string out(buf);

    static const char* kSynthNames[kNumClasses] = {"floor",  "wall",  "box",  "cylinder",
                                                   "sphere", "table", "door", "clutter"};
    const auto iou2 = ev.cm_2d.iou_per_class();
    const auto iou3 = ev.cm_3d.iou_per_class();
    const auto ioux = ev.cm_expert.iou_per_class();
    out += "class            IoU(2d) IoU(3d) IoU(fused)\n";
    for (int c = 0; c < ev.cm_expert.num_classes(); ++c) {
        char name[24];
        if (ev.cm_expert.num_classes() == kNumClasses)
            std::snprintf(name, sizeof name, "%d %s", c, kSynthNames[c]);
        else
            std::snprintf(name, sizeof name, "%d", c);
        std::snprintf(buf, sizeof buf, "%-16s %7.4f %7.4f %10.4f\n", name,
                      iou2[static_cast<size_t>(c)], iou3[static_cast<size_t>(c)],
                      ioux[static_cast<size_t>(c)]);
        out += buf;
    }
    return out;
}

}  // namespace voxfuse
