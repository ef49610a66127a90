#pragma once

#include <cstdint>
#include <string>

namespace voxfuse {

/// Flat `key = value` run configuration. Every tunable lives here so a run
/// directory snapshot pins the full setup. Unknown keys are rejected on load;
/// keys absent from a file keep their defaults.
struct RunConfig {
    // map + geometry
    double voxel_resolution = 0.04;
    double depth_cutoff = 3.0;

    // feature sizes
    int feat_dim = 40;
    int enc_width = 16;
    int enc3d_levels = 2;
    int aux_hidden = 64;

    // expert
    int expert_layers = 5;
    int expert_hidden = 128;
    int expert_heads = 1;
    bool softmax_attention = true;

    // labels + losses
    int classes = 8;
    int ignore_label = -1;
    double gamma = 1.0;
    double lambda_2d = 1.0;
    double lambda_3d = 1.0;
    double lambda_expert = 1.0;

    // optimization
    double lr_core = 1e-3;
    double lr_pretrained_2d = 1e-5;
    int epochs = 30;
    int micro_batches = 2;
    int micro_batch_scenes = 4;
    int frames_per_scene_step = 4;
    double scene_reset_probability = 0.3;
    double warmup_fraction = 0.3;
    double initial_lr_divisor = 25.0;
    double final_lr_divisor = 1e4;

    // data
    uint64_t seed = 1234;
    int image_width = 48;
    int image_height = 36;
    int frames_per_scene = 40;
    int train_scenes = 16;
    int eval_scenes = 4;
    double depth_noise = 0.0;

    // bookkeeping
    std::string run_dir = "runs/run0";
    std::string data_dir = "data";
    int checkpoint_every = 10;

    void validate() const;  // throws ConfigError
};

/// Parses `key = value` lines ('#' starts a comment). Unknown key, bad value,
/// or duplicate key throws ConfigError. Values not mentioned keep defaults.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text);

/// Writes every key; numbers print with enough digits to round-trip exactly.
void save_config(const std::string& path, const RunConfig& cfg);
std::string format_config(const RunConfig& cfg);

}  // namespace voxfuse
