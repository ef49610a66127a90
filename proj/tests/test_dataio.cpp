#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "voxfuse/config.hpp"
#include "voxfuse/errors.hpp"
#include "voxfuse/sequence.hpp"
#include "voxfuse/synth.hpp"

using namespace voxfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("voxfuse_dataio_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Image random_color(Rng& rng, int w, int h) {
    Image img(w, h, 3);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("ppm round-trip quantizes to 8 bits once") {
    TempDir tmp;
    Rng rng(1);
    const Image img = random_color(rng, 9, 5);
    write_ppm(tmp.file("a.ppm"), img);
    const Image back = read_ppm(tmp.file("a.ppm"));
    REQUIRE(back.width == 9);
    REQUIRE(back.height == 5);
    REQUIRE(back.channels == 3);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(back.data[i] == std::lround(img.data[i] * 255.0) / 255.0);

    // A second trip is lossless.
    write_ppm(tmp.file("b.ppm"), back);
    const Image again = read_ppm(tmp.file("b.ppm"));
    for (size_t i = 0; i < back.data.size(); ++i) CHECK(again.data[i] == back.data[i]);
    CHECK(slurp(tmp.file("a.ppm")) == slurp(tmp.file("b.ppm")));

    Image mono(4, 4, 1);
    CHECK_THROWS_AS(write_ppm(tmp.file("c.ppm"), mono), DimensionError);
}

TEST_CASE("ppm header comments and malformed files") {
    TempDir tmp;
    {
        std::ofstream f(tmp.file("c.ppm"), std::ios::binary);
        f << "P6\n# a comment\n2 1\n# another\n255\n";
        const unsigned char px[6] = {255, 0, 0, 0, 128, 255};
        f.write(reinterpret_cast<const char*>(px), 6);
    }
    const Image img = read_ppm(tmp.file("c.ppm"));
    CHECK(img.at(0, 0, 0) == 1.0);
    CHECK(img.at(0, 1, 1) == 128.0 / 255.0);

    {
        std::ofstream f(tmp.file("bad1.ppm"), std::ios::binary);
        f << "P5\n2 1\n255\nxx";
    }
    CHECK_THROWS_AS(read_ppm(tmp.file("bad1.ppm")), FormatError);
    {
        std::ofstream f(tmp.file("bad2.ppm"), std::ios::binary);
        f << "P6\n2 1\n255\nx";  // truncated pixels
    }
    CHECK_THROWS_AS(read_ppm(tmp.file("bad2.ppm")), FormatError);
    CHECK_THROWS_AS(read_ppm(tmp.file("missing.ppm")), FormatError);
}

TEST_CASE("depth pgm stores big-endian integer millimeters") {
    TempDir tmp;
    Image depth(3, 2, 1);
    depth.at(0, 0) = 0.2584;  // 258 mm after rounding
    depth.at(0, 1) = 0.0;     // invalid stays 0
    depth.at(0, 2) = 1.9996;  // rounds up to 2000 mm
    depth.at(1, 0) = 70.0;    // clamps to 65535 mm
    depth.at(1, 1) = 0.0004;  // rounds to 0 = invalid
    depth.at(1, 2) = 3.0001;
    write_depth_pgm(tmp.file("d.pgm"), depth);

    const std::string raw = slurp(tmp.file("d.pgm"));
    const size_t header = raw.size() - 12;  // 6 pixels, 2 bytes each
    CHECK(static_cast<unsigned char>(raw[header]) == 258 / 256);
    CHECK(static_cast<unsigned char>(raw[header + 1]) == 258 % 256);

    const Image back = read_depth_pgm(tmp.file("d.pgm"));
    CHECK(back.at(0, 0) == 0.258);
    CHECK(back.at(0, 1) == 0.0);
    CHECK(back.at(0, 2) == 2.0);
    CHECK(back.at(1, 0) == 65.535);
    CHECK(back.at(1, 1) == 0.0);
    CHECK(back.at(1, 2) == 3.0);
    for (double v : back.data) {
        const double mm = v * 1000.0;
        CHECK(std::abs(mm - std::lround(mm)) < 1e-9);  // exact integer millimeters
    }

    // Second trip is bit-identical on disk.
    write_depth_pgm(tmp.file("d2.pgm"), back);
    CHECK(slurp(tmp.file("d.pgm")) == slurp(tmp.file("d2.pgm")));
}

TEST_CASE("pose text round-trip is exact and validated") {
    TempDir tmp;
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        const Vec3 eye{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 2)};
        const Vec3 tgt{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1)};
        if ((tgt - eye).norm() < 0.1) continue;
        const Pose p = look_at(eye, tgt);
        write_pose_txt(tmp.file("p.txt"), p);
        const Pose q = read_pose_txt(tmp.file("p.txt"));
        CHECK(p.r == q.r);  // %.17g round-trips doubles exactly
        CHECK(p.t.x == q.t.x);
        CHECK(p.t.y == q.t.y);
        CHECK(p.t.z == q.t.z);
    }

    {
        std::ofstream f(tmp.file("bad_row.txt"));
        f << "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 1 1\n";
    }
    CHECK_THROWS_AS(read_pose_txt(tmp.file("bad_row.txt")), FormatError);
    {
        std::ofstream f(tmp.file("skew.txt"));
        f << "1.001 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
    }
    CHECK_THROWS_AS(read_pose_txt(tmp.file("skew.txt")), FormatError);
    {
        std::ofstream f(tmp.file("short.txt"));
        f << "1 0 0\n";
    }
    CHECK_THROWS_AS(read_pose_txt(tmp.file("short.txt")), FormatError);
}

TEST_CASE("intrinsics text round-trip") {
    TempDir tmp;
    Intrinsics intr;
    intr.fx = 41.25;
    intr.fy = 40.75;
    intr.cx = 23.5;
    intr.cy = 17.5;
    intr.width = 48;
    intr.height = 36;
    write_intrinsics_txt(tmp.file("i.txt"), intr);
    const Intrinsics back = read_intrinsics_txt(tmp.file("i.txt"));
    CHECK(back.fx == intr.fx);
    CHECK(back.fy == intr.fy);
    CHECK(back.cx == intr.cx);
    CHECK(back.cy == intr.cy);
    CHECK(back.width == intr.width);
    CHECK(back.height == intr.height);

    {
        std::ofstream f(tmp.file("unknown.txt"));
        f << "fx 40\nfy 40\ncx 24\ncy 18\nwidth 48\nheight 36\nskew 0\n";
    }
    CHECK_THROWS_AS(read_intrinsics_txt(tmp.file("unknown.txt")), FormatError);
    {
        std::ofstream f(tmp.file("partial.txt"));
        f << "fx 40\nfy 40\n";
    }
    CHECK_THROWS_AS(read_intrinsics_txt(tmp.file("partial.txt")), FormatError);
}

TEST_CASE("labeled ply round-trip") {
    TempDir tmp;
    SceneSpec spec;
    spec.frames = 0;
    spec.mesh_step = 0.3;
    const SyntheticScene scene = generate_scene(9, spec);
    REQUIRE(!scene.mesh.vertices.empty());
    write_labeled_ply(tmp.file("m.ply"), scene.mesh);
    const LabeledMesh back = read_labeled_ply(tmp.file("m.ply"));
    REQUIRE(back.vertices.size() == scene.mesh.vertices.size());
    for (size_t i = 0; i < back.vertices.size(); ++i) {
        CHECK(back.vertices[i].x == scene.mesh.vertices[i].x);
        CHECK(back.vertices[i].y == scene.mesh.vertices[i].y);
        CHECK(back.vertices[i].z == scene.mesh.vertices[i].z);
    }
    CHECK(back.vertex_labels == scene.mesh.vertex_labels);
    CHECK(back.triangles == scene.mesh.triangles);

    {
        std::ofstream f(tmp.file("bad_face.ply"));
        f << "ply\nformat ascii 1.0\nelement vertex 1\n"
             "property double x\nproperty double y\nproperty double z\nproperty int label\n"
             "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
             "0 0 0 1\n3 0 0 5\n";
    }
    CHECK_THROWS_AS(read_labeled_ply(tmp.file("bad_face.ply")), FormatError);
    {
        std::ofstream f(tmp.file("binary.ply"));
        f << "ply\nformat binary_little_endian 1.0\nend_header\n";
    }
    CHECK_THROWS_AS(read_labeled_ply(tmp.file("binary.ply")), FormatError);
    {
        std::ofstream f(tmp.file("no_label.ply"));
        f << "ply\nformat ascii 1.0\nelement vertex 0\n"
             "property double x\nproperty double y\nproperty double z\n"
             "element face 0\nproperty list uchar int vertex_indices\nend_header\n";
    }
    CHECK_THROWS_AS(read_labeled_ply(tmp.file("no_label.ply")), FormatError);
}

TEST_CASE("scene sequence writes frames that load back exactly") {
    TempDir tmp;
    SceneSpec spec;
    spec.frames = 3;
    spec.mesh_step = 0.3;
    const SyntheticScene scene = generate_scene(21, spec);
    Intrinsics intr;
    intr.width = 16;
    intr.height = 12;
    intr.fx = 14.0;
    intr.fy = 14.0;
    intr.cx = 8.0;
    intr.cy = 6.0;

    write_scene_sequence(tmp.str(), scene, intr);
    CHECK(count_sequence_frames(tmp.str()) == 3);

    const Intrinsics ri = read_intrinsics_txt(tmp.file("intrinsics.txt"));
    CHECK(ri.width == 16);

    for (int i = 0; i < 3; ++i) {
        const Frame frame = load_sequence_frame(tmp.str(), i, ri);
        Image color, depth;
        render_frame(scene, scene.trajectory[static_cast<size_t>(i)], intr, color, depth);
        for (size_t k = 0; k < depth.data.size(); ++k) {
            const double mm = depth.data[k] > 0 ? std::lround(depth.data[k] * 1000.0) : 0;
            CHECK(frame.depth.data[k] == mm / 1000.0);
        }
        CHECK(frame.pose.r == scene.trajectory[static_cast<size_t>(i)].r);
        CHECK(frame.pose.t.z == scene.trajectory[static_cast<size_t>(i)].t.z);
        CHECK(frame.color.channels == 3);
        CHECK(frame.normals.data.empty());
    }

    const LabeledMesh mesh = read_labeled_ply(tmp.file("mesh.ply"));
    CHECK(mesh.vertices.size() == scene.mesh.vertices.size());

    // Removing one file makes the frame incomplete.
    fs::remove(frame_depth_path(tmp.str(), 1));
    CHECK_THROWS_AS(count_sequence_frames(tmp.str()), FormatError);

    TempDir empty;
    CHECK(count_sequence_frames(empty.str()) == 0);
}

TEST_CASE("config defaults validate and round-trip") {
    RunConfig cfg;
    cfg.validate();
    const std::string text = format_config(cfg);
    const RunConfig back = parse_config(text);
    CHECK(format_config(back) == text);
}

TEST_CASE("config round-trips every field losslessly") {
    RunConfig cfg;
    cfg.voxel_resolution = 0.0825;
    cfg.depth_cutoff = 2.875;
    cfg.feat_dim = 24;
    cfg.enc_width = 12;
    cfg.enc3d_levels = 3;
    cfg.aux_hidden = 33;
    cfg.expert_layers = 2;
    cfg.expert_hidden = 17;
    cfg.expert_heads = 4;
    cfg.softmax_attention = false;
    cfg.classes = 5;
    cfg.ignore_label = 255;
    cfg.gamma = 1.0 / 3.0;
    cfg.lambda_2d = 0.1 + 1e-15;
    cfg.lambda_3d = 2.0;
    cfg.lambda_expert = 0.0;
    cfg.lr_core = 3.7e-4;
    cfg.lr_pretrained_2d = 1.1e-6;
    cfg.epochs = 7;
    cfg.micro_batches = 3;
    cfg.micro_batch_scenes = 5;
    cfg.scene_reset_probability = 0.125;
    cfg.warmup_fraction = 0.45;
    cfg.initial_lr_divisor = 12.0;
    cfg.final_lr_divisor = 333.0;
    cfg.seed = 18446744073709551615ULL;  // max u64 survives
    cfg.image_width = 64;
    cfg.image_height = 48;
    cfg.frames_per_scene = 11;
    cfg.train_scenes = 2;
    cfg.eval_scenes = 1;
    cfg.depth_noise = 0.015;
    cfg.run_dir = "runs/exp 1";  // spaces in values survive
    cfg.data_dir = "/tmp/data";
    cfg.checkpoint_every = 4;
    cfg.validate();

    TempDir tmp;
    save_config(tmp.file("run.cfg"), cfg);
    const RunConfig back = load_config(tmp.file("run.cfg"));
    CHECK(back.voxel_resolution == cfg.voxel_resolution);
    CHECK(back.lambda_2d == cfg.lambda_2d);
    CHECK(back.gamma == cfg.gamma);
    CHECK(back.seed == cfg.seed);
    CHECK(back.softmax_attention == cfg.softmax_attention);
    CHECK(back.run_dir == cfg.run_dir);
    CHECK(back.ignore_label == cfg.ignore_label);
    CHECK(format_config(back) == format_config(cfg));
}

TEST_CASE("config parsing: comments, defaults, and rejection") {
    const RunConfig partial = parse_config("# comment only\n\ngamma = 2.5\n  epochs=3 # tail\n");
    CHECK(partial.gamma == 2.5);
    CHECK(partial.epochs == 3);
    CHECK(partial.feat_dim == 40);  // untouched default
    CHECK(partial.run_dir == "runs/run0");

    CHECK_THROWS_AS(parse_config("not_a_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("gamma = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("gamma = 1\ngamma = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("gamma\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/path/run.cfg"), ConfigError);

    RunConfig bad;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = RunConfig{};
    bad.feat_dim = 10;
    bad.expert_heads = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = RunConfig{};
    bad.ignore_label = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = RunConfig{};
    bad.image_width = 47;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = RunConfig{};
    bad.scene_reset_probability = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
