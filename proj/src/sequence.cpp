#include "voxfuse/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {

std::string indexed(const std::string& dir, const char* stem, int index, const char* ext) {
    if (index < 0) throw ConfigError("sequence: frame index must be nonnegative");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05d.%s", stem, index, ext);
    return dir + "/" + buf;
}

std::ofstream open_out(const std::string& path, bool binary) {
    std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
    if (!f) throw FormatError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path, bool binary) {
    std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
    if (!f) throw FormatError("cannot open for reading: " + path);
    return f;
}

// Netpbm token reader: skips whitespace and '#' comments.
std::string pnm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

int pnm_int(std::istream& in, const std::string& path) {
    const std::string tok = pnm_token(in);
    try {
        size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad netpbm header field '" + tok + "' in " + path);
    }
}

double parse_double(const std::string& tok, const std::string& path) {
    try {
        size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad number '" + tok + "' in " + path);
    }
}

}  // namespace

std::string frame_color_path(const std::string& dir, int index) {
    return indexed(dir, "color", index, "ppm");
}
std::string frame_depth_path(const std::string& dir, int index) {
    return indexed(dir, "depth", index, "pgm");
}
std::string frame_pose_path(const std::string& dir, int index) {
    return indexed(dir, "pose", index, "txt");
}

void write_ppm(const std::string& path, const Image& color) {
    if (color.channels != 3) throw DimensionError("write_ppm: need a 3-channel image");
    auto f = open_out(path, true);
    f << "P6\n" << color.width << " " << color.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(color.width) * 3);
    for (int y = 0; y < color.height; ++y) {
        for (int x = 0; x < color.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(color.at(y, x, c), 0.0, 1.0);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw FormatError("short write: " + path);
}

Image read_ppm(const std::string& path) {
    auto f = open_in(path, true);
    if (pnm_token(f) != "P6") throw FormatError("not a binary PPM: " + path);
    const int w = pnm_int(f, path), h = pnm_int(f, path), maxval = pnm_int(f, path);
    if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("unsupported PPM header: " + path);
    // pnm_token consumed the single whitespace after maxval; pixels start here.
    Image img(w, h, 3);
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw FormatError("truncated PPM: " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

void write_depth_pgm(const std::string& path, const Image& depth) {
    if (depth.channels != 1) throw DimensionError("write_depth_pgm: need a 1-channel image");
    auto f = open_out(path, true);
    f << "P5\n" << depth.width << " " << depth.height << "\n65535\n";
    std::vector<unsigned char> row(static_cast<size_t>(depth.width) * 2);
    for (int y = 0; y < depth.height; ++y) {
        for (int x = 0; x < depth.width; ++x) {
            const double meters = depth.at(y, x);
            long mm = meters > 0.0 ? std::lround(meters * 1000.0) : 0;
            mm = std::clamp(mm, 0L, 65535L);
            row[static_cast<size_t>(x) * 2] = static_cast<unsigned char>(mm >> 8);
            row[static_cast<size_t>(x) * 2 + 1] = static_cast<unsigned char>(mm & 0xff);
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw FormatError("short write: " + path);
}

Image read_depth_pgm(const std::string& path) {
    auto f = open_in(path, true);
    if (pnm_token(f) != "P5") throw FormatError("not a binary PGM: " + path);
    const int w = pnm_int(f, path), h = pnm_int(f, path), maxval = pnm_int(f, path);
    if (w <= 0 || h <= 0 || maxval != 65535) throw FormatError("unsupported PGM header: " + path);
    Image img(w, h, 1);
    std::vector<unsigned char> row(static_cast<size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw FormatError("truncated PGM: " + path);
        for (int x = 0; x < w; ++x) {
            const int mm = (row[static_cast<size_t>(x) * 2] << 8) | row[static_cast<size_t>(x) * 2 + 1];
            img.at(y, x) = mm / 1000.0;
        }
    }
    return img;
}

void write_pose_txt(const std::string& path, const Pose& pose) {
    auto f = open_out(path, false);
    char buf[256];
    for (int r = 0; r < 3; ++r) {
        const double tr = r == 0 ? pose.t.x : r == 1 ? pose.t.y : pose.t.z;
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", pose.r[r * 3],
                      pose.r[r * 3 + 1], pose.r[r * 3 + 2], tr);
        f << buf;
    }
    f << "0 0 0 1\n";
    if (!f) throw FormatError("short write: " + path);
}

Pose read_pose_txt(const std::string& path) {
    auto f = open_in(path, false);
    double m[16];
    for (double& v : m) {
        std::string tok;
        if (!(f >> tok)) throw FormatError("truncated pose file: " + path);
        v = parse_double(tok, path);
    }
    if (m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0)
        throw FormatError("pose bottom row must be 0 0 0 1: " + path);
    Pose p;
    for (int r = 0; r < 3; ++r) {
        p.r[r * 3] = m[r * 4];
        p.r[r * 3 + 1] = m[r * 4 + 1];
        p.r[r * 3 + 2] = m[r * 4 + 2];
    }
    p.t = {m[3], m[7], m[11]};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) dot += p.r[k * 3 + i] * p.r[k * 3 + j];
            if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-6)
                throw FormatError("pose rotation not orthonormal within 1e-6: " + path);
        }
    return p;
}

void write_intrinsics_txt(const std::string& path, const Intrinsics& intr) {
    intr.validate();
    auto f = open_out(path, false);
    char buf[128];
    std::snprintf(buf, sizeof buf, "fx %.17g\nfy %.17g\ncx %.17g\ncy %.17g\n", intr.fx, intr.fy,
                  intr.cx, intr.cy);
    f << buf << "width " << intr.width << "\nheight " << intr.height << "\n";
    if (!f) throw FormatError("short write: " + path);
}

Intrinsics read_intrinsics_txt(const std::string& path) {
    auto f = open_in(path, false);
    Intrinsics intr;
    std::string key, val;
    bool seen[6] = {};
    while (f >> key >> val) {
        if (key == "fx") { intr.fx = parse_double(val, path); seen[0] = true; }
        else if (key == "fy") { intr.fy = parse_double(val, path); seen[1] = true; }
        else if (key == "cx") { intr.cx = parse_double(val, path); seen[2] = true; }
        else if (key == "cy") { intr.cy = parse_double(val, path); seen[3] = true; }
        else if (key == "width") { intr.width = static_cast<int>(parse_double(val, path)); seen[4] = true; }
        else if (key == "height") { intr.height = static_cast<int>(parse_double(val, path)); seen[5] = true; }
        else throw FormatError("unknown intrinsics key '" + key + "' in " + path);
    }
    for (bool s : seen)
        if (!s) throw FormatError("incomplete intrinsics file: " + path);
    intr.validate();
    return intr;
}

void write_labeled_ply(const std::string& path, const LabeledMesh& mesh) {
    if (mesh.vertices.size() != mesh.vertex_labels.size())
        throw DimensionError("write_labeled_ply: one label per vertex required");
    auto f = open_out(path, false);
    f << "ply\nformat ascii 1.0\n";
    f << "element vertex " << mesh.vertices.size() << "\n";
    f << "property double x\nproperty double y\nproperty double z\nproperty int label\n";
    f << "element face " << mesh.triangles.size() << "\n";
    f << "property list uchar int vertex_indices\nend_header\n";
    char buf[128];
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %d\n", v.x, v.y, v.z,
                      mesh.vertex_labels[i]);
        f << buf;
    }
    for (const auto& t : mesh.triangles) f << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
    if (!f) throw FormatError("short write: " + path);
}

LabeledMesh read_labeled_ply(const std::string& path) {
    auto f = open_in(path, false);
    std::string line;
    size_t n_vert = 0, n_face = 0;
    bool header_done = false;
    std::vector<std::string> vert_props;
    std::string current_element;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "end_header") { header_done = true; break; }
        if (word == "format") {
            std::string kind;
            ls >> kind;
            if (kind != "ascii") throw FormatError("only ascii PLY supported: " + path);
        } else if (word == "element") {
            std::string name;
            size_t count = 0;
            ls >> name >> count;
            current_element = name;
            if (name == "vertex") n_vert = count;
            else if (name == "face") n_face = count;
        } else if (word == "property" && current_element == "vertex") {
            std::string type, name;
            ls >> type;
            if (type == "list") ls >> name >> name;  // skip list types
            ls >> name;
            vert_props.push_back(name);
        }
    }
    if (!header_done) throw FormatError("missing end_header: " + path);
    int ix = -1, iy = -1, iz = -1, il = -1;
    for (size_t i = 0; i < vert_props.size(); ++i) {
        if (vert_props[i] == "x") ix = static_cast<int>(i);
        else if (vert_props[i] == "y") iy = static_cast<int>(i);
        else if (vert_props[i] == "z") iz = static_cast<int>(i);
        else if (vert_props[i] == "label") il = static_cast<int>(i);
    }
    if (ix < 0 || iy < 0 || iz < 0 || il < 0)
        throw FormatError("PLY vertices must carry x y z label: " + path);
    LabeledMesh mesh;
    mesh.vertices.reserve(n_vert);
    mesh.vertex_labels.reserve(n_vert);
    std::vector<double> vals(vert_props.size());
    for (size_t i = 0; i < n_vert; ++i) {
        for (double& v : vals) {
            std::string tok;
            if (!(f >> tok)) throw FormatError("truncated PLY vertices: " + path);
            v = parse_double(tok, path);
        }
        mesh.vertices.push_back({vals[static_cast<size_t>(ix)], vals[static_cast<size_t>(iy)],
                                 vals[static_cast<size_t>(iz)]});
        mesh.vertex_labels.push_back(static_cast<int>(vals[static_cast<size_t>(il)]));
    }
    for (size_t i = 0; i < n_face; ++i) {
        int k = 0;
        if (!(f >> k) || k != 3) throw FormatError("only triangle faces supported: " + path);
        std::array<int, 3> tri{};
        for (int& v : tri) {
            if (!(f >> v)) throw FormatError("truncated PLY faces: " + path);
            if (v < 0 || static_cast<size_t>(v) >= n_vert)
                throw FormatError("PLY face index out of range: " + path);
        }
        mesh.triangles.push_back(tri);
    }
    return mesh;
}

int count_sequence_frames(const std::string& dir) {
    namespace fs = std::filesystem;
    int n = 0;
    while (true) {
        const bool pose = fs::exists(frame_pose_path(dir, n));
        const bool color = fs::exists(frame_color_path(dir, n));
        const bool depth = fs::exists(frame_depth_path(dir, n));
        if (!pose && !color && !depth) break;
        if (!(pose && color && depth))
            throw FormatError("sequence frame " + std::to_string(n) + " is incomplete in " + dir);
        ++n;
    }
    return n;
}

void write_sequence_frame(const std::string& dir, int index, const Image& color,
                          const Image& depth, const Pose& pose) {
    write_ppm(frame_color_path(dir, index), color);
    write_depth_pgm(frame_depth_path(dir, index), depth);
    write_pose_txt(frame_pose_path(dir, index), pose);
}

Frame load_sequence_frame(const std::string& dir, int index, const Intrinsics& intr) {
    Frame frame;
    frame.intr = intr;
    frame.color = read_ppm(frame_color_path(dir, index));
    frame.depth = read_depth_pgm(frame_depth_path(dir, index));
    frame.pose = read_pose_txt(frame_pose_path(dir, index));
    if (frame.color.width != intr.width || frame.color.height != intr.height ||
        frame.depth.width != intr.width || frame.depth.height != intr.height)
        throw DimensionError("sequence frame size does not match intrinsics: " + dir);
    return frame;
}

void write_scene_sequence(const std::string& dir, const SyntheticScene& scene,
                          const Intrinsics& intr, Rng* noise) {
    std::filesystem::create_directories(dir);
    write_intrinsics_txt(dir + "/intrinsics.txt", intr);
    Image color, depth;
    for (size_t i = 0; i < scene.trajectory.size(); ++i) {
        render_frame(scene, scene.trajectory[i], intr, color, depth, 10.0, noise);
        write_sequence_frame(dir, static_cast<int>(i), color, depth, scene.trajectory[i]);
    }
    write_labeled_ply(dir + "/mesh.ply", scene.mesh);
}

}  // namespace voxfuse
