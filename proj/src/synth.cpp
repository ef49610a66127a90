#include "voxfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {

constexpr double kWallThickness = 0.08;
constexpr double kDoorThickness = 0.06;
constexpr double kPlaceMargin = 0.15;
constexpr int kPlaceTries = 200;
constexpr double kRayEps = 1e-9;

// Base reflectance per class; scenes jitter these so color alone never
// identifies a class exactly.
const std::array<std::array<double, 3>, kNumClasses> kBaseAlbedo = {{
    {0.46, 0.42, 0.36},  // floor
    {0.76, 0.74, 0.70},  // wall
    {0.56, 0.36, 0.20},  // box furniture
    {0.24, 0.44, 0.62},  // cylinder furniture
    {0.72, 0.24, 0.26},  // sphere object
    {0.60, 0.50, 0.30},  // table slab
    {0.40, 0.28, 0.18},  // door panel
    {0.50, 0.56, 0.26},  // clutter (re-randomized per object)
}};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct Aabb {
    Vec3 lo, hi;
};

bool overlaps(const Aabb& a, const Aabb& b) {
    return a.lo.x < b.hi.x && a.hi.x > b.lo.x && a.lo.y < b.hi.y && a.hi.y > b.lo.y &&
           a.lo.z < b.hi.z && a.hi.z > b.lo.z;
}

int grid_steps(double len, double step) {
    return std::max(1, static_cast<int>(std::ceil(len / step)));
}

void add_grid(LabeledMesh& m, const Vec3& origin, const Vec3& uvec, const Vec3& vvec, int nu,
              int nv, int label) {
    const int base = static_cast<int>(m.vertices.size());
    for (int j = 0; j <= nv; ++j) {
        for (int i = 0; i <= nu; ++i) {
            const double fu = static_cast<double>(i) / nu;
            const double fv = static_cast<double>(j) / nv;
            m.vertices.push_back(origin + uvec * fu + vvec * fv);
            m.vertex_labels.push_back(label);
        }
    }
    for (int j = 0; j < nv; ++j) {
        for (int i = 0; i < nu; ++i) {
            const int a = base + j * (nu + 1) + i;
            const int b = a + 1;
            const int c = a + (nu + 1);
            const int d = c + 1;
            m.triangles.push_back({a, b, d});
            m.triangles.push_back({a, d, c});
        }
    }
}

// face_mask bits: 0 -x, 1 +x, 2 -y, 3 +y, 4 -z, 5 +z.
void add_box_mesh(LabeledMesh& m, const SynthBox& b, double step, unsigned face_mask) {
    const Vec3 ext = b.hi - b.lo;
    const int nx = grid_steps(ext.x, step);
    const int ny = grid_steps(ext.y, step);
    const int nz = grid_steps(ext.z, step);
    const Vec3 ux{ext.x, 0, 0}, uy{0, ext.y, 0}, uz{0, 0, ext.z};
    if (face_mask & 1u) add_grid(m, b.lo, uy, uz, ny, nz, b.label);
    if (face_mask & 2u) add_grid(m, {b.hi.x, b.lo.y, b.lo.z}, uy, uz, ny, nz, b.label);
    if (face_mask & 4u) add_grid(m, b.lo, ux, uz, nx, nz, b.label);
    if (face_mask & 8u) add_grid(m, {b.lo.x, b.hi.y, b.lo.z}, ux, uz, nx, nz, b.label);
    if (face_mask & 16u) add_grid(m, b.lo, ux, uy, nx, ny, b.label);
    if (face_mask & 32u) add_grid(m, {b.lo.x, b.lo.y, b.hi.z}, ux, uy, nx, ny, b.label);
}

void add_cylinder_mesh(LabeledMesh& m, const SynthCylinder& c, double step) {
    const int nseg = std::max(8, grid_steps(2.0 * std::numbers::pi * c.radius, step));
    const int nz = grid_steps(c.height, step);
    const int base = static_cast<int>(m.vertices.size());
    for (int j = 0; j <= nz; ++j) {
        const double z = c.base.z + c.height * j / nz;
        for (int i = 0; i < nseg; ++i) {
            const double a = 2.0 * std::numbers::pi * i / nseg;
            m.vertices.push_back({c.base.x + c.radius * std::cos(a),
                                  c.base.y + c.radius * std::sin(a), z});
            m.vertex_labels.push_back(c.label);
        }
    }
    for (int j = 0; j < nz; ++j) {
        for (int i = 0; i < nseg; ++i) {
            const int i2 = (i + 1) % nseg;
            const int a = base + j * nseg + i;
            const int b = base + j * nseg + i2;
            const int cc = base + (j + 1) * nseg + i;
            const int d = base + (j + 1) * nseg + i2;
            m.triangles.push_back({a, b, d});
            m.triangles.push_back({a, d, cc});
        }
    }
    // Top cap: concentric rings fanned from a center vertex.
    const double top = c.base.z + c.height;
    const int nr = grid_steps(c.radius, step);
    const int center = static_cast<int>(m.vertices.size());
    m.vertices.push_back({c.base.x, c.base.y, top});
    m.vertex_labels.push_back(c.label);
    for (int k = 1; k <= nr; ++k) {
        const double rk = c.radius * k / nr;
        for (int i = 0; i < nseg; ++i) {
            const double a = 2.0 * std::numbers::pi * i / nseg;
            m.vertices.push_back({c.base.x + rk * std::cos(a), c.base.y + rk * std::sin(a), top});
            m.vertex_labels.push_back(c.label);
        }
    }
    auto ring = [&](int k, int i) { return center + 1 + (k - 1) * nseg + (i % nseg); };
    for (int i = 0; i < nseg; ++i) m.triangles.push_back({center, ring(1, i), ring(1, i + 1)});
    for (int k = 1; k < nr; ++k) {
        for (int i = 0; i < nseg; ++i) {
            m.triangles.push_back({ring(k, i), ring(k + 1, i), ring(k + 1, i + 1)});
            m.triangles.push_back({ring(k, i), ring(k + 1, i + 1), ring(k, i + 1)});
        }
    }
}

void add_sphere_mesh(LabeledMesh& m, const SynthSphere& s, double step) {
    const int stacks = std::max(4, grid_steps(std::numbers::pi * s.radius, step));
    const int slices = std::max(8, grid_steps(2.0 * std::numbers::pi * s.radius, step));
    const int base = static_cast<int>(m.vertices.size());
    m.vertices.push_back({s.center.x, s.center.y, s.center.z + s.radius});  // north
    m.vertex_labels.push_back(s.label);
    for (int j = 1; j < stacks; ++j) {
        const double phi = std::numbers::pi * j / stacks;
        for (int i = 0; i < slices; ++i) {
            const double th = 2.0 * std::numbers::pi * i / slices;
            m.vertices.push_back({s.center.x + s.radius * std::sin(phi) * std::cos(th),
                                  s.center.y + s.radius * std::sin(phi) * std::sin(th),
                                  s.center.z + s.radius * std::cos(phi)});
            m.vertex_labels.push_back(s.label);
        }
    }
    const int south = static_cast<int>(m.vertices.size());
    m.vertices.push_back({s.center.x, s.center.y, s.center.z - s.radius});
    m.vertex_labels.push_back(s.label);
    auto ring = [&](int j, int i) { return base + 1 + (j - 1) * slices + (i % slices); };
    for (int i = 0; i < slices; ++i) m.triangles.push_back({base, ring(1, i), ring(1, i + 1)});
    for (int j = 1; j + 1 < stacks; ++j) {
        for (int i = 0; i < slices; ++i) {
            m.triangles.push_back({ring(j, i), ring(j + 1, i), ring(j + 1, i + 1)});
            m.triangles.push_back({ring(j, i), ring(j + 1, i + 1), ring(j, i + 1)});
        }
    }
    for (int i = 0; i < slices; ++i)
        m.triangles.push_back({south, ring(stacks - 1, i + 1), ring(stacks - 1, i)});
}

struct RayCandidate {
    double s = std::numeric_limits<double>::infinity();
    Vec3 normal;
    int label = -1;
    std::array<double, 3> albedo{0, 0, 0};
};

void consider(RayCandidate& best, double s, const Vec3& n, int label,
              const std::array<double, 3>& alb, double max_depth) {
    if (s > kRayEps && s <= max_depth && s < best.s) best = {s, n, label, alb};
}

void hit_box(RayCandidate& best, const Vec3& o, const Vec3& w, const SynthBox& b,
             double max_depth) {
    const double ov[3] = {o.x, o.y, o.z};
    const double wv[3] = {w.x, w.y, w.z};
    const double lo[3] = {b.lo.x, b.lo.y, b.lo.z};
    const double hi[3] = {b.hi.x, b.hi.y, b.hi.z};
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    int axis = -1;
    double sign = 1.0;
    for (int k = 0; k < 3; ++k) {
        if (std::abs(wv[k]) < 1e-15) {
            if (ov[k] < lo[k] || ov[k] > hi[k]) return;
            continue;
        }
        double ta = (lo[k] - ov[k]) / wv[k];
        double tb = (hi[k] - ov[k]) / wv[k];
        if (ta > tb) std::swap(ta, tb);
        if (ta > tmin) {
            tmin = ta;
            axis = k;
            sign = wv[k] > 0 ? -1.0 : 1.0;
        }
        tmax = std::min(tmax, tb);
        if (tmin > tmax) return;
    }
    if (axis < 0) return;
    Vec3 n{0, 0, 0};
    (axis == 0 ? n.x : axis == 1 ? n.y : n.z) = sign;
    consider(best, tmin, n, b.label, b.albedo, max_depth);
}

void hit_cylinder(RayCandidate& best, const Vec3& o, const Vec3& w, const SynthCylinder& c,
                  double max_depth) {
    const double bx = o.x - c.base.x, by = o.y - c.base.y;
    const double a = w.x * w.x + w.y * w.y;
    if (a > 1e-15) {
        const double bq = 2.0 * (bx * w.x + by * w.y);
        const double cq = bx * bx + by * by - c.radius * c.radius;
        const double disc = bq * bq - 4.0 * a * cq;
        if (disc >= 0.0) {
            const double sq = std::sqrt(disc);
            for (const double s : {(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)}) {
                const double z = o.z + s * w.z;
                if (z < c.base.z || z > c.base.z + c.height) continue;
                const Vec3 n{(o.x + s * w.x - c.base.x) / c.radius,
                             (o.y + s * w.y - c.base.y) / c.radius, 0.0};
                consider(best, s, n, c.label, c.albedo, max_depth);
            }
        }
    }
    if (std::abs(w.z) > 1e-15) {
        for (const auto& [z, nz] : {std::pair{c.base.z + c.height, 1.0}, std::pair{c.base.z, -1.0}}) {
            const double s = (z - o.z) / w.z;
            const double px = o.x + s * w.x - c.base.x;
            const double py = o.y + s * w.y - c.base.y;
            if (px * px + py * py <= c.radius * c.radius)
                consider(best, s, {0, 0, nz}, c.label, c.albedo, max_depth);
        }
    }
}

void hit_sphere(RayCandidate& best, const Vec3& o, const Vec3& w, const SynthSphere& sp,
                double max_depth) {
    const Vec3 oc = o - sp.center;
    const double a = w.dot(w);
    const double bq = 2.0 * oc.dot(w);
    const double cq = oc.dot(oc) - sp.radius * sp.radius;
    const double disc = bq * bq - 4.0 * a * cq;
    if (disc < 0.0) return;
    const double sq = std::sqrt(disc);
    for (const double s : {(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)}) {
        const Vec3 p = o + w * s;
        consider(best, s, (p - sp.center) * (1.0 / sp.radius), sp.label, sp.albedo, max_depth);
    }
}

}  // namespace

Pose look_at(const Vec3& eye, const Vec3& target) {
    const Vec3 fwd = target - eye;
    if (fwd.norm() < 1e-9) throw ConfigError("look_at: eye and target coincide");
    const Vec3 z = fwd.normalized();
    Vec3 x = z.cross({0, 0, 1});
    if (x.norm() < 1e-6) x = z.cross({0, 1, 0});
    x = x.normalized();
    const Vec3 y = z.cross(x);  // world-down for level views: image y grows downward
    Pose p;
    p.r = {x.x, y.x, z.x, x.y, y.y, z.y, x.z, y.z, z.z};
    p.t = eye;
    p.validate();
    return p;
}

SyntheticScene generate_scene(uint64_t seed, const SceneSpec& spec) {
    if (spec.room_x <= 1.0 || spec.room_y <= 1.0 || spec.room_z <= 1.0)
        throw ConfigError("generate_scene: room extents must exceed 1 m");
    if (spec.mesh_step <= 0.0) throw ConfigError("generate_scene: mesh_step must be positive");
    if (spec.furniture_boxes < 0 || spec.cylinders < 0 || spec.spheres < 0 || spec.tables < 0 ||
        spec.clutter < 0 || spec.frames < 0)
        throw ConfigError("generate_scene: counts must be nonnegative");

    Rng rng(seed);
    SyntheticScene scene;
    scene.seed = seed;
    scene.spec = spec;

    std::array<std::array<double, 3>, kNumClasses> albedo;
    for (int c = 0; c < kNumClasses; ++c)
        for (int ch = 0; ch < 3; ++ch)
            albedo[c][ch] = clamp01(kBaseAlbedo[c][ch] + rng.uniform(-0.08, 0.08));

    const double rx = spec.room_x, ry = spec.room_y, rz = spec.room_z, wt = kWallThickness;
    scene.boxes.push_back({{0, 0, -wt}, {rx, ry, 0}, kClassFloor, albedo[kClassFloor]});
    scene.boxes.push_back({{-wt, -wt, 0}, {0, ry + wt, rz}, kClassWall, albedo[kClassWall]});
    scene.boxes.push_back({{rx, -wt, 0}, {rx + wt, ry + wt, rz}, kClassWall, albedo[kClassWall]});
    scene.boxes.push_back({{-wt, -wt, 0}, {rx + wt, 0, rz}, kClassWall, albedo[kClassWall]});
    scene.boxes.push_back({{-wt, ry, 0}, {rx + wt, ry + wt, rz}, kClassWall, albedo[kClassWall]});
    const size_t shell_end = scene.boxes.size();

    if (spec.door) {
        const double dw = 0.9, dh = std::min(2.0, rz - 0.2), dt = kDoorThickness;
        const int side = rng.below_int(4);
        const double span = (side < 2 ? ry : rx) - 0.4 - dw;
        const double off = 0.2 + rng.uniform(0.0, std::max(0.0, span));
        SynthBox door;
        door.label = kClassDoorPanel;
        door.albedo = albedo[kClassDoorPanel];
        switch (side) {
            case 0: door.lo = {0, off, 0}; door.hi = {dt, off + dw, dh}; break;
            case 1: door.lo = {rx - dt, off, 0}; door.hi = {rx, off + dw, dh}; break;
            case 2: door.lo = {off, 0, 0}; door.hi = {off + dw, dt, dh}; break;
            default: door.lo = {off, ry - dt, 0}; door.hi = {off + dw, ry, dh}; break;
        }
        scene.boxes.push_back(door);
    }

    std::vector<Aabb> placed;
    auto place_floor = [&](double fx, double fy, double h) -> Aabb {
        for (int attempt = 0; attempt < kPlaceTries; ++attempt) {
            const double x = rng.uniform(kPlaceMargin, rx - kPlaceMargin - fx);
            const double y = rng.uniform(kPlaceMargin, ry - kPlaceMargin - fy);
            const Aabb box{{x, y, 0}, {x + fx, y + fy, h}};
            bool ok = rx - 2 * kPlaceMargin > fx && ry - 2 * kPlaceMargin > fy;
            for (const auto& other : placed)
                if (overlaps(box, other)) { ok = false; break; }
            if (ok) {
                placed.push_back(box);
                return box;
            }
        }
        throw ConfigError("generate_scene: could not place an object without overlap");
    };

    std::vector<Aabb> tables;
    for (int i = 0; i < spec.tables; ++i) {
        const double lx = rng.uniform(0.6, 1.0), ly = rng.uniform(0.5, 0.8);
        const double h = rng.uniform(0.6, 0.8);
        const Aabb spot = place_floor(lx, ly, h);
        scene.boxes.push_back({{spot.lo.x, spot.lo.y, h - 0.05},
                               {spot.hi.x, spot.hi.y, h},
                               kClassTableSlab,
                               albedo[kClassTableSlab]});
        tables.push_back(spot);
    }
    for (int i = 0; i < spec.furniture_boxes; ++i) {
        const double fx = rng.uniform(0.4, 0.8), fy = rng.uniform(0.4, 0.8);
        const double h = rng.uniform(0.4, 0.9);
        const Aabb spot = place_floor(fx, fy, h);
        scene.boxes.push_back(
            {spot.lo, spot.hi, kClassBoxFurniture, albedo[kClassBoxFurniture]});
    }
    for (int i = 0; i < spec.cylinders; ++i) {
        const double r = rng.uniform(0.12, 0.25), h = rng.uniform(0.5, 1.0);
        const Aabb spot = place_floor(2 * r, 2 * r, h);
        scene.cylinders.push_back({{spot.lo.x + r, spot.lo.y + r, 0},
                                   r,
                                   h,
                                   kClassCylinderFurniture,
                                   albedo[kClassCylinderFurniture]});
    }
    auto place_small = [&](double r, int label, const std::array<double, 3>& alb, bool sphere) {
        // Half of the small objects sit on a table when one has room.
        if (!tables.empty() && rng.uniform() < 0.5) {
            const Aabb& tb = tables[static_cast<size_t>(rng.below_int(static_cast<int>(tables.size())))];
            const double lx = tb.hi.x - tb.lo.x - 2 * r, ly = tb.hi.y - tb.lo.y - 2 * r;
            if (lx > 0 && ly > 0) {
                const double x = tb.lo.x + r + rng.uniform(0.0, lx);
                const double y = tb.lo.y + r + rng.uniform(0.0, ly);
                if (sphere)
                    scene.spheres.push_back({{x, y, tb.hi.z + r}, r, label, alb});
                else
                    scene.boxes.push_back({{x - r, y - r, tb.hi.z},
                                           {x + r, y + r, tb.hi.z + 2 * r},
                                           label,
                                           alb});
                return;
            }
        }
        const Aabb spot = place_floor(2 * r, 2 * r, 2 * r);
        const double cx = spot.lo.x + r, cy = spot.lo.y + r;
        if (sphere)
            scene.spheres.push_back({{cx, cy, r}, r, label, alb});
        else
            scene.boxes.push_back({spot.lo, {spot.hi.x, spot.hi.y, 2 * r}, label, alb});
    };
    for (int i = 0; i < spec.spheres; ++i)
        place_small(rng.uniform(0.08, 0.18), kClassSphereObject, albedo[kClassSphereObject], true);
    for (int i = 0; i < spec.clutter; ++i) {
        std::array<double, 3> alb{rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9),
                                  rng.uniform(0.15, 0.9)};
        place_small(rng.uniform(0.04, 0.1), kClassClutter, alb, false);
    }

    // Ground-truth mesh: inward faces only for the shell, all faces for
    // movable objects (the door skips the face buried in its wall).
    const double step = spec.mesh_step;
    add_box_mesh(scene.mesh, scene.boxes[0], step, 32u);  // floor top
    add_box_mesh(scene.mesh, scene.boxes[1], step, 2u);   // x- wall inner
    add_box_mesh(scene.mesh, scene.boxes[2], step, 1u);   // x+ wall inner
    add_box_mesh(scene.mesh, scene.boxes[3], step, 8u);   // y- wall inner
    add_box_mesh(scene.mesh, scene.boxes[4], step, 4u);   // y+ wall inner
    for (size_t i = shell_end; i < scene.boxes.size(); ++i) {
        unsigned mask = 63u;
        if (scene.boxes[i].label == kClassDoorPanel) {
            const SynthBox& d = scene.boxes[i];
            if (d.lo.x <= 0.0) mask &= ~1u;
            else if (d.hi.x >= rx) mask &= ~2u;
            else if (d.lo.y <= 0.0) mask &= ~4u;
            else mask &= ~8u;
        }
        add_box_mesh(scene.mesh, scene.boxes[i], step, mask);
    }
    for (const auto& c : scene.cylinders) add_cylinder_mesh(scene.mesh, c, step);
    for (const auto& s : scene.spheres) add_sphere_mesh(scene.mesh, s, step);

    const Vec3 center{rx / 2, ry / 2, 0};
    const double orbit = 0.32 * std::min(rx, ry);
    for (int i = 0; i < spec.frames; ++i) {
        const double th = 2.0 * std::numbers::pi * i / std::max(1, spec.frames) +
                          rng.uniform(-0.08, 0.08);
        const double rho = orbit + rng.uniform(-0.06, 0.06);
        const Vec3 eye = center + Vec3{rho * std::cos(th), rho * std::sin(th),
                                       1.12 + rng.uniform(0.0, 0.22)};
        const Vec3 tgt = center + Vec3{rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35),
                                       0.5 + rng.uniform(-0.15, 0.25)};
        scene.trajectory.push_back(look_at(eye, tgt));
    }
    return scene;
}

RayHit cast_ray(const SyntheticScene& scene, const Pose& pose, const Intrinsics& intr, double u,
                double v, double max_depth) {
    if (max_depth <= 0.0) throw ConfigError("cast_ray: max_depth must be positive");
    // Direction with camera z component 1, so the ray parameter is camera depth.
    const Vec3 d_cam{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
    const Vec3 w = pose.apply(d_cam) - pose.t;
    const Vec3 o = pose.t;

    RayCandidate best;
    for (const auto& b : scene.boxes) hit_box(best, o, w, b, max_depth);
    for (const auto& c : scene.cylinders) hit_cylinder(best, o, w, c, max_depth);
    for (const auto& s : scene.spheres) hit_sphere(best, o, w, s, max_depth);

    RayHit out;
    if (!std::isfinite(best.s)) return out;
    out.hit = true;
    out.depth = best.s;
    out.normal = best.normal;
    out.label = best.label;
    out.albedo = best.albedo;
    return out;
}

void render_frame(const SyntheticScene& scene, const Pose& pose, const Intrinsics& intr,
                  Image& color, Image& depth, double max_depth, Rng* noise) {
    intr.validate();
    color = Image(intr.width, intr.height, 3);
    depth = Image(intr.width, intr.height, 1);
    const Vec3 light = Vec3{0.3, 0.2, 1.0}.normalized();
    for (int y = 0; y < intr.height; ++y) {
        for (int x = 0; x < intr.width; ++x) {
            const RayHit h = cast_ray(scene, pose, intr, x, y, max_depth);
            if (!h.hit) continue;
            double d = h.depth;
            if (noise != nullptr && scene.spec.depth_noise > 0.0)
                d = std::max(1e-3, d + noise->normal(0.0, scene.spec.depth_noise));
            depth.at(y, x) = d;
            const double shade = 0.30 + 0.70 * std::max(0.0, h.normal.dot(light));
            for (int c = 0; c < 3; ++c) color.at(y, x, c) = clamp01(h.albedo[c] * shade);
        }
    }
}

}  // namespace voxfuse
