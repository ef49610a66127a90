#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "voxfuse/errors.hpp"
#include "voxfuse/geometry.hpp"
#include "voxfuse/rng.hpp"

using namespace voxfuse;

namespace {

Intrinsics test_intr(int w = 16, int h = 12) {
    Intrinsics in;
    in.fx = 10.0;
    in.fy = 11.0;
    in.cx = w / 2.0 - 0.5;
    in.cy = h / 2.0 - 0.5;
    in.width = w;
    in.height = h;
    return in;
}

Pose rotation_z(double angle, Vec3 t = {}) {
    Pose p;
    const double c = std::cos(angle), s = std::sin(angle);
    p.r = {c, -s, 0, s, c, 0, 0, 0, 1};
    p.t = t;
    return p;
}

// rotation from axis-angle, for randomized pose tests
Pose random_pose(Rng& rng) {
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    axis = axis.normalized();
    const double c = std::cos(a), s = std::sin(a), t = 1.0 - c;
    Pose p;
    p.r = {t * axis.x * axis.x + c,          t * axis.x * axis.y - s * axis.z, t * axis.x * axis.z + s * axis.y,
           t * axis.x * axis.y + s * axis.z, t * axis.y * axis.y + c,          t * axis.y * axis.z - s * axis.x,
           t * axis.x * axis.z - s * axis.y, t * axis.y * axis.z + s * axis.x, t * axis.z * axis.z + c};
    p.t = {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    return p;
}

}  // namespace

TEST_CASE("pose validation accepts rotations and rejects junk") {
    Rng rng(31);
    for (int i = 0; i < 20; ++i) CHECK_NOTHROW(random_pose(rng).validate());

    Pose bad;
    bad.r[0] = 2.0;
    CHECK_THROWS_AS(bad.validate(), NumericError);

    Pose mirror;
    mirror.r = {1, 0, 0, 0, 1, 0, 0, 0, -1};  // det -1
    CHECK_THROWS_AS(mirror.validate(), NumericError);
}

TEST_CASE("pose apply and inverse are exact inverses") {
    Rng rng(32);
    for (int i = 0; i < 50; ++i) {
        const Pose p = random_pose(rng);
        const Vec3 v{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
        const Vec3 back = p.apply_inverse(p.apply(v));
        CHECK(std::abs(back.x - v.x) < 1e-12);
        CHECK(std::abs(back.y - v.y) < 1e-12);
        CHECK(std::abs(back.z - v.z) < 1e-12);
    }
}

TEST_CASE("normals of a fronto-parallel plane point at the camera") {
    const Intrinsics intr = test_intr();
    Image depth(intr.width, intr.height, 1);
    for (auto& d : depth.data) d = 2.0;
    const Image n = estimate_normals(depth, intr);
    for (int v = 1; v < intr.height - 1; ++v) {
        for (int u = 1; u < intr.width - 1; ++u) {
            CHECK(n.at(v, u, 0) == doctest::Approx(0.0).epsilon(1e-12));
            CHECK(n.at(v, u, 1) == doctest::Approx(0.0).epsilon(1e-12));
            CHECK(n.at(v, u, 2) == doctest::Approx(-1.0).epsilon(1e-12));
        }
    }
    // border pixels have no full stencil
    CHECK(n.at(0, 3, 2) == 0.0);
    CHECK(n.at(intr.height - 1, 3, 2) == 0.0);
}

TEST_CASE("normals of a slanted plane match the analytic normal") {
    // plane z = z0 + s*x in camera space; depth solves z = z0 / (1 - s*(u-cx)/fx)
    const Intrinsics intr = test_intr(24, 20);
    const double s = 1.0, z0 = 2.0;  // 45 degree slant
    Image depth(intr.width, intr.height, 1);
    for (int v = 0; v < intr.height; ++v) {
        for (int u = 0; u < intr.width; ++u) {
            const double denom = 1.0 - s * (u - intr.cx) / intr.fx;
            depth.at(v, u) = z0 / denom;
        }
    }
    // analytic plane s*x - z + z0 = 0 has normal ±(s, 0, -1)/sqrt(1+s^2)
    const Vec3 expect = Vec3{s, 0.0, -1.0}.normalized();
    const Image n = estimate_normals(depth, intr);
    int checked = 0;
    for (int v = 2; v < intr.height - 2; ++v) {
        for (int u = 2; u < intr.width - 2; ++u) {
            const Vec3 got{n.at(v, u, 0), n.at(v, u, 1), n.at(v, u, 2)};
            if (got.norm() == 0.0) continue;
            // compare against whichever analytic sign the orientation rule picked
            const Vec3 p = backproject(intr, u, v, depth.at(v, u));
            Vec3 ref = expect;
            if (ref.dot(p) > 0.0) ref = ref * -1.0;
            const double angle = std::acos(std::clamp(got.dot(ref), -1.0, 1.0));
            CHECK(angle < 1e-3);
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("pixels next to invalid depth get invalid normals") {
    const Intrinsics intr = test_intr();
    Image depth(intr.width, intr.height, 1);
    for (auto& d : depth.data) d = 1.5;
    depth.at(5, 7) = 0.0;
    const Image n = estimate_normals(depth, intr);
    CHECK(n.at(5, 7, 2) == 0.0);   // invalid itself
    CHECK(n.at(5, 6, 2) == 0.0);   // stencil touches the hole
    CHECK(n.at(5, 8, 2) == 0.0);
    CHECK(n.at(4, 7, 2) == 0.0);
    CHECK(n.at(6, 7, 2) == 0.0);
    CHECK(n.at(4, 6, 2) == doctest::Approx(-1.0));  // diagonal neighbor unaffected
}

TEST_CASE("lift keeps only valid near pixels and places them correctly") {
    const Intrinsics intr = test_intr(4, 3);
    Image depth(4, 3, 1);
    depth.at(1, 1) = 2.0;   // valid
    depth.at(1, 2) = 3.5;   // beyond cutoff
    depth.at(0, 0) = 0.0;   // invalid
    depth.at(2, 3) = 3.0;   // exactly at cutoff stays
    Pose identity;

    const auto pts = lift_pixels(depth, intr, identity, 3.0);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].pixel == 1 * 4 + 1);
    CHECK(pts[1].pixel == 2 * 4 + 3);

    // principal ray: pixel at (cx, cy) lands on (0, 0, d)
    Image d2(4, 3, 1);
    d2.at(1, 1) = 2.0;
    Intrinsics cintr = intr;
    cintr.cx = 1.0;
    cintr.cy = 1.0;
    const auto center = lift_pixels(d2, cintr, identity, 3.0);
    REQUIRE(center.size() == 1);
    CHECK(center[0].world.x == doctest::Approx(0.0));
    CHECK(center[0].world.y == doctest::Approx(0.0));
    CHECK(center[0].world.z == doctest::Approx(2.0));
}

TEST_CASE("lift round-trips through projection within 1e-9") {
    Rng rng(33);
    const Intrinsics intr = test_intr(32, 24);
    for (int trial = 0; trial < 100; ++trial) {
        const Pose pose = random_pose(rng);
        Image depth(intr.width, intr.height, 1);
        const int u = 1 + rng.below_int(intr.width - 2);
        const int v = 1 + rng.below_int(intr.height - 2);
        const double d = rng.uniform(0.3, 3.0);
        depth.at(v, u) = d;
        const auto pts = lift_pixels(depth, intr, pose, 3.0);
        REQUIRE(pts.size() == 1);
        const Vec3 cam = pose.apply_inverse(pts[0].world);
        const auto [pu, pv, pd] = project(intr, cam);
        CHECK(std::abs(pu - u) < 1e-9);
        CHECK(std::abs(pv - v) < 1e-9);
        CHECK(std::abs(pd - d) < 1e-9);
    }
}

TEST_CASE("lift carries features and validates alignment") {
    const Intrinsics intr = test_intr(4, 3);
    Frame frame;
    frame.intr = intr;
    frame.depth = Image(4, 3, 1);
    frame.depth.at(1, 1) = 1.0;
    Tensor feats({12, 2});
    feats.at(5, 0) = 7.0;
    feats.at(5, 1) = -1.0;
    const auto samples = lift(frame, feats, 3.0);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].feature[0] == 7.0);
    CHECK(samples[0].feature[1] == -1.0);

    Tensor wrong({11, 2});
    CHECK_THROWS_AS(lift(frame, wrong, 3.0), DimensionError);
}

TEST_CASE("voxel keys pack, unpack, and reject overflow") {
    Rng rng(34);
    for (int i = 0; i < 200; ++i) {
        const int64_t x = static_cast<int64_t>(rng.below(1 << 21)) - (1 << 20);
        const int64_t y = static_cast<int64_t>(rng.below(1 << 21)) - (1 << 20);
        const int64_t z = static_cast<int64_t>(rng.below(1 << 21)) - (1 << 20);
        const auto [ux, uy, uz] = unpack_voxel_key(pack_voxel_key(x, y, z));
        CHECK(ux == x);
        CHECK(uy == y);
        CHECK(uz == z);
    }
    CHECK_THROWS_AS(pack_voxel_key(1 << 20, 0, 0), NumericError);
    CHECK_THROWS_AS(pack_voxel_key(0, 0, -(1 << 20) - 1), NumericError);

    // floor convention: a point exactly on x = k*res belongs to cell k
    const double res = 0.25;
    const auto k = unpack_voxel_key(voxel_key_of({3 * res, 0.1, -0.1}, res));
    CHECK(k[0] == 3);
    CHECK(k[1] == 0);
    CHECK(k[2] == -1);

    const Vec3 c = voxel_center(pack_voxel_key(2, -1, 0), 0.5);
    CHECK(c.x == doctest::Approx(1.25));
    CHECK(c.y == doctest::Approx(-0.25));
    CHECK(c.z == doctest::Approx(0.25));
}

TEST_CASE("voxelize means equal a brute-force grouping oracle") {
    Rng rng(35);
    const int P = 1000, D = 5;
    const double res = 0.2;
    std::vector<Vec3> pos(P);
    Tensor feats({P, D});
    for (int p = 0; p < P; ++p) {
        pos[static_cast<size_t>(p)] = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                                       rng.uniform(-1.0, 1.0)};
        for (int c = 0; c < D; ++c) feats.at(p, c) = rng.normal();
    }
    const VoxelizeResult res1 = voxelize(pos, feats, res);

    // brute force: group by key, average in input order
    std::vector<int64_t> keys(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) keys[static_cast<size_t>(p)] = voxel_key_of(pos[static_cast<size_t>(p)], res);
    for (int cell = 0; cell < static_cast<int>(res1.keys.size()); ++cell) {
        std::vector<double> mean(D, 0.0);
        int count = 0;
        for (int p = 0; p < P; ++p) {
            if (keys[static_cast<size_t>(p)] != res1.keys[static_cast<size_t>(cell)]) continue;
            for (int c = 0; c < D; ++c) mean[static_cast<size_t>(c)] += feats.at(p, c);
            ++count;
        }
        REQUIRE(count == res1.counts[static_cast<size_t>(cell)]);
        for (int c = 0; c < D; ++c)
            CHECK(res1.features.at(cell, c) == doctest::Approx(mean[static_cast<size_t>(c)] / count).epsilon(1e-12));
    }

    // point_to_cell is consistent with keys
    for (int p = 0; p < P; ++p)
        CHECK(res1.keys[static_cast<size_t>(res1.point_to_cell[static_cast<size_t>(p)])] ==
              keys[static_cast<size_t>(p)]);

    // permuted input gives the same per-key means within 1e-12
    const auto perm = rng.permutation(P);
    std::vector<Vec3> pos2(static_cast<size_t>(P));
    Tensor feats2({P, D});
    for (int p = 0; p < P; ++p) {
        pos2[static_cast<size_t>(p)] = pos[static_cast<size_t>(perm[static_cast<size_t>(p)])];
        for (int c = 0; c < D; ++c) feats2.at(p, c) = feats.at(perm[static_cast<size_t>(p)], c);
    }
    const VoxelizeResult res2 = voxelize(pos2, feats2, res);
    REQUIRE(res2.keys.size() == res1.keys.size());
    for (size_t cell2 = 0; cell2 < res2.keys.size(); ++cell2) {
        const auto it = std::find(res1.keys.begin(), res1.keys.end(), res2.keys[cell2]);
        REQUIRE(it != res1.keys.end());
        const int cell1 = static_cast<int>(it - res1.keys.begin());
        for (int c = 0; c < D; ++c)
            CHECK(std::abs(res2.features.at(static_cast<int>(cell2), c) - res1.features.at(cell1, c)) < 1e-12);
    }
}

TEST_CASE("two points in one cell average their features") {
    std::vector<PointSample> pts(2);
    pts[0].position = {0.05, 0.05, 0.05};
    pts[0].feature = {1.0, 3.0};
    pts[1].position = {0.08, 0.02, 0.09};
    pts[1].feature = {3.0, 5.0};
    const VoxelizeResult r = voxelize(pts, 0.1);
    REQUIRE(r.keys.size() == 1);
    CHECK(r.counts[0] == 2);
    CHECK(r.features.at(0, 0) == 2.0);
    CHECK(r.features.at(0, 1) == 4.0);
}

TEST_CASE("kd-tree equals brute force on random instances") {
    Rng rng(36);
    for (int trial = 0; trial < 8; ++trial) {
        const int n = 20 + rng.below_int(480);
        std::vector<Vec3> pts(static_cast<size_t>(n));
        for (auto& p : pts) {
            // quantized coordinates create plenty of exact ties
            p = {std::round(rng.uniform(-2.0, 2.0) * 4.0) / 4.0,
                 std::round(rng.uniform(-2.0, 2.0) * 4.0) / 4.0,
                 std::round(rng.uniform(-2.0, 2.0) * 4.0) / 4.0};
        }
        const KdTree3 tree(pts);
        for (int q = 0; q < 200; ++q) {
            const Vec3 query{std::round(rng.uniform(-2.2, 2.2) * 4.0) / 4.0,
                             std::round(rng.uniform(-2.2, 2.2) * 4.0) / 4.0,
                             std::round(rng.uniform(-2.2, 2.2) * 4.0) / 4.0};
            int best = 0;
            double best_d2 = std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i) {
                const Vec3 d = query - pts[static_cast<size_t>(i)];
                const double d2 = d.dot(d);
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = i;
                }
            }
            CHECK(tree.nearest(query) == best);
        }
    }
}

TEST_CASE("transfer_labels obeys the lowest-index tie rule") {
    // query equidistant to vertices 0 and 1; vertex 0 wins
    const std::vector<Vec3> verts{{-1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
    const std::vector<int> labels{4, 9};
    const auto out = transfer_labels(verts, labels, {{0.0, 0.0, 0.0}});
    REQUIRE(out.size() == 1);
    CHECK(out[0] == 4);

    // single vertex labels everything
    const auto all = transfer_labels({{0, 0, 0}}, {7}, {{1, 2, 3}, {-5, 0, 2}});
    CHECK(all[0] == 7);
    CHECK(all[1] == 7);

    CHECK_THROWS_AS(transfer_labels({}, {}, {{0, 0, 0}}), DimensionError);
}

TEST_CASE("transfer_labels at scale equals brute force") {
    Rng rng(37);
    const int V = 500, Q = 200;
    std::vector<Vec3> verts(V);
    std::vector<int> labels(V);
    for (int i = 0; i < V; ++i) {
        verts[static_cast<size_t>(i)] = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0),
                                         rng.uniform(-3.0, 3.0)};
        labels[static_cast<size_t>(i)] = rng.below_int(8);
    }
    std::vector<Vec3> queries(Q);
    for (auto& q : queries) q = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
    const auto fast = transfer_labels(verts, labels, queries);
    for (int qi = 0; qi < Q; ++qi) {
        int best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (int i = 0; i < V; ++i) {
            const Vec3 d = queries[static_cast<size_t>(qi)] - verts[static_cast<size_t>(i)];
            const double d2 = d.dot(d);
            if (d2 < best_d2) {
                best_d2 = d2;
                best = i;
            }
        }
        CHECK(fast[static_cast<size_t>(qi)] == labels[static_cast<size_t>(best)]);
    }
}
