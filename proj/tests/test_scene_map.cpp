#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxfuse/errors.hpp"
#include "voxfuse/geometry.hpp"
#include "voxfuse/rng.hpp"
#include "voxfuse/scene_map.hpp"

using namespace voxfuse;

namespace {

FeatureBlock make_block(const std::vector<int64_t>& keys, const Tensor& feats) {
    FeatureBlock b;
    b.keys = keys;
    b.features = feats;
    b.counts.assign(keys.size(), 0);
    b.novel.assign(keys.size(), 1);
    return b;
}

Tensor random_features(Rng& rng, int n, int d) {
    Tensor t({n, d});
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("crop of an empty map is all-novel zeros and leaves the map empty") {
    SceneMap map(0.04, 5);
    const std::vector<int64_t> keys{pack_voxel_key(0, 0, 0), pack_voxel_key(1, -2, 3)};
    const FeatureBlock b = map.crop(keys);
    REQUIRE(b.size() == 2);
    for (int i = 0; i < 2; ++i) {
        CHECK(b.novel[static_cast<size_t>(i)] == 1);
        CHECK(b.counts[static_cast<size_t>(i)] == 0);
        for (int c = 0; c < 5; ++c) CHECK(b.features.at(i, c) == 0.0);
    }
    CHECK(map.size() == 0);
    CHECK_THROWS_AS(map.crop({keys[0], keys[0]}), DimensionError);
}

TEST_CASE("write_back then crop returns the written features exactly") {
    Rng rng(41);
    SceneMap map(0.04, 6);
    const std::vector<int64_t> keys{pack_voxel_key(1, 2, 3), pack_voxel_key(-4, 0, 9),
                                    pack_voxel_key(7, 7, 7)};
    const Tensor feats = random_features(rng, 3, 6);
    map.write_back(make_block(keys, feats));

    const FeatureBlock b = map.crop(keys);
    for (int i = 0; i < 3; ++i) {
        CHECK(b.novel[static_cast<size_t>(i)] == 0);
        CHECK(b.counts[static_cast<size_t>(i)] == 1);
        for (int c = 0; c < 6; ++c) CHECK(b.features.at(i, c) == feats.at(i, c));
    }

    // writing an unmodified crop changes no feature, only obs_count
    map.write_back(b);
    const FeatureBlock b2 = map.crop(keys);
    for (int i = 0; i < 3; ++i) {
        CHECK(b2.counts[static_cast<size_t>(i)] == 2);
        for (int c = 0; c < 6; ++c) CHECK(b2.features.at(i, c) == feats.at(i, c));
    }
}

TEST_CASE("write_back counts observations and rejects non-finite features") {
    SceneMap map(0.1, 2);
    const std::vector<int64_t> keys{pack_voxel_key(0, 0, 0)};
    for (int i = 0; i < 5; ++i) map.write_back(make_block(keys, Tensor::full({1, 2}, i)));
    CHECK(map.find(keys[0])->obs_count == 5);
    CHECK(map.find(keys[0])->feature[0] == 4.0);

    Tensor bad({1, 2});
    bad[0] = std::nan("");
    CHECK_THROWS_AS(map.write_back(make_block(keys, bad)), NumericError);
    CHECK(map.find(keys[0])->obs_count == 5);  // rejected write left no trace

    Tensor wrong({1, 3});
    FeatureBlock wb = make_block(keys, wrong);
    CHECK_THROWS_AS(map.write_back(wb), DimensionError);
}

TEST_CASE("random write sequences match a dictionary replay oracle") {
    Rng rng(42);
    SceneMap map(0.04, 4);
    std::unordered_map<int64_t, std::pair<std::vector<double>, int>> oracle;

    for (int step = 0; step < 2000; ++step) {
        const int n = 1 + rng.below_int(6);
        std::vector<int64_t> keys;
        while (static_cast<int>(keys.size()) < n) {
            const int64_t k = pack_voxel_key(rng.below_int(8), rng.below_int(8), rng.below_int(8));
            if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
        }
        const Tensor feats = random_features(rng, n, 4);
        map.write_back(make_block(keys, feats));
        for (int i = 0; i < n; ++i) {
            auto& slot = oracle[keys[static_cast<size_t>(i)]];
            slot.first.assign(4, 0.0);
            for (int c = 0; c < 4; ++c) slot.first[static_cast<size_t>(c)] = feats.at(i, c);
            slot.second += 1;
        }
    }

    REQUIRE(map.size() == oracle.size());
    for (const auto& [key, expect] : oracle) {
        const VoxelRecord* rec = map.find(key);
        REQUIRE(rec != nullptr);
        CHECK(rec->obs_count == static_cast<uint32_t>(expect.second));
        for (int c = 0; c < 4; ++c) CHECK(rec->feature[static_cast<size_t>(c)] == expect.first[static_cast<size_t>(c)]);
    }
}

TEST_CASE("crop rows match a per-key lookup oracle on mixed keys") {
    Rng rng(43);
    SceneMap map(0.04, 3);
    std::vector<int64_t> present;
    for (int i = 0; i < 20; ++i) present.push_back(pack_voxel_key(i, 2 * i, -i));
    map.write_back(make_block(present, random_features(rng, 20, 3)));

    std::vector<int64_t> query;
    for (int i = 0; i < 30; ++i) query.push_back(pack_voxel_key(i, 2 * i, -i));  // last 10 absent
    const FeatureBlock b = map.crop(query);
    for (int i = 0; i < 30; ++i) {
        const VoxelRecord* rec = map.find(query[static_cast<size_t>(i)]);
        if (i < 20) {
            REQUIRE(rec != nullptr);
            CHECK(b.novel[static_cast<size_t>(i)] == 0);
            for (int c = 0; c < 3; ++c) CHECK(b.features.at(i, c) == rec->feature[static_cast<size_t>(c)]);
        } else {
            CHECK(rec == nullptr);
            CHECK(b.novel[static_cast<size_t>(i)] == 1);
            for (int c = 0; c < 3; ++c) CHECK(b.features.at(i, c) == 0.0);
        }
    }
    CHECK(map.size() == 20);  // crop did not insert
}

TEST_CASE("classify_map caches argmax labels with ties to the lowest class") {
    SceneMap map(0.04, 2);
    map.write_back(make_block({pack_voxel_key(0, 0, 0), pack_voxel_key(1, 0, 0)},
                              Tensor::full({2, 2}, 1.0)));
    // head returns equal logits -> class 0 everywhere
    const auto equal_head = [](const std::vector<double>&) { return std::vector<double>{0.5, 0.5, 0.5}; };
    const auto labeled = classify_map(map, equal_head, 3);
    REQUIRE(labeled.size() == 2);
    for (const auto& [key, label] : labeled) CHECK(label == 0);
    CHECK(map.find(pack_voxel_key(0, 0, 0))->cached_label == 0);

    // random affine head matches a direct matmul + argmax oracle
    Rng rng(44);
    SceneMap m2(0.04, 4);
    std::vector<int64_t> keys;
    for (int i = 0; i < 50; ++i) keys.push_back(pack_voxel_key(i % 7, i / 7, 3 * i % 5));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    m2.write_back(make_block(keys, random_features(rng, static_cast<int>(keys.size()), 4)));

    Tensor hw({4, 3});
    for (size_t i = 0; i < hw.size(); ++i) hw[i] = rng.normal();
    const auto affine_head = [&](const std::vector<double>& f) {
        std::vector<double> logits(3, 0.0);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) logits[static_cast<size_t>(c)] += f[static_cast<size_t>(i)] * hw.at(i, c);
        return logits;
    };
    for (const auto& [key, label] : classify_map(m2, affine_head, 3)) {
        const auto logits = affine_head(m2.find(key)->feature);
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (logits[static_cast<size_t>(c)] > logits[static_cast<size_t>(best)]) best = c;
        CHECK(label == best);
    }

    const auto bad_head = [](const std::vector<double>&) { return std::vector<double>{1.0}; };
    CHECK_THROWS_AS(classify_map(m2, bad_head, 3), DimensionError);
}

TEST_CASE("argmax tie-break picks the lowest index") {
    CHECK(argmax_lowest({1.0, 3.0, 3.0}) == 1);
    CHECK(argmax_lowest({2.0, 2.0}) == 0);
    CHECK(argmax_lowest({-1.0}) == 0);
    CHECK_THROWS_AS(argmax_lowest({}), DimensionError);
}

TEST_CASE("map snapshots round-trip bit-exactly") {
    Rng rng(45);
    SceneMap map(0.05, 8);
    std::vector<int64_t> keys;
    for (int i = 0; i < 1000; ++i) {
        const int64_t k = pack_voxel_key(rng.below_int(30) - 15, rng.below_int(30), rng.below_int(30));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    map.write_back(make_block(keys, random_features(rng, static_cast<int>(keys.size()), 8)));
    map.advance_frame();
    map.advance_frame();
    classify_map(map, [](const std::vector<double>& f) {
        return std::vector<double>(f.begin(), f.begin() + 3);
    }, 3);

    const std::string path = "/tmp/voxfuse_test_map.bin";
    save_map(map, path);
    const SceneMap loaded = load_map(path);
    CHECK(loaded.resolution() == map.resolution());
    CHECK(loaded.feature_dim() == map.feature_dim());
    CHECK(loaded.frame_counter() == 2);
    REQUIRE(loaded.size() == map.size());
    for (const int64_t k : map.sorted_keys()) {
        const VoxelRecord* a = map.find(k);
        const VoxelRecord* b = loaded.find(k);
        REQUIRE(b != nullptr);
        CHECK(a->obs_count == b->obs_count);
        CHECK(a->cached_label == b->cached_label);
        for (int c = 0; c < 8; ++c) CHECK(a->feature[static_cast<size_t>(c)] == b->feature[static_cast<size_t>(c)]);
    }

    // identical maps produce identical bytes
    const std::string path2 = "/tmp/voxfuse_test_map2.bin";
    save_map(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(bytes1 == bytes2);

    // empty map round-trip
    SceneMap empty(0.04, 2);
    save_map(empty, path);
    const SceneMap eloaded = load_map(path);
    CHECK(eloaded.size() == 0);
    CHECK(eloaded.resolution() == 0.04);

    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("corrupt map snapshots are rejected without partial state") {
    Rng rng(46);
    SceneMap map(0.04, 3);
    std::vector<int64_t> keys{pack_voxel_key(0, 0, 0), pack_voxel_key(1, 1, 1)};
    map.write_back(make_block(keys, random_features(rng, 2, 3)));
    const std::string path = "/tmp/voxfuse_test_map_corrupt.bin";
    save_map(map, path);

    // truncation mid-record
    {
        std::ifstream f(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
    }
    CHECK_THROWS_AS(load_map(path), FormatError);

    // checksum mismatch from a flipped payload byte
    save_map(map, path);
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(20);
        char b;
        f.seekg(20);
        f.get(b);
        f.seekp(20);
        b = static_cast<char>(b ^ 0x40);
        f.put(b);
    }
    CHECK_THROWS_AS(load_map(path), FormatError);
    CHECK_THROWS_AS(load_map("/nonexistent/map.bin"), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("ply export writes a labeled colored point per voxel") {
    SceneMap map(0.5, 2);
    map.write_back(make_block({pack_voxel_key(0, 0, 0), pack_voxel_key(2, 0, -1)},
                              Tensor::full({2, 2}, 1.5)));
    map.record(pack_voxel_key(0, 0, 0)).cached_label = 2;
    map.record(pack_voxel_key(2, 0, -1)).cached_label = 0;

    const std::string path = "/tmp/voxfuse_test_export.ply";
    export_ply(map, path);
    std::ifstream f(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 13);
    CHECK(lines[0] == "ply");
    CHECK(lines[2] == "element vertex 2");
    CHECK(lines[10] == "end_header");
    // first data line is the lower key: (0,0,0) center (0.25, 0.25, 0.25), label 2
    const auto rgb = class_color(2);
    CHECK(lines[11] == "0.25 0.25 0.25 " + std::to_string(rgb[0]) + " " + std::to_string(rgb[1]) +
                           " " + std::to_string(rgb[2]) + " 2");
    std::remove(path.c_str());
}

TEST_CASE("clear empties contents but keeps the frame counter") {
    SceneMap map(0.04, 2);
    map.write_back(make_block({pack_voxel_key(3, 3, 3)}, Tensor::full({1, 2}, 2.0)));
    map.advance_frame();
    map.clear();
    CHECK(map.size() == 0);
    CHECK(map.frame_counter() == 1);
}
