#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "boxmask/error.hpp"
#include "boxmask/synthvid.hpp"

using namespace boxmask;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("boxmask_test_" + name);
    fs::remove_all(dir);
    return dir;
}

bool same_frames(const VideoClip& a, const VideoClip& b) {
    if (a.frames.size() != b.frames.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
        if (a.frames[i].pixels != b.frames[i].pixels) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_SUITE("synthvid") {

TEST_CASE("a static single frame is annotated with the initial boxes") {
    SceneSpec spec;
    spec.length = 1;
    spec.blur_window = 1;
    spec.seed = 3;
    const VideoClip clip = generate_clip(spec);
    const auto tracks = resolve_tracks(spec);
    REQUIRE(clip.length() == 1);
    REQUIRE(clip.annotations[0].size() == tracks.size());
    for (std::size_t i = 0; i < tracks.size(); ++i) {
        CHECK(clip.annotations[0][i].label == tracks[i].label);
        CHECK(clip.annotations[0][i].box.x1 == doctest::Approx(tracks[i].initial.x1));
        CHECK(clip.annotations[0][i].box.y1 == doctest::Approx(tracks[i].initial.y1));
        CHECK(clip.annotations[0][i].box.x2 == doctest::Approx(tracks[i].initial.x2));
        CHECK(clip.annotations[0][i].box.y2 == doctest::Approx(tracks[i].initial.y2));
    }
}

TEST_CASE("identical specs give bit-identical clips") {
    SceneSpec spec;
    spec.seed = 17;
    spec.occlusion = true;
    const VideoClip a = generate_clip(spec);
    const VideoClip b = generate_clip(spec);
    CHECK(same_frames(a, b));
    CHECK(a.annotations.size() == b.annotations.size());
    spec.seed = 18;
    CHECK_FALSE(same_frames(a, generate_clip(spec)));
}

TEST_CASE("constant velocity moves the box center by 18 px over 9 frames") {
    SceneSpec spec;
    spec.length = 10;
    ObjectTrack t;
    t.label = 2;
    t.initial = Box{5, 20, 25, 40};
    t.vx = 2.0;
    t.vy = 0.0;
    t.drift_amplitude = 0.0;
    spec.tracks = {t};
    const VideoClip clip = generate_clip(spec);
    const Box& first = clip.annotations[0][0].box;
    const Box& last = clip.annotations[9][0].box;
    CHECK((last.x1 + last.x2) / 2.0 - (first.x1 + first.x2) / 2.0 == doctest::Approx(18.0).epsilon(0.5 / 18.0));
    CHECK((last.y1 + last.y2) / 2.0 == doctest::Approx((first.y1 + first.y2) / 2.0));
}

TEST_CASE("boxes reflect off the frame border") {
    ObjectTrack t;
    t.initial = Box{40, 10, 60, 30};
    t.vx = 3.0;
    for (double time = 0; time < 60; time += 0.5) {
        const Box b = track_box(t, time, 64, 64);
        CHECK(b.x1 >= -1e-9);
        CHECK(b.x2 <= 64 + 1e-9);
        CHECK(b.width() == doctest::Approx(20.0));
    }
}

TEST_CASE("annotated boxes hold at least half of the rendered foreground") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        SceneSpec spec;
        spec.seed = seed;
        spec.occlusion = seed % 2 == 1;
        spec.length = 8;
        const VideoClip clip = generate_clip(spec);
        for (int f = 0; f < clip.length(); ++f) {
            for (int o = 0; o < spec.object_count; ++o) {
                const auto cov = object_coverage(spec, f, o);
                const Box& b = clip.annotations[f][o].box;
                double inside = 0.0;
                double total = 0.0;
                for (int y = 0; y < spec.height; ++y) {
                    for (int x = 0; x < spec.width; ++x) {
                        const double v = cov[static_cast<std::size_t>(y) * spec.width + x];
                        total += v;
                        if (x + 0.5 >= b.x1 && x + 0.5 < b.x2 && y + 0.5 >= b.y1 && y + 0.5 < b.y2) {
                            inside += v;
                        }
                    }
                }
                REQUIRE(total > 0.0);
                CHECK(inside / total >= 0.5);
            }
        }
    }
}

TEST_CASE("objects larger than the frame are rejected") {
    SceneSpec spec;
    spec.min_size = 70;
    spec.max_size = 80;
    CHECK_THROWS_AS(generate_clip(spec), InvalidArgument);
    SceneSpec fixed;
    ObjectTrack t;
    t.initial = Box{0, 0, 100, 20};
    fixed.tracks = {t};
    CHECK_THROWS_AS(generate_clip(fixed), InvalidArgument);
}

TEST_CASE("pixel values stay in the unit interval") {
    SceneSpec spec;
    spec.seed = 4;
    spec.noise = 0.2;
    const VideoClip clip = generate_clip(spec);
    for (const Image& im : clip.frames) {
        CHECK(im.height == 64);
        CHECK(im.width == 64);
        for (float v : im.pixels) {
            CHECK((v >= 0.0f && v <= 1.0f));
        }
    }
}

TEST_CASE("datasets round-trip through disk") {
    SceneSpec base;
    base.length = 6;
    const Dataset ds = generate_dataset(base, 3, 9, "train");
    const fs::path dir = fresh_dir("roundtrip");
    write_dataset(dir, ds);
    const Dataset back = load_dataset(dir);
    REQUIRE(back.clips.size() == 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.clips[i].id == ds.clips[i].id);
        CHECK(back.clips[i].seed == ds.clips[i].seed);
        CHECK(same_frames(back.clips[i], ds.clips[i]));
        REQUIRE(back.clips[i].annotations.size() == ds.clips[i].annotations.size());
        for (std::size_t f = 0; f < ds.clips[i].annotations.size(); ++f) {
            const auto& a = ds.clips[i].annotations[f];
            const auto& b = back.clips[i].annotations[f];
            REQUIRE(a.size() == b.size());
            for (std::size_t k = 0; k < a.size(); ++k) {
                CHECK(a[k].label == b[k].label);
                CHECK(a[k].box.x1 == b[k].box.x1);
                CHECK(a[k].box.y2 == b[k].box.y2);
            }
        }
    }
    CHECK(back.classes.size() == ds.classes.size());
    fs::remove_all(dir);
}

TEST_CASE("an empty dataset has a valid manifest") {
    const fs::path dir = fresh_dir("empty");
    write_dataset(dir, generate_dataset(SceneSpec{}, 0, 1, "val"));
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK(load_dataset(dir).clips.empty());
    fs::remove_all(dir);
}

TEST_CASE("forty clips load in manifest order") {
    SceneSpec base;
    base.length = 2;
    base.height = 32;
    base.width = 32;
    base.min_size = 8;
    base.max_size = 12;
    const Dataset ds = generate_dataset(base, 40, 5, "train");
    const fs::path dir = fresh_dir("order");
    write_dataset(dir, ds);
    const Dataset back = load_dataset(dir);
    REQUIRE(back.clips.size() == 40u);
    for (int i = 0; i < 40; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "train_%04d", i);
        CHECK(back.clips[i].id == id);
    }
    fs::remove_all(dir);
}

TEST_CASE("corrupt and truncated files name the clip") {
    SceneSpec base;
    base.length = 3;
    const Dataset ds = generate_dataset(base, 2, 2, "val");
    const fs::path dir = fresh_dir("corrupt");
    write_dataset(dir, ds);
    const fs::path frames = dir / "val_0001.svid";
    {
        const auto size = fs::file_size(frames);
        fs::resize_file(frames, size - 10);
    }
    try {
        load_dataset(dir);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("val_0001") != std::string::npos);
    }
    {
        std::fstream f(frames, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    try {
        load_dataset(dir);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("val_0001") != std::string::npos);
    }
    {
        std::ofstream f(dir / "val_0000.json");
        f << "{not json";
    }
    try {
        load_dataset(dir);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("val_0000") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("default classes differ only in stripe frequency") {
    const auto classes = default_classes(3);
    REQUIRE(classes.size() == 3u);
    CHECK(classes[0].stripe_cycles == 2.0);
    CHECK(classes[1].stripe_cycles == 4.0);
    CHECK(classes[2].stripe_cycles == 8.0);
    CHECK(classes[0].base_color == classes[2].base_color);
    CHECK_THROWS_AS(default_classes(0), InvalidArgument);
}

}
