#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "boxmask/geometry.hpp"

namespace boxmask {

/// RGB frame, row-major HWC, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Object class. Every class shares the rounded-rectangle shape family and
/// is told apart only by its stripe frequency (cycles across the box).
struct ClassDef {
    int label = 1;
    std::string name;
    double stripe_cycles = 2.0;
    std::array<double, 3> base_color{0.85, 0.45, 0.30};
};

std::vector<ClassDef> default_classes(int count);

/// One moving object: initial box, constant velocity (px/frame) and a
/// vertical sinusoidal drift.
struct ObjectTrack {
    int label = 1;
    Box initial;
    double vx = 0.0;
    double vy = 0.0;
    double drift_amplitude = 0.0;
    double drift_period = 12.0;
    double drift_phase = 0.0;
    double brightness = 1.0;
    double stripe_phase = 0.0;
};

struct SceneSpec {
    int height = 64;
    int width = 64;
    int length = 24;
    int object_count = 2;
    std::vector<ClassDef> classes = default_classes(3);
    double min_size = 18.0;
    double max_size = 28.0;
    double max_speed = 1.5;
    double drift_amplitude = 1.0;
    double drift_period = 12.0;
    int blur_window = 3;
    bool occlusion = false;
    double noise = 0.03;
    std::uint64_t seed = 0;
    /// When non-empty these tracks are used instead of sampled ones.
    std::vector<ObjectTrack> tracks;
};

struct VideoClip {
    std::string id;
    std::uint64_t seed = 0;
    int height = 0;
    int width = 0;
    std::vector<Image> frames;
    std::vector<std::vector<LabeledBox>> annotations;

    int length() const { return static_cast<int>(frames.size()); }
};

/// Object tracks for a spec: `spec.tracks` if given, otherwise sampled
/// from the seed. Throws when an object does not fit in the frame.
std::vector<ObjectTrack> resolve_tracks(const SceneSpec& spec);

/// Object box at (possibly fractional) time t; positions reflect off the
/// frame borders.
Box track_box(const ObjectTrack& track, double t, int height, int width);

/// Renders a clip. Motion blur averages `blur_window` sub-frame renders
/// centered on each frame time; annotations are the amodal boxes at the
/// frame time, clipped to the frame. Pure function of `spec`.
VideoClip generate_clip(const SceneSpec& spec);

/// Per-pixel foreground coverage (fraction of sub-frames in which the
/// object covers the pixel center) of object `object` at frame `frame`.
std::vector<float> object_coverage(const SceneSpec& spec, int frame, int object);

struct Dataset {
    std::vector<ClassDef> classes;
    std::vector<VideoClip> clips;
};

/// `count` clips with ids `<prefix>_0000`, ... and per-clip seeds derived
/// from (seed, prefix, index); every other field comes from `base`.
Dataset generate_dataset(const SceneSpec& base, int count, std::uint64_t seed, const std::string& prefix);

/// Writes `manifest.json`, one `<id>.svid` frame file and one `<id>.json`
/// annotation file per clip into `dir` (created if missing).
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);

/// Reads a dataset back; clips come back in manifest order. Corrupt or
/// truncated files raise FormatError naming the clip.
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace boxmask
