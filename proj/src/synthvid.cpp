#include "boxmask/synthvid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "boxmask/error.hpp"
#include "boxmask/rng.hpp"

namespace boxmask {
namespace {

constexpr char kMagic[4] = {'S', 'V', 'I', 'D'};
constexpr std::uint32_t kFormatVersion = 1;

double reflect(double p, double range) {
    if (range <= 0.0) {
        return 0.0;
    }
    double u = std::fmod(p, 2.0 * range);
    if (u < 0.0) {
        u += 2.0 * range;
    }
    return u > range ? 2.0 * range - u : u;
}

bool inside_rounded(const Box& b, double px, double py) {
    if (!b.contains(px, py)) {
        return false;
    }
    const double r = 0.25 * std::min(b.width(), b.height());
    const double dx = std::max({b.x1 + r - px, 0.0, px - (b.x2 - r)});
    const double dy = std::max({b.y1 + r - py, 0.0, py - (b.y2 - r)});
    return dx * dx + dy * dy <= r * r;
}

double sub_frame_time(int frame, int k, int window) { return frame + (k + 0.5) / window - 0.5; }

const ClassDef& class_for(const SceneSpec& spec, int label) {
    for (const ClassDef& c : spec.classes) {
        if (c.label == label) {
            return c;
        }
    }
    throw InvalidArgument("scene object uses unknown class label " + std::to_string(label));
}

std::vector<float> background(const SceneSpec& spec) {
    Rng rng(spec.seed, "background");
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 3; ++i) {
        waves.push_back({rng.uniform(-3.0, 3.0) / spec.width, rng.uniform(-3.0, 3.0) / spec.height,
                         rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.03, 0.08)});
    }
    const double tint[3] = {rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1)};
    std::vector<float> bg(static_cast<std::size_t>(spec.height) * spec.width * 3);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            double v = 0.4;
            for (const Wave& w : waves) {
                v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
            }
            for (int c = 0; c < 3; ++c) {
                bg[(static_cast<std::size_t>(y) * spec.width + x) * 3 + c] = static_cast<float>(v * tint[c]);
            }
        }
    }
    return bg;
}

void validate(const SceneSpec& spec) {
    if (spec.length < 1) {
        throw InvalidArgument("scene: clip length must be >= 1");
    }
    if (spec.height < 1 || spec.width < 1 || spec.blur_window < 1) {
        throw InvalidArgument("scene: frame size and blur window must be positive");
    }
    if (spec.classes.empty()) {
        throw InvalidArgument("scene: at least one class required");
    }
}

void write_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

nlohmann::json class_to_json(const ClassDef& c) {
    return {{"label", c.label},
            {"name", c.name},
            {"shape", "rounded_rectangle"},
            {"stripe_cycles", c.stripe_cycles},
            {"base_color", c.base_color}};
}

} // namespace

std::vector<ClassDef> default_classes(int count) {
    static const double kCycles[] = {2.0, 4.0, 8.0, 3.0, 6.0, 12.0, 5.0, 10.0};
    if (count < 1 || count > 8) {
        throw InvalidArgument("default_classes: supported class counts are 1..8");
    }
    std::vector<ClassDef> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(ClassDef{i + 1, "stripes" + std::to_string(static_cast<int>(kCycles[i])), kCycles[i],
                               {0.85, 0.45, 0.30}});
    }
    return out;
}

std::vector<ObjectTrack> resolve_tracks(const SceneSpec& spec) {
    validate(spec);
    std::vector<ObjectTrack> tracks = spec.tracks;
    if (tracks.empty()) {
        if (spec.max_size > std::min(spec.height, spec.width) || spec.min_size <= 0.0 ||
            spec.min_size > spec.max_size) {
            throw InvalidArgument("scene: object size range [" + std::to_string(spec.min_size) + ", " +
                                  std::to_string(spec.max_size) + "] does not fit a " + std::to_string(spec.width) +
                                  "x" + std::to_string(spec.height) + " frame");
        }
        Rng rng(spec.seed, "tracks");
        for (int i = 0; i < spec.object_count; ++i) {
            ObjectTrack t;
            t.label = spec.classes[rng.below(spec.classes.size())].label;
            const double w = rng.uniform(spec.min_size, spec.max_size);
            const double h = rng.uniform(spec.min_size, spec.max_size);
            const double x = rng.uniform(0.0, spec.width - w);
            const double y = rng.uniform(0.0, spec.height - h);
            t.initial = Box{x, y, x + w, y + h};
            const double speed = rng.uniform(0.3, spec.max_speed);
            const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
            t.vx = speed * std::cos(angle);
            t.vy = speed * std::sin(angle);
            t.drift_amplitude = spec.drift_amplitude;
            t.drift_period = spec.drift_period;
            t.drift_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            t.brightness = rng.uniform(0.85, 1.15);
            t.stripe_phase = rng.uniform(0.0, 1.0);
            tracks.push_back(t);
        }
        if (spec.occlusion && tracks.size() >= 2 && spec.length > 2) {
            // Aim the second object at the first one's mid-clip position.
            const double mid = 0.5 * (spec.length - 1);
            const Box goal = track_box(tracks[0], mid, spec.height, spec.width);
            const Box& start = tracks[1].initial;
            double vx = (goal.center_x() - start.center_x()) / mid;
            double vy = (goal.center_y() - start.center_y()) / mid;
            const double speed = std::hypot(vx, vy);
            const double cap = 1.5 * spec.max_speed;
            if (speed > cap) {
                vx *= cap / speed;
                vy *= cap / speed;
            }
            tracks[1].vx = vx;
            tracks[1].vy = vy;
        }
    }
    for (const ObjectTrack& t : tracks) {
        require_valid(t.initial, "scene object");
        if (t.initial.width() > spec.width || t.initial.height() > spec.height) {
            throw InvalidArgument("scene: object of size " + std::to_string(t.initial.width()) + "x" +
                                  std::to_string(t.initial.height()) + " is larger than the frame");
        }
        if (t.initial.x1 < 0.0 || t.initial.y1 < 0.0 || t.initial.x2 > spec.width || t.initial.y2 > spec.height) {
            throw InvalidArgument("scene: object does not fit inside the frame at t=0");
        }
        class_for(spec, t.label);
    }
    return tracks;
}

Box track_box(const ObjectTrack& track, double t, int height, int width) {
    const double w = track.initial.width();
    const double h = track.initial.height();
    const double drift =
        track.drift_amplitude * std::sin(2.0 * std::numbers::pi * t / track.drift_period + track.drift_phase) -
        track.drift_amplitude * std::sin(track.drift_phase);
    const double x = reflect(track.initial.x1 + track.vx * t, width - w);
    const double y = reflect(track.initial.y1 + track.vy * t + drift, height - h);
    return Box{x, y, x + w, y + h};
}

VideoClip generate_clip(const SceneSpec& spec) {
    const std::vector<ObjectTrack> tracks = resolve_tracks(spec);
    const std::vector<float> bg = background(spec);
    const std::size_t n_values = static_cast<std::size_t>(spec.height) * spec.width * 3;
    Rng noise(spec.seed, "noise");

    VideoClip clip;
    clip.seed = spec.seed;
    clip.height = spec.height;
    clip.width = spec.width;
    std::vector<double> accum(n_values);
    std::vector<double> layer(n_values);
    for (int f = 0; f < spec.length; ++f) {
        std::fill(accum.begin(), accum.end(), 0.0);
        for (int k = 0; k < spec.blur_window; ++k) {
            const double t = sub_frame_time(f, k, spec.blur_window);
            std::copy(bg.begin(), bg.end(), layer.begin());
            for (const ObjectTrack& track : tracks) {
                const Box b = track_box(track, t, spec.height, spec.width);
                const ClassDef& cls = class_for(spec, track.label);
                const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
                const int y1 = std::min(spec.height, static_cast<int>(std::ceil(b.y2)));
                const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
                const int x1 = std::min(spec.width, static_cast<int>(std::ceil(b.x2)));
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) {
                        const double px = x + 0.5;
                        const double py = y + 0.5;
                        if (!inside_rounded(b, px, py)) {
                            continue;
                        }
                        const double u = (px - b.x1) / b.width();
                        const long band = static_cast<long>(std::floor(2.0 * (cls.stripe_cycles * u + track.stripe_phase)));
                        const double stripe = (band % 2 == 0) ? 1.0 : 0.45;
                        for (int c = 0; c < 3; ++c) {
                            layer[(static_cast<std::size_t>(y) * spec.width + x) * 3 + c] =
                                cls.base_color[c] * track.brightness * stripe;
                        }
                    }
                }
            }
            for (std::size_t i = 0; i < n_values; ++i) {
                accum[i] += layer[i];
            }
        }
        Image img{spec.height, spec.width, std::vector<float>(n_values)};
        for (std::size_t i = 0; i < n_values; ++i) {
            const double v = accum[i] / spec.blur_window + spec.noise * noise.uniform(-1.0, 1.0);
            img.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        clip.frames.push_back(std::move(img));

        std::vector<LabeledBox> ann;
        for (const ObjectTrack& track : tracks) {
            const Box b = clip_box(track_box(track, f, spec.height, spec.width), spec.width, spec.height);
            if (b.valid()) {
                ann.push_back(LabeledBox{b, track.label});
            }
        }
        clip.annotations.push_back(std::move(ann));
    }
    return clip;
}

std::vector<float> object_coverage(const SceneSpec& spec, int frame, int object) {
    const std::vector<ObjectTrack> tracks = resolve_tracks(spec);
    if (object < 0 || object >= static_cast<int>(tracks.size()) || frame < 0 || frame >= spec.length) {
        throw InvalidArgument("object_coverage: object or frame index out of range");
    }
    std::vector<float> cov(static_cast<std::size_t>(spec.height) * spec.width, 0.0f);
    for (int k = 0; k < spec.blur_window; ++k) {
        const Box b = track_box(tracks[object], sub_frame_time(frame, k, spec.blur_window), spec.height, spec.width);
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                if (inside_rounded(b, x + 0.5, y + 0.5)) {
                    cov[static_cast<std::size_t>(y) * spec.width + x] += 1.0f / spec.blur_window;
                }
            }
        }
    }
    return cov;
}

Dataset generate_dataset(const SceneSpec& base, int count, std::uint64_t seed, const std::string& prefix) {
    if (count < 0) {
        throw InvalidArgument("generate_dataset: negative clip count");
    }
    Dataset ds;
    ds.classes = base.classes;
    for (int i = 0; i < count; ++i) {
        SceneSpec spec = base;
        spec.seed = mix_seed(mix_seed(seed, fnv1a(prefix)), static_cast<std::uint64_t>(i));
        VideoClip clip = generate_clip(spec);
        char id[32];
        std::snprintf(id, sizeof id, "_%04d", i);
        clip.id = prefix + id;
        ds.clips.push_back(std::move(clip));
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    }
    nlohmann::json manifest;
    manifest["format"] = "svid-dataset";
    manifest["version"] = kFormatVersion;
    manifest["classes"] = nlohmann::json::array();
    for (const ClassDef& c : dataset.classes) {
        manifest["classes"].push_back(class_to_json(c));
    }
    manifest["clips"] = nlohmann::json::array();
    for (const VideoClip& clip : dataset.clips) {
        if (clip.id.empty()) {
            throw InvalidArgument("write_dataset: clip without id");
        }
        const std::string frames_file = clip.id + ".svid";
        const std::string ann_file = clip.id + ".json";
        {
            std::ofstream os(dir / frames_file, std::ios::binary);
            if (!os) {
                throw IoError("cannot write " + (dir / frames_file).string());
            }
            os.write(kMagic, 4);
            write_u32(os, kFormatVersion);
            write_u32(os, static_cast<std::uint32_t>(clip.height));
            write_u32(os, static_cast<std::uint32_t>(clip.width));
            write_u32(os, static_cast<std::uint32_t>(clip.length()));
            for (const Image& img : clip.frames) {
                for (float v : img.pixels) {
                    write_u32(os, std::bit_cast<std::uint32_t>(v));
                }
            }
            if (!os) {
                throw IoError("write failed for " + (dir / frames_file).string());
            }
        }
        nlohmann::json ann = nlohmann::json::object();
        for (int f = 0; f < clip.length(); ++f) {
            nlohmann::json boxes = nlohmann::json::array();
            for (const LabeledBox& b : clip.annotations[f]) {
                boxes.push_back({b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.label});
            }
            ann[std::to_string(f)] = boxes;
        }
        std::ofstream(dir / ann_file) << ann.dump(1) << "\n";
        manifest["clips"].push_back({{"id", clip.id},
                                     {"frames_file", frames_file},
                                     {"annotations_file", ann_file},
                                     {"height", clip.height},
                                     {"width", clip.width},
                                     {"length", clip.length()},
                                     {"seed", clip.seed}});
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) {
        throw IoError("cannot write " + (dir / "manifest.json").string());
    }
    os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) {
        throw IoError("no manifest.json in " + dir.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json in " + dir.string() + " is not valid JSON: " + e.what());
    }
    Dataset ds;
    try {
        for (const auto& jc : manifest.at("classes")) {
            ClassDef c;
            c.label = jc.at("label").get<int>();
            c.name = jc.at("name").get<std::string>();
            c.stripe_cycles = jc.at("stripe_cycles").get<double>();
            c.base_color = jc.at("base_color").get<std::array<double, 3>>();
            ds.classes.push_back(c);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json class table: " + std::string(e.what()));
    }

    for (const auto& entry : manifest.at("clips")) {
        VideoClip clip;
        std::string frames_file;
        std::string ann_file;
        int length = 0;
        try {
            clip.id = entry.at("id").get<std::string>();
            frames_file = entry.at("frames_file").get<std::string>();
            ann_file = entry.at("annotations_file").get<std::string>();
            clip.height = entry.at("height").get<int>();
            clip.width = entry.at("width").get<int>();
            length = entry.at("length").get<int>();
            clip.seed = entry.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest entry for clip '" + entry.value("id", std::string("?")) +
                              "' is malformed: " + e.what());
        }
        const std::string where = "clip '" + clip.id + "': ";

        std::ifstream fs(dir / frames_file, std::ios::binary);
        if (!fs) {
            throw FormatError(where + "missing frame file " + frames_file);
        }
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(fs)), std::istreambuf_iterator<char>());
        if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
            throw FormatError(where + "corrupt header in " + frames_file);
        }
        const std::uint32_t version = read_u32(bytes.data() + 4);
        const std::uint32_t h = read_u32(bytes.data() + 8);
        const std::uint32_t w = read_u32(bytes.data() + 12);
        const std::uint32_t n = read_u32(bytes.data() + 16);
        if (version != kFormatVersion) {
            throw FormatError(where + "unsupported frame file version " + std::to_string(version));
        }
        if (static_cast<int>(h) != clip.height || static_cast<int>(w) != clip.width ||
            static_cast<int>(n) != length) {
            throw FormatError(where + "frame header disagrees with manifest shape");
        }
        const std::size_t per_frame = static_cast<std::size_t>(h) * w * 3;
        const std::size_t expected = 20 + per_frame * n * 4;
        if (bytes.size() != expected) {
            throw FormatError(where + "frame file " + frames_file + " is truncated or oversized (" +
                              std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected) + ")");
        }
        const unsigned char* p = bytes.data() + 20;
        for (std::uint32_t f = 0; f < n; ++f) {
            Image img{clip.height, clip.width, std::vector<float>(per_frame)};
            for (std::size_t i = 0; i < per_frame; ++i, p += 4) {
                img.pixels[i] = std::bit_cast<float>(read_u32(p));
            }
            clip.frames.push_back(std::move(img));
        }

        std::ifstream as(dir / ann_file);
        if (!as) {
            throw FormatError(where + "missing annotation file " + ann_file);
        }
        try {
            const nlohmann::json ann = nlohmann::json::parse(as);
            for (int f = 0; f < length; ++f) {
                std::vector<LabeledBox> boxes;
                for (const auto& jb : ann.at(std::to_string(f))) {
                    boxes.push_back(LabeledBox{Box{jb.at(0).get<double>(), jb.at(1).get<double>(),
                                                   jb.at(2).get<double>(), jb.at(3).get<double>()},
                                               jb.at(4).get<int>()});
                }
                clip.annotations.push_back(std::move(boxes));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + "bad annotation file " + ann_file + ": " + e.what());
        }
        ds.clips.push_back(std::move(clip));
    }
    return ds;
}

} // namespace boxmask
