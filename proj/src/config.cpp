#include "boxmask/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "boxmask/error.hpp"

namespace boxmask {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest form that round-trips.
    for (int p = 1; p <= 17; ++p) {
        char shorter[40];
        std::snprintf(shorter, sizeof shorter, "%.*g", p, v);
        if (std::strtod(shorter, nullptr) == v) {
            return shorter;
        }
    }
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) {
        throw InvalidArgument("config key '" + key + "': '" + v + "' is not a number");
    }
    return d;
}

long long to_integer(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw InvalidArgument("config key '" + key + "': '" + v + "' is not an integer");
    }
    return out;
}

int to_int(const std::string& key, const std::string& v) { return static_cast<int>(to_integer(key, v)); }

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw InvalidArgument("config key '" + key + "': '" + v + "' is not a non-negative integer");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") {
        return true;
    }
    if (v == "off" || v == "false" || v == "0") {
        return false;
    }
    throw InvalidArgument("config key '" + key + "': '" + v + "' is not on/off");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> parts;
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) {
        part = trim(part);
        if (!part.empty()) {
            parts.push_back(part);
        }
    }
    return parts;
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F convert) {
    std::vector<T> out;
    for (const std::string& p : split_list(v)) {
        out.push_back(convert(key, p));
    }
    return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F format) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        out += (i ? "," : "") + format(items[i]);
    }
    return out;
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define BM_DOUBLE(member)                                                                     \
    Field {                                                                                   \
        [](const RunConfig& c) { return fmt(c.member); },                                     \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); } \
    }
#define BM_INT(member)                                                                        \
    Field {                                                                                   \
        [](const RunConfig& c) { return std::to_string(c.member); },                          \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_int(k, v); } \
    }
#define BM_BOOL(member)                                                                       \
    Field {                                                                                   \
        [](const RunConfig& c) { return std::string(c.member ? "on" : "off"); },              \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); } \
    }

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"seed", Field{[](const RunConfig& c) { return std::to_string(c.seed); },
                       [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }}},
        {"data.dir", Field{[](const RunConfig& c) { return c.data_dir; },
                           [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }}},
        {"data.train_clips", BM_INT(train_clips)},
        {"data.val_clips", BM_INT(val_clips)},
        {"data.classes", BM_INT(num_classes)},
        {"scene.height", BM_INT(scene.height)},
        {"scene.width", BM_INT(scene.width)},
        {"scene.length", BM_INT(scene.length)},
        {"scene.objects", BM_INT(scene.object_count)},
        {"scene.min_size", BM_DOUBLE(scene.min_size)},
        {"scene.max_size", BM_DOUBLE(scene.max_size)},
        {"scene.max_speed", BM_DOUBLE(scene.max_speed)},
        {"scene.drift_amplitude", BM_DOUBLE(scene.drift_amplitude)},
        {"scene.drift_period", BM_DOUBLE(scene.drift_period)},
        {"scene.blur_window", BM_INT(scene.blur_window)},
        {"scene.occlusion", BM_BOOL(scene.occlusion)},
        {"scene.noise", BM_DOUBLE(scene.noise)},
        {"detector.boxmask", BM_BOOL(detector.boxmask_enabled)},
        {"detector.boxmask_positive_only", BM_BOOL(detector.boxmask_positive_only)},
        {"detector.lambda", BM_DOUBLE(detector.lambda_bm)},
        {"detector.mask_size", BM_INT(detector.mask_size)},
        {"detector.n_conv", BM_INT(detector.n_conv)},
        {"detector.roi_size", BM_INT(detector.roi_size)},
        {"detector.up_size", BM_INT(detector.up_size)},
        {"detector.proposals",
         Field{[](const RunConfig& c) { return to_string(c.detector.proposal_mode); },
               [](RunConfig& c, const std::string&, const std::string& v) {
                   c.detector.proposal_mode = parse_proposal_mode(v);
               }}},
        {"detector.heads", BM_INT(detector.heads)},
        {"detector.rois_per_frame", BM_INT(detector.rois_per_frame)},
        {"detector.positive_fraction", BM_DOUBLE(detector.positive_fraction)},
        {"detector.fg_iou", BM_DOUBLE(detector.fg_iou)},
        {"detector.jitter", BM_DOUBLE(detector.jitter)},
        {"detector.nms_iou", BM_DOUBLE(detector.nms_iou)},
        {"detector.score_thresh", BM_DOUBLE(detector.score_thresh)},
        {"train.learning_rate", BM_DOUBLE(detector.learning_rate)},
        {"train.momentum", BM_DOUBLE(detector.momentum)},
        {"train.weight_decay", BM_DOUBLE(detector.weight_decay)},
        {"train.grad_clip", BM_DOUBLE(detector.grad_clip)},
        {"train.epochs", BM_INT(detector.epochs)},
        {"train.steps_per_epoch", BM_INT(detector.steps_per_epoch)},
        {"train.lr_decay", BM_DOUBLE(detector.lr_decay)},
        {"train.lr_decay_epochs",
         Field{[](const RunConfig& c) {
                   return join(c.detector.lr_decay_epochs, [](int v) { return std::to_string(v); });
               },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.detector.lr_decay_epochs = parse_list<int>(k, v, to_int);
               }}},
        {"train.checkpoint_every", BM_INT(checkpoint_every)},
        {"sampling.mode",
         Field{[](const RunConfig& c) { return to_string(c.sampling.mode); },
               [](RunConfig& c, const std::string&, const std::string& v) {
                   c.sampling.mode = parse_sampling_mode(v);
               }}},
        {"sampling.T", BM_INT(sampling.count)},
        {"sampling.S", BM_INT(sampling.stride)},
        {"sampling.train_support", BM_INT(sampling.train_support)},
        {"eval.thresholds",
         Field{[](const RunConfig& c) { return join(c.eval_thresholds, fmt); },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.eval_thresholds = parse_list<double>(k, v, to_double);
               }}},
        {"ablate.lambdas",
         Field{[](const RunConfig& c) { return join(c.ablate_lambdas, fmt); },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.ablate_lambdas = parse_list<double>(k, v, to_double);
               }}},
        {"ablate.n_conv",
         Field{[](const RunConfig& c) { return join(c.ablate_n_conv, [](int v) { return std::to_string(v); }); },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.ablate_n_conv = parse_list<int>(k, v, to_int);
               }}},
        {"ablate.sampling_T",
         Field{[](const RunConfig& c) {
                   return join(c.ablate_sampling_counts, [](int v) { return std::to_string(v); });
               },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.ablate_sampling_counts = parse_list<int>(k, v, to_int);
               }}},
        {"ablate.sampling_S",
         Field{[](const RunConfig& c) {
                   return join(c.ablate_sampling_strides, [](int v) { return std::to_string(v); });
               },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.ablate_sampling_strides = parse_list<int>(k, v, to_int);
               }}},
        {"ablate.seeds",
         Field{[](const RunConfig& c) {
                   return join(c.ablate_seeds, [](std::uint64_t v) { return std::to_string(v); });
               },
               [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.ablate_seeds = parse_list<std::uint64_t>(k, v, to_u64);
               }}},
    };
    return table;
}

#undef BM_DOUBLE
#undef BM_INT
#undef BM_BOOL

const Field& field(const std::string& key) {
    for (const auto& [k, f] : fields()) {
        if (k == key) {
            return f;
        }
    }
    throw InvalidArgument("unknown config key '" + key + "'");
}

} // namespace

DetectorConfig RunConfig::resolved_detector() const {
    DetectorConfig d = detector;
    d.num_classes = num_classes;
    d.seed = seed;
    return d;
}

SceneSpec RunConfig::resolved_scene() const {
    SceneSpec s = scene;
    s.classes = default_classes(num_classes);
    return s;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    field(key).set(config, key, trim(value));
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return field(key).get(config); }

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, f] : fields()) {
        keys.push_back(k);
    }
    return keys;
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& source) {
    std::istringstream is(text);
    std::string line;
    int number = 0;
    while (std::getline(is, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument(source + ":" + std::to_string(number) + ": expected 'key = value'");
        }
        try {
            set_config_value(config, trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(source + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    apply_config_text(config, ss.str(), path.string());
}

std::string config_to_text(const RunConfig& config) {
    std::string out;
    for (const auto& [k, f] : fields()) {
        out += k + " = " + f.get(config) + "\n";
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& text) {
    return parse_list<double>("list", text, to_double);
}

} // namespace boxmask
