#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "boxmask/detector.hpp"
#include "boxmask/sampling.hpp"
#include "boxmask/synthvid.hpp"

namespace boxmask {

/// Everything a command needs. Serialized as flat `key = value` lines with
/// dotted keys; `#` starts a comment.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string data_dir = "data";
    int train_clips = 40;
    int val_clips = 10;
    int num_classes = 3;
    SceneSpec scene;
    DetectorConfig detector;
    SamplingPlan sampling;
    std::vector<double> eval_thresholds = {0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
    /// Checkpoint every this many steps (0: only the final one).
    int checkpoint_every = 0;

    std::vector<double> ablate_lambdas = {0.0, 0.25, 0.5, 1.0};
    std::vector<int> ablate_n_conv = {1, 2, 3, 4};
    std::vector<int> ablate_sampling_counts = {2, 6, 10, 14};
    std::vector<int> ablate_sampling_strides = {1, 3, 7};
    std::vector<std::uint64_t> ablate_seeds = {0};

    /// Detector config with seed and class count applied.
    DetectorConfig resolved_detector() const;
    /// Scene spec with the class table applied.
    SceneSpec resolved_scene() const;
};

/// Sets one key. Throws InvalidArgument for unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);
std::vector<std::string> config_keys();

/// Applies every `key = value` line of `text`; errors carry the line number.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& source = "config");
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// All keys in a stable order; reading it back reproduces `config`.
std::string config_to_text(const RunConfig& config);

std::vector<double> parse_double_list(const std::string& text);

} // namespace boxmask
