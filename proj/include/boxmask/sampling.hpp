#pragma once

#include <string>
#include <vector>

#include "boxmask/rng.hpp"

namespace boxmask {

enum class SamplingMode { uniform, strided };

std::string to_string(SamplingMode mode);
SamplingMode parse_sampling_mode(const std::string& text);

/// Support-frame selection. `count` is T, `stride` is S; `train_support`
/// random frames are drawn per training sample.
struct SamplingPlan {
    SamplingMode mode = SamplingMode::uniform;
    int count = 14;
    int stride = 1;
    int train_support = 2;
};

/// Inference-time support frames for `target`.
///   uniform: round-half-up(k * (len - 1) / (T - 1)) for k = 0..T-1, with
///            T = 1 giving {0}; independent of the target.
///   strided: target - (T/2)S, ..., target - S, target + S, ...,
///            target + (T - T/2)S.
/// Indices are clamped into [0, len - 1], which replicates the first/last
/// frame; duplicates are kept. Throws when target is out of range.
std::vector<int> sample_support(int video_len, int target, const SamplingPlan& plan);

/// Training-time support frames: `train_support` uniform draws from the
/// whole video.
std::vector<int> sample_training_support(int video_len, int target, const SamplingPlan& plan, Rng& rng);

} // namespace boxmask
