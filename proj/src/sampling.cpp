#include "boxmask/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "boxmask/error.hpp"

namespace boxmask {
namespace {

void check_target(int video_len, int target) {
    if (video_len < 1 || target < 0 || target >= video_len) {
        throw InvalidArgument("sample_support: target " + std::to_string(target) + " outside video of length " +
                              std::to_string(video_len));
    }
}

} // namespace

std::string to_string(SamplingMode mode) { return mode == SamplingMode::uniform ? "uniform" : "strided"; }

SamplingMode parse_sampling_mode(const std::string& text) {
    if (text == "uniform") {
        return SamplingMode::uniform;
    }
    if (text == "strided") {
        return SamplingMode::strided;
    }
    throw InvalidArgument("unknown sampling mode '" + text + "' (expected uniform|strided)");
}

std::vector<int> sample_support(int video_len, int target, const SamplingPlan& plan) {
    check_target(video_len, target);
    if (plan.count < 0 || plan.stride < 1) {
        throw InvalidArgument("sample_support: need T >= 0 and S >= 1");
    }
    const int last = video_len - 1;
    std::vector<int> out;
    out.reserve(plan.count);
    if (plan.mode == SamplingMode::uniform) {
        for (int k = 0; k < plan.count; ++k) {
            if (plan.count == 1) {
                out.push_back(0);
                break;
            }
            const double pos = static_cast<double>(k) * last / (plan.count - 1);
            out.push_back(std::clamp(static_cast<int>(std::floor(pos + 0.5)), 0, last));
        }
        return out;
    }
    const int left = plan.count / 2;
    const int right = plan.count - left;
    for (int i = left; i >= 1; --i) {
        out.push_back(std::clamp(target - i * plan.stride, 0, last));
    }
    for (int i = 1; i <= right; ++i) {
        out.push_back(std::clamp(target + i * plan.stride, 0, last));
    }
    return out;
}

std::vector<int> sample_training_support(int video_len, int target, const SamplingPlan& plan, Rng& rng) {
    check_target(video_len, target);
    if (plan.train_support < 0) {
        throw InvalidArgument("sample_training_support: train_support must be >= 0");
    }
    std::vector<int> out;
    for (int i = 0; i < plan.train_support; ++i) {
        out.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(video_len))));
    }
    return out;
}

} // namespace boxmask
