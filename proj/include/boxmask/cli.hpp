#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "boxmask/config.hpp"
#include "boxmask/detector.hpp"
#include "boxmask/eval.hpp"
#include "boxmask/synthvid.hpp"

namespace boxmask {

inline constexpr const char* kCodeVersion = "boxmask 1.0.0";

/// Trains a fresh detector built from `config`. When `run_dir` is
/// non-empty it receives config.txt, VERSION, loss_log.csv and
/// checkpoints/. Progress lines go to `progress` when given.
struct TrainResult {
    std::unique_ptr<Detector> detector;
    std::vector<LossReport> log;
    std::filesystem::path checkpoint;
};
TrainResult train_model(const RunConfig& config, const Dataset& train, const std::filesystem::path& run_dir,
                        std::ostream* progress = nullptr);

/// Runs inference on every frame of every clip and scores it.
EvalResult evaluate_model(Detector& detector, const Dataset& data, const SamplingPlan& plan,
                          std::span<const double> thresholds, const InferenceOptions& options = {});

/// Detector rebuilt from a checkpoint; `config` receives the stored
/// settings (later overrides still apply on top).
std::unique_ptr<Detector> load_detector(const std::filesystem::path& checkpoint, RunConfig& config);

/// Entry point shared by the executable and the tests. Returns the exit
/// code; failures print one `error: kind=... message="..."` line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace boxmask
