#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "boxmask/params.hpp"

namespace boxmask {

/// One stored array: name, shape and position in the data file.
struct CheckpointEntry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;  // bytes
    std::vector<double> values;
};

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<CheckpointEntry> entries;
};

/// Writes `path` (little-endian f64 arrays back to back) and
/// `path.manifest` (meta lines, then one "param <name> <shape> <offset>"
/// line per array).
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store,
                     const std::map<std::string, std::string>& meta = {});

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies values into `store`. Every store parameter must be present with
/// the same shape and vice versa; errors name the offending parameter.
void load_parameters(const Checkpoint& checkpoint, ParameterStore& store);

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);

} // namespace boxmask
