#include "boxmask/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "boxmask/error.hpp"

namespace boxmask {
namespace {

constexpr const char* kHeader = "boxmask-checkpoint 1";

std::string shape_field(const std::vector<int>& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out += (i ? "x" : "") + std::to_string(shape[i]);
    }
    return out.empty() ? "scalar" : out;
}

std::vector<int> parse_shape(const std::string& text) {
    std::vector<int> shape;
    if (text == "scalar") {
        return shape;
    }
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, 'x')) {
        shape.push_back(std::stoi(part));
    }
    return shape;
}

} // namespace

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
    return checkpoint.string() + ".manifest";
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store,
                     const std::map<std::string, std::string>& meta) {
    std::ofstream data(path, std::ios::binary);
    std::ofstream manifest(manifest_path(path));
    if (!data || !manifest) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    manifest << kHeader << "\n";
    for (const auto& [key, value] : meta) {
        if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
            throw InvalidArgument("checkpoint meta '" + key + "' contains whitespace or newlines");
        }
        manifest << "meta " << key << " " << value << "\n";
    }
    std::size_t offset = 0;
    for (const Parameter* p : store.all()) {
        manifest << "param " << p->name << " " << shape_field(p->value.shape()) << " " << offset << "\n";
        for (double v : p->value.values()) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            unsigned char b[8];
            for (int i = 0; i < 8; ++i) {
                b[i] = static_cast<unsigned char>(bits >> (8 * i));
            }
            data.write(reinterpret_cast<const char*>(b), 8);
        }
        offset += p->value.size() * 8;
    }
    if (!data || !manifest) {
        throw IoError("write failed for checkpoint " + path.string());
    }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream manifest(manifest_path(path));
    if (!manifest) {
        throw IoError("missing checkpoint manifest " + manifest_path(path).string());
    }
    std::string line;
    if (!std::getline(manifest, line) || line != kHeader) {
        throw FormatError("checkpoint manifest " + manifest_path(path).string() + " has no valid header");
    }
    std::ifstream data(path, std::ios::binary);
    if (!data) {
        throw IoError("missing checkpoint data " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(data)), std::istreambuf_iterator<char>());

    Checkpoint ck;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream is(line);
        std::string kind;
        is >> kind;
        if (kind == "meta") {
            std::string key;
            is >> key;
            std::string value;
            std::getline(is >> std::ws, value);
            ck.meta[key] = value;
        } else if (kind == "param") {
            CheckpointEntry e;
            std::string shape;
            if (!(is >> e.name >> shape >> e.offset)) {
                throw FormatError("malformed checkpoint manifest line: " + line);
            }
            e.shape = parse_shape(shape);
            const std::size_t count = shape_numel(e.shape);
            if (e.offset + count * 8 > bytes.size()) {
                throw FormatError("checkpoint data truncated at parameter " + e.name);
            }
            e.values.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                std::uint64_t bits = 0;
                for (int b = 0; b < 8; ++b) {
                    bits |= static_cast<std::uint64_t>(bytes[e.offset + i * 8 + b]) << (8 * b);
                }
                e.values[i] = std::bit_cast<double>(bits);
            }
            ck.entries.push_back(std::move(e));
        } else {
            throw FormatError("unknown checkpoint manifest line: " + line);
        }
    }
    return ck;
}

void load_parameters(const Checkpoint& checkpoint, ParameterStore& store) {
    for (const CheckpointEntry& e : checkpoint.entries) {
        Parameter* p = store.find(e.name);
        if (p == nullptr) {
            throw ShapeMismatch("checkpoint parameter " + e.name + " does not exist in the model");
        }
        if (p->value.shape() != e.shape) {
            throw ShapeMismatch("parameter " + e.name + ": checkpoint shape " + shape_string(e.shape) +
                                " vs model shape " + shape_string(p->value.shape()));
        }
    }
    for (Parameter* p : store.all()) {
        const CheckpointEntry* found = nullptr;
        for (const CheckpointEntry& e : checkpoint.entries) {
            if (e.name == p->name) {
                found = &e;
                break;
            }
        }
        if (found == nullptr) {
            throw ShapeMismatch("parameter " + p->name + " missing from checkpoint");
        }
        p->value = Tensor(found->shape, found->values);
        p->velocity = Tensor(found->shape);
        p->grad = Tensor(found->shape);
    }
}

} // namespace boxmask
