#include "mtladapt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mtladapt {

namespace {

void write_f64_le(std::ofstream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_f64_le(std::ifstream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) {
        throw std::runtime_error("checkpoint blob truncated");
    }
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& json_path, const std::string& bin_path,
                     const std::vector<NamedParam>& params, const nlohmann::json& config_meta) {
    nlohmann::json manifest;
    manifest["format"] = "mtladapt-checkpoint-v1";
    manifest["dtype"] = "f64-le";
    manifest["config"] = config_meta;
    nlohmann::json entries = nlohmann::json::array();
    std::size_t byte_offset = 0;
    for (const auto& p : params) {
        nlohmann::json e;
        e["name"] = p.name;
        e["shape"] = p.tensor.shape();
        e["byte_offset"] = byte_offset;
        byte_offset += p.tensor.size() * 8;
        entries.push_back(std::move(e));
    }
    manifest["params"] = std::move(entries);
    manifest["total_bytes"] = byte_offset;

    std::ofstream jf(json_path);
    if (!jf) {
        throw std::runtime_error("cannot open " + json_path + " for writing");
    }
    jf << manifest.dump(2) << "\n";

    std::ofstream bf(bin_path, std::ios::binary);
    if (!bf) {
        throw std::runtime_error("cannot open " + bin_path + " for writing");
    }
    for (const auto& p : params) {
        for (double v : p.tensor.values()) {
            write_f64_le(bf, v);
        }
    }
}

nlohmann::json read_checkpoint_manifest(const std::string& json_path) {
    std::ifstream jf(json_path);
    if (!jf) {
        throw std::runtime_error("cannot open " + json_path);
    }
    nlohmann::json manifest;
    jf >> manifest;
    if (manifest.value("format", "") != "mtladapt-checkpoint-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + json_path);
    }
    return manifest;
}

void load_checkpoint(const std::string& json_path, const std::string& bin_path,
                     std::vector<NamedParam>& params) {
    const nlohmann::json manifest = read_checkpoint_manifest(json_path);
    const auto& entries = manifest.at("params");
    if (entries.size() != params.size()) {
        throw std::runtime_error("checkpoint has " + std::to_string(entries.size()) +
                                 " params, model expects " + std::to_string(params.size()));
    }
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) {
        throw std::runtime_error("cannot open " + bin_path);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = entries[i];
        if (e.at("name").get<std::string>() != params[i].name) {
            throw std::runtime_error("checkpoint param order mismatch at '" + params[i].name +
                                     "' vs '" + e.at("name").get<std::string>() + "'");
        }
        const Shape shape = e.at("shape").get<Shape>();
        if (shape != params[i].tensor.shape()) {
            throw std::runtime_error("checkpoint shape mismatch for '" + params[i].name + "'");
        }
        auto values = params[i].tensor.values();
        for (auto& v : values) {
            v = read_f64_le(bf);
        }
    }
}

}  // namespace mtladapt
