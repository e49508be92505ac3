#pragma once

// Single-file checkpoint format:
//
//   magic "RETL" | u16 version | u64 header_len | header JSON | blocks...
//
// The header carries the run config, free-form extras (vocabulary tokens,
// cell-index ids, optimizer step) and a parameter manifest with absolute byte
// offsets. Each block is self-describing as well:
//
//   u64 name_len | name bytes | u64 rank | u64 dims[rank] | f64 data[numel]
//
// All integers and reals are little-endian. Loading re-checks the manifest
// against the block stream; save(load(x)) reproduces x byte for byte.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "retloc/errors.hpp"
#include "retloc/params.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

constexpr char kCheckpointMagic[4] = {'R', 'E', 'T', 'L'};
constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json config;
    nlohmann::json extra;
    std::map<std::string, Tensor> params;
};

namespace ckpt_detail {

template <class T>
void put(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));  // little-endian host assumed (x86-64/aarch64)
}

template <class T>
T get(const std::string& buf, std::size_t& pos, const std::string& path) {
    if (pos + sizeof(T) > buf.size())
        throw DataError("truncated checkpoint: " + path);
    T value;
    std::memcpy(&value, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const ParamMap& params,
                            const nlohmann::json& config,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    // Serialize blocks first to learn their offsets.
    std::vector<std::string> blocks;
    std::vector<std::string> names;
    for (const auto& [name, t] : params) {
        std::string b;
        ckpt_detail::put<std::uint64_t>(b, name.size());
        b.append(name);
        ckpt_detail::put<std::uint64_t>(b, t.rank());
        for (std::size_t dimension : t.shape())
            ckpt_detail::put<std::uint64_t>(b, dimension);
        for (double v : t.data()) ckpt_detail::put<double>(b, v);
        blocks.push_back(std::move(b));
        names.push_back(name);
    }

    nlohmann::json header;
    header["config"] = config;
    header["extra"] = extra;
    auto& manifest = header["params"] = nlohmann::json::array();
    // offsets depend on header length; iterate to a fixed point (the length
    // field stabilizes after the second pass since digits barely move)
    std::string header_str;
    std::size_t base = 0;
    for (int pass = 0; pass < 8; ++pass) {
        manifest.clear();
        std::size_t offset = base;
        std::size_t idx = 0;
        for (const auto& [name, t] : params) {
            manifest.push_back({{"name", name},
                                {"offset", offset},
                                {"shape", t.shape()}});
            offset += blocks[idx++].size();
        }
        header_str = header.dump();
        const std::size_t new_base = 4 + 2 + 8 + header_str.size();
        if (new_base == base) break;
        base = new_base;
    }

    std::string out;
    out.append(kCheckpointMagic, 4);
    ckpt_detail::put<std::uint16_t>(out, kCheckpointVersion);
    ckpt_detail::put<std::uint64_t>(out, header_str.size());
    out.append(header_str);
    for (const auto& b : blocks) out.append(b);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write checkpoint: " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot move checkpoint into place: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing checkpoint file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    if (buf.size() < 14 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
        throw DataError("not a checkpoint file (bad magic): " + path);
    pos = 4;
    const auto version = ckpt_detail::get<std::uint16_t>(buf, pos, path);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) +
                        " in " + path);
    const auto header_len = ckpt_detail::get<std::uint64_t>(buf, pos, path);
    if (pos + header_len > buf.size())
        throw DataError("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(pos, header_len));
    } catch (const std::exception& e) {
        throw DataError("corrupt checkpoint header in " + path + ": " + e.what());
    }
    pos += header_len;

    Checkpoint ckpt;
    ckpt.config = header.value("config", nlohmann::json::object());
    ckpt.extra = header.value("extra", nlohmann::json::object());

    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const Shape manifest_shape = entry.at("shape").get<Shape>();
        if (offset != pos)
            throw DataError("checkpoint manifest offset disagreement for '" + name +
                            "' in " + path + " (manifest " + std::to_string(offset) +
                            ", stream " + std::to_string(pos) + ")");
        const auto name_len = ckpt_detail::get<std::uint64_t>(buf, pos, path);
        if (pos + name_len > buf.size())
            throw DataError("truncated checkpoint: " + path);
        const std::string block_name = buf.substr(pos, name_len);
        pos += name_len;
        if (block_name != name)
            throw DataError("checkpoint manifest names '" + name + "' but block is '" +
                            block_name + "' in " + path);
        const auto rank = ckpt_detail::get<std::uint64_t>(buf, pos, path);
        Shape shape(rank);
        for (auto& dimension : shape)
            dimension = ckpt_detail::get<std::uint64_t>(buf, pos, path);
        if (shape != manifest_shape)
            throw DataError("checkpoint shape disagreement for '" + name + "' in " + path);
        std::vector<double> data(detail::shape_numel(shape));
        for (double& v : data) v = ckpt_detail::get<double>(buf, pos, path);
        ckpt.params.emplace(name, Tensor::param(std::move(shape), std::move(data)));
    }
    return ckpt;
}

/// Copies checkpoint values into an existing parameter map; every destination
/// parameter must be present with an identical shape.
inline void restore_params(ParamMap& dst, const std::map<std::string, Tensor>& src,
                           const std::string& context) {
    for (auto& [name, t] : dst) {
        auto it = src.find(name);
        if (it == src.end())
            throw DataError(context + ": checkpoint is missing parameter '" + name + "'");
        if (it->second.shape() != t.shape())
            throw DataError(context + ": shape mismatch for parameter '" + name +
                            "' (model " + detail::shape_str(t.shape()) + ", checkpoint " +
                            detail::shape_str(it->second.shape()) + ")");
        t.data() = it->second.data();
    }
}

}  // namespace retloc
