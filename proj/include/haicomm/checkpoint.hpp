#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "haicomm/optim.hpp"
#include "haicomm/tensor.hpp"

namespace haicomm {

// On disk: one JSON index value mapping name -> {offset, shape, dtype},
// a single '\n', then the concatenated little-endian float32 arrays.
// Offsets are byte positions into the data section. Round-trips bit-exact.
struct Checkpoint {
    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };
    std::vector<Entry> entries;

    const Entry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json index = nlohmann::ordered_json::object();
        std::uint64_t offset = 0;
        for (const auto& e : entries) {
            index[e.name] = {{"offset", offset}, {"shape", e.shape}, {"dtype", "f32"}};
            offset += e.data.size() * sizeof(float);
        }
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint: " + path.string());
        out << index.dump() << '\n';
        for (const auto& e : entries)
            out.write(reinterpret_cast<const char*>(e.data.data()),
                      static_cast<std::streamsize>(e.data.size() * sizeof(float)));
        if (!out) throw IoError("short write on checkpoint: " + path.string());
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open checkpoint: " + path.string());
        nlohmann::json index;
        try {
            in >> index;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("checkpoint index is not valid JSON (" + path.string() + "): " + e.what());
        }
        if (in.get() != '\n') throw FormatError("checkpoint missing index terminator: " + path.string());
        const std::streampos base = in.tellg();
        struct Raw {
            std::string name;
            std::uint64_t offset;
            Shape shape;
        };
        std::vector<Raw> raws;
        for (auto it = index.begin(); it != index.end(); ++it) {
            const auto& v = it.value();
            if (!v.contains("offset") || !v.contains("shape") || !v.contains("dtype"))
                throw FormatError("checkpoint entry '" + it.key() + "' missing fields");
            if (v.at("dtype").get<std::string>() != "f32")
                throw FormatError("checkpoint entry '" + it.key() + "' has unsupported dtype");
            raws.push_back({it.key(), v.at("offset").get<std::uint64_t>(), v.at("shape").get<Shape>()});
        }
        // JSON objects do not preserve order; the offsets do.
        std::sort(raws.begin(), raws.end(), [](const Raw& a, const Raw& b) { return a.offset < b.offset; });
        Checkpoint ckpt;
        for (const auto& r : raws) {
            Entry e;
            e.name = r.name;
            e.shape = r.shape;
            e.data.resize(shape_numel(r.shape));
            in.seekg(base + static_cast<std::streamoff>(r.offset));
            in.read(reinterpret_cast<char*>(e.data.data()),
                    static_cast<std::streamsize>(e.data.size() * sizeof(float)));
            if (!in) throw FormatError("checkpoint data truncated at '" + r.name + "': " + path.string());
            ckpt.entries.push_back(std::move(e));
        }
        return ckpt;
    }
};

template <typename T>
Checkpoint to_checkpoint(const ParamSet<T>& params) {
    Checkpoint ckpt;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Checkpoint::Entry e;
        e.name = params.names[i];
        e.shape = params.tensors[i].shape();
        e.data.reserve(params.tensors[i].numel());
        for (T v : params.tensors[i].data()) e.data.push_back(static_cast<float>(v));
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

// Copies matching entries into params; entries under `prefix` in the
// checkpoint map onto params names with the prefix stripped off.
template <typename T>
void load_from_checkpoint(ParamSet<T>& params, const Checkpoint& ckpt, const std::string& prefix = "") {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto* e = ckpt.find(prefix + params.names[i]);
        if (!e) throw FormatError("checkpoint has no entry '" + prefix + params.names[i] + "'");
        if (e->shape != params.tensors[i].shape())
            throw ShapeError("checkpoint entry '" + e->name + "' has shape " + shape_str(e->shape) +
                             ", expected " + shape_str(params.tensors[i].shape()));
        auto& dst = params.tensors[i].data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(e->data[k]);
    }
}

}  // namespace haicomm
