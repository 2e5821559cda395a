#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "haicomm/common.hpp"

namespace haicomm {

enum class Split { pretrain, train, val, test };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::pretrain: return "pretrain";
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split split_from_name(const std::string& s) {
    if (s == "pretrain") return Split::pretrain;
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw FormatError("unknown split name: '" + s + "'");
}

struct ManifestRecord {
    std::int64_t case_id = 0;
    Split split = Split::train;
    std::string t1_path;  // empty means absent
    std::string t2_path;
    std::optional<std::vector<int>> rater_labels;
    std::array<std::int64_t, 3> center_voxel{0, 0, 0};
};

// Indexed dataset records. Test-split surgical labels sit behind an access
// gate: stages before evaluation never unlock it, and every read is counted
// so the pipeline can audit that the gate held.
class DatasetManifest {
public:
    std::vector<ManifestRecord> records;

    void set_surgical(std::size_t i, std::optional<int> label) {
        surgical_.resize(records.size());
        surgical_.at(i) = label;
    }

    bool has_surgical(std::size_t i) const {
        return i < surgical_.size() && surgical_[i].has_value();
    }

    int surgical_label(std::size_t i) const {
        if (!has_surgical(i)) throw DataError("record " + std::to_string(i) + " has no surgical label");
        if (records.at(i).split == Split::test && !surgical_unlocked_)
            throw DataError("surgical label access is locked before the evaluate stage (case " +
                            std::to_string(records[i].case_id) + ")");
        ++surgical_reads_;
        return *surgical_[i];
    }

    void unlock_surgical() { surgical_unlocked_ = true; }
    bool surgical_unlocked() const { return surgical_unlocked_; }
    std::size_t surgical_read_count() const { return surgical_reads_; }

    std::vector<std::size_t> split_indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].split == s) out.push_back(i);
        return out;
    }

    const std::filesystem::path& base_dir() const { return base_dir_; }
    void set_base_dir(std::filesystem::path p) { base_dir_ = std::move(p); }

    std::filesystem::path resolve(const std::string& rel) const { return base_dir_ / rel; }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            nlohmann::ordered_json rec;
            rec["case_id"] = r.case_id;
            rec["split"] = split_name(r.split);
            rec["t1_path"] = r.t1_path.empty() ? nlohmann::ordered_json(nullptr)
                                               : nlohmann::ordered_json(r.t1_path);
            rec["t2_path"] = r.t2_path.empty() ? nlohmann::ordered_json(nullptr)
                                               : nlohmann::ordered_json(r.t2_path);
            rec["rater_labels"] = r.rater_labels ? nlohmann::ordered_json(*r.rater_labels)
                                                 : nlohmann::ordered_json(nullptr);
            rec["surgical_label"] = (i < surgical_.size() && surgical_[i])
                                        ? nlohmann::ordered_json(*surgical_[i])
                                        : nlohmann::ordered_json(nullptr);
            rec["center_voxel"] = r.center_voxel;
            arr.push_back(std::move(rec));
        }
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write manifest: " + path.string());
        out << arr.dump(1) << '\n';
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open manifest: " + path.string());
        nlohmann::json arr;
        try {
            in >> arr;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest is not valid JSON (" + path.string() + "): " + e.what());
        }
        if (!arr.is_array()) throw FormatError("manifest must be a JSON array: " + path.string());
        DatasetManifest m;
        m.base_dir_ = path.parent_path();
        for (const auto& rec : arr) {
            ManifestRecord r;
            try {
                r.case_id = rec.at("case_id").get<std::int64_t>();
                r.split = split_from_name(rec.at("split").get<std::string>());
                if (!rec.at("t1_path").is_null()) r.t1_path = rec.at("t1_path").get<std::string>();
                if (!rec.at("t2_path").is_null()) r.t2_path = rec.at("t2_path").get<std::string>();
                if (!rec.at("rater_labels").is_null())
                    r.rater_labels = rec.at("rater_labels").get<std::vector<int>>();
                r.center_voxel = rec.at("center_voxel").get<std::array<std::int64_t, 3>>();
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("manifest record malformed (" + path.string() + "): " + e.what());
            }
            if (r.rater_labels)
                for (int y : *r.rater_labels)
                    if (y != 0 && y != 1) throw FormatError("rater labels must be 0/1 in " + path.string());
            m.records.push_back(std::move(r));
            std::optional<int> surgical;
            if (!rec.at("surgical_label").is_null()) {
                const int y = rec.at("surgical_label").get<int>();
                if (y != 0 && y != 1) throw FormatError("surgical labels must be 0/1 in " + path.string());
                surgical = y;
            }
            m.surgical_.push_back(surgical);
        }
        return m;
    }

private:
    std::vector<std::optional<int>> surgical_;
    std::filesystem::path base_dir_;
    bool surgical_unlocked_ = false;
    mutable std::size_t surgical_reads_ = 0;
};

}  // namespace haicomm
