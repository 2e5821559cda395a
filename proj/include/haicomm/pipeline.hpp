#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "haicomm/encoder3d.hpp"
#include "haicomm/fusion.hpp"
#include "haicomm/manifest.hpp"
#include "haicomm/metrics.hpp"
#include "haicomm/multirater.hpp"
#include "haicomm/synthgen.hpp"
#include "haicomm/volprep.hpp"

namespace haicomm {

struct EvalConfig {
    std::size_t n_bootstrap = 1000;
    double threshold = 0.5;

    void validate() const {
        if (n_bootstrap < 2) throw ConfigError("eval: n_bootstrap must be >= 2");
        if (!(threshold > 0.0 && threshold < 1.0))
            throw ConfigError("eval: threshold must lie in (0,1)");
    }
};

struct VitSettings {
    std::array<std::size_t, 3> patch{8, 8, 8};
    std::size_t embed_dim = 64;
    std::size_t blocks = 4;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    std::size_t decoder_dim = 32;
    std::size_t decoder_blocks = 2;
    std::size_t decoder_heads = 4;
    double mask_ratio = 0.75;
};

struct RunConfig {
    std::uint64_t seed = 42;
    int threads = 2;
    std::filesystem::path out_dir = "runs/desk";
    std::string experiment = "desk";
    GenConfig gen;
    PrepConfig prep;
    VitSettings vit;
    PretrainConfig pretrain;   // .vit and .seed filled from here
    ConsensusConfig consensus;
    FusionTrainConfig fusion;
    EvalConfig eval;

    ViTConfig vit_config() const {
        ViTConfig v;
        v.volume_extents = prep.crop_target;
        v.patch = vit.patch;
        v.embed_dim = vit.embed_dim;
        v.blocks = vit.blocks;
        v.heads = vit.heads;
        v.mlp_ratio = vit.mlp_ratio;
        v.decoder_dim = vit.decoder_dim;
        v.decoder_blocks = vit.decoder_blocks;
        v.decoder_heads = vit.decoder_heads;
        v.mask_ratio = vit.mask_ratio;
        return v;
    }

    void validate() const {
        gen.validate();
        vit_config().validate();
        consensus.validate();
        fusion.validate();
        eval.validate();
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

namespace cfgjson {

using nlohmann::json;

inline void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError("config: '" + ctx + "' must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("config: unknown key '" + it.key() + "' in " + ctx);
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
        }
    }
}

inline void parse_gen(const json& j, GenConfig& g) {
    check_keys(j,
               {"n_pretrain", "n_train", "n_test", "prevalence", "signal_amplitude", "noise_sigma",
                "volume_extents", "annotators", "min_pretrain_ratio"},
               "gen");
    get_if(j, "n_pretrain", g.n_pretrain);
    get_if(j, "n_train", g.n_train);
    get_if(j, "n_test", g.n_test);
    get_if(j, "prevalence", g.prevalence);
    get_if(j, "signal_amplitude", g.signal_amplitude);
    get_if(j, "noise_sigma", g.noise_sigma);
    get_if(j, "volume_extents", g.volume_extents);
    get_if(j, "min_pretrain_ratio", g.min_pretrain_ratio);
    if (j.contains("annotators")) {
        g.annotators.clear();
        for (const auto& a : j.at("annotators")) {
            check_keys(a, {"sensitivity", "specificity", "id"}, "gen.annotators[]");
            AnnotatorProfile p;
            get_if(a, "sensitivity", p.sensitivity);
            get_if(a, "specificity", p.specificity);
            get_if(a, "id", p.id);
            g.annotators.push_back(std::move(p));
        }
    }
}

inline RunConfig parse_run_config(const json& j) {
    check_keys(j,
               {"schema_version", "seed", "threads", "out_dir", "experiment", "gen", "prep", "vit",
                "pretrain", "consensus", "fusion", "eval"},
               "top level");
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != 1)
        throw ConfigError("config: unsupported schema_version (expected 1)");
    RunConfig c;
    get_if(j, "seed", c.seed);
    get_if(j, "threads", c.threads);
    std::string out;
    get_if(j, "out_dir", out);
    if (!out.empty()) c.out_dir = out;
    get_if(j, "experiment", c.experiment);
    if (j.contains("gen")) parse_gen(j.at("gen"), c.gen);
    if (j.contains("prep")) {
        const auto& p = j.at("prep");
        check_keys(p, {"target_spacing", "clahe_tiles", "clahe_clip", "clahe_bins", "crop_target"},
                   "prep");
        get_if(p, "target_spacing", c.prep.target_spacing);
        get_if(p, "clahe_tiles", c.prep.clahe_tiles);
        get_if(p, "clahe_clip", c.prep.clahe_clip);
        get_if(p, "clahe_bins", c.prep.clahe_bins);
        get_if(p, "crop_target", c.prep.crop_target);
    }
    if (j.contains("vit")) {
        const auto& v = j.at("vit");
        check_keys(v,
                   {"patch", "embed_dim", "blocks", "heads", "mlp_ratio", "decoder_dim",
                    "decoder_blocks", "decoder_heads", "mask_ratio"},
                   "vit");
        get_if(v, "patch", c.vit.patch);
        get_if(v, "embed_dim", c.vit.embed_dim);
        get_if(v, "blocks", c.vit.blocks);
        get_if(v, "heads", c.vit.heads);
        get_if(v, "mlp_ratio", c.vit.mlp_ratio);
        get_if(v, "decoder_dim", c.vit.decoder_dim);
        get_if(v, "decoder_blocks", c.vit.decoder_blocks);
        get_if(v, "decoder_heads", c.vit.decoder_heads);
        get_if(v, "mask_ratio", c.vit.mask_ratio);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        check_keys(p, {"epochs", "batch", "base_lr", "warmup_epochs", "weight_decay"}, "pretrain");
        get_if(p, "epochs", c.pretrain.epochs);
        get_if(p, "batch", c.pretrain.batch);
        get_if(p, "base_lr", c.pretrain.base_lr);
        get_if(p, "warmup_epochs", c.pretrain.warmup_epochs);
        get_if(p, "weight_decay", c.pretrain.weight_decay);
    }
    if (j.contains("consensus")) {
        const auto& p = j.at("consensus");
        check_keys(p, {"folds", "epochs", "batch", "base_lr", "warmup_epochs", "weight_decay"},
                   "consensus");
        get_if(p, "folds", c.consensus.folds);
        get_if(p, "epochs", c.consensus.epochs);
        get_if(p, "batch", c.consensus.batch);
        get_if(p, "base_lr", c.consensus.base_lr);
        get_if(p, "warmup_epochs", c.consensus.warmup_epochs);
        get_if(p, "weight_decay", c.consensus.weight_decay);
    }
    if (j.contains("fusion")) {
        const auto& p = j.at("fusion");
        check_keys(p,
                   {"epochs", "batch", "base_lr", "warmup_epochs", "weight_decay", "patience",
                    "restore_best", "freeze_encoders"},
                   "fusion");
        get_if(p, "epochs", c.fusion.epochs);
        get_if(p, "batch", c.fusion.batch);
        get_if(p, "base_lr", c.fusion.base_lr);
        get_if(p, "warmup_epochs", c.fusion.warmup_epochs);
        get_if(p, "weight_decay", c.fusion.weight_decay);
        get_if(p, "patience", c.fusion.patience);
        get_if(p, "restore_best", c.fusion.restore_best);
        get_if(p, "freeze_encoders", c.fusion.freeze_encoders);
    }
    if (j.contains("eval")) {
        const auto& p = j.at("eval");
        check_keys(p, {"n_bootstrap", "threshold"}, "eval");
        get_if(p, "n_bootstrap", c.eval.n_bootstrap);
        get_if(p, "threshold", c.eval.threshold);
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON (" + path.string() + "): " + e.what());
    }
    return parse_run_config(j);
}

inline json dump_gen(const GenConfig& g) {
    json a = json::array();
    for (const auto& p : g.annotators)
        a.push_back({{"sensitivity", p.sensitivity}, {"specificity", p.specificity}, {"id", p.id}});
    return {{"n_pretrain", g.n_pretrain},
            {"n_train", g.n_train},
            {"n_test", g.n_test},
            {"prevalence", g.prevalence},
            {"signal_amplitude", g.signal_amplitude},
            {"noise_sigma", g.noise_sigma},
            {"volume_extents", g.volume_extents},
            {"annotators", a},
            {"min_pretrain_ratio", g.min_pretrain_ratio}};
}

inline json dump_run_config(const RunConfig& c) {
    return {
        {"schema_version", 1},
        {"seed", c.seed},
        {"threads", c.threads},
        {"out_dir", c.out_dir.string()},
        {"experiment", c.experiment},
        {"gen", dump_gen(c.gen)},
        {"prep",
         {{"target_spacing", c.prep.target_spacing},
          {"clahe_tiles", c.prep.clahe_tiles},
          {"clahe_clip", c.prep.clahe_clip},
          {"clahe_bins", c.prep.clahe_bins},
          {"crop_target", c.prep.crop_target}}},
        {"vit",
         {{"patch", c.vit.patch},
          {"embed_dim", c.vit.embed_dim},
          {"blocks", c.vit.blocks},
          {"heads", c.vit.heads},
          {"mlp_ratio", c.vit.mlp_ratio},
          {"decoder_dim", c.vit.decoder_dim},
          {"decoder_blocks", c.vit.decoder_blocks},
          {"decoder_heads", c.vit.decoder_heads},
          {"mask_ratio", c.vit.mask_ratio}}},
        {"pretrain",
         {{"epochs", c.pretrain.epochs},
          {"batch", c.pretrain.batch},
          {"base_lr", c.pretrain.base_lr},
          {"warmup_epochs", c.pretrain.warmup_epochs},
          {"weight_decay", c.pretrain.weight_decay}}},
        {"consensus",
         {{"folds", c.consensus.folds},
          {"epochs", c.consensus.epochs},
          {"batch", c.consensus.batch},
          {"base_lr", c.consensus.base_lr},
          {"warmup_epochs", c.consensus.warmup_epochs},
          {"weight_decay", c.consensus.weight_decay}}},
        {"fusion",
         {{"epochs", c.fusion.epochs},
          {"batch", c.fusion.batch},
          {"base_lr", c.fusion.base_lr},
          {"warmup_epochs", c.fusion.warmup_epochs},
          {"weight_decay", c.fusion.weight_decay},
          {"patience", c.fusion.patience},
          {"restore_best", c.fusion.restore_best},
          {"freeze_encoders", c.fusion.freeze_encoders}}},
        {"eval", {{"n_bootstrap", c.eval.n_bootstrap}, {"threshold", c.eval.threshold}}}};
}

}  // namespace cfgjson

// ---------------------------------------------------------------------------
// Stage plumbing: every stage writes its artifacts plus a .stage.json holding
// a content hash of its inputs; a rerun with unchanged inputs is skipped.

struct StageStatus {
    std::string name;
    bool skipped = false;
    double seconds = 0.0;
};

namespace stagecache {

inline std::string tree_hash(const DatasetManifest& m, const std::filesystem::path& manifest_path) {
    std::uint64_t h = fnv1a64(read_file_bytes(manifest_path));
    for (const auto& r : m.records) {
        for (const std::string& p : {r.t1_path, r.t2_path}) {
            if (p.empty()) continue;
            h = fnv1a64(read_file_bytes(m.resolve(p)), h);
            h = fnv1a64(read_file_bytes(m.resolve(p + ".json")), h);
        }
    }
    return hex64(h);
}

inline bool fresh(const std::filesystem::path& stage_dir, const std::string& input_hash) {
    const auto marker = stage_dir / ".stage.json";
    if (!std::filesystem::exists(marker)) return false;
    try {
        nlohmann::json j = nlohmann::json::parse(read_file_bytes(marker));
        return j.value("input_hash", "") == input_hash;
    } catch (...) {
        return false;
    }
}

inline void commit(const std::filesystem::path& stage_dir, const std::string& stage,
                   const std::string& input_hash) {
    nlohmann::json j = {{"stage", stage}, {"input_hash", input_hash}};
    write_file_bytes(stage_dir / ".stage.json", j.dump(2) + "\n");
}

}  // namespace stagecache

namespace paths {
inline std::filesystem::path data_dir(const RunConfig& c) { return c.out_dir / "data"; }
inline std::filesystem::path prep_dir(const RunConfig& c) { return c.out_dir / "prep"; }
inline std::filesystem::path pretrain_dir(const RunConfig& c) { return c.out_dir / "pretrain"; }
inline std::filesystem::path consensus_dir(const RunConfig& c) { return c.out_dir / "consensus"; }
inline std::filesystem::path train_dir(const RunConfig& c) { return c.out_dir / "train"; }
inline std::filesystem::path eval_dir(const RunConfig& c) { return c.out_dir / "eval"; }
inline std::filesystem::path ablate_dir(const RunConfig& c) { return c.out_dir / "ablate"; }
}  // namespace paths

// --- gen-data ---------------------------------------------------------------

inline StageStatus stage_gen(const RunConfig& cfg) {
    StageStatus st{"gen-data"};
    const auto t0 = std::chrono::steady_clock::now();
    GenConfig g = cfg.gen;
    g.seed = cfg.seed;
    const std::string input_hash =
        hex64(fnv1a64(cfgjson::dump_gen(g).dump() + "|seed=" + std::to_string(cfg.seed)));
    const auto dir = paths::data_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);
    DatasetManifest labeled = gen_dataset(g, dir, cfg.threads);
    DatasetManifest pre = gen_pretrain(g, dir, cfg.threads);
    // merge into one manifest
    DatasetManifest all;
    all.set_base_dir(dir);
    for (std::size_t i = 0; i < labeled.records.size(); ++i) {
        all.records.push_back(labeled.records[i]);
        all.set_surgical(all.records.size() - 1,
                         labeled.has_surgical(i)
                             ? std::optional<int>(synth::draw_latent(g, labeled.records[i].case_id))
                             : std::nullopt);
    }
    for (std::size_t i = 0; i < pre.records.size(); ++i) {
        all.records.push_back(pre.records[i]);
        all.set_surgical(all.records.size() - 1, std::nullopt);
    }
    all.save(dir / "manifest.json");
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- prep -------------------------------------------------------------------

inline StageStatus stage_prep(const RunConfig& cfg) {
    StageStatus st{"prep"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto data_manifest_path = paths::data_dir(cfg) / "manifest.json";
    DatasetManifest src = DatasetManifest::load(data_manifest_path);
    nlohmann::json prep_json = cfgjson::dump_run_config(cfg).at("prep");
    const std::string input_hash = hex64(
        fnv1a64(prep_json.dump() + "|" + stagecache::tree_hash(src, data_manifest_path)));
    const auto dir = paths::prep_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir / "vols");
    DatasetManifest out = src;  // copies records and surgical labels
    out.set_base_dir(dir);
    parallel_for(src.records.size(), cfg.threads, [&](std::size_t i) {
        const auto& r = src.records[i];
        auto& o = out.records[i];
        for (auto path_field : {&ManifestRecord::t1_path, &ManifestRecord::t2_path}) {
            const std::string& rel = r.*path_field;
            if (rel.empty()) continue;
            Volume v = load_volume(src.resolve(rel));
            v.center = r.center_voxel;
            const Volume processed = prep_volume(v, cfg.prep);
            save_volume(processed, dir / rel);
            o.center_voxel = processed.center;
        }
    });
    out.save(dir / "manifest.json");
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- pretrain ---------------------------------------------------------------

inline StageStatus stage_pretrain(const RunConfig& cfg) {
    StageStatus st{"pretrain"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto prep_manifest_path = paths::prep_dir(cfg) / "manifest.json";
    DatasetManifest prep = DatasetManifest::load(prep_manifest_path);
    const nlohmann::json c = cfgjson::dump_run_config(cfg);
    const std::string input_hash = hex64(fnv1a64(
        c.at("pretrain").dump() + c.at("vit").dump() + "|seed=" + std::to_string(cfg.seed) + "|" +
        stagecache::tree_hash(prep, prep_manifest_path)));
    const auto dir = paths::pretrain_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);
    PretrainConfig pc = cfg.pretrain;
    pc.vit = cfg.vit_config();
    pc.seed = cfg.seed;
    PretrainResult res = pretrain_mae<float>(prep, pc);
    res.encoder.save(dir / "phi.ckpt");
    std::ofstream log(dir / "log.jsonl", std::ios::trunc);
    for (const auto& e : res.log)
        log << nlohmann::json({{"epoch", e.epoch}, {"masked_mse", e.masked_mse}, {"lr", e.lr}}).dump()
            << '\n';
    log.close();
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- shared sample loading ----------------------------------------------------

inline CaseSample<float> load_case_sample(const DatasetManifest& m, std::size_t i,
                                          const ViTConfig& vit, bool need_t1, bool need_t2) {
    const auto& r = m.records[i];
    CaseSample<float> s;
    s.case_id = r.case_id;
    if (need_t1) {
        if (r.t1_path.empty()) throw DataError("case " + std::to_string(r.case_id) + " has no T1 volume");
        s.t1_tokens = patchify<float>(load_volume(m.resolve(r.t1_path)), vit);
    }
    if (need_t2) {
        if (r.t2_path.empty()) throw DataError("case " + std::to_string(r.case_id) + " has no T2 volume");
        s.t2_tokens = patchify<float>(load_volume(m.resolve(r.t2_path)), vit);
    }
    if (r.rater_labels) s.rater_bits = *r.rater_labels;
    return s;
}

// --- consensus ---------------------------------------------------------------

inline StageStatus stage_consensus(const RunConfig& cfg) {
    StageStatus st{"consensus"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto prep_manifest_path = paths::prep_dir(cfg) / "manifest.json";
    DatasetManifest prep = DatasetManifest::load(prep_manifest_path);
    const auto phi_path = paths::pretrain_dir(cfg) / "phi.ckpt";
    if (!std::filesystem::exists(phi_path))
        throw DataError("consensus: missing encoder checkpoint " + phi_path.string());
    const nlohmann::json c = cfgjson::dump_run_config(cfg);
    const std::string input_hash = hex64(fnv1a64(
        c.at("consensus").dump() + c.at("vit").dump() + "|seed=" + std::to_string(cfg.seed) + "|" +
        stagecache::tree_hash(prep, prep_manifest_path) + "|" + hash_file(phi_path)));
    const auto dir = paths::consensus_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);

    const Checkpoint phi = Checkpoint::load(phi_path);
    const ViTConfig vit = cfg.vit_config();
    std::vector<std::size_t> labeled = prep.split_indices(Split::train);
    for (std::size_t i : prep.split_indices(Split::val)) labeled.push_back(i);
    std::sort(labeled.begin(), labeled.end());
    if (labeled.empty()) throw DataError("consensus: manifest has no labeled training data");

    std::vector<CaseSample<float>> samples;
    RaterMatrix raters;
    for (std::size_t i : labeled) {
        if (!prep.records[i].rater_labels)
            throw DataError("consensus: case " + std::to_string(prep.records[i].case_id) +
                            " has no rater labels");
        samples.push_back(load_case_sample(prep, i, vit, true, true));
        raters.labels.push_back(*prep.records[i].rater_labels);
    }

    const std::vector<int> mv = majority_vote(raters);
    ConsensusConfig cc = cfg.consensus;
    cc.seed = cfg.seed;
    const auto probs = train_consensus_classifier<float>(samples, mv, vit, cc, &phi, cfg.threads);
    const ConsensusReport rep = crowdlab_consensus(raters, probs);

    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["pseudo_labels"] = rep.pseudo_labels;
    j["ensemble_probs"] = rep.ensemble_probs;
    j["rater_weights"] = rep.rater_weights;
    j["model_weight"] = rep.model_weight;
    j["rater_quality"] = rep.rater_quality;
    j["model_quality"] = rep.model_quality;
    j["baseline_agreement"] = rep.baseline_agreement;
    j["pairwise_agreement"] = rep.pairwise_agreement;
    j["fallback_majority_vote"] = rep.fallback_majority_vote;
    nlohmann::ordered_json prov = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < samples.size(); ++k)
        prov.push_back({{"case_id", samples[k].case_id},
                        {"rater_labels", raters.labels[k]},
                        {"model_prob", probs[k][1]},
                        {"pseudo_label", rep.pseudo_labels[k]}});
    j["samples"] = prov;
    write_file_bytes(dir / "consensus.json", j.dump(1) + "\n");
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

inline std::map<std::int64_t, int> load_pseudo_labels(const std::filesystem::path& consensus_json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(consensus_json));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("consensus report is not valid JSON (" + consensus_json.string() +
                          "): " + e.what());
    }
    std::map<std::int64_t, int> out;
    for (const auto& s : j.at("samples"))
        out[s.at("case_id").get<std::int64_t>()] = s.at("pseudo_label").get<int>();
    return out;
}

// --- train -------------------------------------------------------------------

inline StageStatus stage_train(const RunConfig& cfg) {
    StageStatus st{"train"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto prep_manifest_path = paths::prep_dir(cfg) / "manifest.json";
    DatasetManifest prep = DatasetManifest::load(prep_manifest_path);
    const auto phi_path = paths::pretrain_dir(cfg) / "phi.ckpt";
    const auto consensus_path = paths::consensus_dir(cfg) / "consensus.json";
    for (const auto& p : {phi_path, consensus_path})
        if (!std::filesystem::exists(p)) throw DataError("train: missing input artifact " + p.string());
    const nlohmann::json c = cfgjson::dump_run_config(cfg);
    const std::string input_hash = hex64(fnv1a64(
        c.at("fusion").dump() + c.at("vit").dump() + "|seed=" + std::to_string(cfg.seed) + "|" +
        stagecache::tree_hash(prep, prep_manifest_path) + "|" + hash_file(phi_path) + "|" +
        hash_file(consensus_path)));
    const auto dir = paths::train_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);

    const Checkpoint phi = Checkpoint::load(phi_path);
    const ViTConfig vit = cfg.vit_config();
    const auto pseudo = load_pseudo_labels(consensus_path);

    const auto collect = [&](Split split) {
        std::vector<CaseSample<float>> out;
        for (std::size_t i : prep.split_indices(split)) {
            CaseSample<float> s = load_case_sample(prep, i, vit, true, true);
            const auto it = pseudo.find(s.case_id);
            if (it == pseudo.end())
                throw DataError("train: no pseudo label for case " + std::to_string(s.case_id));
            s.label = it->second;
            out.push_back(std::move(s));
        }
        return out;
    };
    const auto train_samples = collect(Split::train);
    const auto val_samples = collect(Split::val);
    if (train_samples.empty()) throw DataError("train: empty train split");
    const std::size_t n_raters = train_samples.front().rater_bits.size();

    FusionTrainConfig fc = cfg.fusion;
    fc.seed = cfg.seed;
    AblationSpec full;
    FusionModel<float> model = FusionModel<float>::build(vit, full, n_raters, Rng(cfg.seed), &phi);
    const auto log_entries = train_fusion(model, train_samples, val_samples, fc);

    to_checkpoint(model.params).save(dir / "fusion.ckpt");
    std::ofstream log(dir / "log.jsonl", std::ios::trunc);
    for (const auto& e : log_entries) {
        nlohmann::json le = {{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}};
        if (std::isfinite(e.val_accuracy)) le["val_accuracy"] = e.val_accuracy;
        log << le.dump() << '\n';
    }
    log.close();
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- evaluate ------------------------------------------------------------------

struct TestScores {
    std::vector<double> scores;  // positive-class probabilities, ordered by case_id
    std::vector<int> labels;     // surgical ground truth
};

inline TestScores score_test_split(const RunConfig& cfg, const FusionModel<float>& model,
                                   DatasetManifest& prep) {
    auto test_idx = prep.split_indices(Split::test);
    if (test_idx.empty()) throw DataError("evaluate: manifest has no test split");
    std::sort(test_idx.begin(), test_idx.end(), [&](std::size_t a, std::size_t b) {
        return prep.records[a].case_id < prep.records[b].case_id;
    });
    const ViTConfig vit = cfg.vit_config();
    TestScores out;
    out.scores.resize(test_idx.size());
    out.labels.resize(test_idx.size());
    std::vector<CaseSample<float>> samples(test_idx.size());
    parallel_for(test_idx.size(), cfg.threads, [&](std::size_t k) {
        samples[k] = load_case_sample(prep, test_idx[k], vit, model.spec.use_t1, model.spec.use_t2);
        out.scores[k] = model.predict_p_pos(samples[k].t1_tokens, samples[k].t2_tokens,
                                            samples[k].rater_bits);
    });
    for (std::size_t k = 0; k < test_idx.size(); ++k)
        out.labels[k] = prep.surgical_label(test_idx[k]);
    return out;
}

inline FusionModel<float> load_fusion_model(const RunConfig& cfg, const AblationSpec& spec,
                                            std::size_t n_raters,
                                            const std::filesystem::path& ckpt_path) {
    FusionModel<float> model =
        FusionModel<float>::build(cfg.vit_config(), spec, n_raters, Rng(cfg.seed), nullptr);
    load_from_checkpoint(model.params, Checkpoint::load(ckpt_path));
    return model;
}

inline StageStatus stage_evaluate(const RunConfig& cfg) {
    StageStatus st{"evaluate"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto prep_manifest_path = paths::prep_dir(cfg) / "manifest.json";
    DatasetManifest prep = DatasetManifest::load(prep_manifest_path);
    const auto ckpt_path = paths::train_dir(cfg) / "fusion.ckpt";
    if (!std::filesystem::exists(ckpt_path))
        throw DataError("evaluate: missing fusion checkpoint " + ckpt_path.string());
    const nlohmann::json c = cfgjson::dump_run_config(cfg);
    const std::string input_hash = hex64(fnv1a64(
        c.at("eval").dump() + c.at("vit").dump() + "|seed=" + std::to_string(cfg.seed) + "|" +
        stagecache::tree_hash(prep, prep_manifest_path) + "|" + hash_file(ckpt_path)));
    const auto dir = paths::eval_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);

    const auto test_idx = prep.split_indices(Split::test);
    if (test_idx.empty()) throw DataError("evaluate: manifest has no test split");
    std::size_t n_raters = 0;
    for (std::size_t i : test_idx)
        if (prep.records[i].rater_labels) n_raters = prep.records[i].rater_labels->size();
    AblationSpec full;
    const FusionModel<float> model = load_fusion_model(cfg, full, n_raters, ckpt_path);

    prep.unlock_surgical();
    const TestScores ts = score_test_split(cfg, model, prep);
    const MetricsReport rep = evaluate_scores(ts.scores, ts.labels, cfg.eval.n_bootstrap, cfg.seed,
                                              cfg.threads, cfg.eval.threshold);

    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["accuracy"] = rep.accuracy;
    j["accuracy_std"] = rep.accuracy_std;
    j["auroc"] = rep.auroc;
    j["auroc_std"] = rep.auroc_std;
    j["n_bootstrap"] = rep.n_bootstrap;
    j["seed"] = rep.seed;
    j["roc_points"] = rep.roc_points;
    write_file_bytes(dir / "metrics.json", j.dump(1) + "\n");

    std::string csv = "fpr,tpr\n";
    char line[64];
    for (const auto& p : rep.roc_points) {
        std::snprintf(line, sizeof(line), "%.6f,%.6f\n", p[0], p[1]);
        csv += line;
    }
    write_file_bytes(dir / "roc.csv", csv);
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- ablate --------------------------------------------------------------------

inline std::vector<AblationSpec> ablation_grid(std::size_t n_raters) {
    std::vector<AblationSpec> grid;
    AblationSpec wo;
    wo.use_raters = false;
    grid.push_back(wo);
    for (std::size_t r = 0; r < n_raters; ++r) {
        AblationSpec s;
        s.rater_subset = {r};
        grid.push_back(s);
    }
    for (std::size_t a = 0; a < n_raters; ++a)
        for (std::size_t b = a + 1; b < n_raters; ++b) {
            AblationSpec s;
            s.rater_subset = {a, b};
            grid.push_back(s);
        }
    AblationSpec t1;
    t1.use_t2 = false;
    grid.push_back(t1);
    AblationSpec t2;
    t2.use_t1 = false;
    grid.push_back(t2);
    return grid;  // the full model row comes from the base run
}

inline StageStatus stage_ablate(const RunConfig& cfg) {
    StageStatus st{"ablate"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto prep_manifest_path = paths::prep_dir(cfg) / "manifest.json";
    const auto phi_path = paths::pretrain_dir(cfg) / "phi.ckpt";
    const auto consensus_path = paths::consensus_dir(cfg) / "consensus.json";
    const auto metrics_path = paths::eval_dir(cfg) / "metrics.json";
    for (const auto& p : {prep_manifest_path, phi_path, consensus_path, metrics_path})
        if (!std::filesystem::exists(p))
            throw DataError("ablate: missing base pipeline artifact " + p.string());
    DatasetManifest prep = DatasetManifest::load(prep_manifest_path);
    const nlohmann::json c = cfgjson::dump_run_config(cfg);
    const std::string input_hash = hex64(fnv1a64(
        c.at("fusion").dump() + c.at("vit").dump() + c.at("eval").dump() + "|seed=" +
        std::to_string(cfg.seed) + "|" + stagecache::tree_hash(prep, prep_manifest_path) + "|" +
        hash_file(phi_path) + "|" + hash_file(consensus_path) + "|" + hash_file(metrics_path)));
    const auto dir = paths::ablate_dir(cfg);
    if (stagecache::fresh(dir, input_hash)) {
        st.skipped = true;
        return st;
    }
    std::filesystem::create_directories(dir);

    const Checkpoint phi = Checkpoint::load(phi_path);
    const ViTConfig vit = cfg.vit_config();
    const auto pseudo = load_pseudo_labels(consensus_path);
    const auto collect = [&](Split split) {
        std::vector<CaseSample<float>> out;
        for (std::size_t i : prep.split_indices(split)) {
            CaseSample<float> s = load_case_sample(prep, i, vit, true, true);
            const auto it = pseudo.find(s.case_id);
            if (it == pseudo.end())
                throw DataError("ablate: no pseudo label for case " + std::to_string(s.case_id));
            s.label = it->second;
            out.push_back(std::move(s));
        }
        return out;
    };
    const auto train_samples = collect(Split::train);
    const auto val_samples = collect(Split::val);
    const std::size_t n_raters = train_samples.front().rater_bits.size();

    auto test_idx = prep.split_indices(Split::test);
    std::sort(test_idx.begin(), test_idx.end(), [&](std::size_t a, std::size_t b) {
        return prep.records[a].case_id < prep.records[b].case_id;
    });
    std::vector<CaseSample<float>> test_samples;
    for (std::size_t i : test_idx) test_samples.push_back(load_case_sample(prep, i, vit, true, true));
    prep.unlock_surgical();
    std::vector<int> test_labels;
    for (std::size_t i : test_idx) test_labels.push_back(prep.surgical_label(i));

    const auto grid = ablation_grid(n_raters);
    struct Row {
        std::string name;
        double accuracy, auroc;
    };
    std::vector<Row> rows(grid.size());
    parallel_for(grid.size(), cfg.threads, [&](std::size_t v) {
        const AblationSpec& spec = grid[v];
        FusionModel<float> model =
            FusionModel<float>::build(vit, spec, n_raters, Rng(cfg.seed).derive(stream::kVariant, v), &phi);
        FusionTrainConfig fc = cfg.fusion;
        fc.seed = Rng(cfg.seed).derive(stream::kVariant, v).seed();
        train_fusion(model, train_samples, val_samples, fc);
        std::vector<double> scores(test_samples.size());
        for (std::size_t k = 0; k < test_samples.size(); ++k)
            scores[k] = model.predict_p_pos(test_samples[k].t1_tokens, test_samples[k].t2_tokens,
                                            test_samples[k].rater_bits);
        rows[v] = {spec.name(), accuracy(threshold_preds(scores, cfg.eval.threshold), test_labels),
                   auroc(scores, test_labels)};
    });

    const nlohmann::json base = nlohmann::json::parse(read_file_bytes(metrics_path));
    std::string csv = "model,accuracy,auroc\n";
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%s,%.6f,%.6f\n", r.name.c_str(), r.accuracy, r.auroc);
        csv += line;
    }
    std::snprintf(line, sizeof(line), "haicomm,%.6f,%.6f\n", base.at("accuracy").get<double>(),
                  base.at("auroc").get<double>());
    csv += line;
    write_file_bytes(dir / "ablations.csv", csv);
    stagecache::commit(dir, st.name, input_hash);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

// --- pipeline --------------------------------------------------------------------

struct PipelineResult {
    std::vector<StageStatus> stages;
    double total_seconds = 0.0;
};

namespace detail_pipeline {

template <typename Fn>
StageStatus run_stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const ShapeError& e) {
        throw ShapeError("stage " + name + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError("stage " + name + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + name + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError("stage " + name + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError("stage " + name + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError("stage " + name + ": " + e.what());
    }
}

}  // namespace detail_pipeline

// gen -> prep -> pretrain -> consensus -> train -> evaluate -> ablate, with
// per-stage skip on unchanged inputs. Failures halt the chain, name the stage
// and leave partial artifacts in place.
inline PipelineResult run_pipeline(const RunConfig& cfg, bool with_ablations = true) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PipelineResult res;
    res.stages.push_back(detail_pipeline::run_stage("gen-data", [&] { return stage_gen(cfg); }));
    res.stages.push_back(detail_pipeline::run_stage("prep", [&] { return stage_prep(cfg); }));
    res.stages.push_back(detail_pipeline::run_stage("pretrain", [&] { return stage_pretrain(cfg); }));
    res.stages.push_back(detail_pipeline::run_stage("consensus", [&] { return stage_consensus(cfg); }));
    res.stages.push_back(detail_pipeline::run_stage("train", [&] { return stage_train(cfg); }));
    res.stages.push_back(detail_pipeline::run_stage("evaluate", [&] { return stage_evaluate(cfg); }));
    if (with_ablations)
        res.stages.push_back(detail_pipeline::run_stage("ablate", [&] { return stage_ablate(cfg); }));
    res.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

inline StageStatus run_ablations(const RunConfig& cfg) {
    return detail_pipeline::run_stage("ablate", [&] { return stage_ablate(cfg); });
}

}  // namespace haicomm
