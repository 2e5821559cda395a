// Command-line front end for the HAICOMM pipeline: synthetic data generation,
// volume preprocessing, MAE pretraining, multi-rater consensus, fusion
// training, evaluation and the ablation grid.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "haicomm/pipeline.hpp"

namespace {

using haicomm::RunConfig;

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<int> threads;
};

RunConfig resolve_config(const GlobalArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = haicomm::cfgjson::load_run_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out_dir) cfg.out_dir = *args.out_dir;
    if (args.threads) cfg.threads = *args.threads;
    cfg.validate();
    return cfg;
}

void print_stage(const haicomm::StageStatus& st) {
    if (st.skipped)
        std::printf("[%s] skipped (inputs unchanged)\n", st.name.c_str());
    else
        std::printf("[%s] done in %.1fs\n", st.name.c_str(), st.seconds);
    std::fflush(stdout);
}

void run_predict(const RunConfig& cfg, const std::string& split_name, const std::string& ckpt_arg,
                 const std::string& out_arg) {
    namespace fs = std::filesystem;
    const fs::path ckpt = ckpt_arg.empty() ? haicomm::paths::train_dir(cfg) / "fusion.ckpt"
                                           : fs::path(ckpt_arg);
    if (!fs::exists(ckpt)) throw haicomm::DataError("predict: missing checkpoint " + ckpt.string());
    haicomm::DatasetManifest prep =
        haicomm::DatasetManifest::load(haicomm::paths::prep_dir(cfg) / "manifest.json");
    const haicomm::Split split = haicomm::split_from_name(split_name);
    auto idx = prep.split_indices(split);
    if (idx.empty()) throw haicomm::DataError("predict: no records in split " + split_name);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return prep.records[a].case_id < prep.records[b].case_id;
    });
    std::size_t n_raters = 0;
    for (std::size_t i : idx)
        if (prep.records[i].rater_labels) n_raters = prep.records[i].rater_labels->size();
    if (n_raters == 0) throw haicomm::DataError("predict: records carry no rater labels");
    haicomm::AblationSpec full;
    const auto model = haicomm::load_fusion_model(cfg, full, n_raters, ckpt);
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (std::size_t i : idx) {
        const auto s = haicomm::load_case_sample(prep, i, cfg.vit_config(), true, true);
        out.push_back({{"case_id", s.case_id},
                       {"p_pos", model.predict_p_pos(s.t1_tokens, s.t2_tokens, s.rater_bits)}});
    }
    const fs::path out_path = out_arg.empty() ? cfg.out_dir / "predictions.json" : fs::path(out_arg);
    haicomm::write_file_bytes(out_path, out.dump(1) + "\n");
    std::printf("[predict] wrote %zu predictions to %s\n", out.size(), out_path.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HAICOMM: human-AI collaborative multi-modal multi-rater pipeline"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run configuration")->expected(1);
    std::uint64_t seed_val = 0;
    auto* seed_opt = app.add_option("--seed", seed_val, "global seed override");
    std::string out_val;
    auto* out_opt = app.add_option("--out", out_val, "output directory override");
    int threads_val = 0;
    auto* threads_opt = app.add_option("--threads", threads_val, "worker thread count");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic cohort");
    auto* prep = app.add_subcommand("prep", "preprocess volumes to network geometry");
    auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
    auto* consensus = app.add_subcommand("consensus", "multi-rater consensus labels");
    auto* train = app.add_subcommand("train", "train the fusion classifier");
    auto* evaluate = app.add_subcommand("evaluate", "test-set metrics and ROC curve");
    auto* ablate = app.add_subcommand("ablate", "train and score the ablation grid");
    auto* pipeline = app.add_subcommand("pipeline", "run every stage end to end");

    auto* predict = app.add_subcommand("predict", "per-case probabilities from a checkpoint");
    std::string predict_split = "test", predict_ckpt, predict_out;
    predict->add_option("--split", predict_split, "manifest split to score (default test)");
    predict->add_option("--ckpt", predict_ckpt, "fusion checkpoint path");
    predict->add_option("--output", predict_out, "output JSON path");

    // let global flags appear after the subcommand name
    for (auto* sub : {gen, prep, pretrain, consensus, train, evaluate, ablate, pipeline, predict})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*seed_opt) g.seed = seed_val;
        if (*out_opt) g.out_dir = out_val;
        if (*threads_opt) g.threads = threads_val;
        const RunConfig cfg = resolve_config(g);

        if (*gen) print_stage(haicomm::detail_pipeline::run_stage("gen-data", [&] { return haicomm::stage_gen(cfg); }));
        if (*prep) print_stage(haicomm::detail_pipeline::run_stage("prep", [&] { return haicomm::stage_prep(cfg); }));
        if (*pretrain) print_stage(haicomm::detail_pipeline::run_stage("pretrain", [&] { return haicomm::stage_pretrain(cfg); }));
        if (*consensus) print_stage(haicomm::detail_pipeline::run_stage("consensus", [&] { return haicomm::stage_consensus(cfg); }));
        if (*train) print_stage(haicomm::detail_pipeline::run_stage("train", [&] { return haicomm::stage_train(cfg); }));
        if (*evaluate) print_stage(haicomm::detail_pipeline::run_stage("evaluate", [&] { return haicomm::stage_evaluate(cfg); }));
        if (*ablate) print_stage(haicomm::run_ablations(cfg));
        if (*predict) run_predict(cfg, predict_split, predict_ckpt, predict_out);
        if (*pipeline) {
            const auto res = haicomm::run_pipeline(cfg, true);
            for (const auto& st : res.stages) print_stage(st);
            std::printf("[pipeline] total %.1fs, artifacts under %s\n", res.total_seconds,
                        cfg.out_dir.string().c_str());
        }
        return 0;
    } catch (const haicomm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const haicomm::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const haicomm::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
