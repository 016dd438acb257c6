#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mqvtg/analysis.hpp"
#include "mqvtg/data.hpp"
#include "mqvtg/parallel.hpp"
#include "mqvtg/trainer.hpp"

namespace mqvtg {

namespace detail {

namespace fs = std::filesystem;

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return j;
}

inline void write_text(const fs::path& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

// Strict overlay for dataset-generation specs, mirroring apply_config_json.
inline void apply_spec_json(SyntheticSpec& spec, const nlohmann::json& j) {
    expect_keys(j,
                {"num_videos", "T", "P", "d", "num_prototypes", "moments_min", "moments_max",
                 "noise_sigma", "foreground_similarity", "seed", "clip_len"},
                "spec");
    if (j.contains("num_videos")) spec.num_videos = j["num_videos"].get<std::size_t>();
    if (j.contains("T")) spec.T = j["T"].get<std::size_t>();
    if (j.contains("P")) spec.P = j["P"].get<std::size_t>();
    if (j.contains("d")) spec.d = j["d"].get<std::size_t>();
    if (j.contains("num_prototypes")) spec.num_prototypes = j["num_prototypes"].get<std::size_t>();
    if (j.contains("moments_min")) spec.moments_min = j["moments_min"].get<std::size_t>();
    if (j.contains("moments_max")) spec.moments_max = j["moments_max"].get<std::size_t>();
    if (j.contains("noise_sigma")) spec.noise_sigma = j["noise_sigma"].get<double>();
    if (j.contains("foreground_similarity"))
        spec.foreground_similarity = j["foreground_similarity"].get<double>();
    if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("clip_len")) spec.clip_len = j["clip_len"].get<double>();
}

// Every command writes its manifest before doing any heavy work, so a crashed
// or interrupted run still leaves a record of what was attempted.
inline void write_manifest(const fs::path& out_dir, const std::string& command,
                           const std::string& config_path, const nlohmann::json& resolved,
                           const std::vector<std::uint64_t>& seeds,
                           const std::vector<std::string>& artifacts) {
    nlohmann::json art = nlohmann::json::object();
    for (const auto& a : artifacts) art[a.substr(0, a.find('.'))] = a;
    nlohmann::json m = {{"command", command},
                        {"config_path", config_path},
                        {"resolved_config", resolved},
                        {"seeds", seeds},
                        {"out_dir", out_dir.string()},
                        {"artifacts", art}};
    write_text(out_dir / "manifest.json", m.dump(2) + "\n");
}

inline TrainConfig resolve_train_config(const std::string& config_path,
                                        const std::optional<std::uint64_t>& seed_flag,
                                        const std::optional<std::size_t>& epochs_flag) {
    TrainConfig cfg;
    if (!config_path.empty()) apply_config_json(cfg, read_json_file(config_path));
    if (seed_flag) cfg.seed = *seed_flag;      // flags beat the file
    if (epochs_flag) cfg.epochs = *epochs_flag;
    cfg.validate();
    return cfg;
}

inline const VideoSample& find_video(const std::vector<VideoSample>& split,
                                     const std::string& vid) {
    for (const auto& v : split)
        if (v.vid == vid) return v;
    throw std::runtime_error("video '" + vid + "' is not in the validation split");
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    TrainConfig cfg;
};

inline std::vector<AblationVariant> ablation_variants(const std::string& axis,
                                                      const TrainConfig& base) {
    std::vector<AblationVariant> out;
    auto push = [&](const std::string& name, auto mutate) {
        TrainConfig c = base;
        mutate(c);
        out.push_back({name, std::move(c)});
    };
    if (axis == "components") {
        // Stepwise build-up: no quantization, quantization after the encoder
        // (hard replacement), soft quantization, then the full codebook
        // treatment (prior init + joint projection).
        push("baseline", [](TrainConfig& c) { c.model.placement = Placement::none; });
        push("quantize", [](TrainConfig& c) {
            c.model.placement = Placement::moment;
            c.model.fusion = Fusion::hard;
            c.codebook_init = CodebookInit::random;
            c.projection = ProjectionMode::basic;
        });
        push("quantize-soft", [](TrainConfig& c) {
            c.model.placement = Placement::moment;
            c.model.fusion = Fusion::soft;
            c.codebook_init = CodebookInit::random;
            c.projection = ProjectionMode::basic;
        });
        push("full", [](TrainConfig& c) {
            c.model.placement = Placement::moment;
            c.model.fusion = Fusion::soft;
            c.codebook_init = CodebookInit::kmeans;
            c.projection = ProjectionMode::projected;
        });
    } else if (axis == "placement") {
        // Image and clip placement replace features before/inside the encoder;
        // both use hard fusion (the discrete path is the point of those
        // variants), while moment placement keeps the base fusion.
        push("placement=none", [](TrainConfig& c) { c.model.placement = Placement::none; });
        push("placement=image", [](TrainConfig& c) {
            c.model.placement = Placement::image;
            c.model.fusion = Fusion::hard;
        });
        push("placement=clip", [](TrainConfig& c) {
            c.model.placement = Placement::clip;
            c.model.fusion = Fusion::hard;
        });
        push("placement=moment",
             [](TrainConfig& c) { c.model.placement = Placement::moment; });
    } else if (axis == "fusion") {
        for (Fusion f : {Fusion::hard, Fusion::soft, Fusion::add, Fusion::concat})
            push("fusion=" + to_string(f), [f](TrainConfig& c) {
                c.model.placement = Placement::moment;
                c.model.fusion = f;
            });
    } else if (axis == "init") {
        for (CodebookInit i :
             {CodebookInit::random, CodebookInit::selection, CodebookInit::kmeans})
            push("init=" + to_string(i), [i](TrainConfig& c) {
                c.model.placement = Placement::moment;
                c.codebook_init = i;
            });
    } else if (axis == "projection") {
        for (ProjectionMode p :
             {ProjectionMode::frozen, ProjectionMode::basic, ProjectionMode::projected})
            push("projection=" + to_string(p), [p](TrainConfig& c) {
                c.model.placement = Placement::moment;
                c.projection = p;
            });
    } else if (axis == "size") {
        for (std::size_t K : {std::size_t{512}, std::size_t{1024}, std::size_t{2048}})
            push("K=" + std::to_string(K), [K](TrainConfig& c) {
                c.model.placement = Placement::moment;
                c.model.K = K;
            });
    } else {
        throw std::runtime_error(
            "unknown ablation axis '" + axis +
            "' (expected components|placement|fusion|init|projection|size)");
    }
    return out;
}

inline std::vector<double> metric_row(const MetricsReport& r) {
    return {r.r1_03, r.r1_05, r.r1_07,  r.map_05,   r.map_075,
            r.map_avg, r.miou, r.hd_map, r.hit_at_1, r.codebook_utilization};
}

constexpr const char* kMetricHeader =
    "r1@0.3,r1@0.5,r1@0.7,map@0.5,map@0.75,map_avg,miou,hd_map,hit@1,codebook_utilization";

inline void append_csv_row(std::string& csv, const std::string& variant,
                           const std::string& seed_label, const std::vector<double>& values) {
    csv += variant;
    csv += ',';
    csv += seed_label;
    for (double v : values) {
        csv += ',';
        csv += format_double(v);
    }
    csv += '\n';
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

inline int cmd_gen_data(const std::string& spec_path, const std::string& out_dir,
                        std::optional<std::uint64_t> seed_flag) {
    SyntheticSpec spec;
    if (!spec_path.empty()) apply_spec_json(spec, read_json_file(spec_path));
    if (seed_flag) spec.seed = *seed_flag;
    spec.validate();
    fs::create_directories(out_dir);
    write_manifest(out_dir, "gen-data", spec_path, spec.to_json(), {spec.seed},
                   {"train.jsonl", "val.jsonl", "features"});
    Dataset ds = generate_synthetic(spec);
    save_dataset(out_dir, ds);
    std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size()
              << " val videos to " << out_dir << "\n";
    return 0;
}

inline int cmd_train(const std::string& config_path, const std::string& data_dir,
                     const std::string& out_dir, std::optional<std::uint64_t> seed_flag,
                     std::optional<std::size_t> epochs_flag) {
    TrainConfig cfg = resolve_train_config(config_path, seed_flag, epochs_flag);
    fs::create_directories(out_dir);
    write_manifest(out_dir, "train", config_path, cfg.to_json(), {cfg.seed},
                   {"log.jsonl", "checkpoint.mqck", "snapshots.mqck"});
    Dataset ds = load_dataset(data_dir);
    std::ofstream log(fs::path(out_dir) / "log.jsonl");
    if (!log) throw std::runtime_error("cannot open log.jsonl under " + out_dir);
    TrainResult res = train(cfg, ds, &log);
    save_checkpoint((fs::path(out_dir) / "checkpoint.mqck").string(),
                    make_checkpoint(cfg, res.best_params, res.best_optim, res.best_epoch));
    save_snapshots((fs::path(out_dir) / "snapshots.mqck").string(), cfg, res.snapshots);
    std::cout << "best epoch " << res.best_epoch << " val map_avg "
              << format_double(res.best_val.map_avg) << "\n";
    return 0;
}

inline int cmd_eval(const std::string& config_path, const std::string& checkpoint_path,
                    const std::string& data_dir, const std::string& split,
                    const std::string& out_dir) {
    if (split != "val" && split != "train")
        throw std::runtime_error("--split must be 'val' or 'train', got '" + split + "'");
    TrainConfig cfg = resolve_train_config(config_path, std::nullopt, std::nullopt);
    fs::create_directories(out_dir);
    write_manifest(out_dir, "eval", config_path, cfg.to_json(), {cfg.seed}, {"metrics.json"});
    Model model = restore_model(load_checkpoint(checkpoint_path), cfg);
    Dataset ds = load_dataset(data_dir);
    EvalOutputs ev = evaluate(model, split == "val" ? ds.val : ds.train, cfg);
    write_text(fs::path(out_dir) / "metrics.json", ev.report.to_json().dump(2) + "\n");
    std::cout << "map_avg " << format_double(ev.report.map_avg) << " over " << split << "\n";
    return 0;
}

inline int cmd_ablate(const std::string& config_path, const std::string& data_dir,
                      const std::string& out_dir, const std::string& axis, std::size_t seeds,
                      std::optional<std::uint64_t> seed_flag,
                      std::optional<std::size_t> epochs_flag) {
    if (seeds == 0) throw std::runtime_error("--seeds must be >= 1");
    TrainConfig base = resolve_train_config(config_path, seed_flag, epochs_flag);
    std::vector<AblationVariant> variants = ablation_variants(axis, base);
    for (const auto& v : variants) v.cfg.validate();

    std::vector<std::uint64_t> seed_list(seeds);
    for (std::size_t i = 0; i < seeds; ++i) seed_list[i] = base.seed + i;

    nlohmann::json resolved = base.to_json();
    resolved["axis"] = axis;
    fs::create_directories(out_dir);
    write_manifest(out_dir, "ablate", config_path, resolved, seed_list, {"ablation.csv"});

    Dataset ds = load_dataset(data_dir);

    // One cell per (variant, seed). Cells are independent and fully seeded, so
    // they can run on parallel workers; the merge below walks the grid in a
    // fixed order either way.
    struct Cell {
        std::size_t variant;
        std::uint64_t seed;
        MetricsReport report;
    };
    std::vector<Cell> cells;
    for (std::size_t v = 0; v < variants.size(); ++v)
        for (std::uint64_t s : seed_list) cells.push_back({v, s, {}});
    parallel_for(cells.size(), [&](std::size_t i) {
        TrainConfig cfg = variants[cells[i].variant].cfg;
        cfg.seed = cells[i].seed;
        cells[i].report = train(cfg, ds).best_val;
    });

    std::string csv = std::string("variant,seed,") + kMetricHeader + "\n";
    for (std::size_t v = 0; v < variants.size(); ++v) {
        std::vector<std::vector<double>> rows;
        for (const auto& c : cells) {
            if (c.variant != v) continue;
            rows.push_back(metric_row(c.report));
            append_csv_row(csv, variants[v].name, std::to_string(c.seed), rows.back());
        }
        const std::size_t n = rows.size(), m = rows.front().size();
        std::vector<double> mean(m, 0.0), sd(m, 0.0);
        for (const auto& r : rows)
            for (std::size_t k = 0; k < m; ++k) mean[k] += r[k] / static_cast<double>(n);
        if (n > 1) {
            for (const auto& r : rows)
                for (std::size_t k = 0; k < m; ++k)
                    sd[k] += (r[k] - mean[k]) * (r[k] - mean[k]) / static_cast<double>(n - 1);
            for (std::size_t k = 0; k < m; ++k) sd[k] = std::sqrt(sd[k]);
        }
        append_csv_row(csv, variants[v].name, "mean", mean);
        append_csv_row(csv, variants[v].name, "std", sd);
    }
    write_text(fs::path(out_dir) / "ablation.csv", csv);
    std::cout << "wrote " << cells.size() << " cells over " << variants.size()
              << " variants to ablation.csv\n";
    return 0;
}

inline int cmd_analyze(const std::string& config_path, const std::string& checkpoint_path,
                       const std::string& snapshots_path, const std::string& data_dir,
                       std::string video_id, const std::string& out_dir) {
    TrainConfig cfg = resolve_train_config(config_path, std::nullopt, std::nullopt);
    fs::create_directories(out_dir);
    nlohmann::json resolved = cfg.to_json();
    resolved["video"] = video_id;
    write_manifest(out_dir, "analyze", config_path, resolved, {cfg.seed},
                   {"embedding.csv", "evolution.csv"});

    Dataset ds = load_dataset(data_dir);
    if (ds.val.empty()) throw std::runtime_error("dataset has no validation split to analyze");
    if (video_id.empty()) video_id = ds.val.front().vid;
    const VideoSample& video = find_video(ds.val, video_id);

    Model model = restore_model(load_checkpoint(checkpoint_path), cfg);
    NoGradGuard no_grad;
    ForwardResult r = forward_video(model, video);

    // Foreground/background clips of the chosen video, plus the codewords that
    // are effective anywhere on val, all in one joint 2-D projection.
    std::size_t n_fg = 0;
    for (double l : video.saliency_labels) n_fg += l > 0.0 ? 1 : 0;
    Tensor fg(n_fg, cfg.model.d), bg(video.T() - n_fg, cfg.model.d);
    std::size_t fi = 0, bi = 0;
    for (std::size_t t = 0; t < video.T(); ++t) {
        Tensor& dst = video.saliency_labels[t] > 0.0 ? fg : bg;
        std::size_t& row = video.saliency_labels[t] > 0.0 ? fi : bi;
        for (std::size_t c = 0; c < cfg.model.d; ++c) dst.at(row, c) = r.z_t->value.at(t, c);
        ++row;
    }
    Tensor codewords(0, cfg.model.d);
    if (cfg.model.placement != Placement::none) {
        std::vector<std::size_t> ids = effective_ids_on_split(model, ds.val);
        Tensor projected = project(model.codebook)->value;
        codewords = Tensor(ids.size(), cfg.model.d);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t c = 0; c < cfg.model.d; ++c)
                codewords.at(i, c) = projected.at(ids[i], c);
    }
    std::ostringstream embedding;
    write_embedding_csv(embedding, embedding_map(fg, bg, codewords));
    write_text(fs::path(out_dir) / "embedding.csv", embedding.str());

    std::ostringstream evolution;
    write_evolution_csv(evolution, evolution_report(load_snapshots(snapshots_path, cfg)));
    write_text(fs::path(out_dir) / "evolution.csv", evolution.str());
    std::cout << "analyzed video " << video_id << " (" << n_fg << " fg / "
              << (video.T() - n_fg) << " bg clips)\n";
    return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"moment-quantized video temporal grounding toolkit"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_spec, gd_out;
    std::optional<std::uint64_t> gd_seed;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--spec", gd_spec, "JSON spec file (defaults apply when omitted)");
    gen->add_option("--out", gd_out, "output directory")->required();
    gen->add_option("--seed", gd_seed, "override the spec seed");

    // train
    std::string tr_config, tr_data, tr_out;
    std::optional<std::uint64_t> tr_seed;
    std::optional<std::size_t> tr_epochs;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", tr_config, "JSON training config");
    tr->add_option("--data", tr_data, "dataset directory (from gen-data)")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--seed", tr_seed, "override the config seed");
    tr->add_option("--epochs", tr_epochs, "override the config epoch count");

    // eval
    std::string ev_config, ev_ck, ev_data, ev_out, ev_split = "val";
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--config", ev_config, "JSON training config (must match the checkpoint)");
    ev->add_option("--checkpoint", ev_ck, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "split to evaluate: val (default) or train");
    ev->add_option("--out", ev_out, "output directory")->required();

    // ablate
    std::string ab_config, ab_data, ab_out, ab_axis;
    std::size_t ab_seeds = 5;
    std::optional<std::uint64_t> ab_seed;
    std::optional<std::size_t> ab_epochs;
    auto* ab = app.add_subcommand("ablate", "run an ablation axis across seeds");
    ab->add_option("--config", ab_config, "JSON training config used as the base");
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--axis", ab_axis,
                   "one of components|placement|fusion|init|projection|size")
        ->required();
    ab->add_option("--seeds", ab_seeds, "number of seeds per variant (default 5)");
    ab->add_option("--seed", ab_seed, "override the base seed");
    ab->add_option("--epochs", ab_epochs, "override the config epoch count");

    // analyze
    std::string an_config, an_ck, an_snaps, an_data, an_video, an_out;
    auto* an = app.add_subcommand("analyze", "export embedding and evolution CSVs");
    an->add_option("--config", an_config, "JSON training config (must match the checkpoint)");
    an->add_option("--checkpoint", an_ck, "checkpoint file")->required();
    an->add_option("--snapshots", an_snaps, "snapshots file written by train")->required();
    an->add_option("--data", an_data, "dataset directory")->required();
    an->add_option("--video", an_video, "val video id to map (default: first val video)");
    an->add_option("--out", an_out, "output directory")->required();

    try {
        app.parse(argc, argv);
        if (*gen) return detail::cmd_gen_data(gd_spec, gd_out, gd_seed);
        if (*tr) return detail::cmd_train(tr_config, tr_data, tr_out, tr_seed, tr_epochs);
        if (*ev) return detail::cmd_eval(ev_config, ev_ck, ev_data, ev_split, ev_out);
        if (*ab)
            return detail::cmd_ablate(ab_config, ab_data, ab_out, ab_axis, ab_seeds, ab_seed,
                                      ab_epochs);
        if (*an)
            return detail::cmd_analyze(an_config, an_ck, an_snaps, an_data, an_video, an_out);
        return 2;  // unreachable: require_subcommand throws first
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace mqvtg
