#ifndef EMSS_CONFIG_HPP
#define EMSS_CONFIG_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "emss/data.hpp"
#include "emss/metrics.hpp"
#include "emss/train.hpp"

namespace emss {

enum class RunKind { pretrain, finetune, evaluate, synth_data, rf_report };

inline std::string to_string(RunKind k) {
    switch (k) {
        case RunKind::pretrain: return "pretrain";
        case RunKind::finetune: return "finetune";
        case RunKind::evaluate: return "evaluate";
        case RunKind::synth_data: return "synth-data";
        case RunKind::rf_report: return "rf-report";
    }
    return "?";
}

inline RunKind run_kind_from_string(const std::string& s) {
    if (s == "pretrain") return RunKind::pretrain;
    if (s == "finetune") return RunKind::finetune;
    if (s == "evaluate") return RunKind::evaluate;
    if (s == "synth-data") return RunKind::synth_data;
    if (s == "rf-report") return RunKind::rf_report;
    throw std::invalid_argument("unknown run kind: " + s);
}

struct DataConfig {
    std::string type = "synth";  // "synth" or "folder"
    SynthParams synth;
    std::filesystem::path root, manifest;
    std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
    std::optional<std::array<long, 3>> split_counts;
    uint64_t split_seed = 0;
};

struct EvalConfig {
    std::filesystem::path checkpoint_dir;
    std::vector<std::filesystem::path> checkpoints;
    MetricKind metric = MetricKind::dice;
    double threshold = 0.5;
};

/// Fully validated experiment description; `effective` is the echo of the
/// config with all defaults filled in.
struct ExperimentConfig {
    RunKind kind = RunKind::rf_report;
    std::filesystem::path out_dir = "out";
    uint64_t seed = 0;
    ModelSpec model;
    bool has_model = false;
    TrainHyper hyper;
    CorruptionPolicy corruption;
    AugmentPolicy augment;
    Task task = Task::segmentation;
    std::optional<std::filesystem::path> init_checkpoint;
    std::string subset_tag = "full";
    DataConfig data;
    EvalConfig eval;
    std::optional<std::string> rf_spec;  // rf-report single-spec filter
    nlohmann::json effective;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& path) {
    if (!j.is_object()) throw std::invalid_argument("config: expected object at " + path);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw std::invalid_argument("config: unknown key '" + path + it.key() + "'");
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T def) {
    return j.contains(key) ? j.at(key).get<T>() : def;
}

inline std::array<double, 2> range2(const nlohmann::json& j, const std::string& key,
                                    std::array<double, 2> def) {
    if (!j.contains(key)) return def;
    auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw std::invalid_argument("config: '" + key + "' must be [lo, hi]");
    return {v[0], v[1]};
}

}  // namespace detail

inline ExperimentConfig parse_config_json(const nlohmann::json& j) {
    detail::check_keys(j, {"kind", "out_dir", "seed", "model", "base_width", "hyper", "corruption",
                           "augment", "task", "init", "subset_tag", "data", "eval", "rf_spec",
                           "discriminator_width"},
                       "");
    ExperimentConfig c;
    c.kind = run_kind_from_string(j.at("kind").get<std::string>());
    c.out_dir = detail::get_or<std::string>(j, "out_dir", "out");
    c.seed = detail::get_or<uint64_t>(j, "seed", 0);
    if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());

    int base_width = detail::get_or<int>(j, "base_width", 16);
    if (j.contains("model")) {
        if (j.at("model").is_string())
            c.model = preset(j.at("model").get<std::string>(), base_width);
        else
            c.model = j.at("model").get<ModelSpec>();
        c.has_model = true;
    } else if (c.kind == RunKind::pretrain || c.kind == RunKind::finetune) {
        throw std::invalid_argument("config: '" + to_string(c.kind) + "' requires a 'model'");
    }

    // hyperparameter defaults per run kind / task
    c.hyper.seed = c.seed;
    bool regression_task = c.task == Task::denoise || c.task == Task::noise_bg_removal ||
                           c.task == Task::superres;
    if (c.kind == RunKind::pretrain) {
        c.hyper.epochs = 60;
        c.hyper.batch_size = 128;
        c.hyper.learning_rate = 2e-4;
        c.hyper.lambda_l1 = 100.0;
        c.hyper.adam_betas = {0.5, 0.999};
    } else if (c.kind == RunKind::finetune) {
        c.hyper.epochs = 60;
        c.hyper.batch_size = regression_task ? 64 : 16;
        c.hyper.learning_rate = 2e-4;
        c.hyper.adam_betas = {0.9, 0.999};
    }
    c.hyper.checkpoint_interval = 5;
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        detail::check_keys(h, {"epochs", "batch_size", "learning_rate", "lambda_l1", "adam_betas",
                               "checkpoint_interval", "subset_size", "seed"},
                           "hyper.");
        c.hyper.epochs = detail::get_or(h, "epochs", c.hyper.epochs);
        c.hyper.batch_size = detail::get_or(h, "batch_size", c.hyper.batch_size);
        c.hyper.learning_rate = detail::get_or(h, "learning_rate", c.hyper.learning_rate);
        c.hyper.lambda_l1 = detail::get_or(h, "lambda_l1", c.hyper.lambda_l1);
        c.hyper.checkpoint_interval = detail::get_or(h, "checkpoint_interval", c.hyper.checkpoint_interval);
        if (h.contains("subset_size")) c.hyper.subset_size = h.at("subset_size").get<int>();
        if (h.contains("seed")) c.hyper.seed = h.at("seed").get<uint64_t>();
        if (h.contains("adam_betas")) {
            auto b = h.at("adam_betas").get<std::vector<double>>();
            if (b.size() != 2) throw std::invalid_argument("config: adam_betas must have 2 entries");
            c.hyper.adam_betas = {b[0], b[1]};
        }
    }
    c.hyper.validate();

    if (j.contains("corruption")) {
        const auto& cj = j.at("corruption");
        detail::check_keys(cj, {"noise_sigma", "blur_sigma", "flip", "rotate"}, "corruption.");
        auto ns = detail::range2(cj, "noise_sigma", {c.corruption.noise_sigma_lo, c.corruption.noise_sigma_hi});
        auto bs = detail::range2(cj, "blur_sigma", {c.corruption.blur_sigma_lo, c.corruption.blur_sigma_hi});
        c.corruption.noise_sigma_lo = ns[0];
        c.corruption.noise_sigma_hi = ns[1];
        c.corruption.blur_sigma_lo = bs[0];
        c.corruption.blur_sigma_hi = bs[1];
        c.corruption.flip = detail::get_or(cj, "flip", false);
        c.corruption.rotate = detail::get_or(cj, "rotate", false);
    }
    c.corruption.validate();

    c.augment.crop_size = c.kind == RunKind::finetune ? (regression_task ? 256 : 448) : 0;
    if (j.contains("augment")) {
        const auto& aj = j.at("augment");
        detail::check_keys(aj, {"noise", "noise_sigma", "flip", "rotations", "resize_scale", "crop_size"},
                           "augment.");
        c.augment.noise = detail::get_or(aj, "noise", false);
        c.augment.noise_sigma = detail::get_or(aj, "noise_sigma", 0.05);
        c.augment.flip = detail::get_or(aj, "flip", true);
        c.augment.rotations = detail::get_or(aj, "rotations", std::vector<int>{});
        auto rs = detail::range2(aj, "resize_scale", {1.0, 1.0});
        c.augment.resize_lo = rs[0];
        c.augment.resize_hi = rs[1];
        c.augment.crop_size = detail::get_or(aj, "crop_size", c.augment.crop_size);
    }
    c.augment.validate();

    if (j.contains("init")) {
        const auto& ij = j.at("init");
        if (ij.is_string()) {
            if (ij.get<std::string>() != "random")
                throw std::invalid_argument("config: 'init' must be \"random\" or {\"checkpoint\": path}");
        } else {
            detail::check_keys(ij, {"checkpoint"}, "init.");
            c.init_checkpoint = ij.at("checkpoint").get<std::string>();
        }
    }
    c.subset_tag = detail::get_or<std::string>(j, "subset_tag", "full");

    if (j.contains("data")) {
        const auto& dj = j.at("data");
        detail::check_keys(dj, {"type", "synth", "root", "manifest", "split"}, "data.");
        c.data.type = detail::get_or<std::string>(dj, "type", "synth");
        if (c.data.type != "synth" && c.data.type != "folder")
            throw std::invalid_argument("config: data.type must be 'synth' or 'folder'");
        if (dj.contains("synth")) {
            const auto& sj = dj.at("synth");
            detail::check_keys(sj, {"count", "image_size", "spacing", "atom_sigma", "sharp_sigma",
                                    "particles", "radius", "noise_sigma", "scan_noise", "bg_amplitude"},
                               "data.synth.");
            auto& p = c.data.synth;
            p.count = detail::get_or(sj, "count", p.count);
            p.image_size = detail::get_or(sj, "image_size", p.image_size);
            auto sp = detail::range2(sj, "spacing", {p.spacing_lo, p.spacing_hi});
            p.spacing_lo = sp[0]; p.spacing_hi = sp[1];
            p.atom_sigma = detail::get_or(sj, "atom_sigma", p.atom_sigma);
            p.sharp_sigma = detail::get_or(sj, "sharp_sigma", p.sharp_sigma);
            if (sj.contains("particles")) {
                auto v = sj.at("particles").get<std::vector<int>>();
                if (v.size() != 2) throw std::invalid_argument("config: particles must be [lo, hi]");
                p.particles_lo = v[0]; p.particles_hi = v[1];
            }
            auto rr = detail::range2(sj, "radius", {p.radius_lo, p.radius_hi});
            p.radius_lo = rr[0]; p.radius_hi = rr[1];
            p.noise_sigma = detail::get_or(sj, "noise_sigma", p.noise_sigma);
            p.scan_noise = detail::get_or(sj, "scan_noise", p.scan_noise);
            p.bg_amplitude = detail::get_or(sj, "bg_amplitude", p.bg_amplitude);
            p.validate();
        }
        if (dj.contains("root")) c.data.root = dj.at("root").get<std::string>();
        if (dj.contains("manifest")) c.data.manifest = dj.at("manifest").get<std::string>();
        if (c.data.type == "folder" && c.data.root.empty())
            throw std::invalid_argument("config: data.type 'folder' requires data.root");
        if (dj.contains("split")) {
            const auto& spj = dj.at("split");
            detail::check_keys(spj, {"counts", "fractions", "seed"}, "data.split.");
            if (spj.contains("counts")) {
                auto v = spj.at("counts").get<std::vector<long>>();
                if (v.size() != 3) throw std::invalid_argument("config: split counts must be [train,val,test]");
                c.data.split_counts = {v[0], v[1], v[2]};
            }
            if (spj.contains("fractions")) {
                auto v = spj.at("fractions").get<std::vector<double>>();
                if (v.size() != 3) throw std::invalid_argument("config: split fractions must be [train,val,test]");
                c.data.split_fractions = {v[0], v[1], v[2]};
            }
            c.data.split_seed = detail::get_or<uint64_t>(spj, "seed", c.seed);
        } else {
            c.data.split_seed = c.seed;
        }
    } else {
        c.data.split_seed = c.seed;
    }

    if (j.contains("eval")) {
        const auto& ej = j.at("eval");
        detail::check_keys(ej, {"checkpoint_dir", "checkpoints", "metric", "threshold"}, "eval.");
        if (ej.contains("checkpoint_dir")) c.eval.checkpoint_dir = ej.at("checkpoint_dir").get<std::string>();
        if (ej.contains("checkpoints"))
            for (const auto& p : ej.at("checkpoints")) c.eval.checkpoints.push_back(p.get<std::string>());
        if (ej.contains("metric")) c.eval.metric = metric_from_string(ej.at("metric").get<std::string>());
        c.eval.threshold = detail::get_or(ej, "threshold", 0.5);
    }
    if (j.contains("rf_spec")) c.rf_spec = j.at("rf_spec").get<std::string>();

    // effective-config echo
    nlohmann::json e;
    e["kind"] = to_string(c.kind);
    e["out_dir"] = c.out_dir.string();
    e["seed"] = c.seed;
    if (c.has_model) e["model"] = c.model;
    e["hyper"] = {{"epochs", c.hyper.epochs},
                  {"batch_size", c.hyper.batch_size},
                  {"learning_rate", c.hyper.learning_rate},
                  {"lambda_l1", c.hyper.lambda_l1},
                  {"adam_betas", {c.hyper.adam_betas.first, c.hyper.adam_betas.second}},
                  {"checkpoint_interval", c.hyper.checkpoint_interval},
                  {"seed", c.hyper.seed}};
    if (c.hyper.subset_size) e["hyper"]["subset_size"] = *c.hyper.subset_size;
    e["corruption"] = {{"noise_sigma", {c.corruption.noise_sigma_lo, c.corruption.noise_sigma_hi}},
                       {"blur_sigma", {c.corruption.blur_sigma_lo, c.corruption.blur_sigma_hi}},
                       {"flip", c.corruption.flip},
                       {"rotate", c.corruption.rotate}};
    e["augment"] = {{"noise", c.augment.noise},
                    {"noise_sigma", c.augment.noise_sigma},
                    {"flip", c.augment.flip},
                    {"rotations", c.augment.rotations},
                    {"resize_scale", {c.augment.resize_lo, c.augment.resize_hi}},
                    {"crop_size", c.augment.crop_size}};
    e["task"] = to_string(c.task);
    e["init"] = c.init_checkpoint ? nlohmann::json{{"checkpoint", c.init_checkpoint->string()}}
                                  : nlohmann::json("random");
    e["subset_tag"] = c.subset_tag;
    e["data"] = {{"type", c.data.type},
                 {"synth",
                  {{"count", c.data.synth.count},
                   {"image_size", c.data.synth.image_size},
                   {"spacing", {c.data.synth.spacing_lo, c.data.synth.spacing_hi}},
                   {"atom_sigma", c.data.synth.atom_sigma},
                   {"sharp_sigma", c.data.synth.sharp_sigma},
                   {"particles", {c.data.synth.particles_lo, c.data.synth.particles_hi}},
                   {"radius", {c.data.synth.radius_lo, c.data.synth.radius_hi}},
                   {"noise_sigma", c.data.synth.noise_sigma},
                   {"scan_noise", c.data.synth.scan_noise},
                   {"bg_amplitude", c.data.synth.bg_amplitude}}},
                 {"root", c.data.root.string()},
                 {"manifest", c.data.manifest.string()},
                 {"split",
                  {{"fractions", c.data.split_fractions}, {"seed", c.data.split_seed}}}};
    if (c.data.split_counts)
        e["data"]["split"]["counts"] = {(*c.data.split_counts)[0], (*c.data.split_counts)[1],
                                        (*c.data.split_counts)[2]};
    c.effective = e;
    return c;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path.string() + ": " + e.what());
    }
    return parse_config_json(j);
}

namespace detail {

struct ResolvedData {
    Dataset train, val, test;
};

inline ResolvedData resolve_datasets(const ExperimentConfig& c, Task task) {
    ResolvedData out;
    if (c.data.type == "synth") {
        SynthCorpus corpus = synth_corpus(c.data.synth, mix_seed(c.seed, 0xda7a));
        SplitSpec sp;
        sp.seed = c.data.split_seed;
        if (c.data.split_counts)
            sp.counts = c.data.split_counts;
        else
            sp.fractions = c.data.split_fractions;
        std::tie(out.train, out.val, out.test) = split(corpus.dataset(task), sp);
    } else {
        auto manifest = c.data.manifest.empty() ? c.data.root / "manifest.json" : c.data.manifest;
        auto ds = ingest_dataset(c.data.root, manifest).filter_task(task);
        out.train = ds.filter_split("train");
        out.val = ds.filter_split("val");
        out.test = ds.filter_split("test");
        if (out.train.empty() && out.val.empty() && out.test.empty()) {
            SplitSpec sp;
            sp.seed = c.data.split_seed;
            if (c.data.split_counts)
                sp.counts = c.data.split_counts;
            else
                sp.fractions = c.data.split_fractions;
            std::tie(out.train, out.val, out.test) = split(ds, sp);
        }
    }
    return out;
}

inline void write_effective_config(const ExperimentConfig& c) {
    std::filesystem::create_directories(c.out_dir);
    std::ofstream out(c.out_dir / "effective_config.json");
    out << c.effective.dump(2) << "\n";
}

inline std::vector<std::filesystem::path> collect_checkpoints(const EvalConfig& e) {
    std::vector<std::filesystem::path> paths = e.checkpoints;
    if (!e.checkpoint_dir.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(e.checkpoint_dir))
            if (entry.path().extension() == ".ckpt") paths.push_back(entry.path());
    }
    if (paths.empty()) throw std::runtime_error("no checkpoints found to evaluate");
    // order by stored epoch
    std::vector<std::pair<int, std::filesystem::path>> keyed;
    for (const auto& p : paths) keyed.emplace_back(load_checkpoint(p).epoch, p);
    std::sort(keyed.begin(), keyed.end());
    paths.clear();
    for (auto& [ep, p] : keyed) paths.push_back(p);
    return paths;
}

}  // namespace detail

/// Receptive-field report over the shipped U-Net presets (or one named
/// spec): analytic value, empirical probe, and the match flag.
inline MetricTable rf_report(const std::optional<std::string>& only_spec = std::nullopt,
                             std::ostream& os = std::cout) {
    std::vector<std::string> names;
    if (only_spec) {
        names.push_back(*only_spec);
    } else {
        for (const auto& n : preset_names())
            if (n.rfind("U-Net", 0) == 0) names.push_back(n);
    }
    os << "spec            analytic  measured  match\n";
    MetricTable out;
    out.metric = "receptive_field";
    out.epochs = {0};  // single column; reused table shape for CSV emission
    for (const auto& name : names) {
        auto spec = preset(name);
        int analytic = receptive_field(spec);
        auto net = build_generator(spec, 0);
        int measured = measure_receptive_field(net);
        char line[96];
        std::snprintf(line, sizeof(line), "%-15s %8d  %8d  %s\n", name.c_str(), analytic, measured,
                      analytic == measured ? "yes" : "NO");
        os << line;
        out.rows.push_back({name, analytic == measured ? "ok" : "mismatch",
                            {static_cast<double>(analytic)}});
    }
    return out;
}

/// Dispatches a parsed config; artifacts land in out_dir. Returns the
/// process exit status.
inline int run(const ExperimentConfig& config) {
    if (std::getenv("EMSS_DETERMINISTIC"))
        at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
    try {
        detail::write_effective_config(config);
        switch (config.kind) {
            case RunKind::pretrain: {
                auto data = detail::resolve_datasets(config, Task::pretext);
                PretrainRun run;
                run.generator = config.model;
                run.discriminator = make_discriminator_spec(config.model.in_channels,
                                                            config.model.base_width);
                run.hyper = config.hyper;
                run.corruption = config.corruption;
                run.train = data.train;
                run.val = data.val;
                run.out_dir = config.out_dir;
                run.subset_tag = config.subset_tag;
                auto result = pretrain(run);
                emit_convergence_plot({result.val_metric},
                                      config.out_dir / "pretrain_convergence.png");
                std::cout << "pretrain done: final val L1 = "
                          << result.val_metric.points.back().second << ", "
                          << result.checkpoints.size() << " checkpoints\n";
                return 0;
            }
            case RunKind::finetune: {
                auto data = detail::resolve_datasets(config, config.task);
                FinetuneRun run;
                run.task = config.task;
                run.init_checkpoint = config.init_checkpoint;
                run.spec = config.model;
                run.hyper = config.hyper;
                run.augment = config.augment;
                run.train = data.train;
                run.val = data.val;
                run.out_dir = config.out_dir;
                auto result = finetune(run);
                emit_convergence_plot({result.val_metric},
                                      config.out_dir / "finetune_convergence.png");
                std::cout << "finetune done: final val " << result.val_metric.kind << " = "
                          << result.val_metric.points.back().second << ", "
                          << result.checkpoints.size() << " checkpoints\n";
                return 0;
            }
            case RunKind::evaluate: {
                auto data = detail::resolve_datasets(config, config.task);
                auto ckpts = detail::collect_checkpoints(config.eval);
                auto row = evaluate_checkpoints(ckpts, data.test, config.eval.metric,
                                                config.eval.threshold);
                MetricTable table;
                table.metric = to_string(config.eval.metric);
                table.epochs = row.epochs;
                table.rows.push_back({row.spec, row.init, row.values});
                emit_table(table, config.out_dir / "metric_table.csv", TableFormat::csv);
                emit_table(table, config.out_dir / "metric_table.md", TableFormat::markdown);
                std::cout << "evaluated " << ckpts.size() << " checkpoints -> "
                          << (config.out_dir / "metric_table.csv").string() << "\n";
                return 0;
            }
            case RunKind::synth_data: {
                auto corpus = synth_corpus(config.data.synth, detail::mix_seed(config.seed, 0xda7a));
                write_synth_corpus(corpus, config.out_dir, config.data.split_fractions);
                std::cout << "wrote synthetic corpus (" << corpus.size() << " samples per task) to "
                          << config.out_dir.string() << "\n";
                return 0;
            }
            case RunKind::rf_report: {
                auto table = rf_report(config.rf_spec);
                emit_table(table, config.out_dir / "rf_report.csv", TableFormat::csv);
                return 0;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error [" << to_string(config.kind) << "]: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace emss

#endif  // EMSS_CONFIG_HPP
