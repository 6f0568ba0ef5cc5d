// emss: self-supervised GAN pretraining and downstream fine-tuning for
// electron-microscopy-style image tasks.

#include <CLI11.hpp>

#include "emss/config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"GAN-pretext pretraining / fine-tuning / evaluation toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, rf_spec;

    auto add_config_cmd = [&](const std::string& name, const std::string& desc) {
        auto* cmd = app.add_subcommand(name, desc);
        cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
        cmd->add_option("--out", out_dir, "output directory (overrides config out_dir)");
        return cmd;
    };
    auto* cmd_pretrain = add_config_cmd("pretrain", "LSGAN+L1 pretext training");
    auto* cmd_finetune = add_config_cmd("finetune", "supervised downstream training");
    auto* cmd_evaluate = add_config_cmd("evaluate", "checkpoint-interval test evaluation");
    auto* cmd_synth = add_config_cmd("synth-data", "write a synthetic corpus to disk");
    auto* cmd_rf = app.add_subcommand("rf-report", "receptive fields of the shipped presets");
    cmd_rf->add_option("--spec", rf_spec, "report a single named spec");
    cmd_rf->add_option("--out", out_dir, "also write rf_report.csv here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_rf->parsed()) {
            auto table = emss::rf_report(rf_spec.empty() ? std::nullopt
                                                         : std::optional<std::string>(rf_spec));
            bool all_ok = true;
            for (const auto& r : table.rows) all_ok = all_ok && r.init == "ok";
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                emss::emit_table(table, std::filesystem::path(out_dir) / "rf_report.csv",
                                 emss::TableFormat::csv);
            }
            return all_ok ? 0 : 1;
        }
        auto config = emss::parse_config(config_path);
        if (!out_dir.empty()) config.out_dir = out_dir;
        if (cmd_pretrain->parsed() && config.kind != emss::RunKind::pretrain)
            throw std::runtime_error("config kind is '" + emss::to_string(config.kind) +
                                     "', expected 'pretrain'");
        if (cmd_finetune->parsed() && config.kind != emss::RunKind::finetune)
            throw std::runtime_error("config kind is '" + emss::to_string(config.kind) +
                                     "', expected 'finetune'");
        if (cmd_evaluate->parsed() && config.kind != emss::RunKind::evaluate)
            throw std::runtime_error("config kind is '" + emss::to_string(config.kind) +
                                     "', expected 'evaluate'");
        if (cmd_synth->parsed() && config.kind != emss::RunKind::synth_data)
            throw std::runtime_error("config kind is '" + emss::to_string(config.kind) +
                                     "', expected 'synth-data'");
        return emss::run(config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
