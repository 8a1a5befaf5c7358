// Command-line front end: training stages, calibration, compression,
// evaluation and diagnostics over a model directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "oscar/oscar.hpp"

namespace fs = std::filesystem;
using namespace oscar;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
};

TrainConfig load_config(const Globals& g) {
    TrainConfig cfg = g.config.empty() ? TrainConfig{} : TrainConfig::load(g.config);
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
}

/// Loads a model and the corpus with latents encoded by its frozen VAE.
struct Session {
    TrainConfig cfg;
    OscarModel model;
    TrainingData data;
};

Session open_session(const Globals& g, const std::string& model_dir) {
    Session s{load_config(g), OscarModel::load(model_dir), {}};
    s.data = TrainingData::from_config(s.cfg);
    if (s.model.stage() == "init") throw RangeError("model '" + model_dir + "' has no trained VAE (run pretrain-vae)");
    s.data.encode(s.model);
    return s;
}

/// Runs one training step; on divergence the restored model is saved before
/// the error propagates, so the last good state is never lost.
template <class Fn>
void train_and_save(OscarModel& model, const std::string& out, TrainReport& report, const std::string& name, Fn&& fn) {
    auto save = [&] {
        model.save(out);
        report.save_csv((fs::path(out) / ("report_" + name + ".csv")).string());
    };
    try {
        fn();
    } catch (const NumericError&) {
        save();
        throw;
    }
    save();
}

std::vector<std::string> ppm_files(const std::vector<std::string>& inputs) {
    std::vector<std::string> out;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            std::vector<std::string> found;
            for (const auto& e : fs::directory_iterator(in))
                if (e.is_regular_file() && e.path().extension() == ".ppm") found.push_back(e.path().string());
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else {
            out.push_back(in);
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rate-adaptive one-step diffusion image codec (toy scale)", "oscar"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Override the training seed")->type_name("N");
    app.add_option("--config", g.config, "Training config file (key = value lines)")->check(CLI::ExistingFile);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    std::string model_dir, out_dir, in_path, out_path, rate_text, csv_path;
    int rate_id = 0;
    bool with_bypass = false;
    std::vector<std::string> inputs;

    auto* pretrain = app.add_subcommand("pretrain-vae", "Train and freeze the VAE, then pretrain the denoiser");
    pretrain->add_option("-o,--out", out_dir, "Output model directory")->required();

    auto add_model_io = [&](CLI::App* sub) {
        sub->add_option("-m,--model", model_dir, "Model directory")->required();
        sub->add_option("-o,--out", out_dir, "Output model directory (default: overwrite the input)");
    };
    auto* stage1 = app.add_subcommand("train-stage1", "Train one hyper-encoder per configured rate");
    add_model_io(stage1);
    auto* calibrate = app.add_subcommand("calibrate", "Measure similarity per rate and store the rate -> timestep map");
    add_model_io(calibrate);
    auto* stage2 = app.add_subcommand("train-stage2", "Joint fine-tuning with LoRA adapters and the discriminator");
    add_model_io(stage2);
    auto* adapt = app.add_subcommand("adapt-rate", "Add and adapt a new rate on a trained model");
    add_model_io(adapt);
    adapt->add_option("--rate", rate_text, "New rate as id:s:V[:M]")->required();

    auto* compress_cmd = app.add_subcommand("compress", "Compress a PPM image to a bitstream");
    compress_cmd->add_option("-r,--rate", rate_id, "Rate id")->required();
    compress_cmd->add_option("-m,--model", model_dir, "Model directory")->required();
    compress_cmd->add_option("-i,--in", in_path, "Input PPM")->required();
    compress_cmd->add_option("-o,--out", out_path, "Output bitstream")->required();

    auto* decompress_cmd = app.add_subcommand("decompress", "Decode a bitstream to a PPM image");
    decompress_cmd->add_option("-m,--model", model_dir, "Model directory")->required();
    decompress_cmd->add_option("-i,--in", in_path, "Input bitstream")->required();
    decompress_cmd->add_option("-o,--out", out_path, "Output PPM")->required();

    auto* eval = app.add_subcommand("eval", "Rate-distortion table over PPM images (default: held-out synthetic set)");
    eval->add_option("-m,--model", model_dir, "Model directory")->required();
    eval->add_option("-i,--in", inputs, "PPM files or folders");
    eval->add_option("-o,--out", csv_path, "CSV output (default: stdout)");
    eval->add_flag("--bypass", with_bypass, "Also report MSE with quantization bypassed");

    auto* diagnose = app.add_subcommand("diagnose", "Residual statistics, QQ and similarity plots for one rate");
    diagnose->add_option("-m,--model", model_dir, "Model directory")->required();
    diagnose->add_option("-r,--rate", rate_id, "Rate id")->required();
    diagnose->add_option("-o,--out", out_dir, "Output folder for CSV and SVG files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
    }

    try {
        const std::string target = out_dir.empty() ? model_dir : out_dir;
        TrainReport report;
        if (*pretrain) {
            auto cfg = load_config(g);
            auto data = TrainingData::from_config(cfg);
            Rng rng(cfg.seed, 0xA11CE);
            OscarModel model(cfg.model, rng);
            train_and_save(model, out_dir, report, "pretrain", [&] {
                pretrain_vae(model, data, cfg, report);
                pretrain_denoiser(model, data, cfg, report);
            });
        } else if (*stage1) {
            auto s = open_session(g, model_dir);
            train_and_save(s.model, target, report, "stage1", [&] {
                auto res = train_stage1(s.model, s.data, s.cfg, report);
                for (const auto& [id, f] : res.f_sim)
                    std::printf("rate %d: F_sim %.6f, stability band %.6f\n", id, f, res.stability_band[id]);
            });
        } else if (*calibrate) {
            auto s = open_session(g, model_dir);
            calibrate_mapping(s.model, s.data.heldout_latents.numel() ? s.data.heldout_latents : s.data.train_latents);
            s.model.save(target);
            std::cout << s.model.calibration().to_text();
        } else if (*stage2) {
            auto s = open_session(g, model_dir);
            train_and_save(s.model, target, report, "stage2", [&] { train_stage2(s.model, s.data, s.cfg, report); });
        } else if (*adapt) {
            auto rates = TrainConfig::parse_rates(rate_text);
            if (rates.size() != 1) throw RangeError("adapt-rate: exactly one rate expected");
            auto s = open_session(g, model_dir);
            train_and_save(s.model, target, report, "adapt",
                           [&] { adapt_unseen_rate(s.model, rates.front(), s.data, s.cfg, report); });
            std::cout << s.model.calibration().to_text();
        } else if (*compress_cmd) {
            auto model = OscarModel::load(model_dir);
            compress_file(model, in_path, out_path, rate_id);
        } else if (*decompress_cmd) {
            auto model = OscarModel::load(model_dir);
            decompress_file(model, in_path, out_path);
        } else if (*eval) {
            auto model = OscarModel::load(model_dir);
            RdTable table;
            std::vector<Image> images;
            if (inputs.empty()) {
                images = TrainingData::from_config(load_config(g)).heldout;
                table = rd_eval(model, images);
            } else {
                auto files = ppm_files(inputs);
                table = rd_eval_files(model, files);
                for (const auto& f : files) {
                    try {
                        images.push_back(read_ppm(f));
                    } catch (const Error&) {
                    }
                }
                if (table.skipped) std::fprintf(stderr, "skipped %zu unreadable image(s)\n", table.skipped);
            }
            if (csv_path.empty())
                std::cout << table.to_csv();
            else
                write_text(csv_path, table.to_csv());
            if (with_bypass)
                for (const auto& row : table.rows)
                    std::fprintf(stderr, "rate %d: bypass mse %.8g\n", row.rate_id, bypass_mse(model, images, row.rate_id));
        } else if (*diagnose) {
            auto s = open_session(g, model_dir);
            fs::create_directories(out_dir);
            const auto& latents = s.data.heldout_latents.numel() ? s.data.heldout_latents : s.data.train_latents;
            auto rep = residual_report(s.model, latents, rate_id, s.cfg.seed);
            write_text(fs::path(out_dir) / "residuals.csv", rep.to_csv());
            write_text(fs::path(out_dir) / "qq_trained.svg",
                       emit_svg({rep.trained.qq.theoretical, rep.trained.qq.empirical, "trained residual QQ"}, PlotKind::kQq));
            write_text(fs::path(out_dir) / "qq_untrained.svg",
                       emit_svg({rep.untrained.qq.theoretical, rep.untrained.qq.empirical, "untrained residual QQ"},
                                PlotKind::kQq));
            PlotSeries sim{{}, {}, "calibrated similarity vs timestep"};
            for (const auto& [id, e] : s.model.calibration().entries()) {
                sim.x.push_back(static_cast<double>(e.timestep));
                sim.y.push_back(e.f_sim);
            }
            write_text(fs::path(out_dir) / "sim_vs_t.svg", emit_svg(sim, PlotKind::kSimVsT, s.model.schedule()));
            auto table = rd_eval(s.model, s.data.heldout.empty() ? s.data.train : s.data.heldout);
            write_text(fs::path(out_dir) / "rd.csv", table.to_csv());
            PlotSeries rd{{}, {}, "held-out MSE vs bpp"};
            for (const auto& row : table.rows) {
                rd.x.push_back(row.bpp_theoretical);
                rd.y.push_back(row.mse);
            }
            write_text(fs::path(out_dir) / "rd.svg", emit_svg(rd, PlotKind::kRd));
            std::cout << rep.to_csv();
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "oscar: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "oscar: %s\n", e.what());
        return static_cast<int>(ExitCode::kIo);
    }
    return 0;
}
