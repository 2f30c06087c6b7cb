#include "bloodnet/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/checkpoint.hpp"
#include "bloodnet/config.hpp"
#include "bloodnet/dataset_io.hpp"
#include "bloodnet/eval.hpp"
#include "bloodnet/report.hpp"
#include "bloodnet/train.hpp"

namespace bloodnet {
namespace {

namespace fs = std::filesystem;

constexpr const char* kConfigEcho = "config.toml";

struct ConfigOptions {
    std::string path;
    std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
    cmd->add_option("--config", opts.path, std::string("Config file (default: $") + kConfigEnvVar + ")");
    cmd->add_option("--set", opts.overrides, "Override one config value, e.g. --set train.batch_size=8");
}

// Defaults < config file < --set overrides < dedicated flags.
RunConfig resolve_config(const ConfigOptions& opts) {
    RunConfig config;
    std::string path = opts.path;
    if (path.empty()) {
        if (const char* env = std::getenv(kConfigEnvVar); env && *env) path = env;
    }
    if (!path.empty()) config = load_config(path);
    for (const std::string& o : opts.overrides) apply_override(config, o);
    return config;
}

void write_config_echo(const RunConfig& config, const fs::path& dir) {
    fs::create_directories(dir);
    write_file(dir / kConfigEcho, config_to_text(config));
}

bool checkpoint_is_double(const std::string& bytes) { return inspect_checkpoint(bytes).value_bytes == 8; }

template <typename T>
void run_train(RunConfig config, const fs::path& train_dir, const std::optional<fs::path>& val_dir,
               const fs::path& out_dir, std::ostream& out) {
    const auto train_studies = read_dataset(train_dir);
    std::vector<Study> val_studies;
    if (val_dir) val_studies = read_dataset(*val_dir);
    const WindowDataset train(train_studies, config.arch.input_slices, config.window);
    const WindowDataset val(val_studies, config.arch.input_slices, config.window);
    if (train.height() != config.arch.height || train.width() != config.arch.width) {
        throw DataError("training studies are " + std::to_string(train.height()) + "x" +
                        std::to_string(train.width()) + " but the config expects " +
                        std::to_string(config.arch.height) + "x" + std::to_string(config.arch.width));
    }
    write_config_echo(config, out_dir);
    out << "train " << variant_name(config.arch.variant) << ": " << train.size() << " training windows ("
        << train.positives().size() << " positive), " << val.size() << " validation windows\n";
    auto progress = [&](const EpochRecord& e, double mean_loss) {
        out << "  stage " << e.stage << " epoch " << e.epoch << " loss " << std::fixed << std::setprecision(5)
            << mean_loss;
        if (!std::isnan(e.val_auc)) out << " val_auc " << std::setprecision(4) << e.val_auc;
        out << std::defaultfloat << "\n";
    };
    ProtocolResult<T> result = run_protocol<T>(train, val.empty() ? nullptr : &val, config.arch, config.train, progress);
    save_checkpoint(result.model, out_dir / "model.ckpt");
    write_file(out_dir / "train_steps.csv", result.log.steps_csv());
    write_file(out_dir / "train_epochs.csv", result.log.epochs_csv());
    write_file(out_dir / "train_stages.csv", result.log.stages_csv());
    for (const StageRecord& s : result.log.stages) {
        out << "stage " << s.stage << " lambda " << format_double(s.lambda) << " steps " << s.first_step << "-"
            << s.last_step;
        if (s.selected_epoch) out << " selected epoch " << s.selected_epoch;
        out << "\n";
    }
    out << "wrote " << (out_dir / "model.ckpt").string() << "\n";
}

template <typename T>
EvalReport run_eval(const std::string& bytes, const RunConfig& config, const std::vector<Study>& studies,
                    const std::string& label) {
    const Model<T> model = deserialize_checkpoint<T>(bytes);
    auto items = score_studies(model, std::span<const Study>(studies), config.eval.level, config.window);
    return make_report(label.empty() ? std::string(variant_name(model.arch().variant)) : label, config.eval.level,
                       std::move(items), config.eval.n_bootstrap, config.eval.seed, config.eval.confidence);
}

struct StudyInference {
    std::vector<double> window_probs;
    std::vector<std::vector<float>> seg_probs;  // per slice, empty for single_task
    double volume_mm3 = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
StudyInference infer_study(const Model<T>& model, const Study& study, const BrainWindow& window) {
    const ArchConfig& a = model.arch();
    if (study.height != a.height || study.width != a.width) {
        throw DataError("study " + study.study_id + " is " + std::to_string(study.height) + "x" +
                        std::to_string(study.width) + ", model expects " + std::to_string(a.height) + "x" +
                        std::to_string(a.width));
    }
    const auto windows = make_slice_windows(study, a.input_slices, window);
    const std::size_t plane = a.height * a.width;
    StudyInference r;
    double volume = 0.0;
    for (const SliceWindow& w : windows) {
        Tensor<T> x({1, a.input_slices, a.height, a.width});
        std::copy(w.context.begin(), w.context.end(), x.raw());
        const std::vector<double> vv{w.voxel_volume_mm3};
        const Predictions<T> p = forward(model, x, vv);
        r.window_probs.push_back(static_cast<double>(p.cls_prob[0]));
        if (!p.seg_probs.empty()) {
            r.seg_probs.emplace_back(p.seg_probs.begin(), p.seg_probs.begin() + static_cast<std::ptrdiff_t>(plane));
            volume += p.volume_mm3[0];
        }
    }
    if (!r.seg_probs.empty()) r.volume_mm3 = volume;
    return r;
}

template <typename T>
void run_infer(const std::string& bytes, const RunConfig& config, const std::vector<fs::path>& dirs,
               std::ostream& out) {
    const Model<T> model = deserialize_checkpoint<T>(bytes);
    for (const fs::path& dir : dirs) {
        const Study study = read_study(dir);
        const StudyInference r = infer_study(model, study, config.window);
        out << study.study_id << " " << format_double(study_probability(r.window_probs)) << " "
            << (std::isnan(r.volume_mm3) ? std::string("nan") : format_double(r.volume_mm3)) << "\n";
    }
}

template <typename T>
std::size_t write_overlays(const std::string& bytes, const RunConfig& config, const std::vector<Study>& studies,
                           const fs::path& dir) {
    const Model<T> model = deserialize_checkpoint<T>(bytes);
    if (!has_decoder(model.arch().variant)) {
        throw std::invalid_argument("overlays need a segmentation decoder; checkpoint variant is " +
                                    std::string(variant_name(model.arch().variant)));
    }
    fs::create_directories(dir);
    std::size_t written = 0;
    for (const Study& s : studies) {
        const StudyInference r = infer_study(model, s, config.window);
        for (std::size_t i = 0; i < s.slice_count; ++i) {
            const auto predicted = threshold_mask(r.seg_probs[i]);
            const auto truth = s.mask(i);
            const bool any = std::any_of(truth.begin(), truth.end(), [](auto v) { return v != 0; }) ||
                             std::any_of(predicted.begin(), predicted.end(), [](auto v) { return v != 0; });
            if (!any) continue;
            char stem[64];
            std::snprintf(stem, sizeof stem, "_slice%02zu", i);
            const auto background = apply_brain_window(s.slice(i), config.window);
            write_file(dir / (s.study_id + stem + "_overlay.ppm"),
                       overlay_ppm(background, truth, predicted, s.height, s.width));
            write_file(dir / (s.study_id + stem + "_prob.pgm"), pgm_image(r.seg_probs[i], s.height, s.width));
            ++written;
        }
    }
    return written;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Segmentation-dependent haemorrhage classification on synthetic head phantoms"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "bloodnet 1.0");

    ConfigOptions gen_cfg, train_cfg, eval_cfg, infer_cfg, report_cfg;
    std::string gen_out;
    std::size_t gen_count = 200, gen_offset = 0;
    auto* gen = app.add_subcommand("generate", "Write deterministic phantom studies");
    add_config_options(gen, gen_cfg);
    gen->add_option("--out", gen_out, "Dataset directory")->required();
    gen->add_option("--studies", gen_count, "Number of studies")->capture_default_str();
    gen->add_option("--offset", gen_offset, "Index of the first study")->capture_default_str();

    std::string train_dir, val_dir, train_out, train_variant;
    std::optional<std::uint64_t> init_seed, shuffle_seed;
    auto* tr = app.add_subcommand("train", "Run the three-stage training protocol");
    add_config_options(tr, train_cfg);
    tr->add_option("--train", train_dir, "Training dataset directory")->required();
    tr->add_option("--val", val_dir, "Validation dataset directory (enables per-epoch AUC and selection)");
    tr->add_option("--out", train_out, "Output directory")->required();
    tr->add_option("--variant", train_variant, "single_task, multi_task or task_dependent");
    tr->add_option("--init-seed", init_seed, "Parameter initialisation seed");
    tr->add_option("--shuffle-seed", shuffle_seed, "Batch order seed");

    std::string eval_ckpt, eval_data, eval_out, eval_level, eval_label;
    std::optional<std::size_t> eval_n;
    std::optional<std::uint64_t> eval_seed;
    auto* ev = app.add_subcommand("eval", "Score a dataset and write ROC-AUC with a bootstrap CI");
    add_config_options(ev, eval_cfg);
    ev->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
    ev->add_option("--data", eval_data, "Dataset directory")->required();
    ev->add_option("--out", eval_out, "Output directory")->required();
    ev->add_option("--level", eval_level, "slice or study");
    ev->add_option("--n-bootstrap", eval_n, "Bootstrap resamples");
    ev->add_option("--seed", eval_seed, "Bootstrap seed");
    ev->add_option("--label", eval_label, "Row name in comparison tables (default: checkpoint variant)");

    std::string infer_ckpt;
    std::vector<std::string> infer_studies;
    auto* inf = app.add_subcommand("infer", "Print '<study_id> <probability> <volume_mm3>' per study");
    add_config_options(inf, infer_cfg);
    inf->add_option("--checkpoint", infer_ckpt, "Model checkpoint")->required();
    inf->add_option("--study", infer_studies, "Study directory (repeatable)")->required();

    std::vector<std::string> report_evals;
    std::string report_out, report_ckpt, report_data;
    std::size_t report_max = 5;
    auto* rep = app.add_subcommand("report", "Comparison table and mask overlay images");
    add_config_options(rep, report_cfg);
    rep->add_option("--eval", report_evals, "Eval output directory (repeatable)");
    rep->add_option("--out", report_out, "Output directory")->required();
    rep->add_option("--checkpoint", report_ckpt, "Checkpoint for overlays");
    rep->add_option("--data", report_data, "Dataset for overlays");
    rep->add_option("--max-studies", report_max, "Studies to draw overlays for")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            const RunConfig config = resolve_config(gen_cfg);
            config.validate();
            const fs::path dir(gen_out);
            write_config_echo(config, dir);
            std::size_t positives = 0;
            for (std::size_t i = gen_offset; i < gen_offset + gen_count; ++i) {
                const Study s = generate_study(config.phantom, i);
                write_study(s, dir / s.study_id);
                positives += static_cast<std::size_t>(s.study_label);
            }
            out << "generated " << gen_count << " studies (" << positives << " positive) in " << dir.string() << "\n";
        } else if (tr->parsed()) {
            RunConfig config = resolve_config(train_cfg);
            if (!train_variant.empty()) config.arch.variant = parse_variant(train_variant);
            if (init_seed) config.train.init_seed = *init_seed;
            if (shuffle_seed) config.train.shuffle_seed = *shuffle_seed;
            config.validate();
            const std::optional<fs::path> val = val_dir.empty() ? std::nullopt : std::optional<fs::path>(val_dir);
            if (config.precision == Precision::float64) {
                run_train<double>(config, train_dir, val, train_out, out);
            } else {
                run_train<float>(config, train_dir, val, train_out, out);
            }
        } else if (ev->parsed()) {
            RunConfig config = resolve_config(eval_cfg);
            if (!eval_level.empty()) config.eval.level = parse_level(eval_level);
            if (eval_n) config.eval.n_bootstrap = *eval_n;
            if (eval_seed) config.eval.seed = *eval_seed;
            config.validate();
            const std::string bytes = read_file(eval_ckpt);
            const auto studies = read_dataset(eval_data);
            const EvalReport report = checkpoint_is_double(bytes)
                                          ? run_eval<double>(bytes, config, studies, eval_label)
                                          : run_eval<float>(bytes, config, studies, eval_label);
            const fs::path dir(eval_out);
            write_config_echo(config, dir);
            write_file(dir / "eval_summary.csv", report_summary_csv(report));
            write_file(dir / "eval_items.csv", report_items_csv(report));
            write_file(dir / "roc.csv", roc_csv(report));
            out << report.variant << " " << level_name(report.level) << "-level AUC " << std::fixed
                << std::setprecision(4) << report.auc << " (" << format_double(100.0 * report.ci.confidence) << "% CI "
                << report.ci.ci_low << "-" << report.ci.ci_high
                << ", n=" << report.items.size() << ")" << std::defaultfloat << "\n";
        } else if (inf->parsed()) {
            RunConfig config = resolve_config(infer_cfg);
            config.validate();
            const std::string bytes = read_file(infer_ckpt);
            const std::vector<fs::path> dirs(infer_studies.begin(), infer_studies.end());
            if (checkpoint_is_double(bytes)) {
                run_infer<double>(bytes, config, dirs, out);
            } else {
                run_infer<float>(bytes, config, dirs, out);
            }
        } else if (rep->parsed()) {
            RunConfig config = resolve_config(report_cfg);
            config.validate();
            if (report_evals.empty() && report_ckpt.empty()) {
                throw ConfigError("report needs --eval directories and/or --checkpoint with --data");
            }
            if (report_ckpt.empty() != report_data.empty()) {
                throw ConfigError("overlays need both --checkpoint and --data");
            }
            const fs::path dir(report_out);
            write_config_echo(config, dir);
            if (!report_evals.empty()) {
                std::vector<EvalReport> reports;
                for (const std::string& e : report_evals) {
                    reports.push_back(parse_report(read_file(fs::path(e) / "eval_summary.csv"),
                                                   read_file(fs::path(e) / "eval_items.csv")));
                }
                const auto rows = compare_variants(reports);
                write_file(dir / "comparison.csv", comparison_csv(rows));
                const std::string table = comparison_table(rows);
                write_file(dir / "comparison.txt", table);
                out << table;
            }
            if (!report_ckpt.empty()) {
                const std::string bytes = read_file(report_ckpt);
                auto studies = read_dataset(report_data);
                if (studies.size() > report_max) studies.resize(report_max);
                const std::size_t n = checkpoint_is_double(bytes)
                                          ? write_overlays<double>(bytes, config, studies, dir / "overlays")
                                          : write_overlays<float>(bytes, config, studies, dir / "overlays");
                out << "wrote " << n << " overlay slices to " << (dir / "overlays").string() << "\n";
            }
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ShapeError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}

}  // namespace bloodnet
