#include "cdd/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cdd/checkpoint.hpp"
#include "cdd/config.hpp"
#include "cdd/errors.hpp"
#include "cdd/reparam.hpp"
#include "cdd/training.hpp"

namespace cdd::cli {

namespace {

namespace fs = std::filesystem;

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required ") + flag);
}

RunConfig load_config(const Options& opts) {
    require(opts.config_path, "--config");
    RunConfig rc = load_run_config(opts.config_path);
    if (opts.seed) rc.seed = *opts.seed;
    if (opts.mode) rc.train.mode = parse_train_mode(*opts.mode);
    if (opts.lambda) rc.convert_lambda = *opts.lambda;
    rc.resolve();
    return rc;
}

fs::path prepare_out(const Options& opts) {
    require(opts.out_dir, "--out");
    fs::create_directories(opts.out_dir);
    return fs::path(opts.out_dir);
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << content;
}

void write_manifest(const fs::path& out, const std::string& command, const RunConfig& rc,
                    const std::string& started, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    std::string m;
    m += "command=" + command + "\n";
    m += std::string("tool_version=") + kToolVersion + "\n";
    m += "started=" + started + "\n";
    m += "finished=" + timestamp() + "\n";
    for (const auto& i : inputs) m += "input=" + i + "\n";
    for (const auto& o : outputs) m += "output=" + o + "\n";
    m += "--- resolved config ---\n";
    m += serialize_run_config(rc);
    write_file(out / "manifest.txt", m);
}

int guard(const std::function<void()>& body) {
    try {
        body();
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const CompatError& e) {
        std::cerr << "compatibility error: " << e.what() << "\n";
        return kExitCompat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

std::string join_records(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) out += l + "\n";
    return out;
}

}  // namespace

int cmd_train_teacher(const Options& opts) {
    return guard([&] {
        const std::string started = timestamp();
        RunConfig rc = load_config(opts);
        const fs::path out = prepare_out(opts);
        const Dataset data = generate(rc.dataset);

        TeacherResult result = train_teacher(rc.model, rc.teacher, data, {});
        write_file(out / "teacher_metrics.txt", join_records(result.epoch_records));
        const long long step =
            static_cast<long long>(result.completed_epochs) * rc.teacher.steps_per_epoch;
        save_model_checkpoint((out / "teacher.ckpt").string(), result.model, step,
                              {}, {{"mode", "teacher"}});
        const EvalReport ev = evaluate_on_dataset(result.model, data, rc.eval_batch);
        write_file(out / "teacher_eval.txt", ev.to_text());
        write_manifest(out, "train-teacher", rc, started, {opts.config_path},
                       {"teacher.ckpt", "teacher_metrics.txt", "teacher_eval.txt"});
        if (result.diverged) throw NumericError("teacher training diverged; last good checkpoint saved");
    });
}

int cmd_distill(const Options& opts) {
    return guard([&] {
        const std::string started = timestamp();
        RunConfig rc = load_config(opts);
        require(opts.teacher_path, "--teacher");
        const fs::path out = prepare_out(opts);
        const Dataset data = generate(rc.dataset);

        LoadedModel teacher = load_model_checkpoint(opts.teacher_path);
        if (teacher.model.config.stage_widths != rc.model.stage_widths ||
            teacher.model.config.blocks_per_stage != rc.model.blocks_per_stage) {
            throw CompatError("teacher checkpoint stage layout does not match config model");
        }

        std::ofstream rggr_log;
        TrainLogger logger;
        if (rc.train.mode == TrainMode::cdd_rggr) {
            rggr_log.open(out / "rggr_log.txt", std::ios::binary);
            logger.rggr_log = &rggr_log;
        }
        DistillResult result = run_distill(teacher.model, rc.model, rc.train, data, logger);
        write_file(out / "distill_metrics.txt", join_records(result.epoch_records));
        const long long step =
            static_cast<long long>(result.completed_epochs) * rc.train.steps_per_epoch;
        save_model_checkpoint((out / "student.ckpt").string(), result.student, step, {},
                              {{"mode", to_string(rc.train.mode)}});
        const EvalReport ev = evaluate_on_dataset(result.student, data, rc.eval_batch);
        write_file(out / "student_eval.txt", ev.to_text());
        std::vector<std::string> outputs{"student.ckpt", "distill_metrics.txt", "student_eval.txt"};
        if (logger.rggr_log) outputs.push_back("rggr_log.txt");
        write_manifest(out, "distill", rc, started, {opts.config_path, opts.teacher_path}, outputs);
        if (result.diverged) throw NumericError("distillation diverged; last good checkpoint saved");
    });
}

int cmd_convert(const Options& opts) {
    return guard([&] {
        const std::string started = timestamp();
        require(opts.checkpoint_path, "--checkpoint");
        const fs::path out = prepare_out(opts);
        RunConfig rc = opts.config_path.empty() ? default_run_config() : load_run_config(opts.config_path);
        if (opts.lambda) rc.convert_lambda = *opts.lambda;

        LoadedModel student = load_model_checkpoint(opts.checkpoint_path);
        Conversion conv = convert_model(student.model, rc.convert_lambda, 16);
        write_file(out / "conversion_report.txt", conv.report.to_text());
        save_model_checkpoint((out / "slim.ckpt").string(), conv.slim, student.step, {},
                              {{"mode", "slim"}});
        write_manifest(out, "convert", rc, started, {opts.checkpoint_path},
                       {"slim.ckpt", "conversion_report.txt"});
        std::cout << conv.report.to_text();
    });
}

int cmd_eval(const Options& opts) {
    return guard([&] {
        const std::string started = timestamp();
        RunConfig rc = load_config(opts);
        require(opts.checkpoint_path, "--checkpoint");
        const fs::path out = prepare_out(opts);
        const Dataset data = generate(rc.dataset);

        LoadedModel loaded = load_model_checkpoint(opts.checkpoint_path);
        if (loaded.model.config.in_channels != rc.dataset.channels ||
            loaded.model.config.input_h != rc.dataset.height) {
            throw CompatError("checkpoint input geometry does not match the dataset config");
        }
        const EvalReport ev = evaluate_on_dataset(loaded.model, data, rc.eval_batch);
        write_file(out / "eval_report.txt", ev.to_text());
        write_manifest(out, "eval", rc, started, {opts.config_path, opts.checkpoint_path},
                       {"eval_report.txt"});
        std::cout << ev.to_text();
    });
}

int run_cli(int argc, char** argv) {
    CLI::App app{"capacity dynamic distillation pipeline"};
    app.require_subcommand(1);

    Options opts;
    std::string mode_flag, lambda_flag, seed_flag;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", opts.config_path, "config file path");
        cmd->add_option("--out", opts.out_dir, "output directory");
        cmd->add_option("--seed", seed_flag, "seed override");
    };

    CLI::App* tt = app.add_subcommand("train-teacher", "train the frozen teacher");
    add_common(tt);
    CLI::App* di = app.add_subcommand("distill", "distill a compactor student from a teacher");
    add_common(di);
    di->add_option("--teacher", opts.teacher_path, "teacher checkpoint");
    di->add_option("--mode", mode_flag, "teacher|cdd|cdd_rggr|cdd_no_dgc");
    CLI::App* cv = app.add_subcommand("convert", "fold, prune and merge a trained student");
    add_common(cv);
    cv->add_option("--checkpoint", opts.checkpoint_path, "student checkpoint");
    cv->add_option("--lambda", lambda_flag, "pruning threshold override");
    CLI::App* ev = app.add_subcommand("eval", "retrieval evaluation of a checkpoint");
    add_common(ev);
    ev->add_option("--checkpoint", opts.checkpoint_path, "model checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }
    try {
        if (!mode_flag.empty()) opts.mode = mode_flag;
        if (!lambda_flag.empty()) opts.lambda = std::stod(lambda_flag);
        if (!seed_flag.empty()) opts.seed = static_cast<std::uint64_t>(std::stoull(seed_flag));
    } catch (const std::exception&) {
        std::cerr << "config error: bad numeric flag value\n";
        return kExitConfig;
    }

    if (tt->parsed()) return cmd_train_teacher(opts);
    if (di->parsed()) return cmd_distill(opts);
    if (cv->parsed()) return cmd_convert(opts);
    if (ev->parsed()) return cmd_eval(opts);
    return kExitConfig;
}

}  // namespace cdd::cli
