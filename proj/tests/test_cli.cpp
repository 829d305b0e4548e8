#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdd/cli.hpp"
#include "cdd/config.hpp"
#include "cdd/errors.hpp"

using namespace cdd;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    const fs::path p = fs::temp_directory_path() / "cdd_cli_tests";
    fs::create_directories(p);
    return p;
}

std::string tiny_config_text() {
    return "# desk-scale smoke config\n"
           "seed = 7\n"
           "dataset.num_identities = 8\n"
           "dataset.images_per_identity = 6\n"
           "dataset.height = 9\n"
           "dataset.width = 9\n"
           "dataset.jitter = 0.3\n"
           "dataset.seed = 321\n"
           "model.stage_widths = 4,6\n"
           "model.blocks_per_stage = 1\n"
           "model.embedding_dim = 8\n"
           "teacher.epochs = 4\n"
           "teacher.warmup_epochs = 1\n"
           "teacher.batch_p = 2\n"
           "teacher.batch_s = 2\n"
           "train.epochs = 3\n"
           "train.warmup_epochs = 1\n"
           "train.rggr_activation_epoch = 1\n"
           "train.batch_p = 2\n"
           "train.batch_s = 2\n"
           "train.alpha = 0.02\n"
           "eval.batch = 8\n";
}

std::string write_config(const std::string& name, const std::string& text) {
    const fs::path p = scratch() / name;
    std::ofstream(p) << text;
    return p.string();
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("config parser reports line and field diagnostics") {
    SUBCASE("unknown key") {
        const std::string p = write_config("bad1.cfg", "seed = 1\nnot.a.key = 2\n");
        try {
            load_run_config(p);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 2") != std::string::npos);
            CHECK(msg.find("not.a.key") != std::string::npos);
        }
    }
    SUBCASE("bad value names the field") {
        const std::string p = write_config("bad2.cfg", "train.epochs = soon\n");
        try {
            load_run_config(p);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 1") != std::string::npos);
            CHECK(msg.find("train.epochs") != std::string::npos);
        }
    }
    SUBCASE("missing value names the field") {
        const std::string p = write_config("bad3.cfg", "train.alpha =\n");
        try {
            load_run_config(p);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("train.alpha") != std::string::npos);
        }
    }
    SUBCASE("malformed line") {
        const std::string p = write_config("bad4.cfg", "seed 1\n");
        CHECK_THROWS_AS(load_run_config(p), ConfigError);
    }
    SUBCASE("nonexistent file") {
        CHECK_THROWS_AS(load_run_config("/nonexistent/cdd.cfg"), ConfigError);
    }
}

TEST_CASE("config round-trips through its serialization") {
    const std::string p = write_config("ok.cfg", tiny_config_text());
    RunConfig rc = load_run_config(p);
    CHECK(rc.seed == 7);
    CHECK(rc.dataset.num_identities == 8);
    CHECK(rc.model.stage_widths == std::vector<int>{4, 6});
    CHECK(rc.train.alpha == 0.02);
    CHECK(rc.train.seed == 7);  // resolved from the shared seed

    const std::string text = serialize_run_config(rc);
    const std::string p2 = write_config("ok2.cfg", text);
    RunConfig rc2 = load_run_config(p2);
    CHECK(serialize_run_config(rc2) == text);
}

TEST_CASE("cli commands enforce required flags and exit codes") {
    cli::Options opts;
    CHECK(cli::cmd_train_teacher(opts) == cli::kExitConfig);  // missing --config
    opts.config_path = write_config("ok3.cfg", tiny_config_text());
    CHECK(cli::cmd_train_teacher(opts) == cli::kExitConfig);  // missing --out
    opts.out_dir = (scratch() / "no_teacher").string();
    CHECK(cli::cmd_distill(opts) == cli::kExitConfig);  // missing --teacher
    opts.checkpoint_path = "/nonexistent.ckpt";
    CHECK(cli::cmd_eval(opts) == cli::kExitConfig);  // unreadable checkpoint
}

TEST_CASE("pipeline composes end to end from one config") {
    const std::string cfg = write_config("pipe.cfg", tiny_config_text());
    const fs::path root = scratch() / "pipe";
    fs::remove_all(root);

    cli::Options teach;
    teach.config_path = cfg;
    teach.out_dir = (root / "teacher").string();
    REQUIRE(cli::cmd_train_teacher(teach) == cli::kExitOk);
    REQUIRE(fs::exists(root / "teacher" / "teacher.ckpt"));
    CHECK(fs::exists(root / "teacher" / "manifest.txt"));
    CHECK(fs::exists(root / "teacher" / "teacher_metrics.txt"));

    cli::Options dist;
    dist.config_path = cfg;
    dist.teacher_path = (root / "teacher" / "teacher.ckpt").string();
    dist.out_dir = (root / "distill").string();
    REQUIRE(cli::cmd_distill(dist) == cli::kExitOk);
    REQUIRE(fs::exists(root / "distill" / "student.ckpt"));
    CHECK(fs::exists(root / "distill" / "rggr_log.txt"));
    // mask statistics appear from the activation epoch onward
    CHECK(slurp(root / "distill" / "rggr_log.txt").find("mask_zeros=") != std::string::npos);

    cli::Options conv;
    conv.config_path = cfg;
    conv.checkpoint_path = (root / "distill" / "student.ckpt").string();
    conv.out_dir = (root / "convert").string();
    REQUIRE(cli::cmd_convert(conv) == cli::kExitOk);
    REQUIRE(fs::exists(root / "convert" / "slim.ckpt"));
    const std::string report = slurp(root / "convert" / "conversion_report.txt");
    CHECK(report.find("params_saved_pct=") != std::string::npos);

    cli::Options ev;
    ev.config_path = cfg;
    ev.checkpoint_path = (root / "convert" / "slim.ckpt").string();
    ev.out_dir = (root / "eval").string();
    REQUIRE(cli::cmd_eval(ev) == cli::kExitOk);
    const std::string eval_text = slurp(root / "eval" / "eval_report.txt");
    CHECK(eval_text.find("map_pct=") != std::string::npos);
    CHECK(eval_text.find("mp=") != std::string::npos);

    // converting the slim checkpoint again must fail: no compactors left
    cli::Options conv2;
    conv2.config_path = cfg;
    conv2.checkpoint_path = (root / "convert" / "slim.ckpt").string();
    conv2.out_dir = (root / "convert2").string();
    CHECK(cli::cmd_convert(conv2) == cli::kExitCompat);
}

TEST_CASE("cdd and cdd_no_dgc modes respect their contracts") {
    const std::string cfg = write_config("modes.cfg", tiny_config_text());
    const fs::path root = scratch() / "modes";
    fs::remove_all(root);

    cli::Options teach;
    teach.config_path = cfg;
    teach.out_dir = (root / "teacher").string();
    REQUIRE(cli::cmd_train_teacher(teach) == cli::kExitOk);

    cli::Options dist;
    dist.config_path = cfg;
    dist.teacher_path = (root / "teacher" / "teacher.ckpt").string();
    dist.out_dir = (root / "cdd").string();
    dist.mode = "cdd";
    REQUIRE(cli::cmd_distill(dist) == cli::kExitOk);
    CHECK_FALSE(fs::exists(root / "cdd" / "rggr_log.txt"));  // no mask records

    dist.out_dir = (root / "no_dgc").string();
    dist.mode = "cdd_no_dgc";
    REQUIRE(cli::cmd_distill(dist) == cli::kExitOk);
    // the ablation student carries no compactors, so converting rejects it
    cli::Options conv;
    conv.config_path = cfg;
    conv.checkpoint_path = (root / "no_dgc" / "student.ckpt").string();
    conv.out_dir = (root / "no_dgc_convert").string();
    CHECK(cli::cmd_convert(conv) == cli::kExitCompat);
    // and its penalty term is reported against the conv kernels
    const std::string metrics = slurp(root / "no_dgc" / "distill_metrics.txt");
    CHECK(metrics.find("l_np=0 ") == std::string::npos);
}

TEST_CASE("identical seeds reproduce metrics files byte for byte") {
    const std::string cfg = write_config("det.cfg", tiny_config_text());
    const fs::path root = scratch() / "det";
    fs::remove_all(root);

    for (const char* run : {"a", "b"}) {
        cli::Options teach;
        teach.config_path = cfg;
        teach.out_dir = (root / run / "teacher").string();
        REQUIRE(cli::cmd_train_teacher(teach) == cli::kExitOk);
        cli::Options dist;
        dist.config_path = cfg;
        dist.teacher_path = (root / run / "teacher" / "teacher.ckpt").string();
        dist.out_dir = (root / run / "distill").string();
        REQUIRE(cli::cmd_distill(dist) == cli::kExitOk);
    }
    CHECK(slurp(root / "a" / "teacher" / "teacher_metrics.txt") ==
          slurp(root / "b" / "teacher" / "teacher_metrics.txt"));
    CHECK(slurp(root / "a" / "teacher" / "teacher.ckpt") ==
          slurp(root / "b" / "teacher" / "teacher.ckpt"));
    CHECK(slurp(root / "a" / "distill" / "distill_metrics.txt") ==
          slurp(root / "b" / "distill" / "distill_metrics.txt"));
    CHECK(slurp(root / "a" / "distill" / "student_eval.txt") ==
          slurp(root / "b" / "distill" / "student_eval.txt"));
}
