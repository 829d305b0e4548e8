#pragma once

#include <optional>
#include <string>

namespace cdd::cli {

inline constexpr const char* kToolVersion = "cdd 1.0.0";

// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 compatibility
// error, 1 anything else.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitCompat = 4;

struct Options {
    std::string config_path;
    std::string out_dir;
    std::string teacher_path;
    std::string checkpoint_path;
    std::optional<std::string> mode;
    std::optional<double> lambda;
    std::optional<std::uint64_t> seed;
};

int cmd_train_teacher(const Options& opts);
int cmd_distill(const Options& opts);
int cmd_convert(const Options& opts);
int cmd_eval(const Options& opts);

// Full argv entry point (subcommands: train-teacher, distill, convert, eval).
int run_cli(int argc, char** argv);

}  // namespace cdd::cli
