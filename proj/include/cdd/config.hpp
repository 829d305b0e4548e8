#pragma once

#include <string>

#include "cdd/data.hpp"
#include "cdd/network.hpp"
#include "cdd/training.hpp"

namespace cdd {

// One declarative config drives every pipeline stage. Keys are flat
// `section.key = value` lines; the full key set is listed in the README.
struct RunConfig {
    std::uint64_t seed = 42;
    DatasetSpec dataset;
    ModelConfig model;
    TrainConfig teacher;  // identity+triplet pre-training
    TrainConfig train;    // distillation
    double convert_lambda = 1e-5;
    int eval_batch = 16;

    // Pushes the shared seed and dataset geometry into the stage configs.
    void resolve();
};

RunConfig default_run_config();

// Parses a config file; errors carry the line number and field name.
RunConfig load_run_config(const std::string& path);

// Applies one key=value override (same key set as the file).
void apply_override(RunConfig& rc, const std::string& key, const std::string& value);

// Snapshot in the same key=value format, stable ordering.
std::string serialize_run_config(const RunConfig& rc);

}  // namespace cdd
