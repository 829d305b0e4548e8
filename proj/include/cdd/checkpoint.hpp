#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cdd/network.hpp"

namespace cdd {

// Versioned little-endian container (layout documented in the README):
//   magic "CDDCKPT\n", u32 version,
//   u64 meta length + key=value text block,
//   u64 tensor count, then per tensor:
//   u64 name length + name, u32 ndim, u64 extents, f64 row-major data.
// Model topology is rebuilt from the config meta plus tensor shapes;
// running statistics travel as tensors next to the parameters. Extra
// tensors (optimizer state, dataset dumps) ride along under their own
// names.

void save_model_checkpoint(const std::string& path, const Model& model, long long step,
                           const std::vector<std::pair<std::string, Tensor>>& extra_tensors = {},
                           const std::map<std::string, std::string>& extra_meta = {});

struct LoadedModel {
    Model model;
    long long step = 0;
    std::map<std::string, std::string> meta;
    std::map<std::string, Tensor> extra_tensors;
};

LoadedModel load_model_checkpoint(const std::string& path);

}  // namespace cdd
