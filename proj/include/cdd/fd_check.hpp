#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cdd/tensor.hpp"

namespace cdd {

struct FdReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        std::size_t worst_index = 0;
        bool finite = true;
    };
    std::vector<Entry> per_param;
    double max_rel_err = 0.0;
    bool all_finite = true;

    bool within(double tol) const { return all_finite && max_rel_err <= tol; }
};

// Central-difference check of analytic gradients. `f` must be a pure,
// deterministic scalar evaluation of the current parameter values; the
// analytic gradients must already be populated on `params` (one prior
// forward+backward by the caller). Relative error uses the denominator
// max(|analytic|, |fd|, 1e-12).
FdReport fd_check(const std::function<double()>& f,
                  const std::vector<std::pair<std::string, Tensor>>& params, double h);

}  // namespace cdd
