#include "cdd/fd_check.hpp"

#include <cmath>

#include "cdd/errors.hpp"

namespace cdd {

FdReport fd_check(const std::function<double()>& f,
                  const std::vector<std::pair<std::string, Tensor>>& params, double h) {
    if (h <= 0.0) throw ShapeError("fd_check requires h > 0");
    FdReport report;
    for (const auto& [name, param] : params) {
        Tensor p = param;
        FdReport::Entry entry;
        entry.name = name;
        std::span<const double> analytic = p.grad();
        std::span<double> values = p.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = f();
            values[i] = saved - h;
            const double down = f();
            values[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double a = analytic[i];
            if (!std::isfinite(fd) || !std::isfinite(a)) {
                entry.finite = false;
                entry.max_rel_err = std::numeric_limits<double>::infinity();
                entry.worst_index = i;
                continue;
            }
            const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-12});
            const double rel = std::fabs(a - fd) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
        }
        report.all_finite = report.all_finite && entry.finite;
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace cdd
