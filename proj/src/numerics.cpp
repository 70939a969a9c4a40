#include "retro/numerics.hpp"

#include <algorithm>
#include <iostream>

namespace retro {

void log_warning(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

void AdamHyper::validate() const {
  if (!(lr >= 0)) throw ConfigError("adam: lr must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam: beta1 must be in [0,1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam: beta2 must be in [0,1)");
  if (!(eps > 0)) throw ConfigError("adam: eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("adam: weight_decay must be >= 0");
}

GradCheckReport grad_check(const std::function<double()>& loss, std::span<const ParamRef<double>> params,
                           std::span<const Mat<double>> analytic, double tolerance, double h) {
  if (analytic.size() != params.size()) throw ShapeError("grad_check: gradient count mismatch");
  if (!std::isfinite(loss())) throw NumericError("grad_check: non-finite loss at base point");

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& ref = params[i];
    auto& value = *ref.value;
    const auto& a = analytic[i];
    if (a.rows() != value.rows() || a.cols() != value.cols()) {
      throw ShapeError("grad_check: analytic gradient shape mismatch for " + ref.name);
    }
    GradCheckEntry entry{ref.name, 0.0, a.cwiseAbs().maxCoeff(), ref.frozen};
    if (ref.frozen) {
      entry.rel_error = a.isZero(0.0) ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
      Mat<double> fd(value.rows(), value.cols());
      for (Eigen::Index j = 0; j < value.size(); ++j) {
        const double orig = value.data()[j];
        value.data()[j] = orig + h;
        const double up = loss();
        value.data()[j] = orig - h;
        const double down = loss();
        value.data()[j] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          throw NumericError("grad_check: non-finite loss while perturbing " + ref.name);
        }
        fd.data()[j] = (up - down) / (2.0 * h);
      }
      const double diff = (a - fd).norm();
      const double scale = std::max(a.norm(), fd.norm());
      entry.rel_error = scale < 1e-10 ? diff : diff / scale;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace retro
