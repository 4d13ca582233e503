#include "cmc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cmc {

GradCheckResult finite_diff_check(const std::function<double()>& objective,
                                  const std::function<void()>& compute_gradients,
                                  std::span<const GradCheckTarget> targets,
                                  double h) {
  compute_gradients();
  // Snapshot analytic gradients: the objective may reuse the same buffers.
  std::vector<Tensor2<double>> analytic;
  analytic.reserve(targets.size());
  for (const auto& t : targets) {
    if (!t.grad->allFinite()) {
      fail(ErrorKind::numeric, "gradient oracle: analytic gradient of " +
                                   t.name + " is non-finite");
    }
    analytic.push_back(*t.grad);
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    Tensor2<double>& x = *targets[k].value;
    for (Index i = 0; i < x.rows(); ++i) {
      for (Index j = 0; j < x.cols(); ++j) {
        const double saved = x(i, j);
        x(i, j) = saved + h;
        const double up = objective();
        x(i, j) = saved - h;
        const double down = objective();
        x(i, j) = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          fail(ErrorKind::numeric, "gradient oracle: non-finite objective at " +
                                       targets[k].name);
        }
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[k](i, j) - numeric) /
                           std::max(1.0, std::abs(numeric));
        if (err > result.max_rel_error) {
          result.max_rel_error = err;
          result.worst = targets[k].name + "[" + std::to_string(i) + "," +
                         std::to_string(j) + "]";
        }
      }
    }
  }
  return result;
}

Tensor2<double> random_tensor(Index rows, Index cols, std::mt19937_64& rng,
                              double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor2<double> t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

}  // namespace cmc
