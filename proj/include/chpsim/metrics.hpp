#pragma once

// Post-disturbance trace metrics used in the run reports.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <vector>

#include "chpsim/errors.hpp"

namespace chpsim {

/// First time after `t_from` at which |signal - target| enters the band and
/// stays inside it for the rest of the horizon, reported relative to
/// `t_from`. Empty when the signal never settles within the horizon.
inline std::optional<double> settling_time(const Eigen::VectorXd& signal,
                                           const std::vector<double>& time, double target,
                                           double band, double t_from = 0.0) {
  if (signal.size() != static_cast<Eigen::Index>(time.size()))
    throw ValidationError("settling_time: signal and grid lengths differ");
  if (signal.size() == 0) throw ValidationError("settling_time: empty trace");
  if (band <= 0.0) throw ValidationError("settling_time: band must be positive");

  // scan backwards for the last sample outside the band
  Eigen::Index last_violation = -1;
  for (Eigen::Index i = signal.size(); i-- > 0;) {
    if (std::abs(signal(i) - target) > band) {
      last_violation = i;
      break;
    }
  }
  if (last_violation == signal.size() - 1) return std::nullopt; // never settles
  const double t_settle = time[static_cast<std::size_t>(last_violation + 1)];
  return std::max(0.0, t_settle - t_from);
}

/// Largest magnitude of the signal over the window [t_from, t_to].
inline double max_deviation(const Eigen::VectorXd& signal, const std::vector<double>& time,
                            double t_from, double t_to) {
  if (signal.size() != static_cast<Eigen::Index>(time.size()))
    throw ValidationError("max_deviation: signal and grid lengths differ");
  double worst = 0.0;
  bool any = false;
  for (Eigen::Index i = 0; i < signal.size(); ++i) {
    const double t = time[static_cast<std::size_t>(i)];
    if (t < t_from || t > t_to) continue;
    any = true;
    worst = std::max(worst, std::abs(signal(i)));
  }
  if (!any) throw ValidationError("max_deviation: window contains no samples");
  return worst;
}

} // namespace chpsim
