#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nmd/autodiff.hpp"

namespace nmd {

/// Raised by `require_pass` when a gradient check fails.
class GradcheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradcheckOptions {
  double eps = 1e-4;
  double tolerance = 1e-5;
  /// Coordinates sampled per input (or across all parameters); 0 checks every one.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

struct GradcheckCoord {
  std::string input;  // input index or parameter name
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;  // |analytic - numeric| / max(1, |numeric|)
};

struct GradcheckReport {
  std::string op;
  double tolerance = 0.0;
  std::size_t checked = 0;
  GradcheckCoord worst;
  std::vector<GradcheckCoord> failures;

  bool passed() const { return failures.empty(); }
  std::string summary() const;
};

using TapeFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Checks d/d(inputs) of sum(R * f(inputs)) for a fixed random projection R
/// against central differences.
GradcheckReport gradcheck(const std::string& op, const TapeFn& f, std::vector<Tensor<double>> inputs,
                          const GradcheckOptions& opts = {});

/// Checks a scalar loss built from `params` against central differences over
/// a random sample of parameter coordinates.
GradcheckReport gradcheck_params(const std::string& name,
                                 const std::function<Var<double>(Tape<double>&)>& loss,
                                 ParamSet<double>& params, const GradcheckOptions& opts = {});

/// Random inputs in [-1, 1]; with `avoid_kinks` values with |x| < 1e-3 are redrawn.
Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool avoid_kinks = false);

/// One report per registered primitive at the given tolerance.
std::vector<GradcheckReport> check_primitives(double tolerance = 1e-5, std::uint64_t seed = 7);

void require_pass(const GradcheckReport& r);

}  // namespace nmd
