#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvrnet/tensor.hpp"

namespace cvrnet {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Tap-shape conformance of the full-scale model at 224×224 (28×28×512,
/// 14×14×1024, 7×7×2048 per encoder, 4096-deep fusion) plus scaled variants.
/// Shape propagation only; no forward pass.
std::vector<CheckResult> verify_shapes();

/// Central finite-difference certification of every operator and block in
/// float64. Linear ops must stay under 1e-5 max relative error, the rest
/// under 1e-4, across `seeds` random draws each.
std::vector<CheckResult> verify_gradcheck(int seeds = 20);

bool all_passed(const std::vector<CheckResult>& results);
std::string format_check_table(const std::vector<CheckResult>& results);

// --- finite-difference harness (float64), shared by the verify suites and
// the test oracles. It probes forward evaluations only, so it is independent
// of every analytic backward it certifies. -------------------------------

/// Max relative error between an analytic gradient and central differences
/// of `scalar_fn` with respect to `x`. `scalar_fn` must not mutate state.
double max_rel_error_fd(const std::function<double()>& scalar_fn, TensorT<double>& x,
                        const TensorT<double>& analytic_grad, double eps = 1e-4);

/// Relative error with a noise floor for near-zero gradient entries.
double rel_error(double analytic, double numeric, double floor = 1e-3);

}  // namespace cvrnet
