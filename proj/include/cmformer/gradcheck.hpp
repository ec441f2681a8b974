#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "cmformer/tensor.hpp"

namespace cmf {

// Finite-difference verification of the reverse-mode gradients. Central
// differences only evaluate the forward pass, so the oracle is independent
// of the backward implementation it checks.

struct GradCheckCase {
  std::string name;
  // Returns the max relative error over all checked elements for one seed.
  std::function<double(std::uint64_t seed)> run;
};

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// rel err with denominator max(|analytic|, |numeric|, 1e-8)
double gradcheck_rel_err(double analytic, double numeric);

// Compare tape gradients of `forward()` (a scalar) against central finite
// differences over every element of every leaf.
double check_scalar_fn(const std::function<Tensor()>& forward,
                       std::vector<Tensor>& leaves, double eps = 1e-5);

// The required op set, attention ops, one full CMA layer, the pixel network,
// and the three losses.
std::vector<GradCheckCase> default_gradcheck_cases();

std::vector<GradCheckResult> run_gradcheck(
    const std::vector<GradCheckCase>& cases,
    const std::vector<std::uint64_t>& seeds, double tolerance,
    std::ostream* log);

}  // namespace cmf
