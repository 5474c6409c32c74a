// Finite-difference gradient checks over the network's building blocks and a
// small end-to-end model, in 64-bit precision.
#pragma once

#include "segsurv/gradcheck.hpp"

#include <string>
#include <utility>
#include <vector>

namespace segsurv {

/// Components: "dice", "focal", "mtlr_nll", "attention", "model". Pass "all"
/// to run every component in that order.
std::vector<std::pair<std::string, GradCheckReport>> run_gradient_suite(const std::string& component,
                                                                        const GradCheckOptions& opts);

std::vector<std::string> gradient_suite_components();

/// Suite defaults: tolerance 1e-4 and a 3e-5 step. Smaller steps let roundoff
/// swamp entries whose true gradient is exactly zero (attention key bias);
/// larger ones straddle ReLU kinks in the full model.
GradCheckOptions gradient_suite_options();

}  // namespace segsurv
