#pragma once

// Numerical core. config_io.hpp is separate because it needs nlohmann/json.

#include "cmrisk/adaptive.hpp"
#include "cmrisk/core_experiment.hpp"
#include "cmrisk/dual_risk.hpp"
#include "cmrisk/finite_sample.hpp"
#include "cmrisk/finite_space.hpp"
#include "cmrisk/gaussian_moments.hpp"
#include "cmrisk/linalg.hpp"
#include "cmrisk/newton.hpp"
#include "cmrisk/optimal_rules.hpp"
#include "cmrisk/quadrature.hpp"
#include "cmrisk/rng.hpp"
#include "cmrisk/rules.hpp"
#include "cmrisk/scalar_search.hpp"

namespace cmrisk {
inline constexpr const char* kVersion = "0.1.0";
}
