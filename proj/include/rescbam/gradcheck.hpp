// Copyright 2026 The ResCBAM-Det Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Central finite-difference checks of tape gradients, in double precision.

#include <functional>
#include <string>
#include <vector>

#include "rescbam/random.hpp"
#include "rescbam/tensor.hpp"

namespace rescbam {

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-6;  // smallest denominator of the relative error
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradcheckStats {
  std::size_t coordinates = 0;
  std::size_t failures = 0;
  std::size_t refined = 0;  // passed only at a finer step (kink within the coarse one)
  double max_rel_error = 0;
  std::string worst;  // "input i[j]: analytic a, numeric n"
};

/// Rebuilds the scalar `loss` from the current values of `inputs`, compares
/// its tape gradient with central differences. `coords[i]` restricts the
/// checked indices of input i; empty means all of them. A coordinate that
/// misses the tolerance is re-estimated at step/10 and step/100 before it
/// counts as a failure.
GradcheckStats compare_gradients(const std::function<Tensor<double>()>& loss, const std::vector<Tensor<double>>& inputs,
                                 double tolerance, const GradcheckOptions& options = {},
                                 const std::vector<std::vector<std::size_t>>& coords = {});

struct GradcheckCase {
  std::string name;
  std::string scope;  // op, module or model
  double tolerance = 1e-4;
  std::size_t draws = 20;  // random parameter draws
  std::function<GradcheckStats(Rng&, double tolerance, const GradcheckOptions&)> run;
};

struct GradcheckReport {
  std::string name, scope;
  std::size_t draws = 0, coordinates = 0, failures = 0, refined = 0;
  double max_rel_error = 0, tolerance = 0;
  std::string worst;
  double seconds = 0;

  bool passed() const { return failures == 0 && coordinates > 0; }
};

/// Built-in suite. `scope` is op, module, model or all.
std::vector<GradcheckCase> gradcheck_suite(const std::string& scope);

std::vector<GradcheckReport> run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed,
                                           const GradcheckOptions& options = {});

/// One row per case with its max relative error and verdict.
std::string render_gradcheck_table(const std::vector<GradcheckReport>& reports);

}  // namespace rescbam
