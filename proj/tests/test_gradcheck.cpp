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

#include <doctest.h>

#include <algorithm>

#include "rescbam/gradcheck.hpp"
#include "rescbam/ops.hpp"

using namespace rescbam;

namespace {

// Elementwise square with a selectable backward rule.
Tensor<double> square(const Tensor<double>& x, double slope) {
  auto out = Tensor<double>::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_data()[i] = x.data()[i] * x.data()[i];
  if (Tape* tape = Tape::active(); tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, slope] {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += slope * x.data()[i] * out.grad()[i];
    });
  }
  return out;
}

GradcheckCase square_case(const char* name, double slope) {
  GradcheckCase c;
  c.name = name;
  c.scope = "op";
  c.run = [slope](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = Tensor<double>::zeros({3, 4}, true);
    for (auto& v : x.mutable_data()) v = rng.uniform(-2, 2);
    return compare_gradients([=] { return sum(square(x, slope)); }, {x}, tol, o);
  };
  return c;
}

}  // namespace

TEST_CASE("a corrupted backward rule is reported as a failure naming the op") {
  const auto reports = run_gradcheck({square_case("square", 2.0), square_case("square.corrupt", 3.0)}, 1);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].passed());
  CHECK(reports[0].draws == 20);
  CHECK_FALSE(reports[1].passed());
  CHECK(reports[1].failures > 0);
  CHECK(reports[1].max_rel_error == doctest::Approx(1.0 / 3.0).epsilon(1e-3));
  const auto table = render_gradcheck_table(reports);
  CHECK(table.find("max_rel_err") != std::string::npos);
  const auto row = table.find("square.corrupt");
  REQUIRE(row != std::string::npos);
  CHECK(table.find("FAIL", row) != std::string::npos);
  CHECK(table.find("worst") != std::string::npos);
}

TEST_CASE("relative error definition") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(0.0, 1e-9) == doctest::Approx(1e-3));
}

TEST_CASE("the model-scope suite passes at 1e-3") {
  const auto reports = run_gradcheck(gradcheck_suite("model"), 3);
  REQUIRE_FALSE(reports.empty());
  for (const auto& r : reports) {
    INFO(r.name << " " << r.worst);
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-3);
  }
  CHECK_THROWS_AS(gradcheck_suite("everything"), Error);
}

namespace {

// max(x, 0) with a selectable slope on the positive side.
Tensor<double> ramp(const Tensor<double>& x, double slope) {
  auto out = Tensor<double>::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_data()[i] = std::max(x.data()[i], 0.0);
  if (Tape* tape = Tape::active(); tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, slope] {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (x.data()[i] > 0 ? slope : 0.0) * out.grad()[i];
    });
  }
  return out;
}

}  // namespace

TEST_CASE("a kink inside the step is resolved at a finer step, a wrong rule is not") {
  auto x = Tensor<double>::zeros({2}, true);
  x.mutable_data()[0] = 4e-6;  // kink at 0 lies within the default 1e-5 step
  x.mutable_data()[1] = 0.5;
  const auto good = compare_gradients([=] { return sum(ramp(x, 1.0)); }, {x}, 1e-4);
  CHECK(good.failures == 0);
  CHECK(good.refined == 1);
  const auto bad = compare_gradients([=] { return sum(ramp(x, 1.5)); }, {x}, 1e-4);
  CHECK(bad.failures == 2);
  CHECK(bad.refined == 0);
}
