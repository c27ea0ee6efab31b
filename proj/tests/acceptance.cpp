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

// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit when any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "oracles.hpp"
#include "properties.hpp"
#include "rescbam/attention.hpp"
#include "rescbam/gradcheck.hpp"
#include "rescbam/losses.hpp"
#include "rescbam/train.hpp"

using namespace rescbam;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// 1 ---------------------------------------------------------------------------
Verdict gradient_suite() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto reports = run_gradcheck(gradcheck_suite("all"), 2026);
  const double secs = since(t0);
  double worst_op = 0, worst_model = 0;
  std::size_t cases = 0, refined = 0;
  for (const auto& r : reports) {
    ++cases;
    refined += r.refined;
    v.require(r.passed(), fmt::format("{} failed ({})", r.name, r.worst));
    if (r.scope == "model") {
      worst_model = std::max(worst_model, r.max_rel_error);
      v.require(r.max_rel_error < 1e-3, fmt::format("{} rel err {:.2e}", r.name, r.max_rel_error));
    } else {
      worst_op = std::max(worst_op, r.max_rel_error);
      v.require(r.max_rel_error < 1e-4, fmt::format("{} rel err {:.2e}", r.name, r.max_rel_error));
      v.require(r.draws >= 20, fmt::format("{} ran {} draws", r.name, r.draws));
    }
  }
  bool has_cbam = false, has_rescbam = false, has_model = false;
  for (const auto& r : reports) {
    has_cbam |= r.name == "cbam";
    has_rescbam |= r.name == "rescbam";
    has_model |= r.scope == "model";
  }
  v.require(has_cbam && has_rescbam, "attention blocks missing from the suite");
  v.require(has_model, "full-model case missing");
  v.require(secs < 300, fmt::format("runtime {:.0f} s", secs));
  v.note(fmt::format("{} cases, op/module max rel {:.2e}, model max rel {:.2e}, {} refined coords, {:.1f} s", cases,
                     worst_op, worst_model, refined, secs));
  return v;
}

// 2 ---------------------------------------------------------------------------
template <typename T>
void attention_oracles(Verdict& v, const char* precision) {
  Rng rng(2);
  std::size_t elements = 0, add_mismatch = 0, sub_mismatch = 0;
  double err_c = 0, err_r = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = std::size_t(8) << rng.index(4);
    auto f = Tensor<T>::zeros({1 + rng.index(2), C, 2 + rng.index(9), 2 + rng.index(9)});
    for (auto& x : f.mutable_data()) x = T(rng.uniform(-4, 4));
    const auto zero = CbamParams<T>::create(C);
    const auto c0 = cbam_apply(f, zero), r0 = rescbam_apply(f, zero);
    for (std::size_t i = 0; i < f.numel(); ++i) {
      err_c = std::max(err_c, std::abs(double(c0.data()[i]) - 0.25 * double(f.data()[i])));
      err_r = std::max(err_r, std::abs(double(r0.data()[i]) - 1.25 * double(f.data()[i])));
    }
    auto p = CbamParams<T>::create(C);
    for (auto* t : {&p.channel.mlp_w1, &p.channel.mlp_w2, &p.spatial.conv_weight, &p.spatial.conv_bias})
      for (auto& x : t->mutable_data()) x = T(rng.uniform(-0.5, 0.5));
    const auto c = cbam_apply(f, p), r = rescbam_apply(f, p);
    for (std::size_t i = 0; i < f.numel(); ++i) {
      ++elements;
      add_mismatch += r.data()[i] != T(f.data()[i] + c.data()[i]);
      sub_mismatch += T(r.data()[i] - c.data()[i]) != f.data()[i];
    }
  }
  v.require(err_c < 1e-6, fmt::format("{} cbam max err {:.2e}", precision, err_c));
  v.require(err_r < 1e-6, fmt::format("{} rescbam max err {:.2e}", precision, err_r));
  v.require(sub_mismatch == 0, fmt::format("{} rescbam-cbam != F bitwise on {}/{} elements", precision, sub_mismatch,
                                           elements));
  v.require(add_mismatch == 0, fmt::format("{} rescbam != F+cbam on {}/{} elements", precision, add_mismatch, elements));
  v.note(fmt::format("{}: 0.25/1.25 max err {:.1e}/{:.1e}, rescbam == F+cbam on {}/{}", precision, err_c, err_r,
                     elements - add_mismatch, elements));
}

Verdict attention() {
  Verdict v;
  attention_oracles<float>(v, "float");
  attention_oracles<double>(v, "double");
  return v;
}

// 3 ---------------------------------------------------------------------------
Verdict losses() {
  Verdict v;
  auto near = [&](double got, double want, const char* what) {
    v.require(std::abs(got - want) < 1e-4, fmt::format("{} = {:.6f}, expected {:.6f}", what, got, want));
  };
  near(ciou_loss(DetBox::from_corners(0, 0, 1, 1), DetBox::from_corners(10, 0, 11, 1)), 1.8197, "ciou disjoint");
  near(ciou_loss(DetBox{5, 5, 2, 1}, DetBox{5, 5, 1, 1}), 0.50325, "ciou nested");
  near(aspect_term_v(1, 1, 2, 1), 0.04196, "v");
  near(ciou_loss(DetBox{3, 4, 2, 5}, DetBox{3, 4, 2, 5}), 0.0, "ciou identical");
  near(bce_loss(0.5, 1.0, 1.0), 0.6931, "bce y=1");
  near(bce_loss(0.5, 0.0, 2.0), 2 * std::log(2.0), "bce w=2");
  near(dfl_loss(std::vector<double>{0.0, 0.5, 0.5, 0.0}, 1.5), std::log(2.0), "dfl half");
  near(dfl_loss(std::vector<double>{0.0, 0.0, 1.0, 0.0}, 2.0), 0.0, "dfl one-hot");

  Rng rng(3);
  double scale_err = 0;
  for (int i = 0; i < 100; ++i) {
    const DetBox p{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(1, 20), rng.uniform(1, 20)};
    const DetBox g{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(1, 20), rng.uniform(1, 20)};
    const double s = std::exp(rng.uniform(-6, 6));
    const DetBox ps{p.cx * s, p.cy * s, p.w * s, p.h * s}, gs{g.cx * s, g.cy * s, g.w * s, g.h * s};
    const double base = ciou_loss(p, g);
    scale_err = std::max(scale_err, std::abs(ciou_loss(ps, gs) - base) / std::max(1.0, base));
  }
  v.require(scale_err < 1e-9, fmt::format("ciou scale drift {:.2e}", scale_err));

  double simplex_err = 0;
  for (int i = 0; i < 50; ++i) {
    const double y = rng.uniform(0, 15.999);
    const auto t = DflTarget::make(y, 16);
    double best = INFINITY, arg = 0;
    for (int k = 1; k < 10000; ++k) {
      std::vector<double> probs(17, 0.0);
      probs[t.lower] = k / 10000.0;
      probs[t.lower + 1] = 1 - k / 10000.0;
      const double l = dfl_loss(probs, y);
      if (l < best) best = l, arg = k / 10000.0;
    }
    simplex_err = std::max(simplex_err, std::abs(arg - t.weight_lower));
  }
  v.require(simplex_err <= 1e-3, fmt::format("dfl simplex minimiser off by {:.2e}", simplex_err));
  v.note(fmt::format("examples within 1e-4, scale drift {:.1e} over 100 scales, simplex error {:.1e}", scale_err,
                     simplex_err));
  return v;
}

// 4 ---------------------------------------------------------------------------
Verdict metrics() {
  Verdict v;
  Rng rng(4);
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    const auto f = oracle::random_fixture(rng);
    const auto why = props::compare_with_oracle(f, ApMethod::interp101, 1e-9);
    v.require(why.empty(), "fixture " + std::to_string(i) + ": " + why);
    agree += why.empty();
  }
  int perturbed = 0, duplicates = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto f = oracle::random_fixture(rng);
    bool exercised = false;
    for (const auto& why : {props::check_monotone_map(f, rng), props::check_duplicate_tp(f, rng, &exercised),
                            props::check_map_order(f)}) {
      v.require(why.empty(), "perturbation " + std::to_string(i) + ": " + why);
    }
    ++perturbed;
    duplicates += exercised;
  }
  v.note(fmt::format("{}/100 fixtures agree to 1e-9; {} perturbations ({} with a duplicate TP)", agree, perturbed,
                     duplicates));
  return v;
}

// 5 ---------------------------------------------------------------------------
Verdict drop_in() {
  Verdict v;
  std::vector<std::vector<TraceEntry>> traces;
  std::vector<std::size_t> params;
  for (auto kind : {AttentionKind::none, AttentionKind::cbam, AttentionKind::rescbam}) {
    auto m = Model<float>::build(ModelSpec::preset("nano", 2, kind), 0);
    m.set_training(false);
    NoGradScope ng;
    traces.emplace_back();
    m.forward(Tensor<float>::full({2, 3, 64, 64}, 0.5f), &traces.back());
    params.push_back(m.parameter_count());
  }
  v.require(traces[0] == traces[1] && traces[0] == traces[2], "traced shapes differ");
  v.require(params[1] == params[2], fmt::format("cbam {} vs rescbam {} params", params[1], params[2]));
  v.require(params[1] > params[0], fmt::format("attention {} <= none {} params", params[1], params[0]));
  v.note(fmt::format("{} traced nodes; params none {} cbam {} rescbam {}", traces[0].size(), params[0], params[1],
                     params[2]));
  return v;
}

// 6 ---------------------------------------------------------------------------
TrainConfig toy_config(AttentionKind kind, std::size_t epochs) {
  TrainConfig c;
  c.scale = "nano";
  c.num_classes = 2;
  c.input_size = 64;
  c.epochs = epochs;
  c.seed = 1;
  c.attention = kind;
  return c;
}

Verdict toy_training() {
  Verdict v;
  const auto data = generate_synthetic_dataset(20, 2, 7);
  for (auto kind : {AttentionKind::rescbam, AttentionKind::none}) {
    const auto cfg = toy_config(kind, 300);
    const auto t0 = Clock::now();
    auto out = train_model(cfg, data, {});
    const double secs = since(t0);
    const auto ev = evaluate_model(out.last, data, cfg);
    const char* name = kind == AttentionKind::none ? "none" : "rescbam";
    v.require(ev.report.map50 >= 0.9, fmt::format("{} train mAP50 {:.3f}", name, ev.report.map50));
    v.require(secs < 900, fmt::format("{} took {:.0f} s", name, secs));
    v.note(fmt::format("{}: mAP50 {:.3f} after {} epochs, final loss {:.4f}, {:.0f} s", name, ev.report.map50,
                       out.log.size(), out.log.back().loss, secs));
  }
  // Identical seeds: two fresh runs must log the same bytes.
  std::string logs[2];
  for (auto& log : logs) {
    const auto out = train_model(toy_config(AttentionKind::rescbam, 10), data, {});
    for (const auto& r : out.log) log += render_epoch_record(r);
  }
  v.require(!logs[0].empty() && logs[0] == logs[1], "repeated 10-epoch run logged different losses");
  v.note("repeat run logs identical");
  return v;
}

// 7 ---------------------------------------------------------------------------
Verdict ablation() {
  Verdict v;
  const auto data = generate_synthetic_dataset(20, 2, 11);
  const auto manifest = split_dataset([&] {
    std::vector<std::string> ids;
    for (const auto& s : data) ids.push_back(s.id);
    return ids;
  }(), 11, {0.8, 0.0, 0.2});
  std::vector<Sample> train, test;
  for (const auto& s : data) {
    (std::find(manifest.test.begin(), manifest.test.end(), s.id) != manifest.test.end() ? test : train).push_back(s);
  }
  auto cfg = toy_config(AttentionKind::rescbam, 10);
  const auto rows = run_ablation(cfg, {64, 128}, {AttentionKind::none, AttentionKind::rescbam}, train, test);
  v.require(rows.size() == 4, fmt::format("{} rows", rows.size()));
  for (const auto& r : rows) {
    v.require(r.params > 0 && r.flops > 0 && r.ms_per_image > 0, r.variant + " missing counters");
    v.require(std::isfinite(r.f1) && std::isfinite(r.map50) && std::isfinite(r.map5095), r.variant + " non-finite");
  }
  const auto table = render_ablation_table(rows);
  for (const char* col : {"params", "flops", "F1", "mAP50", "mAP50-95", "ms/img"}) {
    v.require(table.find(col) != std::string::npos, std::string("missing column ") + col);
  }
  std::fputs(table.c_str(), stdout);
  v.note(fmt::format("{} rows at 64 and 128 px", rows.size()));
  return v;
}

// 8 ---------------------------------------------------------------------------
Verdict split() {
  Verdict v;
  const SplitRatios realized{14204.0 / 20327, 4094.0 / 20327, 2029.0 / 20327};
  std::vector<std::string> ids;
  for (int i = 0; i < 20327; ++i) ids.push_back(std::to_string(i));
  const auto m = split_dataset(ids, 0, realized);
  v.require(m.train.size() == 14204 && m.val.size() == 4094 && m.test.size() == 2029,
            fmt::format("{}/{}/{}", m.train.size(), m.val.size(), m.test.size()));
  v.note(fmt::format("{}/{}/{}", m.train.size(), m.val.size(), m.test.size()));
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"1 gradient suite", gradient_suite}, {"2 attention oracles", attention},
      {"3 loss oracles", losses},           {"4 metric oracle", metrics},
      {"5 drop-in invariance", drop_in},    {"6 toy training", toy_training},
      {"7 ablation harness", ablation},     {"8 split arithmetic", split},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    failed += !v.pass;
    std::printf("%s  %-22s %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str(), since(t0));
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
