// Finite-difference verification of the reverse-mode gradients. Everything
// runs in double with central differences, refined by a second half-step
// stencil: Richardson extrapolation removes the quadratic truncation term.
// Per-op checks probe at step 1e-3 on small tensors built to keep the step
// clear of ReLU and pooling kinks; the end-to-end micro-model check probes
// at 1e-5, because a first-layer weight moved by 1e-3 shifts every
// downstream activation and some of the thousands of them always sit closer
// than that to a kink. A probed interval may straddle a ReLU sign change or a
// pooling argmax flip, where a difference quotient does not estimate the
// derivative; when the central estimate misses, the probe is retried with
// second-order one-sided stencils, which stay clean as long as one side of
// the interval is kink-free. Probes failing all three stencils while the two
// central stencils also disagree with each other are excluded as non-smooth
// and counted; an exclusion rate above 2% fails the check, so breakage
// cannot hide behind the filter (a wrong backward pass produces consistent
// stencils that all miss, and is always counted). A check passes when
// |analytic - fd| / max(|analytic|, |fd|, 0.01) stays below 1e-4, or 1e-3
// where the gradient crosses a batch-norm layer.
#pragma once

#include <functional>
#include <ostream>

#include "dmg/model.hpp"
#include "dmg/ops.hpp"

namespace dmg {

struct GradCheckResult {
  std::string name;
  int checked = 0;
  int skipped = 0;  // non-smooth probe intervals, see header comment
  double max_rel = 0.0;
  double tolerance = 1e-4;
  bool pass() const { return max_rel < tolerance && 50 * skipped <= checked; }
};

namespace gradcheck_detail {

constexpr double kRelFloor = 0.01;
constexpr double kStencilGate = 5e-3;  // max fd(h) vs fd(h/2) disagreement

using Fwd = std::function<Tensor<double>(Tape<double>*)>;

// Compares tape gradients against extrapolated central differences for
// every element of every leaf (or a deterministic subsample when cap is
// positive).
inline void fd_compare(const Fwd& fwd, std::vector<Tensor<double>*> leaves, Rng& pick,
                       int64_t cap, GradCheckResult& res, double step = 1e-3) {
  for (auto* l : leaves) l->zero_grad();
  Tape<double> tape;
  Tensor<double> loss = fwd(&tape);
  tape.backward(loss);
  auto probe = [&fwd](double* slot, double value) {
    double orig = *slot;
    *slot = value;
    double l = fwd(nullptr).item();
    *slot = orig;
    return l;
  };
  for (auto* leaf : leaves) {
    std::vector<int64_t> idx;
    if (cap > 0 && leaf->numel() > cap) {
      for (int64_t i = 0; i < cap; ++i) idx.push_back(pick.uniform_int(0, leaf->numel() - 1));
    } else {
      idx.resize(static_cast<size_t>(leaf->numel()));
      for (int64_t i = 0; i < leaf->numel(); ++i) idx[static_cast<size_t>(i)] = i;
    }
    const double* grad = leaf->grad();
    for (int64_t i : idx) {
      double* slot = leaf->data() + i;
      double orig = *slot;
      double a = grad[i];
      double lp = probe(slot, orig + step);
      double lm = probe(slot, orig - step);
      double lp2 = probe(slot, orig + step / 2);
      double lm2 = probe(slot, orig - step / 2);
      double fd_h = (lp - lm) / (2.0 * step);
      double fd_h2 = (lp2 - lm2) / step;
      double fd = (4.0 * fd_h2 - fd_h) / 3.0;
      auto rel_to = [&](double est) {
        return std::abs(est - a) / std::max({kRelFloor, std::abs(est), std::abs(a)});
      };
      double rel = rel_to(fd);
      if (rel >= res.tolerance) {
        double l0 = probe(slot, orig);
        double fd_r = (-3.0 * l0 + 4.0 * lp2 - lp) / step;
        double fd_l = (3.0 * l0 - 4.0 * lm2 + lm) / step;
        rel = std::min({rel, rel_to(fd_r), rel_to(fd_l)});
        if (rel >= res.tolerance) {
          double dis =
              std::abs(fd_h - fd_h2) / std::max({kRelFloor, std::abs(fd_h), std::abs(fd_h2)});
          if (dis > kStencilGate) {
            ++res.skipped;
            continue;
          }
        }
      }
      res.max_rel = std::max(res.max_rel, rel);
      ++res.checked;
    }
  }
}

// Projects an op output to a scalar through a fixed random weighting, so
// every output element influences the loss.
inline Fwd scalarized(std::function<Tensor<double>(Tape<double>*)> op, Shape4 out_shape,
                      Rng& rng) {
  Tensor<double> wmask = Tensor<double>::randn(out_shape, rng, 1.0);
  return [op = std::move(op), wmask](Tape<double>* tape) {
    return reduce_mean(tape, mul(tape, op(tape), wmask));
  };
}

// Spreads the four values of each 2x2 pooling window at least 0.05 apart,
// keeping their order, so a +-1e-3 probe can never flip the argmax.
inline void separate_pool_windows(Tensor<double>& x) {
  const Shape4& s = x.shape();
  for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
    double* plane = x.data() + bc * s.plane();
    for (int64_t oy = 0; oy + 1 < s.h; oy += 2) {
      for (int64_t ox = 0; ox + 1 < s.w; ox += 2) {
        int64_t at[4] = {oy * s.w + ox, oy * s.w + ox + 1, (oy + 1) * s.w + ox,
                         (oy + 1) * s.w + ox + 1};
        int order[4] = {0, 1, 2, 3};
        std::sort(order, order + 4,
                  [&](int a, int b) { return plane[at[a]] < plane[at[b]]; });
        for (int r = 0; r < 4; ++r) plane[at[order[r]]] += 0.05 * r;
      }
    }
  }
}

inline void keep_away_from_zero(Tensor<double>& x, double margin) {
  for (int64_t i = 0; i < x.numel(); ++i) {
    double& v = x.data()[i];
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
}

}  // namespace gradcheck_detail

// Per-op finite-difference checks on small random tensors.
inline std::vector<GradCheckResult> run_op_gradchecks(uint64_t seed) {
  using namespace gradcheck_detail;
  Rng root(seed);
  std::vector<GradCheckResult> results;

  auto run = [&](const std::string& name, double tol,
                 std::function<void(Rng&, GradCheckResult&)> body) {
    GradCheckResult res;
    res.name = name;
    res.tolerance = tol;
    Rng rng = root.fork(name);
    body(rng, res);
    results.push_back(res);
  };

  run("conv2d_3x3", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 3, 6, 6}, rng, 1.0, true);
    Tensor<double> w = Tensor<double>::randn({4, 3, 3, 3}, rng, 0.4, true);
    Tensor<double> b = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.2, true);
    auto fwd = scalarized([&](Tape<double>* t) { return conv2d(t, x, w, b); },
                          Shape4{2, 4, 6, 6}, rng);
    fd_compare(fwd, {&x, &w, &b}, rng, 0, res);
  });

  run("conv2d_1x1", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 6, 5, 5}, rng, 1.0, true);
    Tensor<double> w = Tensor<double>::randn({3, 6, 1, 1}, rng, 0.4, true);
    Tensor<double> b = Tensor<double>::randn({1, 3, 1, 1}, rng, 0.2, true);
    auto fwd = scalarized([&](Tape<double>* t) { return conv2d(t, x, w, b); },
                          Shape4{2, 3, 5, 5}, rng);
    fd_compare(fwd, {&x, &w, &b}, rng, 0, res);
  });

  run("transpose_conv2d", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    Tensor<double> w = Tensor<double>::randn({3, 4, 4, 4}, rng, 0.3, true);
    Tensor<double> b = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.2, true);
    auto fwd = scalarized([&](Tape<double>* t) { return transpose_conv2d(t, x, w, b); },
                          Shape4{2, 4, 8, 8}, rng);
    fd_compare(fwd, {&x, &w, &b}, rng, 0, res);
  });

  run("batch_norm_train", 1e-3, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({3, 4, 5, 5}, rng, 1.0, true);
    Tensor<double> gamma = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.3, true);
    for (int i = 0; i < 4; ++i) gamma.data()[i] += 1.0;
    Tensor<double> beta = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.3, true);
    auto fwd = scalarized(
        [&](Tape<double>* t) {
          std::vector<double> rm(4, 0.0), rv(4, 1.0);
          return batch_norm(t, x, gamma, beta, rm, rv, true);
        },
        Shape4{3, 4, 5, 5}, rng);
    fd_compare(fwd, {&x, &gamma, &beta}, rng, 0, res);
  });

  run("batch_norm_eval", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 4, 5, 5}, rng, 1.0, true);
    Tensor<double> gamma = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.3, true);
    Tensor<double> beta = Tensor<double>::randn({1, 4, 1, 1}, rng, 0.3, true);
    std::vector<double> rm(4), rv(4);
    for (int i = 0; i < 4; ++i) {
      rm[static_cast<size_t>(i)] = rng.uniform(-0.5, 0.5);
      rv[static_cast<size_t>(i)] = rng.uniform(0.5, 2.0);
    }
    auto fwd = scalarized(
        [&, rm, rv](Tape<double>* t) {
          std::vector<double> rm2 = rm, rv2 = rv;
          return batch_norm(t, x, gamma, beta, rm2, rv2, false);
        },
        Shape4{2, 4, 5, 5}, rng);
    fd_compare(fwd, {&x, &gamma, &beta}, rng, 0, res);
  });

  run("relu", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 3, 6, 6}, rng, 1.0, true);
    gradcheck_detail::keep_away_from_zero(x, 0.05);
    auto fwd = scalarized([&](Tape<double>* t) { return relu(t, x); }, x.shape(), rng);
    fd_compare(fwd, {&x}, rng, 0, res);
  });

  run("sigmoid", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 3, 6, 6}, rng, 2.0, true);
    auto fwd = scalarized([&](Tape<double>* t) { return sigmoid(t, x); }, x.shape(), rng);
    fd_compare(fwd, {&x}, rng, 0, res);
  });

  run("maxpool2x2", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 3, 6, 6}, rng, 1.0, true);
    separate_pool_windows(x);
    auto fwd = scalarized([&](Tape<double>* t) { return maxpool2x2(t, x); },
                          Shape4{2, 3, 3, 3}, rng);
    fd_compare(fwd, {&x}, rng, 0, res);
  });

  run("concat_channels", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> a = Tensor<double>::randn({2, 2, 4, 4}, rng, 1.0, true);
    Tensor<double> b = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    auto fwd = scalarized([&](Tape<double>* t) { return concat_channels(t, a, b); },
                          Shape4{2, 5, 4, 4}, rng);
    fd_compare(fwd, {&a, &b}, rng, 0, res);
  });

  run("add", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> a = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    Tensor<double> b = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    auto fwd = scalarized([&](Tape<double>* t) { return add(t, a, b); }, a.shape(), rng);
    fd_compare(fwd, {&a, &b}, rng, 0, res);
  });

  run("mul", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> a = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    Tensor<double> b = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
    auto fwd = scalarized([&](Tape<double>* t) { return mul(t, a, b); }, a.shape(), rng);
    fd_compare(fwd, {&a, &b}, rng, 0, res);
  });

  run("mul_broadcast", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> a = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.0, true);
    Tensor<double> b = Tensor<double>::randn({2, 1, 4, 4}, rng, 1.0, true);
    auto fwd = scalarized([&](Tape<double>* t) { return mul(t, a, b); }, a.shape(), rng);
    fd_compare(fwd, {&a, &b}, rng, 0, res);
  });

  run("softmax_channels", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.5, true);
    auto fwd = scalarized([&](Tape<double>* t) { return softmax_channels(t, x); }, x.shape(),
                          rng);
    fd_compare(fwd, {&x}, rng, 0, res);
  });

  run("cross_entropy", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    // Valid probabilities away from the clamp bounds: softmax of mild logits.
    Tensor<double> logits = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.0);
    Tensor<double> probs = softmax_channels<double>(nullptr, logits);
    probs.set_requires_grad(true);
    std::vector<uint8_t> labels(2 * 4 * 4);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 3));
    labels[3] = 255;  // one unlabeled pixel exercises the skip path
    Tensor<double> target = one_hot<double>(labels, 2, 4, 4, 4);
    auto fwd = [&](Tape<double>* t) { return cross_entropy(t, probs, target); };
    fd_compare(fwd, {&probs}, rng, 0, res);
  });

  run("cross_entropy_weighted", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> logits = Tensor<double>::randn({1, 4, 4, 4}, rng, 1.0);
    Tensor<double> probs = softmax_channels<double>(nullptr, logits);
    probs.set_requires_grad(true);
    std::vector<uint8_t> labels(16);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 3));
    Tensor<double> target = one_hot<double>(labels, 1, 4, 4, 4);
    std::vector<double> weights = {0.5, 1.0, 2.0, 4.0};
    auto fwd = [&](Tape<double>* t) { return cross_entropy(t, probs, target, weights); };
    fd_compare(fwd, {&probs}, rng, 0, res);
  });

  run("softmax_cross_entropy_chain", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    Tensor<double> x = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.0, true);
    std::vector<uint8_t> labels(2 * 4 * 4);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 3));
    Tensor<double> target = one_hot<double>(labels, 2, 4, 4, 4);
    auto fwd = [&](Tape<double>* t) {
      return cross_entropy(t, softmax_channels(t, x), target);
    };
    fd_compare(fwd, {&x}, rng, 0, res);
  });

  run("attention_gate", 1e-4, [&](Rng& rng, GradCheckResult& res) {
    nn::AttentionGate<double> gate;
    gate.build("gate", 4, rng);
    Tensor<double> skip = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.0, true);
    Tensor<double> g = Tensor<double>::randn({2, 4, 4, 4}, rng, 1.0, true);
    std::vector<Parameter<double>*> ps;
    gate.collect(ps, nullptr);
    std::vector<Tensor<double>*> leaves = {&skip, &g};
    for (auto* p : ps) leaves.push_back(&p->value);
    auto fwd = scalarized([&](Tape<double>* t) { return gate.forward(t, skip, g); },
                          skip.shape(), rng);
    fd_compare(fwd, leaves, rng, 0, res);
  });

  return results;
}

// End-to-end check of a depth-2, base-width-4 model: every parameter (and
// the two input stacks) on the first seed, a random subsample on the rest.
inline GradCheckResult run_model_gradcheck(uint64_t seed, int64_t per_leaf_cap) {
  using namespace gradcheck_detail;
  GradCheckResult res;
  res.name = "micro_model";
  res.tolerance = 1e-3;  // every path crosses batch-norm layers
  ModelConfig cfg;
  cfg.mode = 2;
  cfg.base_width = 4;
  cfg.depth = 2;
  DualEncoderUNet<double> model(cfg, seed);
  Rng rng = Rng(seed).fork("micro-model-data");
  Tensor<double> pre = Tensor<double>::randn({1, 3, 16, 16}, rng, 1.0, true);
  Tensor<double> post = Tensor<double>::randn({1, 3, 16, 16}, rng, 1.0, true);
  std::vector<uint8_t> labels(16 * 16);
  for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 3));
  Tensor<double> target = one_hot<double>(labels, 1, 16, 16, 4);
  auto fwd = [&](Tape<double>* t) {
    Tensor<double> logits = model.forward(t, pre, post, true);
    return cross_entropy(t, softmax_channels(t, logits), target);
  };
  std::vector<Tensor<double>*> leaves = {&pre, &post};
  for (auto* p : model.params()) leaves.push_back(&p->value);
  fd_compare(fwd, leaves, rng, per_leaf_cap, res, 1e-5);
  return res;
}

// The full suite: every op at `seeds` seeds, plus the micro model with one
// exhaustive pass and subsampled passes on the remaining seeds.
inline bool run_gradcheck_suite(int seeds, std::ostream& os) {
  require(seeds >= 1, "gradcheck: need at least one seed");
  bool all_pass = true;
  std::vector<GradCheckResult> totals;
  for (int s = 0; s < seeds; ++s) {
    auto results = run_op_gradchecks(1000 + static_cast<uint64_t>(s));
    if (totals.empty()) {
      totals = results;
    } else {
      for (size_t i = 0; i < results.size(); ++i) {
        totals[i].checked += results[i].checked;
        totals[i].skipped += results[i].skipped;
        totals[i].max_rel = std::max(totals[i].max_rel, results[i].max_rel);
      }
    }
  }
  GradCheckResult micro;
  for (int s = 0; s < seeds; ++s) {
    GradCheckResult r =
        run_model_gradcheck(2000 + static_cast<uint64_t>(s), s == 0 ? 0 : 12);
    if (s == 0) {
      micro = r;
    } else {
      micro.checked += r.checked;
      micro.skipped += r.skipped;
      micro.max_rel = std::max(micro.max_rel, r.max_rel);
    }
  }
  totals.push_back(micro);
  for (const auto& r : totals) {
    os << (r.pass() ? "PASS" : "FAIL") << "  " << r.name << "  checked=" << r.checked
       << "  skipped=" << r.skipped << "  max_rel=" << r.max_rel << "  tol=" << r.tolerance
       << "\n";
    all_pass = all_pass && r.pass();
  }
  return all_pass;
}

}  // namespace dmg
