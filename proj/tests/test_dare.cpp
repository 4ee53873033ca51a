#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "darelab/dare/losses.hpp"
#include "darelab/dare/optim.hpp"
#include "darelab/error.hpp"
#include "darelab/numerics/grad_check.hpp"
#include "support.hpp"

using namespace darelab;
using darelab::testing::tiny_dims;

namespace {

const Vocab& V() {
  static const Vocab v = build_vocab();
  return v;
}

double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Scene {
  ModelDims dims = tiny_dims();
  ModelParams params = init_params(31, tiny_dims());
  Caption caption = parse_caption(V(), "the red circle of topleft static");
  Condition cond = Condition::full(caption);
  Registry registry{V()};
  FlowPoint fp;

  Scene() {
    Rng rng(8);
    fp = make_flow_point(gaussian(rng, dims.grid.shape()), gaussian(rng, dims.grid.shape()), 0.42);
    registry.set({*V().find("the"), 0.2, 40});
    registry.set({*V().find("of"), 0.3, 20});
    registry.set({*V().find("red"), 0.9, 5});
    registry.set({*V().find("circle"), 1.1, 4});
    registry.set({*V().find("static"), 0.5, 6});
  }
};

}  // namespace

TEST(PwMap, ZeroAndOne) {
  EXPECT_EQ(pw_map(Tensor::scalar(0), PwMode::two_sigma_minus_one).item(), 0.0);
  EXPECT_EQ(pw_map(Tensor::scalar(0), PwMode::sigma_only).item(), 0.5);
  EXPECT_NEAR(pw_map(Tensor::scalar(1), PwMode::two_sigma_minus_one).item(), 2 * ref_sigmoid(1) - 1, 1e-15);
  EXPECT_NEAR(pw_map(Tensor::scalar(1), PwMode::two_sigma_minus_one).item(), 0.462117, 1e-6);
}

TEST(PwMap, SaturatesBelowOne) {
  for (PwMode m : {PwMode::two_sigma_minus_one, PwMode::sigma_only}) {
    const double big = pw_map(Tensor::scalar(1e6), m).item();
    EXPECT_LT(big, 1.0);
    EXPECT_GT(big, 1.0 - 1e-15);
    EXPECT_EQ(pw_map(Tensor::scalar(std::numeric_limits<double>::infinity()), m).item(), big);
  }
}

TEST(PwMap, NegativeOrNanIsDomainError) {
  EXPECT_THROW(pw_map(Tensor::scalar(-1e-12), PwMode::sigma_only), DomainError);
  EXPECT_THROW(pw_map(Tensor::scalar(std::nan("")), PwMode::two_sigma_minus_one), DomainError);
}

TEST(PwMap, BoundedAndMonotoneProperty) {
  Rng rng(1);
  Tensor raw({5000});
  for (double& v : raw.data()) v = -std::log(1 - rng.uniform()) * 3.0;
  std::sort(raw.data().begin(), raw.data().end());
  const Tensor a = pw_map(raw, PwMode::two_sigma_minus_one), b = pw_map(raw, PwMode::sigma_only);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    ASSERT_GE(a[i], 0.0);
    ASSERT_LT(a[i], 1.0);
    ASSERT_GE(b[i], 0.5);
    ASSERT_LT(b[i], 1.0);
    if (i) {
      ASSERT_GE(a[i], a[i - 1]);
      ASSERT_GE(b[i], b[i - 1]);
    }
  }
}

TEST(Schedule, MidpointAndTails) {
  ScheduleConfig c{2000.0, 0.001};
  EXPECT_EQ(alpha(2000, c), 0.5);
  EXPECT_NEAR(alpha(6000, c), ref_sigmoid(-4), 1e-12);
  EXPECT_NEAR(alpha(6000, c), 0.017986, 1e-6);
  c.hbar = 5000;
  EXPECT_NEAR(alpha(1000, c), 0.982014, 1e-6);
}

TEST(Schedule, StrictlyDecreasing) {
  const ScheduleConfig c{2000.0, 0.001};
  for (int i = 1; i <= 4000; ++i) ASSERT_LT(alpha(i, c), alpha(i - 1, c));
}

TEST(Schedule, ConfigValidation) {
  EXPECT_THROW((ScheduleConfig{-1, 0.001}.validate()), ConfigError);
  EXPECT_THROW((ScheduleConfig{10, 0.0}.validate()), ConfigError);
  EXPECT_THROW((DrCfgConfig{1.0}.validate()), ConfigError);
  EXPECT_THROW((SraConfig{0.0}.validate()), ConfigError);
}

TEST(DrCfg, AllOnesWeightsReduceToFlowMatching) {
  Scene s;
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
  const Tensor ones(s.dims.grid.shape(), 1.0);
  const DrResult r = dr_cfg_loss(s.params, g.u, s.fp, s.cond, s.registry, {}, &ones);
  EXPECT_NEAR(r.loss.value().item(), fm_loss(g.u.value(), s.fp.v), 1e-15);
}

TEST(DrCfg, ExactLowConditionPredictionZeroesLoss) {
  // u' == v makes P_w == pw_map(0) == 0 in the default mode.
  Scene s;
  Tape tape;
  Var u = tape.parameter(Tensor(s.dims.grid.shape(), 3.0));
  const Tensor zero_raw(s.dims.grid.shape(), 0.0);
  const Tensor pw = pw_map(zero_raw, PwMode::two_sigma_minus_one);
  const Var l = weighted_fm_loss(u, s.fp.v, pw);
  EXPECT_EQ(l.value().item(), 0.0);
}

TEST(DrCfg, ComputedWeightsMatchIndependentRecomputation) {
  Scene s;
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
  const DrResult r = dr_cfg_loss(s.params, g.u, s.fp, s.cond, s.registry, {});
  // K = 6, rho 0.15 -> one kept position: "the" has the smallest weight.
  ASSERT_EQ(r.kept, (std::vector<std::size_t>{0}));
  EXPECT_FALSE(r.fallback);
  const Condition low = Condition::keep_only(s.caption, {true, false, false, false, false, false});
  const Tensor ul = forward(s.params, s.fp.x_t, s.fp.t, low).u;
  double want = 0;
  for (std::size_t i = 0; i < ul.size(); ++i) {
    const double d = s.fp.v[i] - ul[i];
    const double pw = 2 * ref_sigmoid(d * d) - 1;
    ASSERT_NEAR(r.pw[i], pw, 1e-15);
    const double e = g.u.value()[i] - s.fp.v[i];
    want += pw * e * e;
  }
  EXPECT_NEAR(r.loss.value().item(), want / static_cast<double>(ul.size()), 1e-14);
}

TEST(DrCfg, FallbackWhenNothingSeen) {
  Scene s;
  Registry empty(V());
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
  const DrResult r = dr_cfg_loss(s.params, g.u, s.fp, s.cond, empty, {});
  EXPECT_TRUE(r.fallback);
  EXPECT_EQ(r.loss.value().item(), fm_loss(g.u.value(), s.fp.v));
}

TEST(DrCfg, KeepingEveryTokenIsNotAnError) {
  Scene s;
  Registry all(V());
  for (int id : s.caption.token_ids) all.set({id, 1.0, 3});
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
  const DrResult r = dr_cfg_loss(s.params, g.u, s.fp, s.cond, all, DrCfgConfig{0.99});
  EXPECT_EQ(r.kept.size(), 6u);
  const Tensor full = forward(s.params, s.fp.x_t, s.fp.t, s.cond).u;
  EXPECT_EQ(r.pw, pw_map(fm_residual(s.fp.v, full), PwMode::two_sigma_minus_one));
}

TEST(DrCfg, GradientEqualsDetachedWeightGradientBitwise) {
  Scene s;
  auto grads = [&](bool override_pw, Tensor* pw_out) {
    Tape tape;
    ModelVars vars = bind_params(tape, s.params, true);
    const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
    const DrResult r = dr_cfg_loss(s.params, g.u, s.fp, s.cond, s.registry, {}, override_pw ? pw_out : nullptr);
    if (!override_pw) *pw_out = r.pw;
    tape.backward(r.loss);
    std::vector<Tensor> out;
    for (Var v : flatten(vars)) out.push_back(tape.grad(v));
    return out;
  };
  Tensor pw;
  const auto a = grads(false, &pw);
  const auto b = grads(true, &pw);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

TEST(DrCfg, GradientMatchesFiniteDifferencesWithFrozenWeights) {
  Scene s;
  Tensor pw;
  {
    Tape tape;
    ModelVars vars = bind_params(tape, s.params, false);
    const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
    pw = dr_cfg_loss(s.params, g.u, s.fp, s.cond, s.registry, {}).pw;
  }
  std::vector<Tensor> flat = darelab::testing::flat_copy(s.params);
  auto f = [&](Tape& tape, std::span<const Var> ps) {
    const ModelVars vars = unflatten(ps, s.dims.layers);
    const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, false);
    return dr_cfg_loss(s.params, g.u, s.fp, s.cond, s.registry, {}, &pw).loss;
  };
  const auto r = grad_check(f, flat);
  EXPECT_LT(r.max_rel_error, 1e-4) << "param " << r.worst.param;
}

TEST(CaptionWeights, UnseenTakeMaxSeen) {
  Scene s;
  const auto w = caption_weights(s.registry, s.cond);
  ASSERT_EQ(w.size(), 6u);
  const double wmax = std::max({weight(s.registry.stats(*V().find("red"))), weight(s.registry.stats(*V().find("circle"))),
                                weight(s.registry.stats(*V().find("the"))), weight(s.registry.stats(*V().find("of"))),
                                weight(s.registry.stats(*V().find("static")))});
  EXPECT_EQ(w[4], wmax);  // topleft is unseen
  EXPECT_EQ(w[0], weight(s.registry.stats(*V().find("the"))));
  EXPECT_TRUE(caption_weights(Registry(V()), s.cond).empty());
}

TEST(SraFactors, PopulationStdAndFloor) {
  const auto f = sra_factors({1.0, 3.0}, {});
  EXPECT_EQ(f, (std::vector<double>{1.0, 3.0}));  // std of {1, 3} is 1
  const auto g = sra_factors({2.0, 2.0, 2.0}, SraConfig{1e-8});
  for (double v : g) EXPECT_NEAR(v, 2.0 / 1e-8, 1e-3);
}

TEST(Sra, UniformWeightsScaleTargetUniformly) {
  Scene s;
  Registry reg(V());
  for (int id : s.caption.token_ids) reg.set({id, 0.6, 3});
  const auto clean = forward(s.params, s.fp.x, 0.0, s.cond, true).captures;
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, true);
  const SraResult r = sra_loss(clean, g, s.cond, reg, {});
  const double c = weight({0, 0.6, 3}) / 1e-8;
  for (double f : r.factors) EXPECT_EQ(f, c);
  // Oracle: per layer, mean over heads x Nq x dh of (c A0 V0 - A V)^2.
  double want = 0;
  const auto& cap = clean[0];
  const auto live = capture_layer(g.layers[0], 0, true);
  const std::size_t n = cap.a_out_text.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = c * cap.a_out_text[i] - live.a_out_text[i];
    want += d * d;
  }
  EXPECT_NEAR(r.loss.value().item() / (want / static_cast<double>(n)), 1.0, 1e-12);
}

TEST(Sra, PartiallySeenRegistryKeepsShapes) {
  Scene s;
  Registry reg(V());
  reg.set({*V().find("red"), 0.4, 2});
  const auto clean = forward(s.params, s.fp.x, 0.0, s.cond, true).captures;
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, true);
  const SraResult r = sra_loss(clean, g, s.cond, reg, {});
  EXPECT_FALSE(r.skipped);
  ASSERT_EQ(r.factors.size(), 6u);
  EXPECT_EQ(r.loss.value().size(), 1u);
  EXPECT_TRUE(std::isfinite(r.loss.value().item()));
}

TEST(Sra, SkippedWhenNothingSeen) {
  Scene s;
  const auto clean = forward(s.params, s.fp.x, 0.0, s.cond, true).captures;
  Tape tape;
  ModelVars vars = bind_params(tape, s.params, true);
  const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, true);
  const SraResult r = sra_loss(clean, g, s.cond, Registry(V()), {});
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.loss.value().item(), 0.0);
}

TEST(Sra, GradientMatchesFiniteDifferences) {
  Scene s;
  const auto clean = forward(s.params, s.fp.x, 0.0, s.cond, true).captures;
  std::vector<Tensor> flat = darelab::testing::flat_copy(s.params);
  auto f = [&](Tape& tape, std::span<const Var> ps) {
    const ModelVars vars = unflatten(ps, s.dims.layers);
    const ForwardGraph g = forward(vars, s.dims, tape.constant(s.fp.x_t), s.fp.t, s.cond, true);
    return sra_loss(clean, g, s.cond, s.registry, {}).loss;
  };
  const auto r = grad_check(f, flat);
  EXPECT_LT(r.max_rel_error, 1e-4) << "param " << r.worst.param;
}

TEST(Adam, ClipsToMaxNorm) {
  std::vector<Tensor> p{Tensor({2}, 0.0)};
  std::vector<Tensor*> ptrs{&p[0]};
  std::vector<Tensor> g{Tensor({2}, {0.0, 2.0})};
  AdamState st = AdamState::zeros_like(ptrs);
  const double n = adam_clip_update(ptrs, g, st, 0.1, {});
  EXPECT_EQ(n, 2.0);
  EXPECT_EQ(g[0], Tensor({2}, {0.0, 1.0}));
  // First bias-corrected Adam step moves by lr * sign.
  EXPECT_NEAR(p[0][1], -0.1, 1e-9);
  EXPECT_EQ(p[0][0], 0.0);
}

TEST(Adam, ZeroGradsOnlyAdvanceTimestep) {
  std::vector<Tensor> p{Tensor({3}, {1.0, -2.0, 3.0})};
  const Tensor before = p[0];
  std::vector<Tensor*> ptrs{&p[0]};
  std::vector<Tensor> g{Tensor({3}, 0.0)};
  AdamState st = AdamState::zeros_like(ptrs);
  adam_clip_update(ptrs, g, st, 0.1, {});
  EXPECT_EQ(p[0], before);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, NonFiniteGradsAbort) {
  std::vector<Tensor> p{Tensor({1}, 0.0)};
  std::vector<Tensor*> ptrs{&p[0]};
  std::vector<Tensor> g{Tensor({1}, std::nan(""))};
  AdamState st = AdamState::zeros_like(ptrs);
  EXPECT_THROW(adam_clip_update(ptrs, g, st, 0.1, {}), NumericalError);
}

TEST(Adam, ScalarQuadraticShrinksMonotonicallyAfterWarmup) {
  // Adam steps are about lr in size, so from w = 10 the 100 steps stay on
  // one side of the minimum.
  std::vector<Tensor> p{Tensor::scalar(10.0)};
  std::vector<Tensor*> ptrs{&p[0]};
  AdamState st = AdamState::zeros_like(ptrs);
  const std::uint64_t warmup = 10;
  double prev = std::abs(p[0].item());
  for (std::uint64_t it = 1; it <= 100; ++it) {
    std::vector<Tensor> g{Tensor::scalar(2.0 * p[0].item())};
    adam_clip_update(ptrs, g, st, warmup_lr(0.1, it, warmup), {});
    const double now = std::abs(p[0].item());
    if (it > warmup) {
      EXPECT_LT(now, prev) << it;
    }
    prev = now;
  }
  EXPECT_LT(prev, 1.0);
}

TEST(Adam, WarmupIsLinear) {
  EXPECT_EQ(warmup_lr(1.0, 1, 4), 0.25);
  EXPECT_EQ(warmup_lr(1.0, 3, 4), 0.75);
  EXPECT_EQ(warmup_lr(1.0, 4, 4), 1.0);
  EXPECT_EQ(warmup_lr(1.0, 99, 4), 1.0);
  EXPECT_EQ(warmup_lr(1.0, 1, 0), 1.0);
}
