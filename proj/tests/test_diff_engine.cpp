#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace relfb;
using relfb::test::check_op;
using relfb::test::random_tensor;

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4}), ShapeError);
  EXPECT_EQ(Tensor({2, 3}).reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Autodiff, ConstantGraphHasZeroGradients) {
  ParamStore ps;
  ps.add("w", Tensor({3}, 2.0));
  Tape tape;
  tape.parameter(ps.get("w"));
  Var c = tape.constant(Tensor({3}, 1.0));
  tape.backward(ops::weighted_sum(tape, c, Tensor({3}, 1.0)));
  for (double g : ps.get("w").grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, LinearSquaredErrorClosedForm) {
  const double w = 0.7, x = -1.3, y = 0.4;
  ParamStore ps;
  ps.add("w", Tensor({1, 1}, w));
  ps.add("b", Tensor({1}, 0.0));
  Tape tape;
  Var out = ops::linear(tape, tape.constant(Tensor({1, 1}, x)), tape.parameter(ps.get("w")),
                        tape.parameter(ps.get("b")));
  tape.backward(ops::squared_error(tape, out, Tensor({1}, y)));
  EXPECT_NEAR(ps.get("w").grad[0], 2.0 * (w * x - y) * x, 1e-15);
}

TEST(Autodiff, NonFiniteValueNamesTheOp) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 2}, {1e308, 1e308}));
  try {
    ops::weighted_sum(tape, x, Tensor({1, 2}, {1e308, 1e308}));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.op(), "weighted_sum");
  }
}

TEST(Autodiff, BackwardIsDeterministic) {
  Rng rng(5);
  const Tensor x = random_tensor({4, 6}, rng), w = random_tensor({3, 6}, rng);
  auto run = [&] {
    ParamStore ps;
    ps.add("w", w);
    ps.add("b", Tensor({3}));
    Tape tape;
    Var h = ops::relu(tape, ops::linear(tape, tape.constant(x), tape.parameter(ps.get("w")),
                                        tape.parameter(ps.get("b"))));
    Var loss = ops::softmax_cross_entropy(tape, h, {0, 1, 2, 0});
    const double l = tape.value(loss)[0];
    tape.backward(loss);
    return std::make_pair(l, ps.get("w").grad);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

// --- softmax ----------------------------------------------------------------

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    Tensor x = random_tensor({2, n}, rng, -30.0, 30.0);
    const Tensor p = ops::softmax_values(x);
    const double shift = rng.uniform(-100.0, 100.0);
    Tensor xs = x;
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += shift;
    const Tensor ps = ops::softmax_values(xs);
    for (std::size_t r = 0; r < 2; ++r) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += p[r * n + i];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], ps[i], 1e-12);
  }
}

// --- Adam ------------------------------------------------------------------

TEST(Adam, FirstStepFromZero) {
  ParamStore ps;
  ps.add("p", Tensor({1}, 0.0)).grad[0] = 1.0;
  AdamState st = AdamState::for_params(ps, 1e-4);
  adam_step(st, ps);
  // m_hat = 1, v_hat = 1
  EXPECT_NEAR(ps.get("p").value[0], -1e-4 / (1.0 + 1e-8), 1e-20);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, IsStateful) {
  ParamStore ps;
  ps.add("p", Tensor({1}, 0.0));
  AdamState st = AdamState::for_params(ps, 1e-4);
  for (int i = 0; i < 2; ++i) {
    ps.get("p").grad[0] = 1.0;
    adam_step(st, ps);
  }
  // Constant gradients keep m_hat = v_hat = 1, so each step moves lr / (1 + eps).
  EXPECT_EQ(st.step, 2u);
  EXPECT_NEAR(ps.get("p").value[0], -2e-4 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  ParamStore ps;
  ps.add("p", Tensor({2}, {0.5, -0.5}));
  AdamState st = AdamState::for_params(ps);
  adam_step(st, ps);
  EXPECT_EQ(ps.get("p").value, Tensor({2}, {0.5, -0.5}));
  EXPECT_EQ(st.first_moment[0], Tensor({2}));
}

TEST(Adam, ZeroGradientsDecayMoments) {
  ParamStore ps;
  ps.add("p", Tensor({2}));
  AdamState st = AdamState::for_params(ps);
  st.first_moment[0] = Tensor({2}, {1.0, 2.0});
  st.second_moment[0] = Tensor({2}, {4.0, 8.0});
  adam_step(st, ps);
  EXPECT_DOUBLE_EQ(st.first_moment[0][1], 2.0 * 0.9);
  EXPECT_DOUBLE_EQ(st.second_moment[0][1], 8.0 * 0.999);
}

TEST(Adam, ShapeMismatchThrows) {
  ParamStore ps;
  ps.add("p", Tensor({2}));
  AdamState st = AdamState::for_params(ps);
  st.first_moment[0] = Tensor({3});
  EXPECT_THROW(adam_step(st, ps), ShapeError);
  ParamStore more;
  more.add("a", Tensor({1}));
  more.add("b", Tensor({1}));
  EXPECT_THROW(adam_step(st, more), ShapeError);
}

// --- gradcheck ---------------------------------------------------------------

TEST(Gradcheck, QuadraticIsExactToSecondOrder) {
  ParamStore ps;
  ps.add("theta", Tensor({1}, 3.0));
  LossBuilder build = [](Tape& tape, ParamStore& p) {
    Var t = tape.parameter(p.get("theta"));
    return ops::squared_error(tape, t, Tensor({1}, 0.0));
  };
  const auto r = gradcheck(ps, build);
  EXPECT_LT(r.max_rel_error(), 1e-9);
  EXPECT_DOUBLE_EQ(r.entries[0].worst_analytic, 6.0);
}

TEST(Gradcheck, SoftmaxCrossEntropy) {
  Rng rng(2);
  ParamStore ps;
  ps.add("logits", random_tensor({3, 5}, rng, -2.0, 2.0));
  LossBuilder build = [](Tape& tape, ParamStore& p) {
    return ops::softmax_cross_entropy(tape, tape.parameter(p.get("logits")), {4, 0, 2});
  };
  EXPECT_LT(gradcheck(ps, build).max_rel_error(), 1e-6);
}

TEST(Gradcheck, ReportsWrongGradients) {
  // An op with a deliberately wrong backward must be caught.
  ParamStore ps;
  ps.add("x", Tensor({2}, {0.3, -0.8}));
  LossBuilder build = [](Tape& tape, ParamStore& p) {
    Var x = tape.parameter(p.get("x"));
    Tensor v = tape.value(x);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] * v[i];
    Var sq = tape.record("bad_square", v, {x}, [x](Tape& t, const Tensor& g) {
      Tensor& gx = t.grad(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * t.value(x)[i];  // missing factor 2
    });
    return ops::weighted_sum(tape, sq, Tensor({2}, 1.0));
  };
  EXPECT_GT(gradcheck(ps, build).max_rel_error(), 0.1);
}

// Every differentiable op, random small shapes, 120 configurations in total.
TEST(Gradcheck, EveryOpOnRandomShapes) {
  Rng rng(20240601);
  const ModulationGeometry geo;
  std::size_t configs = 0;
  auto expect_pass = [&](const char* op, const GradcheckReport& r) {
    ++configs;
    EXPECT_LT(r.max_rel_error(), 1e-4) << op << "\n" << r;
  };
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t B = 1 + rng.below(3), R = 2 + rng.below(4), M = 2 + rng.below(5);

    expect_pass("linear", check_op({random_tensor({B, M}, rng), random_tensor({R, M}, rng),
                                    random_tensor({R}, rng)},
                                   [](Tape& t, const std::vector<Var>& v) {
                                     return ops::linear(t, v[0], v[1], v[2]);
                                   }, rng));
    expect_pass("relu", check_op({random_tensor({B, R, M}, rng)},
                                 [](Tape& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); }, rng));
    expect_pass("sigmoid_scale", check_op({random_tensor({R}, rng, -4, 4)},
                                          [](Tape& t, const std::vector<Var>& v) {
                                            return ops::sigmoid_scale(t, v[0], 8000.0);
                                          }, rng));
    expect_pass("softmax", check_op({random_tensor({B, R}, rng, -3, 3)},
                                    [](Tape& t, const std::vector<Var>& v) { return ops::softmax(t, v[0]); }, rng));
    expect_pass("scale_rows", check_op({random_tensor({B, R, M}, rng), random_tensor({B, R}, rng)},
                                       [](Tape& t, const std::vector<Var>& v) {
                                         return ops::scale_rows(t, v[0], v[1]);
                                       }, rng));
    const double c = std::pow(10.0, rng.uniform(-4.0, 0.0));
    expect_pass("instance_norm_rows", check_op({random_tensor({B, R, M + 1}, rng, -2, 2)},
                                               [c](Tape& t, const std::vector<Var>& v) {
                                                 return ops::instance_norm_rows(t, v[0], c);
                                               }, rng));
    const std::size_t len = 3 + 2 * rng.below(3), keep = 1 + 2 * rng.below((len + 1) / 2);
    expect_pass("slice_last", check_op({random_tensor({B, R, len}, rng)},
                                       [len, keep](Tape& t, const std::vector<Var>& v) {
                                         return ops::slice_last(t, v[0], (len - keep) / 2, keep);
                                       }, rng));
    const std::size_t H = 5 + rng.below(4), W = 5 + rng.below(4), kh = 1 + rng.below(3);
    expect_pass("conv2d_valid", check_op({random_tensor({B, H, W}, rng), random_tensor({R, kh, kh}, rng)},
                                         [](Tape& t, const std::vector<Var>& v) {
                                           return ops::conv2d_valid(t, v[0], v[1]);
                                         }, rng));
    expect_pass("max_pool2x2", check_op({random_tensor({B, R, 2 * M, 2 * M + 1}, rng)},
                                        [](Tape& t, const std::vector<Var>& v) {
                                          return ops::max_pool2x2(t, v[0]);
                                        }, rng));
    const std::size_t BB = 2 + rng.below(3);
    expect_pass("batch_norm", check_op({random_tensor({BB, R, M}, rng), random_tensor({R}, rng, 0.5, 1.5),
                                        random_tensor({R}, rng)},
                                       [R](Tape& t, const std::vector<Var>& v) {
                                         ops::BatchNormStats stats{Tensor({R}), Tensor({R}, 1.0), 0.1};
                                         return ops::batch_norm(t, v[0], v[1], v[2], 1e-4, true, &stats);
                                       }, rng));
    std::vector<int> targets(B);
    for (auto& y : targets) y = static_cast<int>(rng.below(R));
    expect_pass("softmax_cross_entropy", check_op({random_tensor({B, R}, rng, -2, 2)},
                                                  [targets](Tape& t, const std::vector<Var>& v) {
                                                    return ops::softmax_cross_entropy(t, v[0], targets);
                                                  }, rng));
    const std::size_t k = 9 + 2 * rng.below(10);
    expect_pass("gauss_kernels", check_op({random_tensor({R}, rng, 200.0, 7000.0)},
                                          [k](Tape& t, const std::vector<Var>& v) {
                                            return gauss_kernels(t, v[0], k, 16000.0);
                                          }, rng));
    const Tensor frames = random_tensor({B, 3, k + 8 + rng.below(10)}, rng);
    expect_pass("frame_log_energy", check_op({random_tensor({R, k}, rng)},
                                             [&frames](Tape& t, const std::vector<Var>& v) {
                                               return frame_log_energy(t, t.constant(frames), v[0]);
                                             }, rng));
    std::vector<double> signs(R);
    for (auto& s : signs) s = rng.uniform() < 0.5 ? 1.0 : -1.0;
    expect_pass("modulation_kernels", check_op({random_tensor({R}, rng, 1, 49), random_tensor({R}, rng, 0.5, 11.5)},
                                               [signs, geo](Tape& t, const std::vector<Var>& v) {
                                                 return modulation_kernels(t, v[0], v[1], signs, geo);
                                               }, rng));
    expect_pass("reshape", check_op({random_tensor({B, R, M}, rng)},
                                    [B, R, M](Tape& t, const std::vector<Var>& v) {
                                      return ops::reshape(t, v[0], {B * R * M});
                                    }, rng));
  }
  EXPECT_GE(configs, 100u);
}

TEST(Gradcheck, InferenceBatchNorm) {
  Rng rng(4);
  ops::BatchNormStats stats{random_tensor({3}, rng), random_tensor({3}, rng, 0.5, 2.0), 0.1};
  const auto r = check_op({random_tensor({2, 3, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
                          [&stats](Tape& t, const std::vector<Var>& v) {
                            return ops::batch_norm(t, v[0], v[1], v[2], 1e-4, false, &stats);
                          }, rng);
  EXPECT_LT(r.max_rel_error(), 1e-4) << r;
}

// Central differences cannot resolve gradients that vanish identically (for
// example a bias shared by every softmax input); there both sides must be at
// the noise floor. Everything else must agree to 1e-4.
TEST(Gradcheck, SampledWholeModel) {
  const GradcheckReport r = model_gradcheck(gradcheck_config(), /*full=*/false, 1);
  EXPECT_EQ(r.entries.size(), build_model(gradcheck_config()).params.size());
  std::size_t resolved = 0;
  for (const auto& s : r.scalars) {
    const std::string& name = r.entries[s.entry].name;
    if (std::abs(s.analytic) < 1e-14) {
      EXPECT_LT(std::abs(s.numeric), 1e-9) << name << "[" << s.index << "]";
    } else {
      ++resolved;
      EXPECT_LT(s.rel_error, 1e-4) << name << "[" << s.index << "] analytic " << s.analytic
                                   << " numeric " << s.numeric;
    }
  }
  EXPECT_GT(resolved, r.scalars.size() * 3 / 4);
}

TEST(Gradcheck, OutputBiasOfRelevanceSubnetHasZeroGradient) {
  // Softmax over rows ignores a common offset, so the scalar output bias never
  // changes the loss.
  ModelConfig cfg = gradcheck_config();
  TrainState st = build_model(cfg);
  Batch batch = gradcheck_batch(cfg, 1);
  Parameter& w = st.params.get(names::head_w(cfg.head.size()));
  Rng rng(1);
  w.value = xavier_uniform(w.value.dim(0), w.value.dim(1), rng);
  Tape tape;
  tape.backward(forward(tape, st, batch, true).loss);
  EXPECT_LT(std::abs(st.params.get("acoustic_relevance/b2").grad[0]), 1e-15);
  EXPECT_LT(std::abs(st.params.get("modulation_relevance/b2").grad[0]), 1e-15);
}
