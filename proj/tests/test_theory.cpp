#include <gtest/gtest.h>

#include <cmath>

#include "kpat/theory.hpp"
#include "kpat/verification.hpp"

using namespace kpat;

namespace {

double planted_loss(const CnnParams& p0, const Matrix& readout, const WindowScheme& win, const CubeSource& cube) {
  CnnParams p = p0;
  p.readout = readout;
  return evaluate_exact(p, win, Activation::clipped_relu(1), cube, false).loss;
}

}  // namespace

TEST(ConstructUstar, PigeonholeFailure) {
  Rng rng(1);
  const auto f = random_kpattern(rng, 6, 3);
  const auto p = init_cnn_theorem(rng, 2, 3, 4);
  EXPECT_THROW(construct_ustar(p.kernel, p.bias, f, 4), InsufficientCoverage);
}

TEST(ConstructUstar, SingleCoordinateIdentity) {
  const unsigned n = 6;
  const KPattern f{n, 1, 4, {1, -1}};
  CnnParams p{Matrix(2, 1), Vector::Zero(2), Matrix::Zero(n, 2)};
  p.kernel << 1.0, -1.0;
  const auto u = construct_ustar(p.kernel, p.bias, f, n);
  EXPECT_EQ(u.readout(3, 0), 1.0);
  EXPECT_EQ(u.readout(3, 1), -1.0);
  EXPECT_EQ(u.readout.norm(), std::sqrt(2.0));
  p.readout = u.readout;
  const auto win = WindowScheme::boolean(n, 1);
  for (std::uint32_t m = 0; m < 64; ++m) {
    const auto x = SignVector::from_index(m, n);
    const Vector xv = x.to_real();
    EXPECT_EQ(cnn_forward(p, win, Activation::clipped_relu(1), std::span<const double>(xv.data(), n)), x[3]);
  }
}

TEST(ConstructUstar, RejectsNonTheoremInit) {
  Rng rng(2);
  const auto f = random_kpattern(rng, 6, 2);
  auto p = init_cnn_theorem(rng, 16, 2, 5);
  EXPECT_THROW(construct_ustar(p.kernel, p.bias, f, 4), DimensionError);
  p.bias[0] = 0.0;
  EXPECT_THROW(construct_ustar(p.kernel, p.bias, f, 5), ValidationError);
}

TEST(ConstructUstar, ExactRepresentationAndNormBound) {
  const Rng root(3);
  std::size_t successes = 0;
  for (std::size_t t = 0; t < 40; ++t) {
    Rng rng = root.split(t);
    const unsigned n = 8 + 2 * static_cast<unsigned>(t % 4);  // 8..14
    const unsigned k = 1 + static_cast<unsigned>(t % 4);
    const std::size_t q = q_threshold(k, 0.1);
    const auto win = WindowScheme::boolean(n, k);
    const auto f = random_kpattern(rng, n, k);
    const auto p0 = init_cnn_theorem(rng, q, k, win.positions());
    PlantedReadout u;
    try {
      u = construct_ustar(p0.kernel, p0.bias, f, win.positions());
    } catch (const InsufficientCoverage&) {
      continue;
    }
    ++successes;
    CnnParams p = p0;
    p.readout = u.readout;
    const auto e = evaluate_exact(p, win, Activation::clipped_relu(1), CubeSource(f), false);
    EXPECT_LE(e.loss, 1e-12) << t;
    EXPECT_EQ(e.accuracy, 1.0) << t;
    EXPECT_LE(u.norm, ustar_norm_bound(k, (double)q)) << t;
    for (Eigen::Index j = 0; j < u.readout.rows(); ++j)
      if (j != (Eigen::Index)f.jstar - 1) {
        EXPECT_EQ(u.readout.row(j).norm(), 0.0);
      }
  }
  EXPECT_GE(successes, 30u);
}

TEST(ConstructUstar, FailureRateWithinChernoffDelta) {
  const unsigned k = 3;
  const double delta = 0.1;
  const std::size_t q = q_threshold(k, delta);
  const KPattern f = parity_pattern(8, 2, k);
  const Rng root(4);
  int failures = 0;
  const int N = 200;
  for (int t = 0; t < N; ++t) {
    Rng rng = root.split(t);
    const auto p = init_cnn_theorem(rng, q, k, 6);
    try {
      construct_ustar(p.kernel, p.bias, f, 6);
    } catch (const InsufficientCoverage&) {
      ++failures;
    }
  }
  EXPECT_LE(failures, N * delta + 3 * std::sqrt(N * delta * (1 - delta)));
}

TEST(Bounds, UstarNormExample) { EXPECT_EQ(ustar_norm_bound(2, 64), 2.0); }

TEST(Bounds, QThreshold) {
  EXPECT_EQ(q_threshold(3, 0.1), 282u);
  EXPECT_EQ(q_threshold(4, 0.05), 740u);
  // k = 0: ceil of a tiny positive log is 1, plus the extra neuron.
  EXPECT_EQ(q_threshold(0, 0.999999), 2u);
  EXPECT_THROW(q_threshold(3, 0.0), ValidationError);
  EXPECT_THROW(q_threshold(3, 1.0), ValidationError);
}

TEST(Bounds, Thm1Arithmetic) {
  const auto b = thm1_bound(16, 3, 1024, 1000, 1);
  EXPECT_DOUBLE_EQ(b.width_term, 36.0);
  EXPECT_DOUBLE_EQ(b.readout_term, 9.0);
  EXPECT_DOUBLE_EQ(b.horizon_term, 2.048);
  EXPECT_DOUBLE_EQ(b.total(), 47.048);
  const auto d = thm1_bound(16, 3, 2048, 1000, 1);
  EXPECT_DOUBLE_EQ(d.width_term, b.width_term / 2);
  EXPECT_DOUBLE_EQ(d.readout_term, b.readout_term / std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(d.horizon_term, b.horizon_term * std::sqrt(2.0));
  EXPECT_LT(thm1_bound(16, 3, 1e30, 1e40, 1).total(), 1e-6);
  EXPECT_THROW(thm1_bound(16, 3, 0, 1, 1), ValidationError);
}

TEST(Bounds, Thm2Arithmetic) {
  const auto a = thm2_bounds(10, 3, 4, 1);
  EXPECT_DOUBLE_EQ(a.first_layer, 40.0 / 84.0);
  EXPECT_DOUBLE_EQ(a.readout, 4.0 / 120.0);
  EXPECT_NEAR(thm2_bounds(16, 8, 64, 1).first_layer, 1024.0 / 6435.0, 1e-15);
  EXPECT_NEAR(thm2_bounds(16, 8, 64, 1).readout, 64.0 / 12870.0, 1e-15);
  EXPECT_DOUBLE_EQ(thm2_bounds(7, 7, 3, 1).first_layer, 21.0);
  EXPECT_DOUBLE_EQ(thm2_bounds(10, 3, 4, 2).readout, 4 * a.readout);
  EXPECT_THROW(thm2_bounds(5, 6, 1, 1), ValidationError);
}

TEST(Bounds, Thm2MonotoneInK) {
  for (unsigned n : {6u, 11u, 16u, 30u}) {
    double prev = INFINITY;
    for (unsigned k = 1; k <= (n + 1) / 2; ++k) {
      const double w = thm2_bounds(n, k, 64, 1).first_layer;
      EXPECT_LE(w, prev) << n << " " << k;
      prev = w;
    }
  }
}

TEST(Bounds, Drift) {
  const auto d = drift_bounds(10, 0.01, 100, 16, 3, 1);
  EXPECT_DOUBLE_EQ(d.readout, 1.0);
  EXPECT_NEAR(d.first_layer, 0.16 * std::sqrt(300.0), 1e-12);
  EXPECT_NEAR(d.first_layer, 2.7713, 1e-4);
  const auto z = drift_bounds(0, 0.01, 100, 16, 3, 1);
  EXPECT_EQ(z.readout, 0.0);
  EXPECT_EQ(z.first_layer, 0.0);
  EXPECT_NEAR(loss_diff_bound(10, 0.01, 100, 16, 3, 1, {1.0, 0.5}), 1e-2 * 16 * 3 * 10 * 1.5, 1e-12);
}

TEST(Bounds, Corollary) {
  const auto c = corollary_params(16, 0.1, 1);
  const double ln16 = std::log(16.0);
  EXPECT_NEAR(c.neurons, 100 * 4096 * ln16 * ln16, 1e-6);
  EXPECT_NEAR(c.neurons, 3.149e6, 1e3);
  EXPECT_NEAR(c.steps, 100 * 4096 * ln16, 1e-6);
  EXPECT_NEAR(c.sample_size, 100 * 16 * 4 * c.neurons * std::log(16 * 4 * c.neurons / 0.05), 1e-3 * c.sample_size);
  EXPECT_NEAR(corollary_params(16, 0.05, 1).neurons / c.neurons, 4.0, 1e-12);
  EXPECT_THROW(corollary_params(16, 0.1, 0), ValidationError);
}

TEST(Ogd, TrivialSingleStep) {
  OgdTrace tr{{0.0}, {0.0}, {0.0}, 1.0, 1.0, 0.1};
  tr.theta1_norm = 0.0;
  tr.comparator_norm = 0.0;
  const auto r = verify_ogd_regret(tr);
  EXPECT_TRUE(r.pass());
  EXPECT_EQ(*r.measured, 0.0);
  EXPECT_EQ(r.theoretical, 0.0);
}

TEST(Ogd, HandRolledQuadratic) {
  // f_t(theta) = theta^2, plain GD from theta_1 = 1 with eta = 0.1.
  OgdTrace tr;
  tr.eta = 0.1;
  tr.theta1_norm = 1.0;
  tr.comparator_norm = 0.0;
  double theta = 1.0;
  for (int t = 0; t < 10; ++t) {
    tr.iterate_loss.push_back(theta * theta);
    tr.comparator_loss.push_back(0.0);
    tr.grad_norm.push_back(std::fabs(2 * theta));
    theta -= tr.eta * 2 * theta;
  }
  EXPECT_TRUE(verify_ogd_regret(tr).pass());
  // Every prefix on its own.
  for (std::size_t T = 1; T <= 10; ++T) {
    OgdTrace p = tr;
    p.iterate_loss.resize(T);
    p.comparator_loss.resize(T);
    p.grad_norm.resize(T);
    EXPECT_TRUE(verify_ogd_regret(p).pass()) << T;
  }
}

TEST(Ogd, DetectsAViolation) {
  OgdTrace tr{{5.0, 5.0}, {0.0, 0.0}, {0.1, 0.1}, 0.0, 0.1, 1.0};
  EXPECT_FALSE(verify_ogd_regret(tr).pass());
  tr.eta = 0.0;
  EXPECT_THROW(verify_ogd_regret(tr), ValidationError);
  tr.eta = 1.0;
  tr.grad_norm.pop_back();
  EXPECT_THROW(verify_ogd_regret(tr), ValidationError);
}

TEST(Ogd, FrozenFirstLayerRunPasses) {
  Rng rng(5);
  const unsigned n = 9, k = 2;
  const auto win = WindowScheme::boolean(n, k);
  const auto f = random_kpattern(rng, n, k);
  const auto p0 = init_cnn_theorem(rng, q_threshold(k, 0.05), k, win.positions());
  const auto u = construct_ustar(p0.kernel, p0.bias, f, win.positions());
  const CubeSource cube(f);
  TrainConfig tc;
  tc.steps = 80;
  tc.eta = 0.3;
  tc.theorem_mode = true;
  tc.frozen.first = true;
  const auto res = train(p0, win, Activation::clipped_relu(1), Objective{cube}, tc, rng,
                         std::function<double(const CnnParams&)>(
                             [&](const CnnParams& p) { return planted_loss(p, u.readout, win, cube); }));
  const auto tr = ogd_trace_from(res.trajectory, p0.readout.norm(), u.norm);
  EXPECT_EQ(tr.iterate_loss.size(), 80u);
  EXPECT_TRUE(verify_ogd_regret(tr).pass());
}

TEST(Ogd, TraceNeedsStrideOneAndComparator) {
  Trajectory t;
  t.records.resize(3);
  for (std::size_t i = 0; i < 3; ++i) t.records[i].step = 2 * i;
  EXPECT_THROW(ogd_trace_from(t, 0, 0), ValidationError);
  for (std::size_t i = 0; i < 3; ++i) t.records[i].step = i;
  EXPECT_THROW(ogd_trace_from(t, 0, 0), ValidationError);
}

TEST(Drift, TheoremModeRunsRespectBounds) {
  Rng rng(6);
  const unsigned n = 10, k = 3;
  const std::size_t q = 64;
  const auto win = WindowScheme::boolean(n, k);
  const auto f = random_kpattern(rng, n, k);
  const auto p0 = init_cnn_theorem(rng, q, k, win.positions());
  TrainConfig tc;
  tc.steps = 100;
  tc.eta = 0.5;
  tc.theorem_mode = true;
  const auto res = train(p0, win, Activation::clipped_relu(1), Objective{CubeSource(f)}, tc, rng);
  for (const auto& r : res.trajectory.records) {
    const auto b = drift_bounds((double)r.step, tc.eta, (double)q, n, k, 1);
    for (double v : r.readout_norms) EXPECT_LE(v, b.readout) << r.step;
    EXPECT_LE(r.first_layer_drift, b.first_layer) << r.step;
  }
}

TEST(Drift, StudyPassesAtSmallScale) {
  DriftStudy d;
  d.n = 8;
  d.k = 2;
  d.q = 64;
  d.steps = 60;
  d.runs = 3;
  const auto r = study_drift(d);
  EXPECT_TRUE(r.pass) << r.summary;
}

TEST(PermutationIdentity, IdentityIsExactlyZero) {
  Rng rng(7);
  const auto p = init_fcn_perm_invariant(rng, 6, 8, FcnInit::gaussian(0.25), 1.0);
  const auto r = verify_permutation_identity(p, Activation::tanh(), subset_of({1, 3}), 2, Permutation::identity(8));
  EXPECT_EQ(*r.measured, 0.0);
  EXPECT_TRUE(r.pass());
}

TEST(PermutationIdentity, SwapExample) {
  Rng rng(8);
  const auto p = init_fcn_perm_invariant(rng, 6, 8, FcnInit::gaussian(0.25), 1.0);
  const auto r = verify_permutation_identity(p, Activation::tanh(), subset_of({1, 2}), 5, Permutation::swap(8, 2, 3), 1e-12);
  EXPECT_TRUE(r.pass()) << r.text();
  EXPECT_THROW(verify_permutation_identity(p, Activation::tanh(), subset_of({1, 2}), 2, Permutation::swap(8, 2, 3)),
               ValidationError);
}

TEST(PermutationIdentity, RandomTriples) {
  const Rng root(9);
  for (std::size_t t = 0; t < 20; ++t) {
    Rng rng = root.split(t);
    const unsigned n = 10;
    const auto p = init_fcn_perm_invariant(rng, 4, n, FcnInit::rademacher(0.3), 1.0);
    const unsigned j = 1 + static_cast<unsigned>(rng.below(n));
    const auto pi = random_permutation_fixing(rng, n, j);
    const auto I = static_cast<std::uint32_t>(rng.below(1u << n));
    EXPECT_TRUE(verify_permutation_identity(p, Activation::tanh(), I, j, pi).pass()) << t;
  }
}

TEST(PermutationIdentity, NeedsTheIdentityOnJ) {
  // Permuting the weights without moving the target breaks the identity.
  // Odd |I|: with a zero bias tanh is odd and even parities get no gradient.
  Rng rng(10);
  const auto p = init_fcn_perm_invariant(rng, 6, 6, FcnInit::gaussian(1.0), 1.0);
  const auto pi = Permutation::swap(6, 1, 2);
  const WindowScheme s{6, 6, 1};
  const auto act = Activation::tanh();
  const auto a = evaluate(p, s, act, CubeSource(Parity{6, subset_of({1, 4, 5})})).grad;
  const auto b = evaluate(permute_fcn(p, pi), s, act, CubeSource(Parity{6, subset_of({1, 4, 5})})).grad;
  EXPECT_GT((a.weights.col(0) - b.weights.col(0)).cwiseAbs().maxCoeff() + (a.readout - b.readout).cwiseAbs().maxCoeff(),
            1e-8);
}
