#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

#include "coal/error.hpp"
#include "coal/mtl_model.hpp"
#include "coal/random.hpp"

using coal::Covariance;
using coal::ModelConfig;
using coal::TaskKind;
using coal::Variant;

namespace {

ModelConfig mtl_config(Variant v = Variant::full, int iters = 5, double holdout = 0.1, std::uint64_t seed = 0) {
  ModelConfig c;
  c.family = coal::ModelFamily::mtl;
  c.variant = v;
  c.em_iters = iters;
  c.holdout = holdout;
  c.seed = seed;
  return c;
}

Eigen::MatrixXd corr2(double r) {
  Eigen::Matrix2d m;
  m << 1, r, r, 1;
  return m;
}

Eigen::MatrixXd random_corr(coal::Rng& rng, Eigen::Index d) { return coal::sample_correlation(rng, d); }

}  // namespace

TEST_CASE("correlation prior values") {
  for (Eigen::Index d : {1, 2, 3, 6}) CHECK(coal::correlation_log_prior(Eigen::MatrixXd::Identity(d, d)) == 0.0);
  CHECK(coal::correlation_log_prior(corr2(0.6)) == doctest::Approx(0.5 * std::log(0.64)).epsilon(1e-12));
  CHECK(std::abs(coal::correlation_log_prior(corr2(0.6)) - (-0.22314355131420976)) < 1e-10);
  for (double r : {0.1, 0.35, 0.9}) CHECK(coal::correlation_log_prior(corr2(r)) == coal::correlation_log_prior(corr2(-r)));
  CHECK(coal::correlation_log_prior(corr2(1.0)) == coal::kLogDensityFloor);
  Eigen::MatrixXd bad = corr2(0.2);
  bad(0, 0) = 2.0;
  CHECK_THROWS_AS(coal::correlation_log_prior(bad), coal::Error);
}

TEST_CASE("correlation prior is permutation invariant") {
  coal::Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index d = 2 + trial % 4;
    Eigen::MatrixXd r = random_corr(rng, d);
    std::vector<int> perm(static_cast<std::size_t>(d));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::PermutationMatrix<Eigen::Dynamic> p(d);
    for (Eigen::Index i = 0; i < d; ++i) p.indices()[i] = perm[static_cast<std::size_t>(i)];
    Eigen::MatrixXd rp = p * r * p.transpose();
    CHECK(coal::correlation_log_prior(rp) == doctest::Approx(coal::correlation_log_prior(r)).epsilon(1e-9));
  }
}

TEST_CASE("task weight covariance") {
  Eigen::Matrix3d r;
  r << 1, 0.2, -0.3, 0.2, 1, 0.1, -0.3, 0.1, 1;
  CHECK((coal::task_weight_covariance(Eigen::Vector3d::Zero(), r) - r).norm() < 1e-15);
  Eigen::MatrixXd c = coal::task_weight_covariance(Eigen::Vector2d(std::log(2.0), std::log(3.0)), Eigen::Matrix2d::Identity());
  CHECK(c(0, 0) == doctest::Approx(4.0));
  CHECK(c(1, 1) == doctest::Approx(9.0));
  CHECK(c(0, 1) == 0.0);
  coal::Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index d = 1 + trial % 5;
    Eigen::MatrixXd rr = random_corr(rng, d);
    Eigen::VectorXd s = coal::standard_normal(rng, d);
    Eigen::MatrixXd cov = coal::task_weight_covariance(s, rr);
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(coal::min_eigenvalue(cov) >= -1e-10 * cov.diagonal().maxCoeff());
    CHECK((cov.diagonal().array() - (2.0 * s.array()).exp()).abs().maxCoeff() < 1e-9 * cov.diagonal().maxCoeff());
  }
}

TEST_CASE("S objective basics") {
  Eigen::Vector3d s(0.3, -0.2, 0.5);
  auto b = Covariance::identity(3, false, 0.7);
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  CHECK(coal::s_log_posterior(s, s, b, r, Eigen::Vector3d::Zero()) == doctest::Approx(-s.sum()).epsilon(1e-14));
  Eigen::VectorXd g = coal::s_gradient(s, s, b, r, Eigen::Vector3d::Zero());
  CHECK((g.array() + 1.0).abs().maxCoeff() < 1e-14);

  Eigen::Vector3d w(0.5, -1.0, 2.0);
  double prev = coal::s_log_posterior(s, Eigen::Vector3d::Zero(), b, r, w);
  for (double big : {2.0, 5.0, 10.0, 20.0}) {
    Eigen::Vector3d t = s;
    t[1] = big;
    double f = coal::s_log_posterior(t, Eigen::Vector3d::Zero(), b, r, w);
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("S objective matches the Gaussian densities up to a constant") {
  coal::Rng rng(8);
  for (int inst = 0; inst < 20; ++inst) {
    Eigen::MatrixXd r = random_corr(rng, 3);
    Eigen::MatrixXd a = coal::standard_normal(rng, 3, 3);
    Eigen::MatrixXd bm = a * a.transpose() + 0.2 * Eigen::MatrixXd::Identity(3, 3);
    Eigen::VectorXd p = coal::standard_normal(rng, 3), w = coal::standard_normal(rng, 3);
    double lo = 1e300, hi = -1e300;
    for (int k = 0; k < 30; ++k) {
      Eigen::VectorXd s = coal::standard_normal(rng, 3);
      Eigen::VectorXd e = s.array().exp();
      Eigen::MatrixXd cov = e.asDiagonal() * r * e.asDiagonal();
      double ref = oracle::log_mvn(w, Eigen::VectorXd::Zero(3), cov) + oracle::log_mvn(s, p, bm);
      double diff = ref - coal::s_log_posterior(s, p, Covariance::full(bm), r, w);
      lo = std::min(lo, diff);
      hi = std::max(hi, diff);
    }
    CHECK(hi - lo < 1e-8);
  }
}

TEST_CASE("S gradient matches finite differences") {
  coal::Rng rng(9);
  for (int inst = 0; inst < 100; ++inst) {
    const Eigen::Index d = 1 + inst % 4;
    Eigen::MatrixXd r = random_corr(rng, d);
    bool diag = inst % 3 == 0;
    Eigen::MatrixXd a = coal::standard_normal(rng, d, d);
    Eigen::MatrixXd bm = a * a.transpose() + 0.3 * Eigen::MatrixXd::Identity(d, d);
    Covariance b = diag ? Covariance::diagonal(bm.diagonal()) : Covariance::full(bm);
    Eigen::VectorXd p = coal::standard_normal(rng, d), w = coal::standard_normal(rng, d), s = coal::standard_normal(rng, d);
    Eigen::VectorXd g = coal::s_gradient(s, p, b, r, w);
    auto f = [&](const Eigen::VectorXd& x) { return coal::s_log_posterior(x, p, b, r, w); };
    for (Eigen::Index i = 0; i < d; ++i) {
      double fd = oracle::central_difference(f, s, i);
      CHECK(std::abs(fd - g[i]) <= 1e-4 * std::max(1.0, std::abs(g[i])));
    }
  }
}

TEST_CASE("one-dimensional stationary point") {
  const double lam = 0.6, p = 0.2, w = 1.7;
  auto deriv = [&](double s) { return -1.0 - (s - p) / lam + w * w * std::exp(-2.0 * s); };
  double lo = -10.0, hi = 10.0;  // deriv is decreasing in s
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (deriv(mid) > 0 ? lo : hi) = mid;
  }
  Eigen::VectorXd s = Eigen::VectorXd::Constant(1, lo);
  auto b = Covariance::identity(1, false, lam);
  Eigen::MatrixXd r = Eigen::MatrixXd::Ones(1, 1);
  Eigen::VectorXd pv = Eigen::VectorXd::Constant(1, p), wv = Eigen::VectorXd::Constant(1, w);
  CHECK(std::abs(coal::s_gradient(s, pv, b, r, wv)[0]) < 1e-10);
  CHECK(coal::optimize_s(Eigen::VectorXd::Zero(1), pv, b, r, wv)[0] == doctest::Approx(lo).epsilon(1e-4));
}

TEST_CASE("optimize_s") {
  auto b = Covariance::identity(1, false);
  Eigen::MatrixXd r = Eigen::MatrixXd::Ones(1, 1);
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd s = coal::optimize_s(zero, zero, b, r, zero);
  CHECK(s[0] == doctest::Approx(-1.0).epsilon(1e-4));
  Eigen::VectorXd again = coal::optimize_s(Eigen::VectorXd::Constant(1, -1.0), zero, b, r, zero);
  CHECK(std::abs(again[0] + 1.0) < 1e-6);

  coal::Rng rng(10);
  for (int inst = 0; inst < 40; ++inst) {
    const Eigen::Index d = 1 + inst % 4;
    Eigen::MatrixXd rr = random_corr(rng, d);
    // Keep R well conditioned so the landscape is not needlessly stiff.
    rr = 0.7 * rr + 0.3 * Eigen::MatrixXd::Identity(d, d);
    auto bb = Covariance::identity(d, inst % 2 == 0, 0.5);
    Eigen::VectorXd p = 0.5 * coal::standard_normal(rng, d), w = coal::standard_normal(rng, d), init = coal::standard_normal(rng, d);
    Eigen::VectorXd out = coal::optimize_s(init, p, bb, rr, w);
    CHECK(coal::s_log_posterior(out, p, bb, rr, w) >= coal::s_log_posterior(init, p, bb, rr, w));
    CHECK(coal::s_gradient(out, p, bb, rr, w).lpNorm<Eigen::Infinity>() < 1e-3);
  }
}

TEST_CASE("sampled correlations have uniform pairwise marginals") {
  coal::Rng rng(2024);
  std::vector<double> r;
  for (int i = 0; i < 10000; ++i) r.push_back(coal::sample_correlation(rng, 2)(0, 1));
  CHECK(oracle::ks_uniform_pvalue(r, -1.0, 1.0) > 0.001);
  Eigen::MatrixXd big = coal::sample_correlation(rng, 5);
  CHECK((big.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(coal::min_eigenvalue(big) > 0.0);
}

TEST_CASE("sample_mtl degenerate diffusion shares S") {
  coal::MtlSampleOptions opts;
  opts.lambda = Covariance::zero(3, false);
  auto s = coal::sample_mtl(mtl_config(), 4, 3, 10, 1, opts);
  for (const auto& x : s.truth.leaf_S) CHECK(x.norm() == 0.0);
  for (std::size_t k = 1; k < 4; ++k)
    CHECK((coal::task_weight_covariance(s.truth.leaf_S[k], s.truth.R) - coal::task_weight_covariance(s.truth.leaf_S[0], s.truth.R)).norm() == 0.0);
}

TEST_CASE("sampled weights follow the task covariance") {
  const int k = 10000;
  coal::MtlSampleOptions opts;
  Eigen::Vector3d s(0.3, -0.4, 0.1);
  opts.leaf_S = std::vector<Eigen::VectorXd>(k, s);
  auto sample = coal::sample_mtl(mtl_config(), k, 3, 0, 6, opts);
  Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
  for (const auto& w : sample.truth.leaf_w) acc += w * w.transpose();
  acc /= k;
  Eigen::MatrixXd ref = coal::task_weight_covariance(s, sample.truth.R);
  CHECK((acc - ref).norm() / ref.norm() < 0.05);
}

TEST_CASE("identical tasks get identical S and weights") {
  auto sample = coal::sample_mtl(mtl_config(), 3, 3, 60, 12);
  std::vector<coal::TaskDataset> data{sample.train[1], sample.train[1], sample.train[2]};
  for (auto v : {Variant::full, Variant::diag}) {
    auto fit = coal::em_fit_mtl(data, mtl_config(v, 5));
    CHECK((fit.leaf_S[0] - fit.leaf_S[1]).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((fit.leaf_w[0] - fit.leaf_w[1]).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("em_fit_mtl keeps valid parameters and never loses held-out likelihood") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto sample = coal::sample_mtl(mtl_config(), 4, 3, 40, 50 + seed);
    auto fit = coal::em_fit_mtl(sample.train, mtl_config(seed % 2 ? Variant::diag : Variant::full, 4, 0.1, seed));
    CHECK_NOTHROW(fit.tree.validate());
    CHECK((fit.R.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(coal::min_eigenvalue(fit.R) > 0.0);
    CHECK(fit.lambda.is_psd());
    for (const auto& s : fit.leaf_S) CHECK(coal::min_eigenvalue(coal::task_weight_covariance(s, fit.R)) > 0.0);
    REQUIRE(fit.heldout_trace.size() == 5);
    CHECK(fit.heldout_trace[static_cast<std::size_t>(fit.iteration)] >= fit.heldout_trace[0]);
  }
  CHECK_THROWS_AS(coal::em_fit_mtl({}, mtl_config()), coal::Error);
  auto bad = mtl_config();
  bad.variant = Variant::full_x;
  auto sample = coal::sample_mtl(mtl_config(), 2, 2, 20, 1);
  CHECK_THROWS_AS(coal::em_fit_mtl(sample.train, bad), coal::Error);
}

TEST_CASE("iterate zero fits each task's S from its own weights") {
  auto sample = coal::sample_mtl(mtl_config(), 4, 3, 80, 31);
  auto fit = coal::em_fit_mtl(sample.train, mtl_config(Variant::full, 0, 0.0));
  CHECK(fit.iteration == 0);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(3);
  for (std::size_t k = 0; k < 4; ++k) {
    // Stationary point of the single-task objective with the root as parent.
    Eigen::VectorXd g = coal::s_gradient(fit.leaf_S[k], zero, Covariance::identity(3, true), Eigen::MatrixXd::Identity(3, 3),
                                         fit.leaf_w[k]);
    CHECK(g.lpNorm<Eigen::Infinity>() < 1e-3);
  }
  // Distinct S values give the initial tree non-degenerate branches.
  double longest = 0.0;
  for (int id = 0; id < fit.tree.num_nodes(); ++id) longest = std::max(longest, fit.tree.branch_length(id));
  CHECK(longest > 1e-3);
}
