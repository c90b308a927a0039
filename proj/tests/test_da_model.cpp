#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

#include "coal/da_model.hpp"
#include "coal/data_io.hpp"
#include "coal/error.hpp"
#include "coal/random.hpp"

using coal::Covariance;
using coal::GaussianMessage;
using coal::ModelConfig;
using coal::TaskDataset;
using coal::TaskKind;
using coal::Variant;

namespace {

ModelConfig da_config(Variant v = Variant::full, int iters = 5, double holdout = 0.1, std::uint64_t seed = 0) {
  ModelConfig c;
  c.variant = v;
  c.em_iters = iters;
  c.holdout = holdout;
  c.seed = seed;
  return c;
}

std::vector<GaussianMessage> random_messages(coal::Rng& rng, int k, Eigen::Index d, bool diag) {
  std::vector<GaussianMessage> out;
  for (int i = 0; i < k; ++i) {
    Eigen::MatrixXd a = coal::standard_normal(rng, d, d);
    Eigen::MatrixXd v = 0.2 * a * a.transpose() + 0.01 * Eigen::MatrixXd::Identity(d, d);
    out.push_back({coal::standard_normal(rng, d), diag ? Covariance::diagonal(v.diagonal()) : Covariance::full(v)});
  }
  return out;
}

}  // namespace

TEST_CASE("discrete transition kernel") {
  Eigen::Vector3d q(0.2, 0.3, 0.5);
  CHECK((coal::discrete_transition(q, 1.7, 0.0) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-15);
  Eigen::MatrixXd far = coal::discrete_transition(q, 0.5, 100.0);
  for (int r = 0; r < 3; ++r) CHECK((far.row(r).transpose() - q).cwiseAbs().maxCoeff() < 1e-12);
  coal::Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd p = coal::standard_normal(rng, 4).cwiseAbs() + Eigen::VectorXd::Constant(4, 0.01);
    p /= p.sum();
    Eigen::MatrixXd t = coal::discrete_transition(p, u(rng), u(rng));
    CHECK((t.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(t.minCoeff() >= 0.0);
  }
  CHECK_THROWS_AS(coal::discrete_transition(Eigen::Vector2d(0.5, 0.6), 1.0, 1.0), coal::Error);
  CHECK_THROWS_AS(coal::discrete_transition(q, 1.0, -1.0), coal::Error);
}

TEST_CASE("mstep with equal siblings returns the scaled identity") {
  for (int k : {2, 4, 7}) {
    for (Eigen::Index d : {1, 3}) {
      auto t = coal::sample_coalescent(k, static_cast<std::uint64_t>(k * 10 + d));
      std::vector<GaussianMessage> m(static_cast<std::size_t>(k),
                                     GaussianMessage{Eigen::VectorXd::Constant(d, 0.7), Covariance::identity(d, false, 0.1)});
      auto lam = coal::mstep_lambda(coal::bp_upward(t, m, Covariance::identity(d, false)), Covariance::identity(d, false));
      const double denom = 2.0 * static_cast<double>(d) + k + 2.0;
      CHECK((lam.dense() - Eigen::MatrixXd::Identity(d, d) / denom).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("mstep output is PSD and grows with sibling differences") {
  coal::Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + trial % 6;
    const Eigen::Index d = 1 + trial % 3;
    const bool diag = trial % 4 == 0;
    auto t = coal::sample_coalescent(k, static_cast<std::uint64_t>(trial));
    auto m = random_messages(rng, k, d, diag);
    Eigen::MatrixXd a = coal::standard_normal(rng, d, d);
    Covariance cur = diag ? Covariance::diagonal((a * a.transpose()).diagonal() + Eigen::VectorXd::Constant(d, 0.1))
                          : Covariance::full(a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d));
    auto lam = coal::mstep_lambda(coal::bp_upward(t, m, cur), cur);
    CHECK(lam.is_diagonal() == diag);
    CHECK(coal::min_eigenvalue(lam.dense()) > 0.0);
    if (trial % 10 == 0) {
      auto doubled = m;
      for (auto& x : doubled) x.mean *= 2.0;
      auto lam2 = coal::mstep_lambda(coal::bp_upward(t, doubled, cur), cur);
      CHECK(lam2.dense().trace() >= lam.dense().trace());
    }
  }
}

TEST_CASE("diagonal mstep equals the zeroed full estimate on diagonal inputs") {
  coal::Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = coal::sample_coalescent(5, static_cast<std::uint64_t>(trial));
    auto diag_msgs = random_messages(rng, 5, 3, true);
    std::vector<GaussianMessage> full_msgs;
    for (const auto& m : diag_msgs) full_msgs.push_back({m.mean, m.variance.as_full()});
    Eigen::Vector3d l(0.5, 1.0, 2.0);
    auto ld = coal::mstep_lambda(coal::bp_upward(t, diag_msgs, Covariance::diagonal(l)), Covariance::diagonal(l));
    Covariance lf_cur = Covariance::full(l.asDiagonal());
    auto lf = coal::mstep_lambda(coal::bp_upward(t, full_msgs, lf_cur), lf_cur);
    CHECK((lf.diagonal_projection().diag() - ld.diag()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mstep requires messages") {
  auto t = coal::sample_coalescent(3, 1);
  CHECK_THROWS_AS(coal::mstep_lambda(t, Covariance::identity(2, false)), coal::Error);
}

TEST_CASE("input summary messages") {
  coal::Rng rng(2);
  TaskDataset a;
  a.inputs = coal::standard_normal(rng, 50, 2);
  a.labels = Eigen::VectorXd::Ones(50);
  TaskDataset b = a;
  TaskDataset c = a;
  c.inputs.array() += 5.0;
  std::vector<coal::FeatureKind> kinds(2, coal::FeatureKind::continuous);
  auto x = coal::input_summary_messages({a, b, c}, kinds);
  CHECK((x[0].mean - x[1].mean).norm() == 0.0);
  CHECK((x[0].variance.dense() - x[1].variance.dense()).norm() == 0.0);
  auto t = coal::greedy_rate1_build(x, Covariance::identity(2, true));
  CHECK(t.has_clade({0, 1}));

  std::vector<coal::WeightPosterior> post(3, {Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)});
  auto joined = coal::leaf_messages_with_inputs({a, b, c}, post, kinds, Variant::full_x);
  CHECK(joined[0].dim() == 4);
  auto data_only = coal::leaf_messages_with_inputs({a, b, c}, post, kinds, Variant::data);
  CHECK(data_only[0].dim() == 2);
  CHECK_THROWS_AS(coal::leaf_messages_with_inputs({a, b, c}, post, kinds, Variant::full), coal::Error);
  CHECK_THROWS_AS(coal::leaf_messages_with_inputs({a, b, c}, post, kinds, Variant::diag), coal::Error);

  // Variance shrinks like 1/N.
  TaskDataset big;
  big.inputs = coal::standard_normal(rng, 20000, 2);
  big.labels = Eigen::VectorXd::Ones(20000);
  auto xs = coal::input_summary_messages({a, big}, kinds);
  CHECK(xs[1].variance.diagonal_entries().maxCoeff() < 1e-3 * xs[0].variance.diagonal_entries().minCoeff() * 50);
  CHECK(xs[1].variance.diagonal_entries().maxCoeff() < 2e-4);
}

TEST_CASE("discrete features become category frequencies") {
  TaskDataset a;
  a.inputs.resize(4, 2);
  a.inputs << 0, 1.0, 1, 2.0, 2, 3.0, 2, 4.0;
  a.labels = Eigen::VectorXd::Ones(4);
  std::vector<coal::FeatureKind> kinds{coal::FeatureKind::discrete, coal::FeatureKind::continuous};
  auto x = coal::input_summary_messages({a, a}, kinds);
  CHECK(x[0].dim() == 4);
  CHECK(x[0].mean[0] == doctest::Approx(0.25));
  CHECK(x[0].mean[2] == doctest::Approx(0.5));
  CHECK(x[0].mean[3] == doctest::Approx(2.5));
  CHECK(x[0].variance.diagonal_entries()[0] == doctest::Approx(0.25 * 0.75 / 4));
}

TEST_CASE("regression E-step matches the dense posterior mean") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    coal::Rng rng(s);
    const int k = 3 + static_cast<int>(s % 3);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(s % 3);
    auto t = coal::sample_coalescent(k, s);
    Eigen::MatrixXd a = coal::standard_normal(rng, d, d);
    Eigen::MatrixXd lam = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
    const double sigma2 = 0.8, rho2 = 0.4;
    std::vector<TaskDataset> data;
    for (int i = 0; i < k; ++i) {
      TaskDataset task;
      task.kind = TaskKind::regression;
      task.inputs = coal::standard_normal(rng, 4 + i, d);
      task.labels = coal::standard_normal(rng, 4 + i);
      data.push_back(task);
    }
    auto post = coal::da_estep(data, t, Covariance::full(lam), sigma2, rho2);

    Eigen::MatrixXd prec = oracle::leaf_state_cov(t, lam, sigma2 * Eigen::MatrixXd::Identity(d, d)).inverse();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k * d);
    for (int i = 0; i < k; ++i) {
      prec.block(i * d, i * d, d, d) += data[static_cast<std::size_t>(i)].inputs.transpose() * data[static_cast<std::size_t>(i)].inputs / rho2;
      rhs.segment(i * d, d) = data[static_cast<std::size_t>(i)].inputs.transpose() * data[static_cast<std::size_t>(i)].labels / rho2;
    }
    Eigen::VectorXd ref = prec.ldlt().solve(rhs);
    for (int i = 0; i < k; ++i) CHECK((post[static_cast<std::size_t>(i)].mean - ref.segment(i * d, d)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("each E-step weight is the MAP under its conditional prior") {
  auto sample = coal::sample_da(da_config(), 4, 3, 30, 8);
  auto lam = Covariance::identity(3, false, 0.5);
  auto post = coal::da_estep(sample.train, sample.truth.tree, lam, 1.0, 1.0);
  Eigen::MatrixXd p = coal::spd_inverse(coal::leaf_prior_covariance(sample.truth.tree, lam, 1.0));
  for (int i = 0; i < 4; ++i) {
    Eigen::MatrixXd pkk = p.block(i * 3, i * 3, 3, 3);
    Eigen::VectorXd off = Eigen::VectorXd::Zero(3);
    for (int j = 0; j < 4; ++j)
      if (j != i) off += p.block(i * 3, j * 3, 3, 3) * post[static_cast<std::size_t>(j)].mean;
    Eigen::MatrixXd var = pkk.inverse();
    GaussianMessage cond{-var * off, Covariance::full(var)};
    Eigen::VectorXd w = coal::map_weights(sample.train[static_cast<std::size_t>(i)], cond, 1.0);
    CHECK((w - post[static_cast<std::size_t>(i)].mean).cwiseAbs().maxCoeff() < 1e-6);
    Eigen::MatrixXd c = post[static_cast<std::size_t>(i)].covariance;
    CHECK(coal::min_eigenvalue(c) > 0.0);
  }
}

TEST_CASE("star tree with unit diffusion reduces to a shared Gaussian prior") {
  for (auto kind : {TaskKind::classification, TaskKind::regression}) {
    coal::DaSampleOptions opts;
    opts.kind = kind;
    auto sample = coal::sample_da(da_config(), 5, 3, 25, 4, opts);
    auto cfg = da_config(Variant::full, 1, 0.0);
    cfg.sigma2 = 2.0;
    cfg.rho2 = 0.5;
    cfg.fixed_tree = coal::CoalescentTree::star(5, 1.0);
    cfg.fixed_lambda = Covariance::identity(3, false);
    auto fit = coal::em_fit_da(sample.train, cfg);
    std::vector<Eigen::MatrixXd> xs;
    std::vector<Eigen::VectorXd> ys;
    for (const auto& t : sample.train) {
      xs.push_back(t.inputs);
      ys.push_back(t.labels);
    }
    auto ref = oracle::shared_prior_map(xs, ys, kind == TaskKind::regression, 2.0, Eigen::MatrixXd::Identity(3, 3), 0.5);
    CHECK(fit.iteration == 1);
    auto w = fit.weights();
    for (int i = 0; i < 5; ++i) CHECK((w[static_cast<std::size_t>(i)] - ref[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("identical tasks get identical weights") {
  auto sample = coal::sample_da(da_config(), 3, 4, 60, 21);
  std::vector<TaskDataset> data{sample.train[0], sample.train[0], sample.train[1]};
  data[1].name = "copy";
  for (auto v : {Variant::full, Variant::diag}) {
    auto fit = coal::em_fit_da(data, da_config(v, 5));
    auto w = fit.weights();
    CHECK((w[0] - w[1]).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("near-zero fixed diffusion forces shared weights") {
  auto sample = coal::sample_da(da_config(), 4, 3, 40, 5);
  auto cfg = da_config(Variant::full, 3);
  cfg.fixed_lambda = Covariance::identity(3, false, 1e-6);
  auto w = coal::em_fit_da(sample.train, cfg).weights();
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = i + 1; j < w.size(); ++j) CHECK((w[i] - w[j]).norm() < 1e-3);
}

TEST_CASE("EM objective never decreases on regression") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    coal::DaSampleOptions opts;
    opts.kind = TaskKind::regression;
    auto sample = coal::sample_da(da_config(), 5, 3, 30, seed, opts);
    for (auto v : {Variant::full, Variant::diag}) {
      auto fit = coal::em_fit_da(sample.train, da_config(v, 8, 0.1, seed));
      for (std::size_t i = 1; i < fit.objective_trace.size(); ++i)
        CHECK(fit.objective_trace[i] >= fit.objective_trace[i - 1] - 1e-6);
    }
  }
}

TEST_CASE("selected iterate is never worse than the initialization on held-out data") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto sample = coal::sample_da(da_config(), 4, 3, 40, 100 + seed);
    auto fit = coal::em_fit_da(sample.train, da_config(Variant::full, 4, 0.1, seed));
    REQUIRE(fit.heldout_trace.size() == 5);
    CHECK(fit.heldout_trace[static_cast<std::size_t>(fit.iteration)] >= fit.heldout_trace[0]);
  }
}

TEST_CASE("every variant fits and keeps valid parameters") {
  coal::DaSampleOptions opts;
  opts.model_inputs = true;
  auto cfg = da_config(Variant::full_x, 3);
  cfg.feature_kinds = {coal::FeatureKind::continuous, coal::FeatureKind::discrete, coal::FeatureKind::continuous};
  auto sample = coal::sample_da(cfg, 4, 3, 40, 6, opts);
  REQUIRE(sample.truth.input_model.has_value());
  for (auto v : {Variant::full, Variant::diag, Variant::full_x, Variant::diag_x, Variant::data}) {
    cfg.variant = v;
    auto fit = coal::em_fit_da(sample.train, cfg);
    CHECK_NOTHROW(fit.tree.validate());
    CHECK(fit.lambda.is_psd());
    CHECK(fit.lambda.is_diagonal() == coal::diagonal_lambda(v));
    CHECK(fit.input_lambda.has_value() == coal::models_inputs(v));
    CHECK(fit.leaf_posteriors.size() == 4);
  }
}

TEST_CASE("em_fit_da rejects bad problems") {
  auto sample = coal::sample_da(da_config(), 2, 2, 20, 1);
  CHECK_THROWS_AS(coal::em_fit_da({sample.train[0]}, da_config()), coal::Error);
  auto bad = sample.train;
  bad[1].inputs = Eigen::MatrixXd::Zero(20, 3);
  CHECK_THROWS_AS(coal::em_fit_da(bad, da_config()), coal::Error);
  auto tiny = sample.train;
  tiny[0] = coal::select_rows(tiny[0], {0});
  CHECK_THROWS_AS(coal::em_fit_da(tiny, da_config()), coal::Error);
  CHECK_NOTHROW(coal::em_fit_da(tiny, da_config(Variant::full, 2, 0.0)));
}

TEST_CASE("sample_da degenerate cases and label noise") {
  coal::DaSampleOptions opts;
  opts.lambda = Covariance::zero(3, false);
  opts.root_mean = Eigen::Vector3d(1.0, -0.5, 2.0);
  auto s = coal::sample_da(da_config(), 5, 3, 10, 2, opts);
  for (const auto& w : s.truth.weights()) CHECK((w - *opts.root_mean).norm() == 0.0);

  coal::DaSampleOptions reg;
  reg.kind = TaskKind::regression;
  auto cfg = da_config();
  cfg.rho2 = 0.5;
  auto r = coal::sample_da(cfg, 2, 3, 10000, 3, reg);
  Eigen::VectorXd res = r.train[0].labels - r.train[0].inputs * r.truth.weights()[0];
  double var = res.squaredNorm() / static_cast<double>(res.size()) - std::pow(res.mean(), 2);
  CHECK(std::abs(var - 0.5) < 0.025);

  auto small = da_config();
  small.sigma2 = 1e-10;
  auto z = coal::sample_da(small, 3, 2, 5, 4);
  CHECK(z.truth.tree.node(z.truth.tree.root()).state->norm() < 1e-3);

  auto c = coal::sample_da(da_config(), 3, 2, 50, 9);
  for (const auto& t : c.train) CHECK_NOTHROW(t.validate());
  auto c2 = coal::sample_da(da_config(), 3, 2, 50, 9);
  CHECK((c.train[2].inputs - c2.train[2].inputs).norm() == 0.0);
}

TEST_CASE("tune_da picks grid values") {
  coal::DaSampleOptions opts;
  opts.kind = TaskKind::regression;
  auto s = coal::sample_da(da_config(), 3, 2, 40, 10, opts);
  auto cfg = coal::tune_da(s.train, da_config(Variant::diag, 2));
  const std::vector<double> grid{0.01, 0.1, 1.0, 10.0};
  CHECK(std::find(grid.begin(), grid.end(), cfg.sigma2) != grid.end());
  CHECK(std::find(grid.begin(), grid.end(), cfg.rho2) != grid.end());
}
