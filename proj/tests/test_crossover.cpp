#include "minivis/crossover.hpp"

#include <doctest.h>

using namespace minivis;
using namespace minivis::crossover;

namespace {

syndata::InstanceAnnotation ann_with_identity(int identity) {
  syndata::InstanceAnnotation ann;
  ann.identity = identity;
  ann.category = 0;
  ann.mask = Mask::Constant(2, 2, 1);
  return ann;
}

net::ModelDims small_dims() {
  net::ModelDims dims;
  dims.strides = {4};
  return dims;
}

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
  return m;
}

CrossPair random_pair(Rng& rng, const net::ModelDims& dims, int npx) {
  CrossPair pair;
  pair.identity = 0;
  pair.theta_t.theta = random_mat(rng, dims.theta_dim(), 1, 0.5);
  pair.theta_t_delta.theta = random_mat(rng, dims.theta_dim(), 1, 0.5);
  pair.combined_t = random_mat(rng, dims.dynamic_in_channels(), npx);
  pair.combined_t_delta = random_mat(rng, dims.dynamic_in_channels(), npx);
  pair.gt_mask_t = (random_mat(rng, 1, npx).array() > 0).cast<double>();
  pair.gt_mask_t_delta = (random_mat(rng, 1, npx).array() > 0).cast<double>();
  return pair;
}

}  // namespace

TEST_CASE("match_identities returns the intersection") {
  std::vector<syndata::InstanceAnnotation> a, b;
  SUBCASE("same single identity") {
    a = {ann_with_identity(4)};
    b = {ann_with_identity(4)};
    CHECK(match_identities(a, b) == std::vector<int>{4});
  }
  SUBCASE("disjoint sets") {
    a = {ann_with_identity(1)};
    b = {ann_with_identity(2)};
    CHECK(match_identities(a, b).empty());
  }
  SUBCASE("partial overlap") {
    a = {ann_with_identity(1), ann_with_identity(2), ann_with_identity(3)};
    b = {ann_with_identity(2), ann_with_identity(3), ann_with_identity(4)};
    CHECK(match_identities(a, b) == std::vector<int>({2, 3}));
  }
}

TEST_CASE("crossover_mask is the mask head with swapped inputs") {
  auto dims = small_dims();
  Rng rng(3);
  auto pair = random_pair(rng, dims, 16);

  SUBCASE("identical frames make the crossover mask bit-equal to the within-frame mask") {
    pair.combined_t_delta = pair.combined_t;
    pair.theta_t_delta = pair.theta_t;
    Mat within = net::mask_head(pair.combined_t, pair.theta_t.theta, dims);
    Mat cross = crossover_mask(pair.theta_t_delta, pair.combined_t, dims);
    CHECK((cross.array() == within.array()).all());
  }

  SUBCASE("zero filter yields 0.5 everywhere") {
    net::DynamicFilter zeros{Vec::Zero(dims.theta_dim())};
    Mat out = crossover_mask(zeros, pair.combined_t_delta, dims);
    CHECK((out.array() - 0.5).abs().maxCoeff() < 1e-15);
  }

  SUBCASE("definitionally equal to mask_head") {
    Mat a = crossover_mask(pair.theta_t, pair.combined_t_delta, dims);
    Mat b = net::mask_head(pair.combined_t_delta, pair.theta_t.theta, dims);
    CHECK((a.array() == b.array()).all());
  }

  SUBCASE("dimension mismatch is rejected") {
    net::DynamicFilter bad{Vec::Zero(7)};
    CHECK_THROWS_AS(crossover_mask(bad, pair.combined_t, dims), std::invalid_argument);
  }
}

TEST_CASE("crossover_loss values") {
  auto dims = small_dims();
  CHECK(crossover_loss({}, dims) == 0.0);

  Rng rng(5);
  const int npx = 16;

  SUBCASE("perfectly reproduced hard masks cost zero") {
    // A bias-only filter cannot emit hard 0/1; drive the logit to saturation
    // through a huge final bias / strongly negative one per pixel sign.
    // Instead: targets equal to the produced mask after rounding is not the
    // point here; use a filter that yields near-0/1 and binary targets equal
    // to the rounded mask, then check the loss is ~0.
    CrossPair pair = random_pair(rng, dims, npx);
    pair.theta_t.theta.setZero();
    pair.theta_t_delta.theta.setZero();
    pair.theta_t.theta(dims.theta_dim() - 1) = 30.0;  // all-ones mask either direction
    pair.theta_t_delta.theta(dims.theta_dim() - 1) = 30.0;
    pair.gt_mask_t.setOnes();
    pair.gt_mask_t_delta.setOnes();
    CHECK(crossover_loss({pair}, dims) < 1e-6);
  }

  SUBCASE("complement targets cost two") {
    CrossPair pair = random_pair(rng, dims, npx);
    pair.theta_t.theta.setZero();
    pair.theta_t_delta.theta.setZero();
    pair.theta_t.theta(dims.theta_dim() - 1) = 40.0;
    pair.theta_t_delta.theta(dims.theta_dim() - 1) = 40.0;
    pair.gt_mask_t.setZero();
    pair.gt_mask_t_delta.setZero();
    CHECK(crossover_loss({pair}, dims) == doctest::Approx(2.0).epsilon(1e-6));
  }

  SUBCASE("frame exchange leaves the loss invariant") {
    for (int trial = 0; trial < 10; ++trial) {
      CrossPair pair = random_pair(rng, dims, npx);
      CrossPair swapped;
      swapped.identity = pair.identity;
      swapped.theta_t = pair.theta_t_delta;
      swapped.theta_t_delta = pair.theta_t;
      swapped.combined_t = pair.combined_t_delta;
      swapped.combined_t_delta = pair.combined_t;
      swapped.gt_mask_t = pair.gt_mask_t_delta;
      swapped.gt_mask_t_delta = pair.gt_mask_t;
      CHECK(crossover_loss({pair}, dims) == doctest::Approx(crossover_loss({swapped}, dims)).epsilon(1e-15));
    }
  }
}

TEST_CASE("crossover gradients reach both frames") {
  auto dims = small_dims();
  Rng rng(7);
  const int npx = 12;
  ad::ParamStore params;
  params.add("theta_t", random_mat(rng, dims.theta_dim(), 1, 0.5));
  params.add("theta_td", random_mat(rng, dims.theta_dim(), 1, 0.5));
  params.add("combined_t", random_mat(rng, dims.dynamic_in_channels(), npx));
  params.add("combined_td", random_mat(rng, dims.dynamic_in_channels(), npx));
  Mat gt_t = (random_mat(rng, 1, npx).array() > 0).cast<double>();
  Mat gt_td = (random_mat(rng, 1, npx).array() > 0).cast<double>();

  net::PositiveTarget pos_t, pos_td;
  pos_t.identity = pos_td.identity = 0;
  pos_t.gt_mask_ds = gt_t;
  pos_td.gt_mask_ds = gt_td;

  auto build = [&](ad::Graph& g) {
    losses::InstanceForward a, b;
    a.target = &pos_t;
    a.theta = g.param(params.get("theta_t"));
    a.combined = g.param(params.get("combined_t"));
    b.target = &pos_td;
    b.theta = g.param(params.get("theta_td"));
    b.combined = g.param(params.get("combined_td"));
    std::vector<MatchedInstancePair> pairs{{&a, &b}};
    return crossover_loss_node(g, pairs, dims);
  };

  Rng crng(11);
  auto report = losses::grad_check(build, params, crng, 64);
  CHECK(report.max_rel_err < 1e-4);

  // Both the swapped-in filter and the receiving features carry gradient.
  params.zero_grads();
  ad::Graph g;
  auto loss = build(g);
  g.backward(loss);
  CHECK(params.get("theta_t").grad.cwiseAbs().maxCoeff() > 1e-8);
  CHECK(params.get("theta_td").grad.cwiseAbs().maxCoeff() > 1e-8);
  CHECK(params.get("combined_t").grad.cwiseAbs().maxCoeff() > 1e-8);
  CHECK(params.get("combined_td").grad.cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("graph-level crossover loss is invariant under frame exchange") {
  auto dims = small_dims();
  Rng rng(13);
  const int npx = 10;
  ad::ParamStore params;
  params.add("theta_a", random_mat(rng, dims.theta_dim(), 1, 0.5));
  params.add("theta_b", random_mat(rng, dims.theta_dim(), 1, 0.5));
  params.add("comb_a", random_mat(rng, dims.dynamic_in_channels(), npx));
  params.add("comb_b", random_mat(rng, dims.dynamic_in_channels(), npx));
  net::PositiveTarget pos_a, pos_b;
  pos_a.identity = pos_b.identity = 0;
  pos_a.gt_mask_ds = (random_mat(rng, 1, npx).array() > 0).cast<double>();
  pos_b.gt_mask_ds = (random_mat(rng, 1, npx).array() > 0).cast<double>();

  auto eval_loss = [&](bool swapped) {
    ad::Graph g(false);
    losses::InstanceForward a, b;
    a.target = swapped ? &pos_b : &pos_a;
    a.theta = g.param(params.get(swapped ? "theta_b" : "theta_a"));
    a.combined = g.param(params.get(swapped ? "comb_b" : "comb_a"));
    b.target = swapped ? &pos_a : &pos_b;
    b.theta = g.param(params.get(swapped ? "theta_a" : "theta_b"));
    b.combined = g.param(params.get(swapped ? "comb_a" : "comb_b"));
    std::vector<MatchedInstancePair> pairs{{&a, &b}};
    return crossover_loss_node(g, pairs, dims)->scalar();
  };
  CHECK(eval_loss(false) == doctest::Approx(eval_loss(true)).epsilon(1e-15));
}
