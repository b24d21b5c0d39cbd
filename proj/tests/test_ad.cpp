#include "minivis/ad.hpp"
#include "minivis/losses.hpp"

#include <doctest.h>

using namespace minivis;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("backward matches finite differences for elementwise and linear ops") {
  Rng rng(11);
  ad::ParamStore params;
  params.add("a", random_mat(rng, 3, 4));
  params.add("b", random_mat(rng, 5, 3));
  params.add("bias", random_mat(rng, 5, 1));

  auto build = [&](ad::Graph& g) {
    auto a = g.param(params.get("a"));
    auto b = g.param(params.get("b"));
    auto bias = g.param(params.get("bias"));
    auto y = ad::add_bias(g, ad::matmul(g, b, ad::relu(g, a)), bias);
    auto z = ad::sigmoid(g, y);
    auto w = ad::cmul(g, z, ad::softplus(g, y));
    return ad::mean(g, w);
  };
  Rng crng(7);
  auto report = losses::grad_check(build, params, crng, 40);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("conv3x3 matches a naive sliding-window oracle") {
  Rng rng(5);
  const int cin = 3, cout = 4, h = 6, w = 5;
  Mat x = random_mat(rng, cin, h * w);
  Mat weight = random_mat(rng, cout, cin * 9);
  Mat bias = random_mat(rng, cout, 1);

  for (int stride : {1, 2}) {
    ad::Graph g(false);
    auto y = ad::conv3x3(g, g.input(x), g.input(weight), g.input(bias), h, w, stride);
    const int ho = ad::conv_out_extent(h, stride);
    const int wo = ad::conv_out_extent(w, stride);
    REQUIRE(y->val.cols() == ho * wo);

    for (int co = 0; co < cout; ++co) {
      for (int yo = 0; yo < ho; ++yo) {
        for (int xo = 0; xo < wo; ++xo) {
          double acc = bias(co, 0);
          for (int c = 0; c < cin; ++c) {
            for (int dy = 0; dy < 3; ++dy) {
              for (int dx = 0; dx < 3; ++dx) {
                const int yi = yo * stride - 1 + dy;
                const int xi = xo * stride - 1 + dx;
                if (yi < 0 || yi >= h || xi < 0 || xi >= w) continue;
                acc += weight(co, c * 9 + dy * 3 + dx) * x(c, yi * w + xi);
              }
            }
          }
          CHECK(y->val(co, yo * wo + xo) == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("conv3x3 and instance_norm gradients") {
  Rng rng(21);
  ad::ParamStore params;
  params.add("x", random_mat(rng, 2, 16));
  params.add("w", random_mat(rng, 3, 2 * 9, 0.5));
  params.add("b", random_mat(rng, 3, 1));
  params.add("gamma", Mat::Ones(3, 1) + 0.1 * random_mat(rng, 3, 1));
  params.add("beta", random_mat(rng, 3, 1, 0.1));

  auto build = [&](ad::Graph& g) {
    auto y = ad::conv3x3(g, g.param(params.get("x")), g.param(params.get("w")), g.param(params.get("b")), 4, 4, 1);
    auto n = ad::instance_norm(g, y, g.param(params.get("gamma")), g.param(params.get("beta")));
    return ad::mean(g, ad::cmul(g, n, n));
  };
  Rng crng(3);
  auto report = losses::grad_check(build, params, crng, 48);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("gradient accumulates through shared subexpressions") {
  // y = (p + p) . p, dy/dp = 3 p^2 summed -> per-coordinate 3 p_i^2 ... via FD
  ad::ParamStore params;
  params.add("p", (Mat(2, 1) << 1.5, -0.5).finished());
  auto build = [&](ad::Graph& g) {
    auto p = g.param(params.get("p"));
    auto s = ad::add(g, p, p);
    return ad::sum(g, ad::cmul(g, s, p));
  };
  ad::Graph g;
  auto loss = build(g);
  params.zero_grads();
  g.backward(loss);
  CHECK(params.get("p").grad(0, 0) == doctest::Approx(6.0));   // d/dp 2p^2 = 4p... plus p*2p path
  CHECK(params.get("p").grad(1, 0) == doctest::Approx(-2.0));
}

TEST_CASE("fused loss nodes match finite differences") {
  Rng rng(31);
  ad::ParamStore params;
  params.add("logits", random_mat(rng, 3, 7));
  params.add("pred", random_mat(rng, 1, 9, 0.3));
  params.add("ltrb_raw", random_mat(rng, 4, 5, 0.5));
  params.add("vec", random_mat(rng, 6, 1));

  Mat target = (random_mat(rng, 3, 7).array() > 0.3).cast<double>();
  Mat dice_target = (random_mat(rng, 1, 9).array() > 0.0).cast<double>();
  Mat ltrb_target = random_mat(rng, 4, 5, 0.4).array().exp() + 0.2;

  auto build = [&](ad::Graph& g) {
    auto focal = ad::sigmoid_focal_sum_node(g, g.param(params.get("logits")), target, 0.25, 2.0);
    auto dice = ad::dice_loss_node(g, ad::sigmoid(g, g.param(params.get("pred"))), dice_target);
    auto iou = ad::iou_loss_sum_node(g, ad::softplus(g, g.param(params.get("ltrb_raw"))), ltrb_target);
    auto ce = ad::softmax_ce_node(g, ad::l2_normalize(g, g.param(params.get("vec"))), 2);
    return ad::add(g, ad::add(g, focal, dice), ad::add(g, iou, ce));
  };
  Rng crng(13);
  auto report = losses::grad_check(build, params, crng, 64);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("backward requires a scalar and rejects no-grad graphs") {
  ad::Graph g;
  auto x = g.input(Mat::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
  ad::Graph ng(false);
  auto y = ng.input(Mat::Ones(1, 1));
  CHECK_THROWS_AS(ng.backward(y), std::logic_error);
}
