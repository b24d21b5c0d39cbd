#include "minivis/losses.hpp"

#include "minivis/crossover.hpp"

#include <doctest.h>

using namespace minivis;
using namespace minivis::losses;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
  return m;
}

Vec random_unit(Rng& rng, int d) {
  Vec v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = rng.normal();
  return v / v.norm();
}

// A miniature single-level forward result backed by trainable parameters, so
// loss builders can be finite-difference checked end to end.
struct FakeFrame {
  net::ModelDims dims;
  net::PyramidGeometry geom;
  net::FrameTargets targets;
  ad::ParamStore* params = nullptr;
  std::string prefix;

  net::ForwardResult forward(ad::Graph& g) const {
    net::ForwardResult fwd;
    net::LevelForward lvl;
    lvl.stride = geom.levels[0].stride;
    lvl.h = geom.levels[0].h;
    lvl.w = geom.levels[0].w;
    lvl.cls_logits = g.param(params->get(prefix + ".cls"));
    lvl.box_raw = g.param(params->get(prefix + ".box"));
    lvl.ctrl = g.param(params->get(prefix + ".ctrl"));
    lvl.embed = g.param(params->get(prefix + ".embed"));
    fwd.levels.push_back(lvl);
    fwd.f_mask = g.param(params->get(prefix + ".fmask"));
    fwd.mask_h = geom.mask_h;
    fwd.mask_w = geom.mask_w;
    return fwd;
  }
};

FakeFrame make_fake_frame(ad::ParamStore& params, const std::string& prefix, Rng& rng,
                          const std::vector<std::pair<int, Box>>& instances, int image_size = 32) {
  FakeFrame f;
  f.dims.strides = {4};
  f.dims.total_identities = 8;
  f.params = &params;
  f.prefix = prefix;
  f.geom = net::pyramid_geometry(f.dims, image_size, image_size);
  const int n = f.geom.levels[0].h * f.geom.levels[0].w;
  params.add(prefix + ".cls", random_mat(rng, f.dims.num_categories, n));
  params.add(prefix + ".box", random_mat(rng, 4, n, 0.5));
  params.add(prefix + ".ctrl", random_mat(rng, f.dims.theta_dim(), n, 0.4));
  params.add(prefix + ".embed", random_mat(rng, f.dims.embed_dim, n));
  params.add(prefix + ".fmask", random_mat(rng, f.dims.mask_channels, f.geom.mask_h * f.geom.mask_w));

  std::vector<syndata::InstanceAnnotation> anns;
  int identity = 0;
  for (const auto& [category, box] : instances) {
    syndata::InstanceAnnotation ann;
    ann.identity = identity++;
    ann.category = category;
    ann.box = box;
    ann.mask = Mask::Zero(image_size, image_size);
    for (int y = static_cast<int>(box.y0); y < static_cast<int>(box.y1); ++y)
      for (int x = static_cast<int>(box.x0); x < static_cast<int>(box.x1); ++x) ann.mask(y, x) = 1;
    anns.push_back(std::move(ann));
  }
  f.targets = net::assign_targets(anns, f.geom, f.dims);
  return f;
}

}  // namespace

TEST_CASE("dice loss tabulated values") {
  Mat ones = Mat::Ones(2, 2), zeros = Mat::Zero(2, 2);
  CHECK(dice_loss(ones, ones) == doctest::Approx(0.0).epsilon(1e-9));
  const double eps = 1e-6;
  CHECK(dice_loss(ones, zeros) == doctest::Approx(1.0 - 2 * eps / (4 + 2 * eps)));
  Mat m(1, 4), ms(1, 4);
  m << 1, 1, 0, 0;
  ms << 1, 0, 1, 0;
  CHECK(std::abs(dice_loss(m, ms) - 0.5) < 1e-6);
  CHECK_THROWS_AS(dice_loss(Mat::Ones(2, 2), Mat::Ones(2, 3)), std::invalid_argument);
}

TEST_CASE("dice loss range and zero condition on random binary masks") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Mat a(1, 16), b(1, 16);
    for (int i = 0; i < 16; ++i) {
      a(0, i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
      b(0, i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    const double d = dice_loss(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    if (a.sum() > 0 && (a - b).cwiseAbs().sum() == 0) CHECK(d == doctest::Approx(0.0).epsilon(1e-9));
    if (d < 1e-9 && a.sum() > 0) CHECK((a - b).cwiseAbs().sum() == 0);
  }
}

TEST_CASE("pairwise assignment probabilities") {
  SUBCASE("no references puts all mass on new") {
    Vec p = pairwise_assign_prob(Vec::Ones(4), Mat(4, 0));
    REQUIRE(p.size() == 1);
    CHECK(p(0) == doctest::Approx(1.0));
  }
  SUBCASE("single orthogonal reference splits evenly") {
    Vec e = Vec::Zero(4);
    e(0) = 1;
    Mat refs = Mat::Zero(4, 1);
    refs(1, 0) = 1;
    Vec p = pairwise_assign_prob(e, refs);
    CHECK(p(0) == doctest::Approx(0.5));
    CHECK(p(1) == doctest::Approx(0.5));
  }
  SUBCASE("two references with dot ln2 give (0.4, 0.4, 0.2)") {
    Vec e(1);
    e << 1.0;
    Mat refs(1, 2);
    refs << std::log(2.0), std::log(2.0);
    Vec p = pairwise_assign_prob(e, refs);
    CHECK(p(0) == doctest::Approx(0.4));
    CHECK(p(1) == doctest::Approx(0.4));
    CHECK(p(2) == doctest::Approx(0.2));
  }
  SUBCASE("probabilities sum to one on random instances") {
    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
      const int d = rng.uniform_int(1, 6), n = rng.uniform_int(0, 5);
      Vec e = random_mat(rng, d, 1);
      Mat refs = random_mat(rng, d, n, 2.0);
      CHECK(std::abs(pairwise_assign_prob(e, refs).sum() - 1.0) < 1e-12);
    }
  }
  SUBCASE("adding a constant to every reference changes the probabilities") {
    Rng rng(23);
    Vec e = random_unit(rng, 4);
    Mat refs = random_mat(rng, 4, 3);
    Mat shifted = refs.colwise() + Eigen::VectorXd::Constant(4, 0.7);
    CHECK((pairwise_assign_prob(e, refs) - pairwise_assign_prob(e, shifted)).cwiseAbs().maxCoeff() > 1e-6);
  }
}

TEST_CASE("pairwise cross-entropy loss") {
  EmbeddingBatch batch;
  SUBCASE("strong match is nearly free") {
    Vec e(1), r(1);
    e << 20.0;
    r << 1.0;  // dot = 20
    batch.keys = {{e, 3}};
    batch.references = {{r, 3}};
    CHECK(pairwise_ce_loss(batch) == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
  }
  SUBCASE("new identity with no references costs nothing") {
    batch.keys = {{Vec::Ones(3), 5}};
    batch.references = {};
    CHECK(pairwise_ce_loss(batch) == doctest::Approx(0.0));
  }
  SUBCASE("orthogonal single reference costs log 2") {
    Vec e = Vec::Zero(2), r = Vec::Zero(2);
    e(0) = 1;
    r(1) = 1;
    batch.keys = {{e, 1}};
    batch.references = {{r, 1}};
    CHECK(pairwise_ce_loss(batch) == doctest::Approx(std::log(2.0)));
  }
}

TEST_CASE("global assignment probabilities and CE") {
  SUBCASE("uniform logits") {
    Mat w = Mat::Zero(4, 3);
    Vec p = global_assign_prob(Vec::Ones(3), w);
    for (int i = 0; i < 4; ++i) CHECK(p(i) == doctest::Approx(0.25));
    CHECK(global_ce_loss(Vec::Ones(3), w, 2) == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("two zero logits split evenly") {
    Mat w = Mat::Zero(2, 3);
    Vec p = global_assign_prob(Vec::Ones(3), w);
    CHECK(p(0) == doctest::Approx(0.5));
    CHECK(p(1) == doctest::Approx(0.5));
  }
  SUBCASE("random probabilities match a direct softmax oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      const int m = rng.uniform_int(1, 8), d = rng.uniform_int(1, 6);
      Mat w = random_mat(rng, m, d, 1.5);
      Vec e = random_mat(rng, d, 1);
      Vec logits = w * e;
      Vec direct = logits.array().exp();
      direct /= direct.sum();
      CHECK((global_assign_prob(e, w) - direct).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(std::abs(global_assign_prob(e, w).sum() - 1.0) < 1e-12);
    }
  }
  SUBCASE("confident true class and single-class edge cases") {
    Mat w(2, 1);
    w << 20.0, 0.0;
    Vec e(1);
    e << 1.0;
    CHECK(global_ce_loss(e, w, 0) == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
    Mat w1 = Mat::Zero(1, 1);
    CHECK(global_ce_loss(e, w1, 0) == doctest::Approx(0.0));
    CHECK_THROWS_AS(global_ce_loss(e, w, 5), std::out_of_range);
  }
}

TEST_CASE("global focal identity loss") {
  FocalParams fp{0.25, 2.0};
  SUBCASE("saturated logits vanish") {
    Mat w(3, 1);
    w << 40.0, -40.0, -40.0;
    Vec e(1);
    e << 1.0;
    CHECK(global_focal_id_loss(e, w, 0, fp) < 1e-12);
  }
  SUBCASE("gamma 0, alpha 0.5 halves the summed binary cross entropy") {
    Rng rng(41);
    FocalParams plain{0.5, 0.0};
    for (int trial = 0; trial < 20; ++trial) {
      Mat w = random_mat(rng, 5, 3);
      Vec e = random_mat(rng, 3, 1);
      const int label = rng.uniform_int(0, 4);
      const Vec logits = w * e;
      double bce = 0;
      for (int i = 0; i < 5; ++i) {
        const double z = logits(i);
        bce += i == label ? std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      }
      CHECK(global_focal_id_loss(e, w, label, plain) == doctest::Approx(0.5 * bce).epsilon(1e-10));
    }
  }
  SUBCASE("single class at logit zero reproduces the closed form") {
    Mat w = Mat::Zero(1, 2);
    Vec e = Vec::Ones(2);
    CHECK(global_focal_id_loss(e, w, 0, fp) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-6));
    CHECK(global_focal_id_loss(e, w, 0, fp) == doctest::Approx(0.043322).epsilon(1e-4));
  }
}

TEST_CASE("detection loss on crafted head outputs") {
  Rng rng(51);
  ad::ParamStore params;
  auto frame = make_fake_frame(params, "f", rng, {{1, Box{8, 8, 20, 20}}, {0, Box{20, 18, 30, 30}}});
  REQUIRE(frame.targets.positives.size() == 2);

  SUBCASE("perfect logits and exact boxes give a vanishing loss") {
    // +20 on positive (class, location) logits, -20 elsewhere; box raw values
    // are the softplus inverse of the target distances.
    Mat& cls = params.get("f.cls").value;
    cls.setConstant(-20.0);
    Mat& box = params.get("f.box").value;
    box.setConstant(0.1);
    for (const auto& pos : frame.targets.positives) {
      cls(pos.category, pos.loc_index) = 20.0;
      for (int k = 0; k < 4; ++k) {
        const double want = pos.ltrb(k) / frame.geom.levels[0].stride;
        box(k, pos.loc_index) = std::log(std::expm1(want));
      }
    }
    ad::Graph g;
    auto fwd = frame.forward(g);
    auto loss = detection_loss_node(g, fwd.levels, frame.targets, frame.dims, FocalParams{});
    CHECK(loss->scalar() < 1e-6);
  }

  SUBCASE("zero positives leaves only the classification term") {
    net::FrameTargets empty;
    empty.cls_onehot.push_back(Mat::Zero(frame.dims.num_categories, params.get("f.cls").value.cols()));
    ad::Graph g;
    auto fwd = frame.forward(g);
    auto loss = detection_loss_node(g, fwd.levels, empty, frame.dims, FocalParams{});
    auto focal_only = ad::sigmoid_focal_sum_node(g, fwd.levels[0].cls_logits, empty.cls_onehot[0], 0.25, 2.0);
    CHECK(loss->scalar() == doctest::Approx(focal_only->scalar()).epsilon(1e-12));
  }

  SUBCASE("exact boxes zero the IoU term") {
    Mat target(4, 3);
    target << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
    ad::Graph g;
    auto pred = g.input(target);
    CHECK(ad::iou_loss_sum_node(g, pred, target)->scalar() == doctest::Approx(0.0));
  }
}

TEST_CASE("segmentation loss agrees with a per-instance dice oracle") {
  Rng rng(61);
  ad::ParamStore params;
  auto frame = make_fake_frame(params, "f", rng, {{1, Box{4, 4, 16, 16}}, {2, Box{18, 16, 30, 28}}});
  ad::Graph g;
  auto fwd = frame.forward(g);
  auto instances = gather_instances(g, fwd, frame.targets, frame.dims);
  auto loss = segmentation_loss_node(g, instances, frame.dims);

  double expected = 0;
  for (const auto& pos : frame.targets.positives) {
    Mat rel = net::rel_coords_grid(pos.loc_cx, pos.loc_cy, frame.geom.mask_h, frame.geom.mask_w, 4, 32.0);
    Mat combined(frame.dims.dynamic_in_channels(), rel.cols());
    combined << params.get("f.fmask").value, rel;
    Mat mask = net::mask_head(combined, params.get("f.ctrl").value.col(pos.loc_index), frame.dims);
    expected += dice_loss(mask, pos.gt_mask_ds);
  }
  expected /= static_cast<double>(frame.targets.positives.size());
  CHECK(loss->scalar() == doctest::Approx(expected).epsilon(1e-12));

  CHECK(segmentation_loss_node(g, std::span<const InstanceForward>{}, frame.dims)->scalar() == 0.0);
}

TEST_CASE("total loss equals the sum of independently computed terms") {
  Rng rng(71);
  ad::ParamStore params;
  auto fa = make_fake_frame(params, "a", rng, {{0, Box{4, 4, 16, 16}}, {1, Box{18, 16, 30, 28}}});
  auto fb = make_fake_frame(params, "b", rng, {{0, Box{8, 6, 20, 18}}, {1, Box{16, 18, 28, 30}}});
  params.add("proxy", random_mat(rng, 8, fa.dims.embed_dim, 0.3));

  for (bool crossover_on : {true, false}) {
    CAPTURE(crossover_on);
    ad::Graph g;
    auto fwd_a = fa.forward(g);
    auto fwd_b = fb.forward(g);
    auto proxies = g.param(params.get("proxy"));

    ad::NodePtr cross;
    if (crossover_on) {
      auto inst_a = gather_instances(g, fwd_a, fa.targets, fa.dims);
      auto inst_b = gather_instances(g, fwd_b, fb.targets, fb.dims);
      auto pairs = crossover::match_instances(inst_a, inst_b);
      cross = crossover::crossover_loss_node(g, pairs, fa.dims);
    }
    LossConfig cfg;
    cfg.crossover = crossover_on;
    cfg.embedding = EmbeddingVariant::kGlobalFocal;
    auto loss = total_loss_node(g, fwd_a, fa.targets, fwd_b, fb.targets, proxies, fa.dims, cfg, cross);

    double expected = loss.det->scalar() + loss.seg->scalar() + loss.id->scalar();
    if (crossover_on) expected += loss.cross->scalar();
    CHECK(loss.total->scalar() == doctest::Approx(expected).epsilon(1e-12));
    if (!crossover_on) CHECK(loss.cross == nullptr);
  }
}

TEST_CASE("gradient suite: every loss matches finite differences") {
  Rng rng(81);
  ad::ParamStore params;
  auto fa = make_fake_frame(params, "a", rng, {{0, Box{4, 4, 16, 16}}, {1, Box{18, 16, 30, 28}}});
  auto fb = make_fake_frame(params, "b", rng, {{0, Box{8, 6, 20, 18}}, {2, Box{14, 16, 26, 28}}});
  params.add("proxy", random_mat(rng, 8, fa.dims.embed_dim, 0.4));

  auto check = [&](const char* name, const std::function<ad::NodePtr(ad::Graph&)>& build) {
    CAPTURE(name);
    Rng crng(fnv1a(name));
    auto report = grad_check(build, params, crng, 48);
    CHECK(report.max_rel_err < 1e-4);
  };

  check("detection", [&](ad::Graph& g) {
    auto fwd = fa.forward(g);
    return detection_loss_node(g, fwd.levels, fa.targets, fa.dims, FocalParams{});
  });
  check("segmentation", [&](ad::Graph& g) {
    auto fwd = fa.forward(g);
    auto inst = gather_instances(g, fwd, fa.targets, fa.dims);
    return segmentation_loss_node(g, inst, fa.dims);
  });
  check("crossover", [&](ad::Graph& g) {
    auto fwd_a = fa.forward(g);
    auto fwd_b = fb.forward(g);
    auto inst_a = gather_instances(g, fwd_a, fa.targets, fa.dims);
    auto inst_b = gather_instances(g, fwd_b, fb.targets, fb.dims);
    auto pairs = crossover::match_instances(inst_a, inst_b);
    return crossover::crossover_loss_node(g, pairs, fa.dims);
  });
  for (EmbeddingVariant v : {EmbeddingVariant::kPairwiseCe, EmbeddingVariant::kPairwiseFocal,
                             EmbeddingVariant::kGlobalCe, EmbeddingVariant::kGlobalFocal}) {
    check(to_string(v).c_str(), [&, v](ad::Graph& g) {
      auto fwd_a = fa.forward(g);
      auto fwd_b = fb.forward(g);
      auto inst_a = gather_instances(g, fwd_a, fa.targets, fa.dims);
      auto inst_b = gather_instances(g, fwd_b, fb.targets, fb.dims);
      auto proxies = g.param(params.get("proxy"));
      return embedding_loss_node(g, v, inst_a, inst_b, proxies, FocalParams{});
    });
  }
}

TEST_CASE("grad_check names the parameter whose perturbation went non-finite") {
  ad::ParamStore params;
  params.add("w", Mat::Ones(1, 1));
  auto build = [&](ad::Graph& g) {
    // Finite at the base point, 1/0 when w is nudged up by h = 1e-5.
    const double w = params.get("w").value(0, 0);
    return g.input(Mat::Constant(1, 1, 1.0 / (w - 1.0 - 1e-5)));
  };
  Rng rng(1);
  try {
    grad_check(build, params, rng, 4);
    FAIL("expected a non-finite abort");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }
}
