#include "minivis/netcore.hpp"

#include <algorithm>
#include <cmath>

namespace minivis::net {

namespace {

// stride per backbone stage; stages 0..2 build the stride-4 level, 3..5 the stride-8 level
constexpr int kStageStride[6] = {2, 2, 1, 2, 1, 1};

void init_conv(ad::ParamStore& params, const std::string& name, int cout, int cin, int ksq, Rng& rng, double w_std,
               double bias_init) {
  Mat w(cout, cin * ksq);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal(0.0, w_std);
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Mat::Constant(cout, 1, bias_init));
}

void init_norm(ad::ParamStore& params, const std::string& name, int c) {
  params.add(name + ".gamma", Mat::Ones(c, 1));
  params.add(name + ".beta", Mat::Zero(c, 1));
}

ad::NodePtr conv_norm_relu(ad::Graph& g, ad::ParamStore& params, const std::string& name, ad::NodePtr x, int h, int w,
                           int stride) {
  auto y = ad::conv3x3(g, x, g.param(params.get(name + ".w")), g.param(params.get(name + ".b")), h, w, stride);
  y = ad::instance_norm(g, y, g.param(params.get(name + ".gamma")), g.param(params.get(name + ".beta")));
  return ad::relu(g, y);
}

ad::NodePtr conv1x1(ad::Graph& g, ad::ParamStore& params, const std::string& name, ad::NodePtr x) {
  return ad::add_bias(g, ad::matmul(g, g.param(params.get(name + ".w")), x), g.param(params.get(name + ".b")));
}

}  // namespace

ad::ParamStore init_params(const ModelDims& dims, std::uint64_t seed) {
  Rng rng(mix_seed(seed, "model-init"));
  ad::ParamStore params;
  const int c = dims.backbone_channels;

  int cin = dims.image_channels;
  for (int s = 0; s < 6; ++s) {
    const std::string name = "backbone." + std::to_string(s);
    init_conv(params, name, c, cin, 9, rng, std::sqrt(2.0 / (cin * 9)), 0.0);
    init_norm(params, name, c);
    cin = c;
  }

  init_conv(params, "tower", c, c, 9, rng, std::sqrt(2.0 / (c * 9)), 0.0);
  init_norm(params, "tower", c);

  // Classification bias starts at the focal-loss prior so early negatives do
  // not swamp the loss.
  const double prior = 0.1;
  init_conv(params, "head.cls", dims.num_categories, c, 1, rng, 0.01, -std::log((1.0 - prior) / prior));
  // softplus(1.8545) ~= 2.0, so initial boxes span ~2 strides in each direction.
  init_conv(params, "head.box", 4, c, 1, rng, 0.01, 1.8545);
  init_conv(params, "head.ctrl", dims.theta_dim(), c, 1, rng, 0.01, 0.0);
  init_conv(params, "head.embed", dims.embed_dim, c, 1, rng, 0.05, 0.0);
  {
    // Per-channel bias noise keeps the initial embedding away from the origin.
    ad::Param& eb = params.get("head.embed.b");
    for (Eigen::Index i = 0; i < eb.value.rows(); ++i) eb.value(i, 0) = rng.normal(0.0, 0.5);
  }

  init_conv(params, "mask.0", c, c, 9, rng, std::sqrt(2.0 / (c * 9)), 0.0);
  init_norm(params, "mask.0", c);
  init_conv(params, "mask.1", dims.mask_channels, c, 1, rng, std::sqrt(2.0 / c), 0.0);

  if (dims.total_identities > 0) {
    Mat w(dims.total_identities, dims.embed_dim);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal(0.0, 0.1);
    params.add("proxy.w", std::move(w));
  }
  return params;
}

ForwardResult forward(ad::Graph& g, ad::ParamStore& params, const syndata::Image& image, const ModelDims& dims) {
  if (image.height % dims.max_stride() != 0 || image.width % dims.max_stride() != 0) {
    throw std::invalid_argument("forward: image size must be divisible by the max stride");
  }

  Mat x(dims.image_channels, static_cast<Eigen::Index>(image.height) * image.width);
  for (int c = 0; c < dims.image_channels; ++c) {
    for (int y = 0; y < image.height; ++y)
      for (int xx = 0; xx < image.width; ++xx) x(c, y * image.width + xx) = image.ch[c](y, xx);
  }

  ForwardResult out;
  auto node = g.input(std::move(x));
  int h = image.height, w = image.width;
  std::vector<ad::NodePtr> level_feats;
  for (int s = 0; s < 6; ++s) {
    node = conv_norm_relu(g, params, "backbone." + std::to_string(s), node, h, w, kStageStride[s]);
    h = ad::conv_out_extent(h, kStageStride[s]);
    w = ad::conv_out_extent(w, kStageStride[s]);
    if (s == 2 || s == 5) level_feats.push_back(node);
  }

  const int n_levels = static_cast<int>(dims.strides.size());
  int lh = image.height / dims.strides[0], lw = image.width / dims.strides[0];
  for (int li = 0; li < n_levels; ++li) {
    LevelForward lvl;
    lvl.stride = dims.strides[li];
    lvl.h = image.height / lvl.stride;
    lvl.w = image.width / lvl.stride;
    auto t = conv_norm_relu(g, params, "tower", level_feats[li], lvl.h, lvl.w, 1);
    lvl.feature = level_feats[li];
    lvl.cls_logits = conv1x1(g, params, "head.cls", t);
    lvl.box_raw = conv1x1(g, params, "head.box", t);
    lvl.ctrl = conv1x1(g, params, "head.ctrl", t);
    lvl.embed = conv1x1(g, params, "head.embed", t);
    out.levels.push_back(std::move(lvl));
  }

  auto m = conv_norm_relu(g, params, "mask.0", level_feats[0], lh, lw, 1);
  out.f_mask = conv1x1(g, params, "mask.1", m);
  out.mask_h = lh;
  out.mask_w = lw;
  return out;
}

FeaturePyramid forward_pyramid(const syndata::Image& image, ad::ParamStore& params, const ModelDims& dims) {
  ad::Graph g(/*grad_enabled=*/false);
  auto fwd = forward(g, params, image, dims);
  FeaturePyramid pyr;
  for (const auto& lvl : fwd.levels) {
    pyr.levels.push_back(PyramidLevel{lvl.stride, lvl.h, lvl.w, lvl.feature->val});
  }
  return pyr;
}

Mat rel_coords_grid(double x, double y, int h, int w, int grid_stride, double normalizer) {
  Mat out(2, static_cast<Eigen::Index>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double gx = j * grid_stride + 0.5 * grid_stride;
      const double gy = i * grid_stride + 0.5 * grid_stride;
      out(0, i * w + j) = (gx - x) / normalizer;
      out(1, i * w + j) = (gy - y) / normalizer;
    }
  }
  return out;
}

Mat rel_coords(double x, double y, int h, int w, int stride) {
  return rel_coords_grid(x, y, h, w, stride, 8.0 * stride);
}

ad::NodePtr mask_head_node(ad::Graph& g, ad::NodePtr combined, ad::NodePtr theta, const ModelDims& dims) {
  const int cin = dims.dynamic_in_channels();
  const int cm = dims.mask_mid_channels;
  if (theta->val.rows() != dims.theta_dim() || theta->val.cols() != 1) {
    throw std::invalid_argument("mask_head: theta length mismatch");
  }
  if (combined->val.rows() != cin) {
    throw std::invalid_argument("mask_head: combined channel mismatch");
  }
  Eigen::Index off = 0;
  auto w1 = ad::slice_reshape(g, theta, off, cm, cin);
  off += cm * cin;
  auto b1 = ad::slice_reshape(g, theta, off, cm, 1);
  off += cm;
  auto w2 = ad::slice_reshape(g, theta, off, cm, cm);
  off += cm * cm;
  auto b2 = ad::slice_reshape(g, theta, off, cm, 1);
  off += cm;
  auto w3 = ad::slice_reshape(g, theta, off, 1, cm);
  off += cm;
  auto b3 = ad::slice_reshape(g, theta, off, 1, 1);

  auto h1 = ad::relu(g, ad::add_bias(g, ad::matmul(g, w1, combined), b1));
  auto h2 = ad::relu(g, ad::add_bias(g, ad::matmul(g, w2, h1), b2));
  auto logits = ad::add_bias(g, ad::matmul(g, w3, h2), b3);
  return ad::sigmoid(g, logits);
}

Mat mask_head(const Mat& combined, const Vec& theta, const ModelDims& dims) {
  ad::Graph g(/*grad_enabled=*/false);
  auto out = mask_head_node(g, g.input(combined), g.input(theta), dims);
  return out->val;
}

PyramidGeometry pyramid_geometry(const ModelDims& dims, int image_h, int image_w) {
  PyramidGeometry geom;
  geom.image_h = image_h;
  geom.image_w = image_w;
  for (int s : dims.strides) geom.levels.push_back(LevelGeom{s, image_h / s, image_w / s});
  geom.mask_stride = dims.mask_stride();
  geom.mask_h = image_h / geom.mask_stride;
  geom.mask_w = image_w / geom.mask_stride;
  return geom;
}

Mat downsample_mask(const Mask& mask, int block) {
  const int oh = static_cast<int>(mask.rows()) / block;
  const int ow = static_cast<int>(mask.cols()) / block;
  Mat out(1, static_cast<Eigen::Index>(oh) * ow);
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      int count = 0;
      for (int y = 0; y < block; ++y)
        for (int x = 0; x < block; ++x) count += mask(i * block + y, j * block + x) ? 1 : 0;
      out(0, i * ow + j) = (2 * count >= block * block) ? 1.0 : 0.0;
    }
  }
  return out;
}

Eigen::ArrayXXd upsample_bilinear(const Eigen::ArrayXXd& src, int out_h, int out_w) {
  const int sh = static_cast<int>(src.rows());
  const int sw = static_cast<int>(src.cols());
  Eigen::ArrayXXd out(out_h, out_w);
  const double sy = static_cast<double>(sh) / out_h;
  const double sx = static_cast<double>(sw) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, sh - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, sw - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      out(y, x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

FrameTargets assign_targets(const std::vector<syndata::InstanceAnnotation>& annotations, const PyramidGeometry& geom,
                            const ModelDims& dims) {
  FrameTargets targets;
  for (const auto& lvl : geom.levels) {
    targets.cls_onehot.push_back(Mat::Zero(dims.num_categories, static_cast<Eigen::Index>(lvl.h) * lvl.w));
  }

  // Larger boxes claim their preferred cell first.
  std::vector<std::size_t> order(annotations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return annotations[a].box.area() > annotations[b].box.area();
  });

  std::vector<std::vector<char>> taken(geom.levels.size());
  for (std::size_t li = 0; li < geom.levels.size(); ++li) {
    taken[li].assign(static_cast<std::size_t>(geom.levels[li].h) * geom.levels[li].w, 0);
  }

  for (std::size_t oi : order) {
    const auto& ann = annotations[oi];
    const double max_side = std::max(ann.box.width(), ann.box.height());

    int best_level = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t li = 0; li < geom.levels.size(); ++li) {
      const double gap = std::abs(std::log(std::max(max_side, 1.0)) - std::log(8.0 * geom.levels[li].stride));
      if (gap < best_gap - 1e-12) {
        best_gap = gap;
        best_level = static_cast<int>(li);
      }
    }

    const auto& lvl = geom.levels[best_level];
    const double cx = ann.box.cx(), cy = ann.box.cy();
    int best_idx = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < lvl.h; ++i) {
      for (int j = 0; j < lvl.w; ++j) {
        const int idx = i * lvl.w + j;
        if (taken[best_level][idx]) continue;
        const double gx = j * lvl.stride + 0.5 * lvl.stride;
        const double gy = i * lvl.stride + 0.5 * lvl.stride;
        const double d = (gx - cx) * (gx - cx) + (gy - cy) * (gy - cy);
        if (d < best_d - 1e-12) {
          best_d = d;
          best_idx = idx;
        }
      }
    }
    if (best_idx < 0) continue;  // more instances than cells on this level
    taken[best_level][best_idx] = 1;

    PositiveTarget pos;
    pos.level = best_level;
    pos.loc_index = best_idx;
    pos.identity = ann.identity;
    pos.category = ann.category;
    pos.box = ann.box;
    pos.loc_cx = (best_idx % lvl.w) * lvl.stride + 0.5 * lvl.stride;
    pos.loc_cy = (best_idx / lvl.w) * lvl.stride + 0.5 * lvl.stride;
    // Distances are clamped slightly positive; a sub-cell box may not contain
    // its assigned cell center.
    pos.ltrb << std::max(pos.loc_cx - ann.box.x0, 0.125), std::max(pos.loc_cy - ann.box.y0, 0.125),
        std::max(ann.box.x1 - pos.loc_cx, 0.125), std::max(ann.box.y1 - pos.loc_cy, 0.125);
    pos.gt_mask_ds = downsample_mask(ann.mask, geom.mask_stride);
    targets.cls_onehot[best_level](ann.category, best_idx) = 1.0;
    targets.positives.push_back(std::move(pos));
  }
  return targets;
}

std::vector<std::size_t> greedy_nms(const std::vector<ScoredBox>& sorted, double iou_threshold, int max_keep) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (sorted[k].category == sorted[i].category && box_iou(sorted[k].box, sorted[i].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(i);
      if (static_cast<int>(kept.size()) >= max_keep) break;
    }
  }
  return kept;
}

std::vector<Detection> detect(const syndata::Image& image, ad::ParamStore& params, const ModelDims& dims,
                              const DetectConfig& cfg) {
  ad::Graph g(/*grad_enabled=*/false);
  auto fwd = forward(g, params, image, dims);

  struct Candidate {
    double score;
    int category;
    Box box;
    int level;
    int loc_index;
  };
  std::vector<Candidate> candidates;
  for (std::size_t li = 0; li < fwd.levels.size(); ++li) {
    const auto& lvl = fwd.levels[li];
    const Mat scores = ad::stable_sigmoid(lvl.cls_logits->val);
    for (int idx = 0; idx < lvl.h * lvl.w; ++idx) {
      int best_cat = 0;
      double best = scores(0, idx);
      for (int k = 1; k < dims.num_categories; ++k) {
        if (scores(k, idx) > best) {
          best = scores(k, idx);
          best_cat = k;
        }
      }
      if (best <= cfg.score_threshold) continue;
      const double cx = (idx % lvl.w) * lvl.stride + 0.5 * lvl.stride;
      const double cy = (idx / lvl.w) * lvl.stride + 0.5 * lvl.stride;
      const double l = ad::softplus_scalar(lvl.box_raw->val(0, idx)) * lvl.stride;
      const double t = ad::softplus_scalar(lvl.box_raw->val(1, idx)) * lvl.stride;
      const double r = ad::softplus_scalar(lvl.box_raw->val(2, idx)) * lvl.stride;
      const double b = ad::softplus_scalar(lvl.box_raw->val(3, idx)) * lvl.stride;
      candidates.push_back(Candidate{best, best_cat, Box{cx - l, cy - t, cx + r, cy + b}, static_cast<int>(li), idx});
    }
  }

  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.level != b.level) return a.level < b.level;
    return a.loc_index < b.loc_index;
  });
  if (candidates.size() > 200) candidates.resize(200);

  std::vector<ScoredBox> boxes;
  boxes.reserve(candidates.size());
  for (const auto& c : candidates) boxes.push_back(ScoredBox{c.score, c.category, c.box});
  std::vector<Candidate> kept;
  for (std::size_t idx : greedy_nms(boxes, cfg.nms_iou, cfg.max_detections)) kept.push_back(candidates[idx]);

  std::vector<Detection> detections;
  for (const auto& c : kept) {
    const auto& lvl = fwd.levels[c.level];
    Detection det;
    det.category = c.category;
    det.score = c.score;
    det.box = c.box;
    det.level = c.level;
    det.loc_x = c.loc_index % lvl.w;
    det.loc_y = c.loc_index / lvl.w;
    det.theta.theta = lvl.ctrl->val.col(c.loc_index);

    Vec e = lvl.embed->val.col(c.loc_index);
    det.embedding = e / std::sqrt(e.squaredNorm() + 1e-12);

    const double cx = det.loc_x * lvl.stride + 0.5 * lvl.stride;
    const double cy = det.loc_y * lvl.stride + 0.5 * lvl.stride;
    Mat rel = rel_coords_grid(cx, cy, fwd.mask_h, fwd.mask_w, dims.mask_stride(), 8.0 * lvl.stride);
    Mat combined(dims.dynamic_in_channels(), rel.cols());
    combined << fwd.f_mask->val, rel;
    Mat flat = mask_head(combined, det.theta.theta, dims);
    det.mask = Eigen::ArrayXXd(fwd.mask_h, fwd.mask_w);
    for (int i = 0; i < fwd.mask_h; ++i)
      for (int j = 0; j < fwd.mask_w; ++j) det.mask(i, j) = flat(0, i * fwd.mask_w + j);
    detections.push_back(std::move(det));
  }
  return detections;
}

}  // namespace minivis::net
