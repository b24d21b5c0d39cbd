#include "minivis/losses.hpp"

#include <algorithm>
#include <cmath>

namespace minivis::losses {

std::string to_string(EmbeddingVariant v) {
  switch (v) {
    case EmbeddingVariant::kPairwiseCe:
      return "pairwise_ce";
    case EmbeddingVariant::kPairwiseFocal:
      return "pairwise_focal";
    case EmbeddingVariant::kGlobalCe:
      return "global_ce";
    case EmbeddingVariant::kGlobalFocal:
      return "global_focal";
  }
  return "?";
}

EmbeddingVariant embedding_variant_from_string(const std::string& s) {
  if (s == "pairwise_ce") return EmbeddingVariant::kPairwiseCe;
  if (s == "pairwise_focal") return EmbeddingVariant::kPairwiseFocal;
  if (s == "global_ce") return EmbeddingVariant::kGlobalCe;
  if (s == "global_focal") return EmbeddingVariant::kGlobalFocal;
  throw std::invalid_argument("unknown embedding variant: " + s);
}

namespace {

Vec softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec p = (logits.array() - m).exp();
  return p / p.sum();
}

}  // namespace

Vec pairwise_assign_prob(const Vec& e, const Mat& refs) {
  const Eigen::Index n = refs.cols();
  Vec logits(n + 1);
  if (n > 0) logits.head(n) = refs.transpose() * e;
  logits(n) = 0.0;  // exp(0) = 1 is the "new identity" term
  return softmax(logits);
}

Vec global_assign_prob(const Vec& e, const Mat& proxies) {
  if (proxies.rows() < 1) throw std::invalid_argument("global_assign_prob: empty proxy matrix");
  return softmax(proxies * e);
}

double pairwise_ce_loss(const EmbeddingBatch& batch) {
  if (batch.keys.empty()) return 0.0;
  Mat refs(batch.keys[0].first.size(), static_cast<Eigen::Index>(batch.references.size()));
  for (std::size_t i = 0; i < batch.references.size(); ++i) refs.col(static_cast<Eigen::Index>(i)) = batch.references[i].first;
  double total = 0.0;
  for (const auto& [e, identity] : batch.keys) {
    Eigen::Index label = static_cast<Eigen::Index>(batch.references.size());  // "new"
    for (std::size_t i = 0; i < batch.references.size(); ++i) {
      if (batch.references[i].second == identity) {
        label = static_cast<Eigen::Index>(i);
        break;
      }
    }
    const Vec p = pairwise_assign_prob(e, refs);
    total += -std::log(std::max(p(label), 1e-300));
  }
  return total / static_cast<double>(batch.keys.size());
}

double sigmoid_focal(double logit, bool positive, const FocalParams& fp) {
  const double log_s = -ad::softplus_scalar(-logit);
  const double log_1ms = -ad::softplus_scalar(logit);
  const double s = std::exp(log_s);
  if (positive) return -fp.alpha * std::pow(1.0 - s, fp.gamma) * log_s;
  return -(1.0 - fp.alpha) * std::pow(s, fp.gamma) * log_1ms;
}

double pairwise_focal_loss(const EmbeddingBatch& batch, const FocalParams& fp) {
  double total = 0.0;
  int positives = 0;
  for (const auto& [e, identity] : batch.keys) {
    for (const auto& [r, rid] : batch.references) {
      const bool match = rid == identity;
      total += sigmoid_focal(e.dot(r), match, fp);
      if (match) ++positives;
    }
  }
  return total / std::max(1, positives);
}

double global_ce_loss(const Vec& e, const Mat& proxies, int label) {
  if (label < 0 || label >= proxies.rows()) throw std::out_of_range("global_ce_loss: label out of range");
  const Vec p = global_assign_prob(e, proxies);
  return -std::log(std::max(p(label), 1e-300));
}

double global_focal_id_loss(const Vec& e, const Mat& proxies, int label, const FocalParams& fp) {
  if (label < 0 || label >= proxies.rows()) throw std::out_of_range("global_focal_id_loss: label out of range");
  const Vec logits = proxies * e;
  double total = 0.0;
  for (Eigen::Index n = 0; n < logits.size(); ++n) {
    total += sigmoid_focal(logits(n), n == label, fp);
  }
  return total;  // one positive per call
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

std::vector<InstanceForward> gather_instances(ad::Graph& g, const net::ForwardResult& fwd,
                                              const net::FrameTargets& targets, const net::ModelDims& dims) {
  std::vector<InstanceForward> out;
  for (const auto& pos : targets.positives) {
    const auto& lvl = fwd.levels[pos.level];
    InstanceForward inst;
    inst.target = &pos;
    inst.theta = ad::col(g, lvl.ctrl, pos.loc_index);
    Mat rel = net::rel_coords_grid(pos.loc_cx, pos.loc_cy, fwd.mask_h, fwd.mask_w, dims.mask_stride(),
                                   8.0 * lvl.stride);
    inst.combined = ad::concat_rows(g, fwd.f_mask, g.input(std::move(rel)));
    inst.embedding = ad::l2_normalize(g, ad::col(g, lvl.embed, pos.loc_index));
    out.push_back(std::move(inst));
  }
  return out;
}

ad::NodePtr detection_loss_node(ad::Graph& g, const std::vector<net::LevelForward>& levels,
                                const net::FrameTargets& targets, const net::ModelDims& dims, const FocalParams& fp) {
  ad::NodePtr focal;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    auto term = ad::sigmoid_focal_sum_node(g, levels[li].cls_logits, targets.cls_onehot[li], fp.alpha, fp.gamma);
    focal = focal ? ad::add(g, focal, term) : term;
  }

  const int npos = static_cast<int>(targets.positives.size());
  ad::NodePtr total = focal;
  if (npos > 0) {
    std::vector<ad::NodePtr> cols;
    Mat target_ltrb(4, npos);
    for (int i = 0; i < npos; ++i) {
      const auto& pos = targets.positives[i];
      auto raw = ad::col(g, levels[pos.level].box_raw, pos.loc_index);
      cols.push_back(ad::scale(g, ad::softplus(g, raw), levels[pos.level].stride));
      target_ltrb.col(i) = pos.ltrb;
    }
    auto iou = ad::iou_loss_sum_node(g, ad::hstack(g, cols), target_ltrb);
    total = ad::add(g, total, iou);
  }
  return ad::scale(g, total, 1.0 / std::max(1, npos));
}

ad::NodePtr segmentation_loss_node(ad::Graph& g, std::span<const InstanceForward> instances,
                                   const net::ModelDims& dims) {
  if (instances.empty()) return g.input(Mat::Zero(1, 1));
  ad::NodePtr total;
  for (const auto& inst : instances) {
    auto mask = net::mask_head_node(g, inst.combined, inst.theta, dims);
    auto term = ad::dice_loss_node(g, mask, inst.target->gt_mask_ds);
    total = total ? ad::add(g, total, term) : term;
  }
  return ad::scale(g, total, 1.0 / static_cast<double>(instances.size()));
}

ad::NodePtr embedding_loss_node(ad::Graph& g, EmbeddingVariant variant, std::span<const InstanceForward> refs,
                                std::span<const InstanceForward> keys, ad::NodePtr proxies, const FocalParams& fp) {
  const bool pairwise = variant == EmbeddingVariant::kPairwiseCe || variant == EmbeddingVariant::kPairwiseFocal;
  if (pairwise) {
    if (keys.empty()) return g.input(Mat::Zero(1, 1));
    ad::NodePtr refs_mat;
    if (!refs.empty()) {
      std::vector<ad::NodePtr> cols;
      for (const auto& r : refs) cols.push_back(r.embedding);
      refs_mat = ad::hstack(g, cols);
    }
    if (variant == EmbeddingVariant::kPairwiseCe) {
      ad::NodePtr total;
      auto zero = g.input(Mat::Zero(1, 1));
      for (const auto& key : keys) {
        Eigen::Index label = static_cast<Eigen::Index>(refs.size());
        for (std::size_t i = 0; i < refs.size(); ++i) {
          if (refs[i].target->identity == key.target->identity) {
            label = static_cast<Eigen::Index>(i);
            break;
          }
        }
        ad::NodePtr logits = refs_mat ? ad::concat_rows(g, ad::mat_t_vec(g, refs_mat, key.embedding), zero) : zero;
        auto term = ad::softmax_ce_node(g, logits, label);
        total = total ? ad::add(g, total, term) : term;
      }
      return ad::scale(g, total, 1.0 / static_cast<double>(keys.size()));
    }
    // pairwise focal
    if (refs.empty()) return g.input(Mat::Zero(1, 1));
    ad::NodePtr total;
    int positives = 0;
    for (const auto& key : keys) {
      Mat target(static_cast<Eigen::Index>(refs.size()), 1);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        const bool match = refs[i].target->identity == key.target->identity;
        target(static_cast<Eigen::Index>(i), 0) = match ? 1.0 : 0.0;
        if (match) ++positives;
      }
      auto term = ad::sigmoid_focal_sum_node(g, ad::mat_t_vec(g, refs_mat, key.embedding), target, fp.alpha, fp.gamma);
      total = total ? ad::add(g, total, term) : term;
    }
    return ad::scale(g, total, 1.0 / std::max(1, positives));
  }

  // global variants: every positive instance from both frames is a key
  if (!proxies) throw std::invalid_argument("embedding_loss_node: global variant without proxies");
  std::vector<const InstanceForward*> all;
  for (const auto& r : refs) all.push_back(&r);
  for (const auto& k : keys) all.push_back(&k);
  if (all.empty()) return g.input(Mat::Zero(1, 1));

  ad::NodePtr total;
  for (const auto* inst : all) {
    const int label = inst->target->identity;
    if (label < 0 || label >= proxies->val.rows()) {
      throw std::out_of_range("embedding_loss_node: identity outside proxy matrix");
    }
    auto logits = ad::matmul(g, proxies, inst->embedding);
    ad::NodePtr term;
    if (variant == EmbeddingVariant::kGlobalCe) {
      term = ad::softmax_ce_node(g, logits, label);
    } else {
      Mat target = Mat::Zero(logits->val.rows(), 1);
      target(label, 0) = 1.0;
      term = ad::sigmoid_focal_sum_node(g, logits, target, fp.alpha, fp.gamma);
    }
    total = total ? ad::add(g, total, term) : term;
  }
  return ad::scale(g, total, 1.0 / static_cast<double>(all.size()));
}

TotalLoss total_loss_node(ad::Graph& g, const net::ForwardResult& fwd_t, const net::FrameTargets& targets_t,
                          const net::ForwardResult& fwd_td, const net::FrameTargets& targets_td, ad::NodePtr proxies,
                          const net::ModelDims& dims, const LossConfig& cfg, ad::NodePtr cross) {
  TotalLoss out;

  auto det_t = detection_loss_node(g, fwd_t.levels, targets_t, dims, cfg.focal);
  auto det_td = detection_loss_node(g, fwd_td.levels, targets_td, dims, cfg.focal);
  out.det = ad::scale(g, ad::add(g, det_t, det_td), 0.5);

  auto inst_t = gather_instances(g, fwd_t, targets_t, dims);
  auto inst_td = gather_instances(g, fwd_td, targets_td, dims);

  std::vector<InstanceForward> pooled;
  pooled.insert(pooled.end(), inst_t.begin(), inst_t.end());
  pooled.insert(pooled.end(), inst_td.begin(), inst_td.end());
  out.seg = segmentation_loss_node(g, pooled, dims);

  out.id = embedding_loss_node(g, cfg.embedding, inst_t, inst_td, proxies, cfg.focal);

  out.total = ad::add(g, ad::add(g, out.det, out.seg), out.id);
  if (cfg.crossover && cross) {
    out.cross = cross;
    out.total = ad::add(g, out.total, cross);
  }
  return out;
}

GradCheckReport grad_check(const std::function<ad::NodePtr(ad::Graph&)>& build, ad::ParamStore& params, Rng& rng,
                           int num_coords, double h) {
  params.zero_grads();
  ad::Graph g;
  auto loss = build(g);
  if (!std::isfinite(loss->scalar())) throw std::runtime_error("grad_check: non-finite loss at base point");
  g.backward(loss);

  // Flat index space over every parameter coordinate.
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  std::size_t total = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) total += static_cast<std::size_t>(params.at(pi).value.size());
  for (int k = 0; k < num_coords; ++k) {
    std::size_t flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(total) - 1));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      const std::size_t n = static_cast<std::size_t>(params.at(pi).value.size());
      if (flat < n) {
        coords.emplace_back(pi, static_cast<Eigen::Index>(flat));
        break;
      }
      flat -= n;
    }
  }

  GradCheckReport report;
  for (const auto& [pi, ci] : coords) {
    ad::Param& p = params.at(pi);
    const std::string& name = params.names()[pi];
    double* slot = p.value.data() + ci;
    const double saved = *slot;

    *slot = saved + h;
    const double up = [&] {
      ad::Graph fg(/*grad_enabled=*/false);
      return build(fg)->scalar();
    }();
    *slot = saved - h;
    const double down = [&] {
      ad::Graph fg(/*grad_enabled=*/false);
      return build(fg)->scalar();
    }();
    *slot = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::runtime_error("grad_check: non-finite loss while perturbing " + name);
    }

    const double fd = (up - down) / (2.0 * h);
    const double analytic = p.grad.data()[ci];
    const double denom = std::max(std::max(std::abs(fd), std::abs(analytic)), 1e-6);
    const double rel = std::abs(fd - analytic) / denom;
    ++report.num_checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = name;
    }
  }
  return report;
}

}  // namespace minivis::losses
