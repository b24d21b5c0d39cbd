#pragma once

// Training objectives: dice, the four instance-embedding objectives,
// detection and segmentation losses, the multi-task sum, and a finite
// difference gradient checker.

#include "minivis/ad.hpp"
#include "minivis/common.hpp"
#include "minivis/netcore.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace minivis::losses {

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

enum class EmbeddingVariant { kPairwiseCe, kPairwiseFocal, kGlobalCe, kGlobalFocal };

std::string to_string(EmbeddingVariant v);
EmbeddingVariant embedding_variant_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// plain (value-level) objectives
// ---------------------------------------------------------------------------

// 1 - 2*(sum(M M*) + eps) / (sum(M^2) + sum(M*^2) + 2*eps)
template <typename DerivedA, typename DerivedB>
double dice_loss(const Eigen::MatrixBase<DerivedA>& m, const Eigen::MatrixBase<DerivedB>& m_star, double eps = 1e-6) {
  if (m.rows() != m_star.rows() || m.cols() != m_star.cols()) {
    throw std::invalid_argument("dice_loss: shape mismatch");
  }
  const double inter = m.cwiseProduct(m_star).sum();
  const double denom = m.squaredNorm() + m_star.squaredNorm() + 2.0 * eps;
  return 1.0 - 2.0 * (inter + eps) / denom;
}

// Assignment probabilities over N reference embeddings plus the trailing
// "new identity" entry: softmax over [e.refs, 0].
Vec pairwise_assign_prob(const Vec& e, const Mat& refs);

// Softmax over proxy logits W e, one entry per training identity.
Vec global_assign_prob(const Vec& e, const Mat& proxies);

struct EmbeddingBatch {
  std::vector<std::pair<Vec, int>> keys;        // (embedding, identity)
  std::vector<std::pair<Vec, int>> references;  // reference side, pair-wise variants only
};

// Mean over keys of -log p(true label), where the label is the key identity's
// index among the references or the trailing "new" entry.
double pairwise_ce_loss(const EmbeddingBatch& batch);

// Binary focal loss over every (key, reference) logit, normalized by the
// number of matching pairs.
double pairwise_focal_loss(const EmbeddingBatch& batch, const FocalParams& fp);

double global_ce_loss(const Vec& e, const Mat& proxies, int label);

// One focal term per proxy row, summed, normalized by the positive count (1).
double global_focal_id_loss(const Vec& e, const Mat& proxies, int label, const FocalParams& fp);

// Single binary focal term for a logit; `positive` selects alpha vs 1-alpha.
double sigmoid_focal(double logit, bool positive, const FocalParams& fp);

// ---------------------------------------------------------------------------
// graph-level builders (training path)
// ---------------------------------------------------------------------------

// Per-instance tensors extracted at assigned positive locations.
struct InstanceForward {
  const net::PositiveTarget* target = nullptr;
  ad::NodePtr theta;      // (theta_dim x 1)
  ad::NodePtr combined;   // (mask_channels+2 x mask pixels)
  ad::NodePtr embedding;  // (embed_dim x 1), unit norm
};

std::vector<InstanceForward> gather_instances(ad::Graph& g, const net::ForwardResult& fwd,
                                              const net::FrameTargets& targets, const net::ModelDims& dims);

// Focal classification over all locations plus -log IoU over positives,
// normalized by the positive count.
ad::NodePtr detection_loss_node(ad::Graph& g, const std::vector<net::LevelForward>& levels,
                                const net::FrameTargets& targets, const net::ModelDims& dims, const FocalParams& fp);

// Mean dice between within-frame dynamic masks and ground truth.
ad::NodePtr segmentation_loss_node(ad::Graph& g, std::span<const InstanceForward> instances,
                                   const net::ModelDims& dims);

// Instance-embedding loss; keys come from the second frame, references from
// the first for the pair-wise variants.
ad::NodePtr embedding_loss_node(ad::Graph& g, EmbeddingVariant variant, std::span<const InstanceForward> refs,
                                std::span<const InstanceForward> keys, ad::NodePtr proxies, const FocalParams& fp);

struct LossConfig {
  bool crossover = true;
  EmbeddingVariant embedding = EmbeddingVariant::kGlobalFocal;
  FocalParams focal{};
};

struct TotalLoss {
  ad::NodePtr total;
  ad::NodePtr det;
  ad::NodePtr seg;
  ad::NodePtr cross;  // null when disabled
  ad::NodePtr id;
};

// Unweighted multi-task sum over one frame pair. `cross` is the crossover
// loss node built by the crossover module, or null when the component is
// disabled.
TotalLoss total_loss_node(ad::Graph& g, const net::ForwardResult& fwd_t, const net::FrameTargets& targets_t,
                          const net::ForwardResult& fwd_td, const net::FrameTargets& targets_td, ad::NodePtr proxies,
                          const net::ModelDims& dims, const LossConfig& cfg, ad::NodePtr cross);

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int num_checked = 0;

  bool ok(double tolerance) const { return max_rel_err < tolerance; }
};

// Compares tape gradients with central differences on a random coordinate
// subsample. `build` must construct the scalar loss from `params` through
// the Graph it is handed. Throws if any evaluation is non-finite, naming the
// perturbed parameter.
GradCheckReport grad_check(const std::function<ad::NodePtr(ad::Graph&)>& build, ad::ParamStore& params,
                           Rng& rng, int num_coords = 64, double h = 1e-5);

}  // namespace minivis::losses
