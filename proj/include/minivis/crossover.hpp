#pragma once

// Crossover learning: match instances across a sampled frame pair, generate
// cross-frame masks by swapping dynamic filters, and compute the crossover
// dice loss. Nothing here runs at inference time.

#include "minivis/ad.hpp"
#include "minivis/common.hpp"
#include "minivis/losses.hpp"
#include "minivis/netcore.hpp"
#include "minivis/syndata.hpp"

#include <span>
#include <vector>

namespace minivis::crossover {

struct CrossPair {
  int identity = -1;
  net::DynamicFilter theta_t;
  net::DynamicFilter theta_t_delta;
  Mat combined_t;        // (mask_channels+2 x mask pixels)
  Mat combined_t_delta;
  Mat gt_mask_t;         // (1 x mask pixels), {0,1}
  Mat gt_mask_t_delta;
  int delta = 0;
};

// Identities present in both frames, ascending. Instances visible in only one
// frame contribute no crossover term.
std::vector<int> match_identities(const std::vector<syndata::InstanceAnnotation>& ann_t,
                                  const std::vector<syndata::InstanceAnnotation>& ann_t_delta);

// Identical computation to the mask head; only the (theta, features) pairing
// crosses frames.
Mat crossover_mask(const net::DynamicFilter& theta_from, const Mat& combined_to, const net::ModelDims& dims);

// Mean over pairs of dice(M_cross(t), M*(t)) + dice(M_cross(t+delta), M*(t+delta)).
double crossover_loss(const std::vector<CrossPair>& pairs, const net::ModelDims& dims);

// ---------------------------------------------------------------------------
// training-graph path
// ---------------------------------------------------------------------------

struct MatchedInstancePair {
  const losses::InstanceForward* inst_t = nullptr;
  const losses::InstanceForward* inst_t_delta = nullptr;
};

std::vector<MatchedInstancePair> match_instances(std::span<const losses::InstanceForward> inst_t,
                                                 std::span<const losses::InstanceForward> inst_t_delta);

ad::NodePtr crossover_loss_node(ad::Graph& g, std::span<const MatchedInstancePair> pairs, const net::ModelDims& dims);

}  // namespace minivis::crossover
