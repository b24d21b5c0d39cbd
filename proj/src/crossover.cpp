#include "minivis/crossover.hpp"

#include <algorithm>
#include <set>

namespace minivis::crossover {

std::vector<int> match_identities(const std::vector<syndata::InstanceAnnotation>& ann_t,
                                  const std::vector<syndata::InstanceAnnotation>& ann_t_delta) {
  std::set<int> in_t;
  for (const auto& a : ann_t) in_t.insert(a.identity);
  std::set<int> matched;
  for (const auto& b : ann_t_delta) {
    if (in_t.count(b.identity)) matched.insert(b.identity);
  }
  return {matched.begin(), matched.end()};
}

Mat crossover_mask(const net::DynamicFilter& theta_from, const Mat& combined_to, const net::ModelDims& dims) {
  return net::mask_head(combined_to, theta_from.theta, dims);
}

double crossover_loss(const std::vector<CrossPair>& pairs, const net::ModelDims& dims) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& pair : pairs) {
    const Mat m_cross_t = crossover_mask(pair.theta_t_delta, pair.combined_t, dims);
    const Mat m_cross_td = crossover_mask(pair.theta_t, pair.combined_t_delta, dims);
    total += losses::dice_loss(m_cross_t, pair.gt_mask_t);
    total += losses::dice_loss(m_cross_td, pair.gt_mask_t_delta);
  }
  return total / static_cast<double>(pairs.size());
}

std::vector<MatchedInstancePair> match_instances(std::span<const losses::InstanceForward> inst_t,
                                                 std::span<const losses::InstanceForward> inst_t_delta) {
  std::vector<MatchedInstancePair> pairs;
  for (const auto& a : inst_t) {
    for (const auto& b : inst_t_delta) {
      if (a.target->identity == b.target->identity) {
        pairs.push_back(MatchedInstancePair{&a, &b});
        break;
      }
    }
  }
  return pairs;
}

ad::NodePtr crossover_loss_node(ad::Graph& g, std::span<const MatchedInstancePair> pairs,
                                const net::ModelDims& dims) {
  if (pairs.empty()) return g.input(Mat::Zero(1, 1));
  ad::NodePtr total;
  for (const auto& pair : pairs) {
    // theta(t+delta) segments the instance in frame t, and vice versa
    auto m_cross_t = net::mask_head_node(g, pair.inst_t->combined, pair.inst_t_delta->theta, dims);
    auto m_cross_td = net::mask_head_node(g, pair.inst_t_delta->combined, pair.inst_t->theta, dims);
    auto term = ad::add(g, ad::dice_loss_node(g, m_cross_t, pair.inst_t->target->gt_mask_ds),
                        ad::dice_loss_node(g, m_cross_td, pair.inst_t_delta->target->gt_mask_ds));
    total = total ? ad::add(g, total, term) : term;
  }
  return ad::scale(g, total, 1.0 / static_cast<double>(pairs.size()));
}

}  // namespace minivis::crossover
