#include "minivis/viseval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace minivis::viseval {

double tube_iou(const EvalTrack& a, const EvalTrack& b) {
  std::set<int> times;
  for (const auto& [t, m] : a.masks) times.insert(t);
  for (const auto& [t, m] : b.masks) times.insert(t);
  std::int64_t inter = 0, uni = 0;
  for (int t : times) {
    const auto ia = a.masks.find(t);
    const auto ib = b.masks.find(t);
    if (ia != a.masks.end() && ib != b.masks.end()) {
      const Mask& ma = ia->second;
      const Mask& mb = ib->second;
      if (ma.rows() != mb.rows() || ma.cols() != mb.cols()) {
        throw std::invalid_argument("tube_iou: mask size mismatch at frame " + std::to_string(t));
      }
      for (Eigen::Index i = 0; i < ma.size(); ++i) {
        const bool va = ma.data()[i] != 0;
        const bool vb = mb.data()[i] != 0;
        inter += (va && vb) ? 1 : 0;
        uni += (va || vb) ? 1 : 0;
      }
    } else {
      const Mask& m = ia != a.masks.end() ? ia->second : ib->second;
      for (Eigen::Index i = 0; i < m.size(); ++i) uni += m.data()[i] != 0 ? 1 : 0;
    }
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace {

constexpr int kNumThresholds = 10;

double threshold_at(int i) { return 0.5 + 0.05 * i; }

struct PredRef {
  std::size_t clip = 0;
  std::size_t index = 0;  // into clips[clip].preds
  double score = 0.0;
};

// Greedy threshold matching over one category: predictions in descending
// score order take the unmatched same-clip ground truth with the highest IoU
// >= thr. Returns a TP flag per prediction (in the given order).
std::vector<char> greedy_match(const std::vector<PredRef>& preds, const std::vector<ClipEval>& clips,
                               const std::vector<std::vector<std::vector<double>>>& iou, int category, double thr) {
  std::vector<std::vector<char>> gt_used(clips.size());
  for (std::size_t c = 0; c < clips.size(); ++c) gt_used[c].assign(clips[c].gts.size(), 0);
  std::vector<char> tp(preds.size(), 0);
  for (std::size_t pi = 0; pi < preds.size(); ++pi) {
    const auto& ref = preds[pi];
    double best = thr - 1e-12;  // IoU == thr still matches
    int best_gt = -1;
    const auto& gts = clips[ref.clip].gts;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gts[gi].category != category || gt_used[ref.clip][gi]) continue;
      const double v = iou[ref.clip][ref.index][gi];
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0) {
      gt_used[ref.clip][best_gt] = 1;
      tp[pi] = 1;
    }
  }
  return tp;
}

// COCO 101-point interpolated AP from ordered TP flags.
double interpolated_ap(const std::vector<char>& tp, int npos) {
  if (npos == 0) return 0.0;
  std::vector<double> recall, precision;
  int tps = 0, fps = 0;
  for (char flag : tp) {
    if (flag) {
      ++tps;
    } else {
      ++fps;
    }
    recall.push_back(static_cast<double>(tps) / npos);
    precision.push_back(static_cast<double>(tps) / (tps + fps));
  }
  // Precision envelope, monotone non-increasing from the right.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    total += it == recall.end() ? 0.0 : precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

}  // namespace

EvalSummary evaluate(const std::vector<ClipEval>& clips, int num_categories) {
  for (const auto& clip : clips) {
    std::set<int> ids;
    for (const auto& p : clip.preds) {
      if (!ids.insert(p.track_id).second) {
        throw std::invalid_argument("evaluate: duplicate track_id " + std::to_string(p.track_id) + " in clip " +
                                    clip.clip_id);
      }
    }
  }

  // Tube IoU between every same-category (pred, gt) pair, per clip.
  std::vector<std::vector<std::vector<double>>> iou(clips.size());
  for (std::size_t c = 0; c < clips.size(); ++c) {
    iou[c].assign(clips[c].preds.size(), std::vector<double>(clips[c].gts.size(), 0.0));
    for (std::size_t pi = 0; pi < clips[c].preds.size(); ++pi) {
      for (std::size_t gi = 0; gi < clips[c].gts.size(); ++gi) {
        if (clips[c].preds[pi].category == clips[c].gts[gi].category) {
          iou[c][pi][gi] = tube_iou(clips[c].preds[pi], clips[c].gts[gi]);
        }
      }
    }
  }

  double ap_sum = 0, ap50_sum = 0, ap75_sum = 0, ar1_sum = 0, ar10_sum = 0;
  int categories_with_gt = 0;

  for (int category = 0; category < num_categories; ++category) {
    int npos = 0;
    for (const auto& clip : clips) {
      for (const auto& gt : clip.gts) npos += gt.category == category ? 1 : 0;
    }
    if (npos == 0) continue;
    ++categories_with_gt;

    std::vector<PredRef> preds;
    for (std::size_t c = 0; c < clips.size(); ++c) {
      for (std::size_t pi = 0; pi < clips[c].preds.size(); ++pi) {
        if (clips[c].preds[pi].category == category) {
          preds.push_back(PredRef{c, pi, clips[c].preds[pi].score});
        }
      }
    }
    std::stable_sort(preds.begin(), preds.end(), [](const PredRef& a, const PredRef& b) { return a.score > b.score; });

    double ap_acc = 0;
    for (int ti = 0; ti < kNumThresholds; ++ti) {
      const auto tp = greedy_match(preds, clips, iou, category, threshold_at(ti));
      const double ap = interpolated_ap(tp, npos);
      ap_acc += ap;
      if (ti == 0) ap50_sum += ap;
      if (ti == 5) ap75_sum += ap;
    }
    ap_sum += ap_acc / kNumThresholds;

    for (int k : {1, 10}) {
      // Keep the k top-scoring predictions per clip for this category.
      std::vector<PredRef> capped;
      for (std::size_t c = 0; c < clips.size(); ++c) {
        std::vector<PredRef> per_clip;
        for (const auto& p : preds) {
          if (p.clip == c) per_clip.push_back(p);
        }
        for (std::size_t i = 0; i < per_clip.size() && i < static_cast<std::size_t>(k); ++i) {
          capped.push_back(per_clip[i]);
        }
      }
      std::stable_sort(capped.begin(), capped.end(),
                       [](const PredRef& a, const PredRef& b) { return a.score > b.score; });
      double recall_acc = 0;
      for (int ti = 0; ti < kNumThresholds; ++ti) {
        const auto tp = greedy_match(capped, clips, iou, category, threshold_at(ti));
        recall_acc += static_cast<double>(std::count(tp.begin(), tp.end(), 1)) / npos;
      }
      (k == 1 ? ar1_sum : ar10_sum) += recall_acc / kNumThresholds;
    }
  }

  EvalSummary summary;
  if (categories_with_gt > 0) {
    summary.ap = ap_sum / categories_with_gt;
    summary.ap50 = ap50_sum / categories_with_gt;
    summary.ap75 = ap75_sum / categories_with_gt;
    summary.ar1 = ar1_sum / categories_with_gt;
    summary.ar10 = ar10_sum / categories_with_gt;
  }
  return summary;
}

}  // namespace minivis::viseval
