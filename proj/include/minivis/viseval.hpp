#pragma once

// Video instance segmentation metrics: spatio-temporal tube IoU and
// AP/AR over a prediction/ground-truth corpus (COCO-style protocol,
// 101-point interpolated AP, IoU thresholds 0.50:0.05:0.95).

#include "minivis/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace minivis::viseval {

struct EvalTrack {
  int track_id = -1;
  int category = -1;
  double score = 0.0;  // predictions only
  std::map<int, Mask> masks;
};

struct ClipEval {
  std::string clip_id;
  std::vector<EvalTrack> preds;
  std::vector<EvalTrack> gts;
};

struct EvalSummary {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar1 = 0.0;
  double ar10 = 0.0;
};

// Frames missing from one side count as empty masks; 0/0 evaluates to 0.
double tube_iou(const EvalTrack& a, const EvalTrack& b);

// Per category and IoU threshold: predictions sorted by score greedily match
// the highest-IoU unmatched ground truth of the same clip, then the 101-point
// interpolated AP is averaged over categories. AR@k caps predictions at the k
// top-scoring per clip and category. Duplicate track ids within a clip are
// rejected.
EvalSummary evaluate(const std::vector<ClipEval>& clips, int num_categories);

}  // namespace minivis::viseval
