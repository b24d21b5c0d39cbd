#pragma once

// Online inference: frame-by-frame association of detections against a
// per-video track memory, with a composite match score combining the
// embedding assignment probability, box IoU, category agreement and
// detection confidence.

#include "minivis/common.hpp"
#include "minivis/netcore.hpp"
#include "minivis/syndata.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace minivis::tracker {

struct TrackerConfig {
  net::DetectConfig detect;
  double lambda_iou = 1.0;
  double lambda_cat = 1.0;
  double lambda_conf = 1.0;
  // A detection opens a new track when p(new) beats every per-track
  // assignment probability, or when the best composite score sits below this
  // floor. The default disables the floor.
  double new_track_floor = -1e30;
};

struct Track {
  int track_id = -1;
  Vec embedding;  // running mean of observed embeddings, renormalized
  std::vector<int> category_votes;
  Box last_box;
  std::map<int, std::string> masks;  // time_index -> full-resolution RLE
  double score_sum = 0.0;
  int num_observations = 0;

  double mean_score() const { return num_observations > 0 ? score_sum / num_observations : 0.0; }
  int majority_category() const;
};

struct TrackMemory {
  std::vector<Track> tracks;
  int next_id = 0;
};

// log p(det -> track) + lambda_iou*IoU + lambda_cat*[category match] +
// lambda_conf*score. The assignment probability is computed against every
// embedding currently in memory.
double match_score(const net::Detection& det, const Track& track, const TrackMemory& memory,
                   const TrackerConfig& cfg);

// Greedy one-pass assignment in descending detection score order; each track
// is usable once per frame. Returns the track id chosen for each detection
// (aligned with `dets`) and updates the memory.
std::vector<int> assign_identities(const std::vector<net::Detection>& dets, TrackMemory& memory,
                                   const TrackerConfig& cfg);

// Runs detection + association over a whole clip and records full-resolution
// RLE masks per frame. Rejects empty videos.
std::vector<Track> process_video(const syndata::VideoClip& clip, ad::ParamStore& params, const net::ModelDims& dims,
                                 const TrackerConfig& cfg);

// ---------------------------------------------------------------------------
// prediction dump (the evaluator's input format)
// ---------------------------------------------------------------------------

struct PredTrackDump {
  int track_id = -1;
  int category = -1;
  double score = 0.0;
  std::map<int, std::string> masks;  // time_index -> RLE
};

struct ClipPredictions {
  std::string clip_id;
  int height = 0;
  int width = 0;
  std::vector<PredTrackDump> tracks;
};

ClipPredictions to_predictions(const std::string& clip_id, int height, int width, const std::vector<Track>& tracks);

void write_predictions(const std::vector<ClipPredictions>& preds, const std::filesystem::path& file);
std::vector<ClipPredictions> read_predictions(const std::filesystem::path& file);

}  // namespace minivis::tracker
