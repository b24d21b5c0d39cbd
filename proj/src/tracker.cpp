#include "minivis/tracker.hpp"

#include "minivis/losses.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

using json = nlohmann::ordered_json;

namespace minivis::tracker {

int Track::majority_category() const {
  int best = 0;
  for (std::size_t c = 1; c < category_votes.size(); ++c) {
    if (category_votes[c] > category_votes[best]) best = static_cast<int>(c);
  }
  return best;
}

namespace {

Mat memory_embeddings(const TrackMemory& memory) {
  if (memory.tracks.empty()) return Mat();
  Mat refs(memory.tracks[0].embedding.size(), static_cast<Eigen::Index>(memory.tracks.size()));
  for (std::size_t i = 0; i < memory.tracks.size(); ++i) refs.col(static_cast<Eigen::Index>(i)) = memory.tracks[i].embedding;
  return refs;
}

void observe(Track& track, const net::Detection& det, int num_categories) {
  if (track.category_votes.empty()) track.category_votes.assign(num_categories, 0);
  const double n = track.num_observations;
  Vec mean = (track.embedding * n + det.embedding) / (n + 1.0);
  track.embedding = mean / std::sqrt(mean.squaredNorm() + 1e-12);
  track.last_box = det.box;
  if (det.category >= 0 && det.category < static_cast<int>(track.category_votes.size())) {
    track.category_votes[det.category]++;
  }
  track.score_sum += det.score;
  track.num_observations++;
}

Track make_track(int id, const net::Detection& det, int num_categories) {
  Track t;
  t.track_id = id;
  t.embedding = det.embedding;
  t.category_votes.assign(num_categories, 0);
  t.category_votes[std::clamp(det.category, 0, num_categories - 1)]++;
  t.last_box = det.box;
  t.score_sum = det.score;
  t.num_observations = 1;
  return t;
}

}  // namespace

double match_score(const net::Detection& det, const Track& track, const TrackMemory& memory,
                   const TrackerConfig& cfg) {
  std::size_t index = memory.tracks.size();
  for (std::size_t i = 0; i < memory.tracks.size(); ++i) {
    if (memory.tracks[i].track_id == track.track_id) {
      index = i;
      break;
    }
  }
  if (index == memory.tracks.size()) throw std::invalid_argument("match_score: track not in memory");
  const Vec p = losses::pairwise_assign_prob(det.embedding, memory_embeddings(memory));
  double s = std::log(std::max(p(static_cast<Eigen::Index>(index)), 1e-300));
  s += cfg.lambda_iou * box_iou(det.box, track.last_box);
  s += cfg.lambda_cat * (det.category == track.majority_category() ? 1.0 : 0.0);
  s += cfg.lambda_conf * det.score;
  return s;
}

std::vector<int> assign_identities(const std::vector<net::Detection>& dets, TrackMemory& memory,
                                   const TrackerConfig& cfg) {
  const int num_categories = [&] {
    int k = 3;
    for (const auto& t : memory.tracks) k = std::max(k, static_cast<int>(t.category_votes.size()));
    for (const auto& d : dets) k = std::max(k, d.category + 1);
    return k;
  }();

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  // Assignment probabilities are computed against the memory as it stood at
  // the start of the frame; tracks born this frame are not candidates.
  const std::size_t frame_start_tracks = memory.tracks.size();
  const Mat refs = memory_embeddings(memory);

  std::vector<char> used(frame_start_tracks, 0);
  std::vector<int> assigned(dets.size(), -1);

  for (std::size_t oi : order) {
    const auto& det = dets[oi];
    int chosen = -1;
    if (frame_start_tracks > 0) {
      const Vec p = losses::pairwise_assign_prob(det.embedding, refs);
      double p_track_max = 0.0;
      for (std::size_t i = 0; i < frame_start_tracks; ++i) p_track_max = std::max(p_track_max, p(static_cast<Eigen::Index>(i)));
      const bool prefers_new = p(static_cast<Eigen::Index>(frame_start_tracks)) > p_track_max;
      if (!prefers_new) {
        double best = -std::numeric_limits<double>::infinity();
        int best_i = -1;
        for (std::size_t i = 0; i < frame_start_tracks; ++i) {
          if (used[i]) continue;
          double s = std::log(std::max(p(static_cast<Eigen::Index>(i)), 1e-300));
          s += cfg.lambda_iou * box_iou(det.box, memory.tracks[i].last_box);
          s += cfg.lambda_cat * (det.category == memory.tracks[i].majority_category() ? 1.0 : 0.0);
          s += cfg.lambda_conf * det.score;
          if (s > best) {
            best = s;
            best_i = static_cast<int>(i);
          }
        }
        if (best_i >= 0 && best >= cfg.new_track_floor) chosen = best_i;
      }
    }
    if (chosen >= 0) {
      used[chosen] = 1;
      observe(memory.tracks[chosen], det, num_categories);
      assigned[oi] = memory.tracks[chosen].track_id;
    } else {
      memory.tracks.push_back(make_track(memory.next_id++, det, num_categories));
      assigned[oi] = memory.tracks.back().track_id;
    }
  }
  return assigned;
}

std::vector<Track> process_video(const syndata::VideoClip& clip, ad::ParamStore& params, const net::ModelDims& dims,
                                 const TrackerConfig& cfg) {
  if (clip.frames.empty()) throw std::invalid_argument("process_video: empty video");
  TrackMemory memory;
  for (const auto& frame : clip.frames) {
    auto dets = net::detect(frame.image, params, dims, cfg.detect);
    auto ids = assign_identities(dets, memory, cfg);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      Eigen::ArrayXXd up = net::upsample_bilinear(dets[i].mask, frame.image.height, frame.image.width);
      Mask full = (up >= 0.5).cast<std::uint8_t>();
      for (auto& track : memory.tracks) {
        if (track.track_id == ids[i]) {
          track.masks[frame.time_index] = syndata::rle_encode(full);
          break;
        }
      }
    }
  }
  return memory.tracks;
}

ClipPredictions to_predictions(const std::string& clip_id, int height, int width, const std::vector<Track>& tracks) {
  ClipPredictions out;
  out.clip_id = clip_id;
  out.height = height;
  out.width = width;
  for (const auto& t : tracks) {
    PredTrackDump dump;
    dump.track_id = t.track_id;
    dump.category = t.majority_category();
    dump.score = t.mean_score();
    dump.masks = t.masks;
    out.tracks.push_back(std::move(dump));
  }
  return out;
}

void write_predictions(const std::vector<ClipPredictions>& preds, const std::filesystem::path& file) {
  json root = json::array();
  for (const auto& clip : preds) {
    json jc;
    jc["clip_id"] = clip.clip_id;
    jc["height"] = clip.height;
    jc["width"] = clip.width;
    json tracks = json::array();
    for (const auto& t : clip.tracks) {
      json jt;
      jt["track_id"] = t.track_id;
      jt["category"] = t.category;
      jt["score"] = t.score;
      json masks = json::object();
      for (const auto& [time, rle] : t.masks) masks[std::to_string(time)] = rle;
      jt["masks"] = std::move(masks);
      tracks.push_back(std::move(jt));
    }
    jc["tracks"] = std::move(tracks);
    root.push_back(std::move(jc));
  }
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << root.dump(2) << "\n";
}

std::vector<ClipPredictions> read_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  json root;
  in >> root;
  std::vector<ClipPredictions> preds;
  for (const auto& jc : root) {
    ClipPredictions clip;
    clip.clip_id = jc.at("clip_id").get<std::string>();
    clip.height = jc.at("height").get<int>();
    clip.width = jc.at("width").get<int>();
    for (const auto& jt : jc.at("tracks")) {
      PredTrackDump t;
      t.track_id = jt.at("track_id").get<int>();
      t.category = jt.at("category").get<int>();
      t.score = jt.at("score").get<double>();
      for (const auto& [key, value] : jt.at("masks").items()) {
        t.masks[std::stoi(key)] = value.get<std::string>();
      }
      clip.tracks.push_back(std::move(t));
    }
    preds.push_back(std::move(clip));
  }
  return preds;
}

}  // namespace minivis::tracker
