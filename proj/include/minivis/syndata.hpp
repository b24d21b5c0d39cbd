#pragma once

// Deterministic synthetic video corpus: moving colored shapes with persistent
// identities, occlusion, scale and appearance drift, plus serialization.

#include "minivis/common.hpp"

#include <array>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace minivis::syndata {

struct Image {
  int height = 0;
  int width = 0;
  std::array<Eigen::ArrayXXd, 3> ch;  // per channel, height x width, values in [0,1]

  void resize(int h, int w) {
    height = h;
    width = w;
    for (auto& c : ch) c.setZero(h, w);
  }
};

bool operator==(const Image& a, const Image& b);

struct InstanceAnnotation {
  int identity = -1;
  int category = -1;
  Box box;    // tight bounds of the mask, [x0,x1) x [y0,y1) in whole pixels
  Mask mask;  // H x W, {0,1}
};

struct Frame {
  Image image;
  std::vector<InstanceAnnotation> annotations;
  int time_index = 0;
};

struct VideoClip {
  std::string clip_id;
  std::vector<Frame> frames;

  int length() const { return static_cast<int>(frames.size()); }
};

struct CorpusManifest {
  int num_clips = 80;
  int clip_length = 12;
  int height = 64;
  int width = 64;
  int num_categories = 3;  // circle / square / triangle
  int min_instances = 2;
  int max_instances = 3;
  bool occlusion = true;
  int total_identities = 0;  // distinct identities over the whole corpus, set by the generator
  std::uint64_t seed = 1;
};

bool operator==(const CorpusManifest& a, const CorpusManifest& b);

struct Corpus {
  CorpusManifest manifest;
  std::vector<VideoClip> clips;
};

bool corpus_equal(const Corpus& a, const Corpus& b);

// Procedurally generates the corpus described by `manifest`. Identities are
// dense integers [0, total_identities) assigned in clip order. Throws on
// invalid manifest values.
Corpus generate_corpus(const CorpusManifest& manifest);

// Row-major counts RLE, first run counts zeros ("0 4" encodes an all-ones
// 2x2 mask). Decode validates that runs sum to h*w.
std::string rle_encode(const Mask& mask);
Mask rle_decode(const std::string& rle, int h, int w);

// Corpus layout on disk: <dir>/manifest.json plus one directory per clip with
// frame_%03d.ppm images and an annotations.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

void write_ppm(const Image& image, const std::filesystem::path& file);
Image read_ppm(const std::filesystem::path& file);

inline constexpr int kInfiniteInterval = std::numeric_limits<int>::max();

struct SampledPair {
  int t = 0;
  int t_delta = 0;
  const Frame* frame_t = nullptr;
  const Frame* frame_t_delta = nullptr;

  int delta() const { return t_delta - t; }
};

// Samples t uniformly, then the offset uniformly over [-T, T] intersected
// with the clip bounds. delta = 0 is a valid draw.
SampledPair sample_frame_pair(const VideoClip& clip, int interval, Rng& rng);

// Tight box of a mask's foreground; empty optional when the mask is empty.
std::optional<Box> tight_box(const Mask& mask);

}  // namespace minivis::syndata
