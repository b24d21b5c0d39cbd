#include "minivis/syndata.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace minivis;
using namespace minivis::syndata;
namespace fs = std::filesystem;

namespace {

CorpusManifest small_manifest(std::uint64_t seed, int clips = 2, int length = 4) {
  CorpusManifest m;
  m.num_clips = clips;
  m.clip_length = length;
  m.seed = seed;
  return m;
}

VideoClip index_only_clip(int length) {
  VideoClip clip;
  clip.clip_id = "synthetic";
  clip.frames.resize(length);
  for (int i = 0; i < length; ++i) clip.frames[i].time_index = i;
  return clip;
}

}  // namespace

TEST_CASE("identical manifests generate identical corpora") {
  auto a = generate_corpus(small_manifest(7));
  auto b = generate_corpus(small_manifest(7));
  CHECK(corpus_equal(a, b));
  auto c = generate_corpus(small_manifest(8));
  CHECK_FALSE(corpus_equal(a, c));
}

TEST_CASE("single instance persists across both frames of a two-frame clip") {
  CorpusManifest m = small_manifest(11, 1, 2);
  m.min_instances = m.max_instances = 1;
  auto corpus = generate_corpus(m);
  REQUIRE(corpus.clips.size() == 1);
  REQUIRE(corpus.clips[0].frames.size() == 2);
  REQUIRE(corpus.clips[0].frames[0].annotations.size() == 1);
  REQUIRE(corpus.clips[0].frames[1].annotations.size() == 1);
  CHECK(corpus.clips[0].frames[0].annotations[0].identity == corpus.clips[0].frames[1].annotations[0].identity);
}

TEST_CASE("occluding instances keep disjoint masks while boxes overlap") {
  CorpusManifest m = small_manifest(3, 6, 12);
  m.min_instances = m.max_instances = 3;
  m.occlusion = true;
  auto corpus = generate_corpus(m);

  bool found_box_overlap_with_disjoint_masks = false;
  for (const auto& clip : corpus.clips) {
    for (const auto& frame : clip.frames) {
      // All masks pairwise disjoint, always.
      for (std::size_t i = 0; i < frame.annotations.size(); ++i) {
        for (std::size_t j = i + 1; j < frame.annotations.size(); ++j) {
          const auto& a = frame.annotations[i];
          const auto& b = frame.annotations[j];
          CHECK(((a.mask > 0) && (b.mask > 0)).count() == 0);
          if (box_iou(a.box, b.box) > 0.0) found_box_overlap_with_disjoint_masks = true;
        }
      }
    }
  }
  CHECK(found_box_overlap_with_disjoint_masks);
}

TEST_CASE("generator invariants: identity categories, dense unique ids, tight boxes") {
  auto corpus = generate_corpus(small_manifest(19, 5, 6));
  std::map<int, int> category_of;
  std::set<int> ids;
  for (const auto& clip : corpus.clips) {
    for (const auto& frame : clip.frames) {
      for (const auto& ann : frame.annotations) {
        ids.insert(ann.identity);
        auto [it, fresh] = category_of.emplace(ann.identity, ann.category);
        if (!fresh) CHECK(it->second == ann.category);
        REQUIRE((ann.mask > 0).count() >= 1);
        auto box = tight_box(ann.mask);
        REQUIRE(box.has_value());
        CHECK(box->x0 == ann.box.x0);
        CHECK(box->y0 == ann.box.y0);
        CHECK(box->x1 == ann.box.x1);
        CHECK(box->y1 == ann.box.y1);
      }
    }
  }
  CHECK(static_cast<int>(ids.size()) == corpus.manifest.total_identities);
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == corpus.manifest.total_identities - 1);
}

TEST_CASE("invalid manifests are rejected") {
  CorpusManifest m = small_manifest(1);
  m.height = 0;
  CHECK_THROWS_AS(generate_corpus(m), std::invalid_argument);
  m = small_manifest(1);
  m.clip_length = 1;
  CHECK_THROWS_AS(generate_corpus(m), std::invalid_argument);
  m = small_manifest(1);
  m.num_categories = 1;
  CHECK_THROWS_AS(generate_corpus(m), std::invalid_argument);
}

TEST_CASE("RLE tabulated examples") {
  Mask zeros = Mask::Zero(2, 2);
  CHECK(rle_encode(zeros) == "4");
  Mask ones = Mask::Constant(2, 2, 1);
  CHECK(rle_encode(ones) == "0 4");
  CHECK((rle_decode("4", 2, 2) == zeros).all());
  CHECK((rle_decode("0 4", 2, 2) == ones).all());
}

TEST_CASE("RLE round-trips random masks exactly") {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    Mask m(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) m(y, x) = rng.bernoulli(0.4) ? 1 : 0;
    const Mask back = rle_decode(rle_encode(m), 16, 16);
    CHECK((back == m).all());
  }
}

TEST_CASE("RLE decode rejects runs that do not sum to H*W") {
  CHECK_THROWS_AS(rle_decode("3", 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(rle_decode("0 5", 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(rle_decode("1 x 2", 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(rle_decode("-1 5", 2, 2), std::invalid_argument);
}

TEST_CASE("corpus round-trips through disk") {
  const fs::path dir = fs::temp_directory_path() / "minivis_syndata_test";
  fs::remove_all(dir);

  SUBCASE("empty corpus") {
    CorpusManifest m = small_manifest(5, 0);
    auto corpus = generate_corpus(m);
    write_corpus(corpus, dir);
    auto back = read_corpus(dir);
    CHECK(corpus_equal(corpus, back));
    CHECK(back.clips.empty());
  }

  SUBCASE("one clip") {
    auto corpus = generate_corpus(small_manifest(5, 1));
    write_corpus(corpus, dir);
    CHECK(corpus_equal(corpus, read_corpus(dir)));
  }

  SUBCASE("occlusion corpus round-trips masks pixel-exactly") {
    CorpusManifest m = small_manifest(3, 3, 8);
    m.min_instances = m.max_instances = 3;
    auto corpus = generate_corpus(m);
    write_corpus(corpus, dir);
    auto back = read_corpus(dir);
    CHECK(corpus_equal(corpus, back));
  }

  SUBCASE("missing frame file is reported with the clip id") {
    auto corpus = generate_corpus(small_manifest(5, 2));
    write_corpus(corpus, dir);
    fs::remove(dir / "clip_001" / "frame_000.ppm");
    try {
      read_corpus(dir);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("clip_001") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("frame pair sampling stays in range and respects T") {
  Rng rng(77);
  SUBCASE("length-1 clip returns the same frame twice") {
    auto clip = index_only_clip(1);
    auto pair = sample_frame_pair(clip, 4, rng);
    CHECK(pair.t == 0);
    CHECK(pair.t_delta == 0);
    CHECK(pair.frame_t == pair.frame_t_delta);
  }

  SUBCASE("T=1 yields offsets in {-1,0,1}, all reachable") {
    auto clip = index_only_clip(12);
    std::set<int> seen;
    for (int i = 0; i < 4000; ++i) {
      auto pair = sample_frame_pair(clip, 1, rng);
      const int delta = pair.delta();
      CHECK(delta >= -1);
      CHECK(delta <= 1);
      if (pair.t >= 1 && pair.t <= 10) seen.insert(delta);
    }
    CHECK(seen == std::set<int>{-1, 0, 1});
  }

  SUBCASE("random lengths and T never go out of range") {
    for (int trial = 0; trial < 3000; ++trial) {
      const int len = rng.uniform_int(1, 9);
      auto clip = index_only_clip(len);
      const int interval = rng.bernoulli(0.3) ? kInfiniteInterval : rng.uniform_int(1, 12);
      auto pair = sample_frame_pair(clip, interval, rng);
      CHECK(pair.t >= 0);
      CHECK(pair.t < len);
      CHECK(pair.t_delta >= 0);
      CHECK(pair.t_delta < len);
      if (interval != kInfiniteInterval) CHECK(std::abs(pair.delta()) <= interval);
    }
  }
}

TEST_CASE("T=inf sampling is jointly uniform over (t, t+delta) pairs") {
  // With T=inf every start frame reaches all L target frames, so the sampled
  // (t, u) pair should be uniform over L*L cells; chi-square at alpha=0.001.
  const int length = 36;
  auto clip = index_only_clip(length);
  Rng rng(991);
  const int samples = 100000;
  std::vector<int> counts(length * length, 0);
  for (int i = 0; i < samples; ++i) {
    auto pair = sample_frame_pair(clip, kInfiniteInterval, rng);
    counts[pair.t * length + pair.t_delta]++;
  }
  const double expected = static_cast<double>(samples) / (length * length);
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double df = length * length - 1;
  const double z = 3.0902;  // 99.9th percentile of N(0,1)
  const double critical = df * std::pow(1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df)), 3.0);
  CHECK(chi2 < critical);
}
