#pragma once

// Run configuration: corpus parameters, model dimensions, training recipe,
// tracker thresholds. A config file carries full defaults; CLI flags override
// individual keys by dotted path.

#include "minivis/losses.hpp"
#include "minivis/netcore.hpp"
#include "minivis/syndata.hpp"
#include "minivis/tracker.hpp"

#include <filesystem>
#include <string>

namespace minivis::config {

struct ModelConfig {
  int backbone_channels = 16;
  int embed_dim = 8;
  int mask_channels = 8;
  int mask_mid_channels = 8;

  net::ModelDims dims(int total_identities) const {
    net::ModelDims d;
    d.backbone_channels = backbone_channels;
    d.embed_dim = embed_dim;
    d.mask_channels = mask_channels;
    d.mask_mid_channels = mask_mid_channels;
    d.total_identities = total_identities;
    return d;
  }
};

struct TrainConfig {
  int epochs = 12;
  int pairs_per_clip = 2;
  int interval = syndata::kInfiniteInterval;  // T; pairs are sampled with offset in [-T, T]
  bool crossover = true;
  losses::EmbeddingVariant embedding = losses::EmbeddingVariant::kGlobalFocal;
  std::string optimizer = "adam";  // adam | sgd
  double lr = 3e-3;
  double momentum = 0.9;
  std::vector<double> decay_milestones = {0.75, 0.92};
  double decay_factor = 0.1;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  std::uint64_t seed = 42;
};

struct RunConfig {
  syndata::CorpusManifest corpus;      // training corpus
  syndata::CorpusManifest val_corpus;  // held-out corpus for evaluation
  ModelConfig model;
  TrainConfig train;
  tracker::TrackerConfig tracker;

  net::ModelDims dims(int total_identities) const {
    net::ModelDims d = model.dims(total_identities);
    d.num_categories = corpus.num_categories;
    return d;
  }
};

RunConfig default_config();

std::string to_json_string(const RunConfig& cfg);
RunConfig from_json_string(const std::string& text);

RunConfig load_config(const std::filesystem::path& file);
void save_config(const RunConfig& cfg, const std::filesystem::path& file);

// Applies "section.key=value" to the config; value uses JSON literal syntax
// ("inf" is accepted for train.interval). Unknown keys are rejected.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Fingerprint of the whole config (used to key cached ablation runs).
std::uint64_t config_hash(const RunConfig& cfg);

// Flat "a.b.c" -> value-string view of a config, for diffing arm configs.
std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& cfg);

// Throws unless the two configs differ only in `allowed_keys`.
void assert_differs_only_in(const RunConfig& a, const RunConfig& b, const std::vector<std::string>& allowed_keys);

}  // namespace minivis::config
