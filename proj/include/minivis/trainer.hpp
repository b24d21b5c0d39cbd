#pragma once

// End-to-end training on sampled frame pairs, checkpoint serialization, and
// checkpoint evaluation through the tracker + metrics stack.

#include "minivis/config.hpp"
#include "minivis/syndata.hpp"
#include "minivis/viseval.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>

namespace minivis::trainer {

struct EpochStats {
  int epoch = 0;
  double total = 0, det = 0, seg = 0, cross = 0, id = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  bool aborted_non_finite = false;
  double final_total = std::numeric_limits<double>::quiet_NaN();
};

// Fingerprint binding a checkpoint to the corpus whose identities index the
// proxy matrix rows.
std::uint64_t manifest_hash(const syndata::CorpusManifest& m);

void save_checkpoint(const std::filesystem::path& file, const ad::ParamStore& params, std::uint64_t corpus_hash);

struct LoadedCheckpoint {
  ad::ParamStore params;
  std::uint64_t corpus_hash = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

// Validates that a loaded store matches the architecture implied by `dims`
// (total_identities may be zero to skip the proxy check).
void validate_params(const ad::ParamStore& params, const net::ModelDims& dims);

// Trains on `corpus` per the config, writing checkpoint.bin and
// metrics.jsonl under out_dir. A non-finite loss aborts and keeps the last
// epoch-end checkpoint on disk. `log` (optional) receives progress lines.
TrainResult train(const config::RunConfig& cfg, const syndata::Corpus& corpus, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr);

// Runs the online tracker over every clip and scores it against the corpus
// ground truth.
viseval::EvalSummary evaluate_params(ad::ParamStore& params, const net::ModelDims& dims,
                                     const syndata::Corpus& corpus, const tracker::TrackerConfig& tcfg);

// Builds the evaluator's view of corpus ground truth plus a prediction dump.
std::vector<viseval::ClipEval> build_eval_inputs(const syndata::Corpus& corpus,
                                                 const std::vector<tracker::ClipPredictions>& preds);

}  // namespace minivis::trainer
