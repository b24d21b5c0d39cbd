#pragma once

// Ablation protocols: component toggles, sample-interval sweep, and
// embedding-variant stability. Arms share every setting except the varied
// factor (asserted programmatically); per-run results are cached by config
// hash so overlapping protocols reuse completed runs.

#include "minivis/config.hpp"
#include "minivis/viseval.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace minivis::ablate {

enum class Protocol { kComponents, kTSweep, kEmbeddingVariants };

Protocol protocol_from_string(const std::string& s);
std::string to_string(Protocol p);

struct RunOutcome {
  std::uint64_t seed = 0;
  viseval::EvalSummary summary;
  bool reused = false;
};

struct ArmResult {
  std::string name;
  config::RunConfig cfg;  // seed field holds the base seed
  std::vector<RunOutcome> runs;

  double median_ap() const;
  double std_ap() const;  // sample standard deviation over seeds
};

struct AblateResult {
  Protocol protocol = Protocol::kComponents;
  std::vector<ArmResult> arms;
};

// Runs every (arm, seed) once, reusing cached runs under out_dir/runs.
// `jobs` > 1 trains independent runs on worker threads.
AblateResult run_protocol(const config::RunConfig& base, Protocol protocol, int num_seeds,
                          const std::filesystem::path& out_dir, int jobs, std::ostream& log);

// Arm definitions (exposed for tests): every arm must differ from the base
// only in the protocol's varied keys.
std::vector<std::pair<std::string, config::RunConfig>> protocol_arms(const config::RunConfig& base, Protocol protocol);

std::string render_table(const AblateResult& result);
void write_results_json(const AblateResult& result, const std::filesystem::path& file);

// AP-vs-T curve for the interval sweep, one polyline per crossover setting.
void write_t_sweep_svg(const AblateResult& result, const std::filesystem::path& file);

}  // namespace minivis::ablate
