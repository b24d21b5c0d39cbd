#include "minivis/ablate.hpp"

#include "minivis/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace minivis::ablate {

Protocol protocol_from_string(const std::string& s) {
  if (s == "components") return Protocol::kComponents;
  if (s == "T_sweep") return Protocol::kTSweep;
  if (s == "embedding_variants") return Protocol::kEmbeddingVariants;
  throw std::invalid_argument("unknown protocol: " + s + " (expected components|T_sweep|embedding_variants)");
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kComponents:
      return "components";
    case Protocol::kTSweep:
      return "T_sweep";
    case Protocol::kEmbeddingVariants:
      return "embedding_variants";
  }
  return "?";
}

double ArmResult::median_ap() const {
  std::vector<double> aps;
  for (const auto& r : runs) aps.push_back(r.summary.ap);
  std::sort(aps.begin(), aps.end());
  if (aps.empty()) return 0.0;
  const std::size_t n = aps.size();
  return n % 2 == 1 ? aps[n / 2] : 0.5 * (aps[n / 2 - 1] + aps[n / 2]);
}

double ArmResult::std_ap() const {
  if (runs.size() < 2) return 0.0;
  double mean = 0;
  for (const auto& r : runs) mean += r.summary.ap;
  mean /= static_cast<double>(runs.size());
  double ss = 0;
  for (const auto& r : runs) ss += (r.summary.ap - mean) * (r.summary.ap - mean);
  return std::sqrt(ss / static_cast<double>(runs.size() - 1));
}

std::vector<std::pair<std::string, config::RunConfig>> protocol_arms(const config::RunConfig& base,
                                                                     Protocol protocol) {
  std::vector<std::pair<std::string, config::RunConfig>> arms;
  using losses::EmbeddingVariant;
  switch (protocol) {
    case Protocol::kComponents: {
      // Table layout: baseline, crossover only, global-balanced embedding
      // only, both.
      auto make = [&](const std::string& name, bool crossover, EmbeddingVariant embedding) {
        config::RunConfig cfg = base;
        cfg.train.crossover = crossover;
        cfg.train.embedding = embedding;
        arms.emplace_back(name, cfg);
      };
      make("baseline", false, EmbeddingVariant::kPairwiseCe);
      make("col", true, EmbeddingVariant::kPairwiseCe);
      make("gbe", false, EmbeddingVariant::kGlobalFocal);
      make("col_gbe", true, EmbeddingVariant::kGlobalFocal);
      for (const auto& [name, cfg] : arms) {
        config::assert_differs_only_in(base, cfg, {"train.crossover", "train.embedding"});
      }
      break;
    }
    case Protocol::kTSweep: {
      for (int interval : {1, 3, 5, syndata::kInfiniteInterval}) {
        for (bool crossover : {false, true}) {
          config::RunConfig cfg = base;
          cfg.train.interval = interval;
          cfg.train.crossover = crossover;
          const std::string t_name = interval == syndata::kInfiniteInterval ? "inf" : std::to_string(interval);
          arms.emplace_back(std::string("T") + t_name + (crossover ? "_col" : "_nocol"), cfg);
        }
      }
      for (const auto& [name, cfg] : arms) {
        config::assert_differs_only_in(base, cfg, {"train.interval", "train.crossover"});
      }
      break;
    }
    case Protocol::kEmbeddingVariants: {
      for (EmbeddingVariant v : {EmbeddingVariant::kPairwiseCe, EmbeddingVariant::kPairwiseFocal,
                                 EmbeddingVariant::kGlobalCe, EmbeddingVariant::kGlobalFocal}) {
        config::RunConfig cfg = base;
        cfg.train.embedding = v;
        arms.emplace_back(losses::to_string(v), cfg);
      }
      for (const auto& [name, cfg] : arms) {
        config::assert_differs_only_in(base, cfg, {"train.embedding"});
      }
      break;
    }
  }
  return arms;
}

namespace {

// Generates (or reuses) a corpus directory keyed by its manifest.
syndata::Corpus ensure_corpus(const syndata::CorpusManifest& manifest, const fs::path& dir, std::ostream& log,
                              std::mutex& log_mutex) {
  if (fs::exists(dir / "manifest.json")) {
    syndata::Corpus existing = syndata::read_corpus(dir);
    syndata::CorpusManifest want = manifest;
    want.total_identities = existing.manifest.total_identities;
    if (want == existing.manifest) return existing;
    {
      std::lock_guard lock(log_mutex);
      log << "corpus at " << dir.string() << " does not match the requested manifest; regenerating\n";
    }
  }
  syndata::Corpus corpus = syndata::generate_corpus(manifest);
  fs::create_directories(dir);
  syndata::write_corpus(corpus, dir);
  return corpus;
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

struct PlannedRun {
  std::size_t arm = 0;
  std::uint64_t seed = 0;
  config::RunConfig cfg;
  fs::path dir;
};

}  // namespace

AblateResult run_protocol(const config::RunConfig& base, Protocol protocol, int num_seeds, const fs::path& out_dir,
                          int jobs, std::ostream& log) {
  if (num_seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
  if (num_seeds < 2) {
    log << "warning: with fewer than 2 seeds the per-arm standard deviation is undefined; "
           "stability claims need k >= 2\n";
  }
  fs::create_directories(out_dir / "runs");
  std::mutex log_mutex;

  syndata::Corpus train_corpus = ensure_corpus(base.corpus, out_dir / "corpus" / "train", log, log_mutex);
  syndata::Corpus val_corpus = ensure_corpus(base.val_corpus, out_dir / "corpus" / "val", log, log_mutex);

  AblateResult result;
  result.protocol = protocol;
  auto arms = protocol_arms(base, protocol);
  for (auto& [name, cfg] : arms) {
    ArmResult arm;
    arm.name = name;
    arm.cfg = cfg;
    result.arms.push_back(std::move(arm));
  }

  std::vector<PlannedRun> plan;
  for (std::size_t ai = 0; ai < arms.size(); ++ai) {
    for (int s = 0; s < num_seeds; ++s) {
      PlannedRun run;
      run.arm = ai;
      run.seed = base.train.seed + static_cast<std::uint64_t>(s);
      run.cfg = arms[ai].second;
      run.cfg.train.seed = run.seed;
      run.dir = out_dir / "runs" / hash_hex(config::config_hash(run.cfg));
      plan.push_back(std::move(run));
    }
  }

  std::vector<RunOutcome> outcomes(plan.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string failure;

  auto worker = [&]() {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= plan.size()) return;
      const PlannedRun& run = plan[i];
      try {
        RunOutcome outcome;
        outcome.seed = run.seed;
        const fs::path summary_file = run.dir / "summary.json";
        const fs::path config_file = run.dir / "config.json";
        if (fs::exists(summary_file) && fs::exists(config_file)) {
          const config::RunConfig stored = config::load_config(config_file);
          if (config::config_hash(stored) == config::config_hash(run.cfg)) {
            std::ifstream in(summary_file);
            json j;
            in >> j;
            outcome.summary.ap = j.at("ap").get<double>();
            outcome.summary.ap50 = j.at("ap50").get<double>();
            outcome.summary.ap75 = j.at("ap75").get<double>();
            outcome.summary.ar1 = j.at("ar1").get<double>();
            outcome.summary.ar10 = j.at("ar10").get<double>();
            outcome.reused = true;
            outcomes[i] = outcome;
            std::lock_guard lock(log_mutex);
            log << "[" << result.arms[run.arm].name << " seed " << run.seed << "] reused cached run, AP "
                << outcome.summary.ap << "\n";
            continue;
          }
        }

        fs::create_directories(run.dir);
        config::save_config(run.cfg, config_file);
        trainer::TrainResult tr = trainer::train(run.cfg, train_corpus, run.dir, nullptr);
        if (tr.aborted_non_finite) throw std::runtime_error("training diverged (non-finite loss)");

        auto ck = trainer::load_checkpoint(run.dir / "checkpoint.bin");
        net::ModelDims dims = run.cfg.dims(train_corpus.manifest.total_identities);
        outcome.summary = trainer::evaluate_params(ck.params, dims, val_corpus, run.cfg.tracker);

        json j;
        j["ap"] = outcome.summary.ap;
        j["ap50"] = outcome.summary.ap50;
        j["ap75"] = outcome.summary.ap75;
        j["ar1"] = outcome.summary.ar1;
        j["ar10"] = outcome.summary.ar10;
        std::ofstream out(summary_file);
        out << j.dump(2) << "\n";
        outcomes[i] = outcome;
        std::lock_guard lock(log_mutex);
        log << "[" << result.arms[run.arm].name << " seed " << run.seed << "] trained, AP " << outcome.summary.ap
            << " (final loss " << tr.final_total << ")\n";
      } catch (const std::exception& e) {
        failed.store(true);
        std::lock_guard lock(log_mutex);
        failure = std::string(e.what());
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(plan.size())));
  std::vector<std::thread> threads;
  for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failed.load()) throw std::runtime_error("ablation run failed: " + failure);

  for (std::size_t i = 0; i < plan.size(); ++i) {
    result.arms[plan[i].arm].runs.push_back(outcomes[i]);
  }
  return result;
}

std::string render_table(const AblateResult& result) {
  std::ostringstream out;
  out << "| arm | AP (median) | sigma_AP | AP50 | AP75 | AR1 | AR10 |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& arm : result.arms) {
    // Report the seed whose AP is the median for the secondary metrics.
    std::vector<std::size_t> order(arm.runs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return arm.runs[a].summary.ap < arm.runs[b].summary.ap; });
    const auto& mid = arm.runs[order[order.size() / 2]].summary;
    out << "| " << arm.name << " | " << std::fixed << std::setprecision(4) << arm.median_ap() << " | "
        << arm.std_ap() << " | " << mid.ap50 << " | " << mid.ap75 << " | " << mid.ar1 << " | " << mid.ar10
        << " |\n";
  }
  return out.str();
}

void write_results_json(const AblateResult& result, const fs::path& file) {
  json root;
  root["protocol"] = to_string(result.protocol);
  json arms = json::array();
  for (const auto& arm : result.arms) {
    json ja;
    ja["name"] = arm.name;
    ja["median_ap"] = arm.median_ap();
    ja["std_ap"] = arm.std_ap();
    json runs = json::array();
    for (const auto& r : arm.runs) {
      json jr;
      jr["seed"] = r.seed;
      jr["ap"] = r.summary.ap;
      jr["ap50"] = r.summary.ap50;
      jr["ap75"] = r.summary.ap75;
      jr["ar1"] = r.summary.ar1;
      jr["ar10"] = r.summary.ar10;
      jr["reused"] = r.reused;
      runs.push_back(std::move(jr));
    }
    ja["runs"] = std::move(runs);
    arms.push_back(std::move(ja));
  }
  root["arms"] = std::move(arms);
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << root.dump(2) << "\n";
}

void write_t_sweep_svg(const AblateResult& result, const fs::path& file) {
  // Arms are named T<value>_col / T<value>_nocol.
  struct Point {
    std::string t_label;
    double ap = 0;
  };
  std::vector<Point> with, without;
  for (const auto& arm : result.arms) {
    const auto us = arm.name.rfind('_');
    Point p{arm.name.substr(1, us - 1), arm.median_ap()};
    if (arm.name.substr(us + 1) == "col") {
      with.push_back(p);
    } else {
      without.push_back(p);
    }
  }

  const int width = 520, height = 360, ml = 60, mb = 50, mt = 30, mr = 20;
  double ap_max = 0.0;
  for (const auto& p : with) ap_max = std::max(ap_max, p.ap);
  for (const auto& p : without) ap_max = std::max(ap_max, p.ap);
  ap_max = std::max(0.1, ap_max * 1.15);

  auto x_of = [&](std::size_t i, std::size_t n) {
    return ml + (width - ml - mr) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5);
  };
  auto y_of = [&](double ap) { return height - mb - (height - mb - mt) * (ap / ap_max); };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='" << height - mb
      << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb << "' stroke='black'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double ap = ap_max * k / 4.0;
    svg << "<text x='" << ml - 8 << "' y='" << y_of(ap) + 4 << "' font-size='11' text-anchor='end'>" << std::fixed
        << std::setprecision(2) << ap << "</text>\n";
  }
  auto draw = [&](const std::vector<Point>& pts, const std::string& color, const std::string& label, int ly) {
    if (pts.empty()) return;
    svg << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (std::size_t i = 0; i < pts.size(); ++i) svg << x_of(i, pts.size()) << "," << y_of(pts[i].ap) << " ";
    svg << "'/>\n";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      svg << "<circle cx='" << x_of(i, pts.size()) << "' cy='" << y_of(pts[i].ap) << "' r='3' fill='" << color
          << "'/>\n";
      svg << "<text x='" << x_of(i, pts.size()) << "' y='" << height - mb + 16
          << "' font-size='11' text-anchor='middle'>" << pts[i].t_label << "</text>\n";
    }
    svg << "<text x='" << width - mr - 120 << "' y='" << ly << "' font-size='12' fill='" << color << "'>" << label
        << "</text>\n";
  };
  draw(without, "#888888", "no crossover", mt + 14);
  draw(with, "#cc3311", "crossover", mt + 30);
  svg << "<text x='" << (ml + width - mr) / 2 << "' y='" << height - 12
      << "' font-size='12' text-anchor='middle'>sample interval T</text>\n";
  svg << "<text x='16' y='" << (mt + height - mb) / 2 << "' font-size='12' transform='rotate(-90 16 "
      << (mt + height - mb) / 2 << ")' text-anchor='middle'>AP</text>\n";
  svg << "</svg>\n";

  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << svg.str();
}

}  // namespace minivis::ablate
