// Command-line front end: corpus generation, training, evaluation, inference,
// and the ablation protocols.

#include "minivis/ablate.hpp"
#include "minivis/config.hpp"
#include "minivis/syndata.hpp"
#include "minivis/tracker.hpp"
#include "minivis/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace minivis;

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "JSON config file (defaults are used when omitted)");
  cmd->add_option("--set", opts.overrides, "Override a config key, e.g. --set train.epochs=4")->take_all();
  cmd->add_option("--seed", opts.seed, "Shorthand for the command's primary seed");
}

config::RunConfig resolve_config(const CommonOpts& opts) {
  config::RunConfig cfg = opts.config_file.empty() ? config::default_config() : config::load_config(opts.config_file);
  for (const auto& assignment : opts.overrides) config::apply_override(cfg, assignment);
  return cfg;
}

void write_summary(const viseval::EvalSummary& s, std::ostream& out) {
  out << "AP   " << s.ap << "\n";
  out << "AP50 " << s.ap50 << "\n";
  out << "AP75 " << s.ap75 << "\n";
  out << "AR1  " << s.ar1 << "\n";
  out << "AR10 " << s.ar10 << "\n";
}

void save_summary_json(const viseval::EvalSummary& s, const fs::path& file) {
  json j;
  j["ap"] = s.ap;
  j["ap50"] = s.ap50;
  j["ap75"] = s.ap75;
  j["ar1"] = s.ar1;
  j["ar10"] = s.ar10;
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

// Paints track masks over the frame for quick visual inspection.
void write_overlay(const syndata::Frame& frame, const std::vector<tracker::Track>& tracks, const fs::path& file) {
  syndata::Image img = frame.image;
  const double palette[6][3] = {{1, 0.2, 0.2}, {0.2, 1, 0.2}, {0.3, 0.5, 1}, {1, 1, 0.2}, {1, 0.3, 1}, {0.2, 1, 1}};
  for (const auto& track : tracks) {
    auto it = track.masks.find(frame.time_index);
    if (it == track.masks.end()) continue;
    const Mask mask = syndata::rle_decode(it->second, img.height, img.width);
    const auto& color = palette[track.track_id % 6];
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        if (!mask(y, x)) continue;
        for (int c = 0; c < 3; ++c) img.ch[c](y, x) = 0.55 * img.ch[c](y, x) + 0.45 * color[c];
      }
    }
  }
  syndata::write_ppm(img, file);
}

int cmd_generate(const CommonOpts& opts, const std::string& out_dir, bool use_val) {
  config::RunConfig cfg = resolve_config(opts);
  syndata::CorpusManifest manifest = use_val ? cfg.val_corpus : cfg.corpus;
  if (opts.seed) manifest.seed = *opts.seed;
  auto corpus = syndata::generate_corpus(manifest);
  syndata::write_corpus(corpus, out_dir);
  std::cout << "wrote " << corpus.clips.size() << " clips, " << corpus.manifest.total_identities
            << " identities to " << out_dir << "\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& corpus_dir, const std::string& out_dir) {
  config::RunConfig cfg = resolve_config(opts);
  if (opts.seed) cfg.train.seed = *opts.seed;
  auto corpus = syndata::read_corpus(corpus_dir);
  auto result = trainer::train(cfg, corpus, out_dir, &std::cout);
  config::save_config(cfg, fs::path(out_dir) / "config.json");
  if (result.aborted_non_finite) {
    std::cerr << "error: training aborted on non-finite loss; last-good checkpoint kept at " << out_dir
              << "/checkpoint.bin\n";
    return 1;
  }
  std::cout << "final loss " << result.final_total << ", checkpoint at " << out_dir << "/checkpoint.bin\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, const std::string& corpus_dir,
             const std::string& out_dir) {
  config::RunConfig cfg = resolve_config(opts);
  auto corpus = syndata::read_corpus(corpus_dir);
  if (corpus.clips.empty()) throw std::runtime_error("eval: corpus at " + corpus_dir + " has no clips");
  auto ck = trainer::load_checkpoint(checkpoint);
  net::ModelDims dims = cfg.dims(0);
  trainer::validate_params(ck.params, dims);
  auto summary = trainer::evaluate_params(ck.params, dims, corpus, cfg.tracker);
  write_summary(summary, std::cout);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    save_summary_json(summary, fs::path(out_dir) / "summary.json");
  }
  return 0;
}

int cmd_infer(const CommonOpts& opts, const std::string& checkpoint, const std::string& corpus_dir,
              const std::string& clip_id, const std::string& out_dir, bool overlay) {
  config::RunConfig cfg = resolve_config(opts);
  auto corpus = syndata::read_corpus(corpus_dir);
  auto ck = trainer::load_checkpoint(checkpoint);
  net::ModelDims dims = cfg.dims(0);
  trainer::validate_params(ck.params, dims);
  fs::create_directories(out_dir);

  std::vector<tracker::ClipPredictions> preds;
  for (const auto& clip : corpus.clips) {
    if (!clip_id.empty() && clip.clip_id != clip_id) continue;
    auto tracks = tracker::process_video(clip, ck.params, dims, cfg.tracker);
    preds.push_back(tracker::to_predictions(clip.clip_id, corpus.manifest.height, corpus.manifest.width, tracks));
    if (overlay) {
      const fs::path dir = fs::path(out_dir) / ("overlay_" + clip.clip_id);
      fs::create_directories(dir);
      for (const auto& frame : clip.frames) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "frame_%03d.ppm", frame.time_index);
        write_overlay(frame, tracks, dir / buf);
      }
    }
  }
  if (!clip_id.empty() && preds.empty()) throw std::runtime_error("infer: clip " + clip_id + " not found");
  tracker::write_predictions(preds, fs::path(out_dir) / "predictions.json");
  std::size_t n = 0;
  for (const auto& p : preds) n += p.tracks.size();
  std::cout << "wrote " << n << " tracks over " << preds.size() << " clips to " << out_dir << "/predictions.json\n";
  return 0;
}

int cmd_ablate(const CommonOpts& opts, const std::string& protocol_name, int seeds, const std::string& out_dir,
               int jobs) {
  config::RunConfig cfg = resolve_config(opts);
  if (opts.seed) cfg.train.seed = *opts.seed;
  const auto protocol = ablate::protocol_from_string(protocol_name);
  if (jobs <= 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  auto result = ablate::run_protocol(cfg, protocol, seeds, out_dir, jobs, std::cout);

  const std::string table = ablate::render_table(result);
  std::cout << table;
  {
    std::ofstream out(fs::path(out_dir) / "table.md");
    out << table;
  }
  ablate::write_results_json(result, fs::path(out_dir) / "results.json");
  if (protocol == ablate::Protocol::kTSweep) {
    ablate::write_t_sweep_svg(result, fs::path(out_dir) / "ap_vs_T.svg");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minivis: video instance segmentation on synthetic shape videos"};
  app.require_subcommand(1);

  CommonOpts generate_opts, train_opts, eval_opts, infer_opts, ablate_opts;
  std::string gen_out, train_corpus, train_out, eval_ckpt, eval_corpus, eval_out;
  std::string infer_ckpt, infer_corpus, infer_clip, infer_out, ablate_protocol = "components", ablate_out;
  bool gen_val = false, infer_overlay = false;
  int ablate_seeds = 3, ablate_jobs = 0;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  add_common(gen, generate_opts);
  gen->add_option("--out", gen_out, "Output corpus directory")->required();
  gen->add_flag("--val", gen_val, "Use the val_corpus config section");

  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  add_common(train, train_opts);
  train->add_option("--corpus", train_corpus, "Corpus directory")->required();
  train->add_option("--out", train_out, "Output directory for checkpoint and metrics")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--corpus", eval_corpus, "Corpus directory")->required();
  eval->add_option("--out", eval_out, "Directory for summary.json (optional)");

  auto* infer = app.add_subcommand("infer", "Run online inference and dump predictions");
  add_common(infer, infer_opts);
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--corpus", infer_corpus, "Corpus directory")->required();
  infer->add_option("--clip", infer_clip, "Restrict to one clip id");
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer->add_flag("--overlay", infer_overlay, "Also write mask overlay images");

  auto* abl = app.add_subcommand("ablate", "Run an ablation protocol");
  add_common(abl, ablate_opts);
  abl->add_option("--protocol", ablate_protocol, "components | T_sweep | embedding_variants");
  abl->add_option("--seeds", ablate_seeds, "Seeds per arm");
  abl->add_option("--out", ablate_out, "Output directory")->required();
  abl->add_option("--jobs", ablate_jobs, "Parallel training processes (0 = hardware threads)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(generate_opts, gen_out, gen_val);
    if (train->parsed()) return cmd_train(train_opts, train_corpus, train_out);
    if (eval->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_corpus, eval_out);
    if (infer->parsed()) return cmd_infer(infer_opts, infer_ckpt, infer_corpus, infer_clip, infer_out, infer_overlay);
    if (abl->parsed()) return cmd_ablate(ablate_opts, ablate_protocol, ablate_seeds, ablate_out, ablate_jobs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
