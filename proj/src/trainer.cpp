#include "minivis/trainer.hpp"

#include "minivis/crossover.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

using json = nlohmann::ordered_json;

namespace minivis::trainer {

namespace {

class Optimizer {
 public:
  Optimizer(const config::TrainConfig& cfg, ad::ParamStore& params) : cfg_(cfg) {
    if (cfg.optimizer == "adam") {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = Mat::Zero(params.at(i).value.rows(), params.at(i).value.cols());
        v_[i] = Mat::Zero(params.at(i).value.rows(), params.at(i).value.cols());
      }
    } else {
      m_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = Mat::Zero(params.at(i).value.rows(), params.at(i).value.cols());
      }
    }
  }

  void step(ad::ParamStore& params, double lr) {
    if (cfg_.optimizer == "adam") {
      ++t_;
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double bias1 = 1.0 - std::pow(b1, t_);
      const double bias2 = 1.0 - std::pow(b2, t_);
      for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Param& p = params.at(i);
        m_[i] = b1 * m_[i] + (1.0 - b1) * p.grad;
        v_[i] = b2 * v_[i] + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= lr * (m_[i].array() / bias1) / ((v_[i].array() / bias2).sqrt() + eps);
      }
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Param& p = params.at(i);
        m_[i] = cfg_.momentum * m_[i] + p.grad;
        p.value -= lr * m_[i];
      }
    }
  }

 private:
  config::TrainConfig cfg_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

double epoch_lr(const config::TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double milestone : cfg.decay_milestones) {
    if (epoch >= static_cast<int>(milestone * cfg.epochs)) lr *= cfg.decay_factor;
  }
  return lr;
}

}  // namespace

std::uint64_t manifest_hash(const syndata::CorpusManifest& m) {
  std::string s = std::to_string(m.num_clips) + "|" + std::to_string(m.clip_length) + "|" + std::to_string(m.height) +
                  "|" + std::to_string(m.width) + "|" + std::to_string(m.num_categories) + "|" +
                  std::to_string(m.min_instances) + "|" + std::to_string(m.max_instances) + "|" +
                  std::to_string(m.occlusion ? 1 : 0) + "|" + std::to_string(m.total_identities) + "|" +
                  std::to_string(m.seed);
  return fnv1a(s);
}

void save_checkpoint(const std::filesystem::path& file, const ad::ParamStore& params, std::uint64_t corpus_hash) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
  const char magic[4] = {'M', 'V', 'C', 'P'};
  out.write(magic, 4);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&corpus_hash), sizeof(corpus_hash));
  const std::uint32_t count = static_cast<std::uint32_t>(params.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Mat& value = params.at(i).value;
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(name.data(), len);
    const std::uint64_t rows = static_cast<std::uint64_t>(value.rows());
    const std::uint64_t cols = static_cast<std::uint64_t>(value.cols());
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(value.data()), static_cast<std::streamsize>(sizeof(double) * value.size()));
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MVCP", 4) != 0) throw std::runtime_error("not a checkpoint: " + file.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  LoadedCheckpoint ck;
  in.read(reinterpret_cast<char*>(&ck.corpus_hash), sizeof(ck.corpus_hash));
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
    in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
    Mat value(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(sizeof(double) * value.size()));
    if (!in) throw std::runtime_error("truncated checkpoint: " + file.string());
    ck.params.add(name, std::move(value));
  }
  return ck;
}

void validate_params(const ad::ParamStore& params, const net::ModelDims& dims) {
  ad::ParamStore expect = net::init_params(dims, /*seed=*/0);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const std::string& name = expect.names()[i];
    if (name == "proxy.w" && !params.has(name)) continue;
    if (!params.has(name)) throw std::runtime_error("checkpoint missing parameter " + name);
    const Mat& got = params.get(name).value;
    const Mat& want = expect.at(i).value;
    if (name != "proxy.w" && (got.rows() != want.rows() || got.cols() != want.cols())) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
  }
}

TrainResult train(const config::RunConfig& cfg, const syndata::Corpus& corpus, const std::filesystem::path& out_dir,
                  std::ostream* log) {
  if (corpus.clips.empty()) throw std::invalid_argument("train: corpus has no clips");
  std::filesystem::create_directories(out_dir);

  net::ModelDims dims = cfg.dims(corpus.manifest.total_identities);
  ad::ParamStore params = net::init_params(dims, mix_seed(cfg.train.seed, "init"));
  Rng sample_rng(mix_seed(cfg.train.seed, "sample"));
  Optimizer opt(cfg.train, params);

  const std::uint64_t corpus_hash = manifest_hash(corpus.manifest);
  const auto checkpoint_path = out_dir / "checkpoint.bin";
  save_checkpoint(checkpoint_path, params, corpus_hash);

  std::ofstream metrics(out_dir / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write metrics.jsonl under " + out_dir.string());

  const auto geom_cache = net::pyramid_geometry(dims, corpus.manifest.height, corpus.manifest.width);
  losses::LossConfig loss_cfg;
  loss_cfg.crossover = cfg.train.crossover;
  loss_cfg.embedding = cfg.train.embedding;
  loss_cfg.focal = losses::FocalParams{cfg.train.focal_alpha, cfg.train.focal_gamma};

  TrainResult result;
  std::vector<int> clip_order(corpus.clips.size());
  std::iota(clip_order.begin(), clip_order.end(), 0);

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = epoch_lr(cfg.train, epoch);
    sample_rng.shuffle(clip_order);
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    int steps = 0;

    for (int ci : clip_order) {
      const auto& clip = corpus.clips[ci];
      for (int rep = 0; rep < cfg.train.pairs_per_clip; ++rep) {
        const auto pair = syndata::sample_frame_pair(clip, cfg.train.interval, sample_rng);

        ad::Graph g;
        auto fwd_t = net::forward(g, params, pair.frame_t->image, dims);
        auto fwd_td = net::forward(g, params, pair.frame_t_delta->image, dims);
        auto targets_t = net::assign_targets(pair.frame_t->annotations, geom_cache, dims);
        auto targets_td = net::assign_targets(pair.frame_t_delta->annotations, geom_cache, dims);

        ad::NodePtr cross;
        std::vector<losses::InstanceForward> inst_t, inst_td;
        if (loss_cfg.crossover) {
          inst_t = losses::gather_instances(g, fwd_t, targets_t, dims);
          inst_td = losses::gather_instances(g, fwd_td, targets_td, dims);
          auto pairs = crossover::match_instances(inst_t, inst_td);
          cross = crossover::crossover_loss_node(g, pairs, dims);
        }

        ad::NodePtr proxies;
        if (params.has("proxy.w")) proxies = g.param(params.get("proxy.w"));
        auto loss =
            losses::total_loss_node(g, fwd_t, targets_t, fwd_td, targets_td, proxies, dims, loss_cfg, cross);

        const double total = loss.total->scalar();
        if (!std::isfinite(total)) {
          result.aborted_non_finite = true;
          if (log) {
            *log << "non-finite loss at epoch " << epoch << "; keeping checkpoint from last completed epoch\n";
          }
          result.final_total = std::numeric_limits<double>::quiet_NaN();
          return result;
        }

        params.zero_grads();
        g.backward(loss.total);
        opt.step(params, lr);

        stats.total += total;
        stats.det += loss.det->scalar();
        stats.seg += loss.seg->scalar();
        stats.cross += loss.cross ? loss.cross->scalar() : 0.0;
        stats.id += loss.id->scalar();
        ++steps;
      }
    }

    stats.total /= steps;
    stats.det /= steps;
    stats.seg /= steps;
    stats.cross /= steps;
    stats.id /= steps;
    result.epochs.push_back(stats);
    result.final_total = stats.total;

    json row;
    row["epoch"] = stats.epoch;
    row["loss"] = stats.total;
    row["det"] = stats.det;
    row["seg"] = stats.seg;
    row["cross"] = stats.cross;
    row["id"] = stats.id;
    row["lr"] = stats.lr;
    metrics << row.dump() << "\n";
    metrics.flush();

    save_checkpoint(checkpoint_path, params, corpus_hash);
    if (log) {
      *log << "epoch " << epoch << " loss " << stats.total << " (det " << stats.det << " seg " << stats.seg
           << " cross " << stats.cross << " id " << stats.id << ") lr " << lr << "\n";
    }
  }
  return result;
}

std::vector<viseval::ClipEval> build_eval_inputs(const syndata::Corpus& corpus,
                                                 const std::vector<tracker::ClipPredictions>& preds) {
  std::vector<viseval::ClipEval> out;
  for (const auto& clip : corpus.clips) {
    viseval::ClipEval ce;
    ce.clip_id = clip.clip_id;

    std::map<int, viseval::EvalTrack> gts;
    for (const auto& frame : clip.frames) {
      for (const auto& ann : frame.annotations) {
        auto& track = gts[ann.identity];
        track.track_id = ann.identity;
        track.category = ann.category;
        track.masks[frame.time_index] = ann.mask;
      }
    }
    for (auto& [id, track] : gts) ce.gts.push_back(std::move(track));

    for (const auto& cp : preds) {
      if (cp.clip_id != clip.clip_id) continue;
      for (const auto& t : cp.tracks) {
        viseval::EvalTrack track;
        track.track_id = t.track_id;
        track.category = t.category;
        track.score = t.score;
        for (const auto& [time, rle] : t.masks) {
          track.masks[time] = syndata::rle_decode(rle, cp.height, cp.width);
        }
        ce.preds.push_back(std::move(track));
      }
    }
    out.push_back(std::move(ce));
  }
  return out;
}

viseval::EvalSummary evaluate_params(ad::ParamStore& params, const net::ModelDims& dims, const syndata::Corpus& corpus,
                                     const tracker::TrackerConfig& tcfg) {
  if (corpus.clips.empty()) throw std::invalid_argument("evaluate: corpus has no clips");
  std::vector<tracker::ClipPredictions> preds;
  for (const auto& clip : corpus.clips) {
    auto tracks = tracker::process_video(clip, params, dims, tcfg);
    preds.push_back(tracker::to_predictions(clip.clip_id, corpus.manifest.height, corpus.manifest.width, tracks));
  }
  return viseval::evaluate(build_eval_inputs(corpus, preds), corpus.manifest.num_categories);
}

}  // namespace minivis::trainer
