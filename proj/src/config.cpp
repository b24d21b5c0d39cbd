#include "minivis/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

using json = nlohmann::ordered_json;

namespace minivis::config {

namespace {

json manifest_json(const syndata::CorpusManifest& m) {
  json j;
  j["num_clips"] = m.num_clips;
  j["clip_length"] = m.clip_length;
  j["height"] = m.height;
  j["width"] = m.width;
  j["num_categories"] = m.num_categories;
  j["min_instances"] = m.min_instances;
  j["max_instances"] = m.max_instances;
  j["occlusion"] = m.occlusion;
  j["seed"] = m.seed;
  return j;
}

void manifest_from(const json& j, syndata::CorpusManifest& m) {
  m.num_clips = j.at("num_clips").get<int>();
  m.clip_length = j.at("clip_length").get<int>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.num_categories = j.at("num_categories").get<int>();
  m.min_instances = j.at("min_instances").get<int>();
  m.max_instances = j.at("max_instances").get<int>();
  m.occlusion = j.at("occlusion").get<bool>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.total_identities = 0;  // derived by the generator, not configuration
}

json config_json(const RunConfig& cfg) {
  json j;
  j["corpus"] = manifest_json(cfg.corpus);
  j["val_corpus"] = manifest_json(cfg.val_corpus);

  json jm;
  jm["backbone_channels"] = cfg.model.backbone_channels;
  jm["embed_dim"] = cfg.model.embed_dim;
  jm["mask_channels"] = cfg.model.mask_channels;
  jm["mask_mid_channels"] = cfg.model.mask_mid_channels;
  j["model"] = std::move(jm);

  json jt;
  jt["epochs"] = cfg.train.epochs;
  jt["pairs_per_clip"] = cfg.train.pairs_per_clip;
  if (cfg.train.interval == syndata::kInfiniteInterval) {
    jt["interval"] = "inf";
  } else {
    jt["interval"] = cfg.train.interval;
  }
  jt["crossover"] = cfg.train.crossover;
  jt["embedding"] = losses::to_string(cfg.train.embedding);
  jt["optimizer"] = cfg.train.optimizer;
  jt["lr"] = cfg.train.lr;
  jt["momentum"] = cfg.train.momentum;
  jt["decay_milestones"] = cfg.train.decay_milestones;
  jt["decay_factor"] = cfg.train.decay_factor;
  jt["focal_alpha"] = cfg.train.focal_alpha;
  jt["focal_gamma"] = cfg.train.focal_gamma;
  jt["seed"] = cfg.train.seed;
  j["train"] = std::move(jt);

  json jk;
  jk["score_threshold"] = cfg.tracker.detect.score_threshold;
  jk["nms_iou"] = cfg.tracker.detect.nms_iou;
  jk["max_detections"] = cfg.tracker.detect.max_detections;
  jk["lambda_iou"] = cfg.tracker.lambda_iou;
  jk["lambda_cat"] = cfg.tracker.lambda_cat;
  jk["lambda_conf"] = cfg.tracker.lambda_conf;
  jk["new_track_floor"] = cfg.tracker.new_track_floor;
  j["tracker"] = std::move(jk);
  return j;
}

RunConfig config_from(const json& j) {
  RunConfig cfg = {};
  manifest_from(j.at("corpus"), cfg.corpus);
  manifest_from(j.at("val_corpus"), cfg.val_corpus);

  const auto& jm = j.at("model");
  cfg.model.backbone_channels = jm.at("backbone_channels").get<int>();
  cfg.model.embed_dim = jm.at("embed_dim").get<int>();
  cfg.model.mask_channels = jm.at("mask_channels").get<int>();
  cfg.model.mask_mid_channels = jm.at("mask_mid_channels").get<int>();

  const auto& jt = j.at("train");
  cfg.train.epochs = jt.at("epochs").get<int>();
  cfg.train.pairs_per_clip = jt.at("pairs_per_clip").get<int>();
  if (jt.at("interval").is_string()) {
    const std::string s = jt.at("interval").get<std::string>();
    if (s != "inf") throw std::invalid_argument("train.interval: expected integer or \"inf\", got " + s);
    cfg.train.interval = syndata::kInfiniteInterval;
  } else {
    cfg.train.interval = jt.at("interval").get<int>();
    if (cfg.train.interval < 1) throw std::invalid_argument("train.interval must be >= 1");
  }
  cfg.train.crossover = jt.at("crossover").get<bool>();
  cfg.train.embedding = losses::embedding_variant_from_string(jt.at("embedding").get<std::string>());
  cfg.train.optimizer = jt.at("optimizer").get<std::string>();
  if (cfg.train.optimizer != "adam" && cfg.train.optimizer != "sgd") {
    throw std::invalid_argument("train.optimizer must be adam or sgd");
  }
  cfg.train.lr = jt.at("lr").get<double>();
  cfg.train.momentum = jt.at("momentum").get<double>();
  cfg.train.decay_milestones = jt.at("decay_milestones").get<std::vector<double>>();
  cfg.train.decay_factor = jt.at("decay_factor").get<double>();
  cfg.train.focal_alpha = jt.at("focal_alpha").get<double>();
  cfg.train.focal_gamma = jt.at("focal_gamma").get<double>();
  cfg.train.seed = jt.at("seed").get<std::uint64_t>();

  const auto& jk = j.at("tracker");
  cfg.tracker.detect.score_threshold = jk.at("score_threshold").get<double>();
  cfg.tracker.detect.nms_iou = jk.at("nms_iou").get<double>();
  cfg.tracker.detect.max_detections = jk.at("max_detections").get<int>();
  cfg.tracker.lambda_iou = jk.at("lambda_iou").get<double>();
  cfg.tracker.lambda_cat = jk.at("lambda_cat").get<double>();
  cfg.tracker.lambda_conf = jk.at("lambda_conf").get<double>();
  cfg.tracker.new_track_floor = jk.at("new_track_floor").get<double>();
  return cfg;
}

}  // namespace

RunConfig default_config() {
  RunConfig cfg;
  cfg.corpus.num_clips = 80;
  cfg.corpus.clip_length = 12;
  cfg.corpus.seed = 1;
  cfg.val_corpus = cfg.corpus;
  cfg.val_corpus.num_clips = 16;
  cfg.val_corpus.seed = 9001;
  return cfg;
}

std::string to_json_string(const RunConfig& cfg) { return config_json(cfg).dump(2); }

RunConfig from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config parse error: ") + e.what());
  }
  return config_from(j);
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

void save_config(const RunConfig& cfg, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write config " + file.string());
  out << to_json_string(cfg) << "\n";
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + assignment);
  std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j = config_json(cfg);
  std::string pointer = "/";
  for (char c : key) pointer += c == '.' ? '/' : c;
  const json::json_pointer ptr(pointer);
  if (!j.contains(ptr)) throw std::invalid_argument("unknown config key: " + key);

  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings like "inf" or "global_focal"
  }
  j[ptr] = parsed;
  cfg = config_from(j);
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(to_json_string(cfg)); }

std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  const json j = config_json(cfg);
  const std::function<void(const json&, const std::string&)> walk = [&](const json& node, const std::string& prefix) {
    if (node.is_object()) {
      for (const auto& [key, value] : node.items()) {
        walk(value, prefix.empty() ? key : prefix + "." + key);
      }
    } else {
      out.emplace_back(prefix, node.dump());
    }
  };
  walk(j, "");
  return out;
}

void assert_differs_only_in(const RunConfig& a, const RunConfig& b, const std::vector<std::string>& allowed_keys) {
  const auto fa = flatten(a);
  const auto fb = flatten(b);
  if (fa.size() != fb.size()) throw std::logic_error("config shape mismatch");
  for (std::size_t i = 0; i < fa.size(); ++i) {
    if (fa[i].second == fb[i].second) continue;
    const std::string& key = fa[i].first;
    bool allowed = false;
    for (const auto& k : allowed_keys) allowed = allowed || k == key;
    if (!allowed) {
      throw std::logic_error("ablation arm differs in disallowed key " + key + ": " + fa[i].second + " vs " +
                             fb[i].second);
    }
  }
}

}  // namespace minivis::config
