#include "minivis/syndata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace minivis::syndata {

namespace {

constexpr double kMinRadius = 5.0;
constexpr double kMaxRadius = 13.0;
constexpr double kMaxSpeed = 2.5;
constexpr double kMinSpeed = 0.8;
constexpr double kPosJitter = 0.35;
constexpr double kScaleAmpMin = 0.10;
constexpr double kScaleAmpMax = 0.30;
constexpr double kColorDriftMin = 0.015;
constexpr double kColorDriftMax = 0.050;
constexpr double kPixelNoise = 0.01;
constexpr int kPlacementAttempts = 64;

struct ShapeState {
  int local_id = 0;
  int category = 0;
  double cx = 0, cy = 0;
  double vx = 0, vy = 0;
  double radius0 = 0;
  double scale_amp = 0, scale_phase = 0;
  double angle = 0, spin = 0;
  std::array<double, 3> color0{};
  std::array<double, 3> drift_dir{};
  double drift_rate = 0;
};

struct ShapeFrame {
  double cx = 0, cy = 0, radius = 0, angle = 0;
  std::array<double, 3> color{};
};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

bool inside_shape(int category, const ShapeFrame& s, double px, double py) {
  const double dx = px - s.cx;
  const double dy = py - s.cy;
  switch (category) {
    case 0:  // circle
      return dx * dx + dy * dy <= s.radius * s.radius;
    case 1: {  // rotated square, half-side 0.85 r
      const double c = std::cos(-s.angle), sn = std::sin(-s.angle);
      const double ux = c * dx - sn * dy;
      const double uy = sn * dx + c * dy;
      const double half = 0.85 * s.radius;
      return std::abs(ux) <= half && std::abs(uy) <= half;
    }
    default: {  // equilateral triangle, circumradius 1.15 r
      const double circ = 1.15 * s.radius;
      double vx[3], vy[3];
      for (int k = 0; k < 3; ++k) {
        const double a = s.angle + M_PI / 2.0 + 2.0 * M_PI * k / 3.0;
        vx[k] = s.cx + circ * std::cos(a);
        vy[k] = s.cy + circ * std::sin(a);
      }
      double sign = 0;
      for (int k = 0; k < 3; ++k) {
        const int k2 = (k + 1) % 3;
        const double cross = (vx[k2] - vx[k]) * (py - vy[k]) - (vy[k2] - vy[k]) * (px - vx[k]);
        if (k == 0) {
          sign = cross;
        } else if (cross * sign < 0) {
          return false;
        }
      }
      return true;
    }
  }
}

double footprint_radius(int category, double radius) {
  switch (category) {
    case 0:
      return radius;
    case 1:
      return 0.85 * radius * std::sqrt(2.0);
    default:
      return 1.15 * radius;
  }
}

ShapeFrame shape_at(const ShapeState& s, const std::vector<std::array<double, 2>>& traj, int f, int clip_length) {
  ShapeFrame out;
  out.cx = traj[f][0];
  out.cy = traj[f][1];
  out.radius = std::max(3.5, s.radius0 * (1.0 + s.scale_amp * std::sin(2.0 * M_PI * f / clip_length + s.scale_phase)));
  out.angle = s.angle + s.spin * f;
  for (int c = 0; c < 3; ++c) {
    out.color[c] = std::clamp(s.color0[c] + s.drift_dir[c] * s.drift_rate * f, 0.05, 1.0);
  }
  return out;
}

// Integrates a bouncing trajectory for every frame up front so occlusion
// screening can look at the whole clip.
std::vector<std::array<double, 2>> integrate_trajectory(const ShapeState& s, int clip_length, int h, int w, Rng& rng) {
  std::vector<std::array<double, 2>> traj(clip_length);
  const double margin = footprint_radius(s.category, s.radius0 * (1.0 + s.scale_amp)) + 1.0;
  double x = s.cx, y = s.cy, vx = s.vx, vy = s.vy;
  for (int f = 0; f < clip_length; ++f) {
    traj[f] = {x, y};
    x += vx + rng.normal(0.0, kPosJitter);
    y += vy + rng.normal(0.0, kPosJitter);
    if (x < margin) {
      x = margin + (margin - x);
      vx = -vx;
    }
    if (x > w - margin) {
      x = (w - margin) - (x - (w - margin));
      vx = -vx;
    }
    if (y < margin) {
      y = margin + (margin - y);
      vy = -vy;
    }
    if (y > h - margin) {
      y = (h - margin) - (y - (h - margin));
      vy = -vy;
    }
    x = std::clamp(x, margin, w - margin);
    y = std::clamp(y, margin, h - margin);
  }
  return traj;
}

ShapeState sample_shape(int local_id, const CorpusManifest& m, Rng& rng) {
  ShapeState s;
  s.local_id = local_id;
  s.category = rng.uniform_int(0, m.num_categories - 1);
  s.radius0 = rng.uniform(kMinRadius, kMaxRadius);
  const double margin = footprint_radius(s.category, s.radius0 * (1.0 + kScaleAmpMax)) + 2.0;
  s.cx = rng.uniform(margin, m.width - margin);
  s.cy = rng.uniform(margin, m.height - margin);
  const double speed = rng.uniform(kMinSpeed, kMaxSpeed);
  const double heading = rng.uniform(0.0, 2.0 * M_PI);
  s.vx = speed * std::cos(heading);
  s.vy = speed * std::sin(heading);
  s.scale_amp = rng.uniform(kScaleAmpMin, kScaleAmpMax);
  s.scale_phase = rng.uniform(0.0, 2.0 * M_PI);
  s.angle = rng.uniform(0.0, 2.0 * M_PI);
  s.spin = rng.uniform(-0.18, 0.18);
  for (int c = 0; c < 3; ++c) {
    s.color0[c] = rng.uniform(0.25, 1.0);
    s.drift_dir[c] = rng.uniform(-1.0, 1.0);
  }
  s.drift_rate = rng.uniform(kColorDriftMin, kColorDriftMax);
  return s;
}

bool footprints_overlap(const ShapeState& a, const std::vector<std::array<double, 2>>& ta, const ShapeState& b,
                        const std::vector<std::array<double, 2>>& tb, int clip_length) {
  const double ra = footprint_radius(a.category, a.radius0 * (1.0 + a.scale_amp));
  const double rb = footprint_radius(b.category, b.radius0 * (1.0 + b.scale_amp));
  const double lim = (ra + rb) * (ra + rb);
  for (int f = 0; f < clip_length; ++f) {
    const double dx = ta[f][0] - tb[f][0];
    const double dy = ta[f][1] - tb[f][1];
    if (dx * dx + dy * dy < lim) return true;
  }
  return false;
}

VideoClip generate_clip(const CorpusManifest& m, int clip_index) {
  Rng rng(mix_seed(m.seed, "clip:" + std::to_string(clip_index)));

  const int n_target = rng.uniform_int(m.min_instances, m.max_instances);
  std::vector<ShapeState> shapes;
  std::vector<std::vector<std::array<double, 2>>> trajs;
  for (int i = 0; i < n_target; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      ShapeState s = sample_shape(static_cast<int>(shapes.size()), m, rng);
      Rng traj_rng(mix_seed(m.seed, "traj:" + std::to_string(clip_index) + ":" + std::to_string(i) + ":" +
                                        std::to_string(attempt)));
      auto traj = integrate_trajectory(s, m.clip_length, m.height, m.width, traj_rng);
      if (!m.occlusion) {
        bool clash = false;
        for (std::size_t j = 0; j < shapes.size() && !clash; ++j) {
          clash = footprints_overlap(s, traj, shapes[j], trajs[j], m.clip_length);
        }
        if (clash) continue;
      }
      shapes.push_back(std::move(s));
      trajs.push_back(std::move(traj));
      placed = true;
    }
    // Without occlusion a crowded canvas may not fit another instance; accept fewer.
  }

  // Static textured background.
  std::array<double, 3> bg_base{};
  std::array<double, 3> bg_phase{};
  for (int c = 0; c < 3; ++c) {
    bg_base[c] = rng.uniform(0.06, 0.22);
    bg_phase[c] = rng.uniform(0.0, 2.0 * M_PI);
  }
  const double bg_fx = rng.uniform(0.5, 2.0);
  const double bg_fy = rng.uniform(0.5, 2.0);
  const double bg_amp = rng.uniform(0.02, 0.06);

  VideoClip clip;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%03d", clip_index);
  clip.clip_id = buf;
  clip.frames.resize(m.clip_length);

  for (int f = 0; f < m.clip_length; ++f) {
    Frame& frame = clip.frames[f];
    frame.time_index = f;
    frame.image.resize(m.height, m.width);

    std::vector<ShapeFrame> sf(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) sf[i] = shape_at(shapes[i], trajs[i], f, m.clip_length);

    // Draw back to front; the last drawn instance owns contested pixels.
    Eigen::ArrayXXi owner = Eigen::ArrayXXi::Constant(m.height, m.width, -1);
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
          if (inside_shape(shapes[i].category, sf[i], px, py)) owner(y, x) = static_cast<int>(i);
        }
      }
    }

    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        const int o = owner(y, x);
        for (int c = 0; c < 3; ++c) {
          double v;
          if (o < 0) {
            v = bg_base[c] + bg_amp * std::sin(2.0 * M_PI * (bg_fx * x + bg_fy * y) / m.width + bg_phase[c]);
          } else {
            const double dx = (x + 0.5 - sf[o].cx) / std::max(sf[o].radius, 1.0);
            const double dy = (y + 0.5 - sf[o].cy) / std::max(sf[o].radius, 1.0);
            const double shade = 1.0 - 0.18 * std::min(1.0, dx * dx + dy * dy);
            v = sf[o].color[c] * shade;
          }
          frame.image.ch[c](y, x) = quantize(v + rng.normal(0.0, kPixelNoise));
        }
      }
    }

    for (std::size_t i = 0; i < shapes.size(); ++i) {
      Mask mask = (owner == static_cast<int>(i)).cast<std::uint8_t>();
      auto box = tight_box(mask);
      if (!box) continue;  // fully occluded this frame
      InstanceAnnotation ann;
      ann.identity = shapes[i].local_id;  // remapped to a global id by generate_corpus
      ann.category = shapes[i].category;
      ann.box = *box;
      ann.mask = std::move(mask);
      frame.annotations.push_back(std::move(ann));
    }
  }
  return clip;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

std::optional<Box> tight_box(const Mask& mask) {
  int x0 = mask.cols(), x1 = -1, y0 = mask.rows(), y1 = -1;
  for (int y = 0; y < mask.rows(); ++y) {
    for (int x = 0; x < mask.cols(); ++x) {
      if (!mask(y, x)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return std::nullopt;
  return Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
             static_cast<double>(y1 + 1)};
}

Corpus generate_corpus(const CorpusManifest& manifest) {
  require(manifest.num_clips >= 0, "manifest: num_clips must be >= 0");
  require(manifest.clip_length >= 2, "manifest: clip_length must be >= 2");
  require(manifest.height > 0 && manifest.width > 0, "manifest: image size must be positive");
  require(manifest.num_categories >= 2 && manifest.num_categories <= 3,
          "manifest: num_categories must be 2 or 3 (circle/square/triangle)");
  require(manifest.min_instances >= 1 && manifest.max_instances >= manifest.min_instances,
          "manifest: invalid instance range");

  Corpus corpus;
  corpus.manifest = manifest;
  int next_identity = 0;
  for (int i = 0; i < manifest.num_clips; ++i) {
    VideoClip clip = generate_clip(manifest, i);
    // Remap per-clip local ids to dense global identities, in order of first use.
    std::vector<int> remap;
    for (auto& frame : clip.frames) {
      for (auto& ann : frame.annotations) {
        while (static_cast<int>(remap.size()) <= ann.identity) remap.push_back(-1);
        if (remap[ann.identity] < 0) remap[ann.identity] = next_identity++;
      }
    }
    for (auto& frame : clip.frames) {
      for (auto& ann : frame.annotations) ann.identity = remap[ann.identity];
    }
    corpus.clips.push_back(std::move(clip));
  }
  corpus.manifest.total_identities = next_identity;
  return corpus;
}

std::string rle_encode(const Mask& mask) {
  std::string out;
  std::uint64_t run = 0;
  std::uint8_t current = 0;
  for (int y = 0; y < mask.rows(); ++y) {
    for (int x = 0; x < mask.cols(); ++x) {
      const std::uint8_t v = mask(y, x) ? 1 : 0;
      if (v == current) {
        ++run;
      } else {
        out += std::to_string(run);
        out += ' ';
        current = v;
        run = 1;
      }
    }
  }
  out += std::to_string(run);
  return out;
}

Mask rle_decode(const std::string& rle, int h, int w) {
  require(h > 0 && w > 0, "rle_decode: invalid size");
  std::istringstream in(rle);
  std::vector<std::int64_t> runs;
  std::int64_t v;
  while (in >> v) {
    if (v < 0) throw std::invalid_argument("rle_decode: negative run length");
    runs.push_back(v);
  }
  if (!in.eof()) throw std::invalid_argument("rle_decode: malformed counts");
  std::int64_t total = 0;
  for (auto r : runs) total += r;
  if (total != static_cast<std::int64_t>(h) * w) {
    throw std::invalid_argument("rle_decode: run lengths sum to " + std::to_string(total) + ", expected " +
                                std::to_string(static_cast<std::int64_t>(h) * w));
  }
  Mask mask(h, w);
  std::int64_t pos = 0;
  std::uint8_t value = 0;
  for (auto r : runs) {
    for (std::int64_t k = 0; k < r; ++k) {
      mask(static_cast<int>(pos / w), static_cast<int>(pos % w)) = value;
      ++pos;
    }
    value = value ? 0 : 1;
  }
  return mask;
}

void write_ppm(const Image& image, const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.ch[c](y, x), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
}

Image read_ppm(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) {
    throw std::runtime_error("unsupported PPM: " + file.string());
  }
  in.get();  // single whitespace after header
  Image image;
  image.resize(h, w);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("truncated PPM: " + file.string());
  std::size_t i = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        image.ch[c](y, x) = buf[i++] / 255.0;
      }
    }
  }
  return image;
}

namespace {

json manifest_to_json(const CorpusManifest& m) {
  json j;
  j["num_clips"] = m.num_clips;
  j["clip_length"] = m.clip_length;
  j["height"] = m.height;
  j["width"] = m.width;
  j["num_categories"] = m.num_categories;
  j["min_instances"] = m.min_instances;
  j["max_instances"] = m.max_instances;
  j["occlusion"] = m.occlusion;
  j["total_identities"] = m.total_identities;
  j["seed"] = m.seed;
  return j;
}

CorpusManifest manifest_from_json(const json& j) {
  CorpusManifest m;
  m.num_clips = j.at("num_clips").get<int>();
  m.clip_length = j.at("clip_length").get<int>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.num_categories = j.at("num_categories").get<int>();
  m.min_instances = j.at("min_instances").get<int>();
  m.max_instances = j.at("max_instances").get<int>();
  m.occlusion = j.at("occlusion").get<bool>();
  m.total_identities = j.at("total_identities").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

}  // namespace

void write_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest.json under " + dir.string());
    out << manifest_to_json(corpus.manifest).dump(2) << "\n";
  }
  for (const auto& clip : corpus.clips) {
    const fs::path clip_dir = dir / clip.clip_id;
    fs::create_directories(clip_dir);
    json frames = json::array();
    for (const auto& frame : clip.frames) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "frame_%03d.ppm", frame.time_index);
      write_ppm(frame.image, clip_dir / buf);
      json jframe;
      jframe["time_index"] = frame.time_index;
      json instances = json::array();
      for (const auto& ann : frame.annotations) {
        json ji;
        ji["identity"] = ann.identity;
        ji["category"] = ann.category;
        ji["box"] = {static_cast<int>(ann.box.x0), static_cast<int>(ann.box.y0), static_cast<int>(ann.box.x1),
                     static_cast<int>(ann.box.y1)};
        ji["rle"] = rle_encode(ann.mask);
        ji["height"] = static_cast<int>(ann.mask.rows());
        ji["width"] = static_cast<int>(ann.mask.cols());
        instances.push_back(std::move(ji));
      }
      jframe["instances"] = std::move(instances);
      frames.push_back(std::move(jframe));
    }
    std::ofstream out(clip_dir / "annotations.json");
    if (!out) throw std::runtime_error("cannot write annotations for " + clip.clip_id);
    out << frames.dump(2) << "\n";
  }
}

Corpus read_corpus(const fs::path& dir) {
  Corpus corpus;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing manifest.json under " + dir.string());
    json j;
    try {
      in >> j;
      corpus.manifest = manifest_from_json(j);
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed manifest.json: " + std::string(e.what()));
    }
  }
  for (int i = 0; i < corpus.manifest.num_clips; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%03d", i);
    const std::string clip_id = buf;
    const fs::path clip_dir = dir / clip_id;
    VideoClip clip;
    clip.clip_id = clip_id;
    std::ifstream in(clip_dir / "annotations.json");
    if (!in) throw std::runtime_error(clip_id + ": missing annotations.json");
    json frames;
    try {
      in >> frames;
    } catch (const json::exception& e) {
      throw std::runtime_error(clip_id + ": malformed annotations.json: " + e.what());
    }
    for (const auto& jframe : frames) {
      Frame frame;
      frame.time_index = jframe.at("time_index").get<int>();
      char fbuf[32];
      std::snprintf(fbuf, sizeof(fbuf), "frame_%03d.ppm", frame.time_index);
      const fs::path img = clip_dir / fbuf;
      if (!fs::exists(img)) throw std::runtime_error(clip_id + ": missing frame file " + std::string(fbuf));
      frame.image = read_ppm(img);
      for (const auto& ji : jframe.at("instances")) {
        InstanceAnnotation ann;
        ann.identity = ji.at("identity").get<int>();
        ann.category = ji.at("category").get<int>();
        const auto& b = ji.at("box");
        ann.box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
        ann.mask = rle_decode(ji.at("rle").get<std::string>(), ji.at("height").get<int>(), ji.at("width").get<int>());
        frame.annotations.push_back(std::move(ann));
      }
      clip.frames.push_back(std::move(frame));
    }
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

SampledPair sample_frame_pair(const VideoClip& clip, int interval, Rng& rng) {
  if (clip.length() < 1) throw std::invalid_argument("sample_frame_pair: empty clip");
  if (interval < 1) throw std::invalid_argument("sample_frame_pair: interval must be >= 1");
  const int len = clip.length();
  const int t = rng.uniform_int(0, len - 1);
  int lo = -t, hi = len - 1 - t;
  if (interval != kInfiniteInterval) {
    lo = std::max(lo, -interval);
    hi = std::min(hi, interval);
  }
  const int delta = rng.uniform_int(lo, hi);
  SampledPair pair;
  pair.t = t;
  pair.t_delta = t + delta;
  pair.frame_t = &clip.frames[t];
  pair.frame_t_delta = &clip.frames[t + delta];
  return pair;
}

bool operator==(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) return false;
  for (int c = 0; c < 3; ++c) {
    if ((a.ch[c] != b.ch[c]).any()) return false;
  }
  return true;
}

bool operator==(const CorpusManifest& a, const CorpusManifest& b) {
  return a.num_clips == b.num_clips && a.clip_length == b.clip_length && a.height == b.height && a.width == b.width &&
         a.num_categories == b.num_categories && a.min_instances == b.min_instances &&
         a.max_instances == b.max_instances && a.occlusion == b.occlusion &&
         a.total_identities == b.total_identities && a.seed == b.seed;
}

bool corpus_equal(const Corpus& a, const Corpus& b) {
  if (!(a.manifest == b.manifest) || a.clips.size() != b.clips.size()) return false;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    const auto& ca = a.clips[i];
    const auto& cb = b.clips[i];
    if (ca.clip_id != cb.clip_id || ca.frames.size() != cb.frames.size()) return false;
    for (std::size_t f = 0; f < ca.frames.size(); ++f) {
      const auto& fa = ca.frames[f];
      const auto& fb = cb.frames[f];
      if (fa.time_index != fb.time_index || !(fa.image == fb.image)) return false;
      if (fa.annotations.size() != fb.annotations.size()) return false;
      for (std::size_t k = 0; k < fa.annotations.size(); ++k) {
        const auto& aa = fa.annotations[k];
        const auto& ab = fb.annotations[k];
        if (aa.identity != ab.identity || aa.category != ab.category) return false;
        if (aa.box.x0 != ab.box.x0 || aa.box.y0 != ab.box.y0 || aa.box.x1 != ab.box.x1 || aa.box.y1 != ab.box.y1)
          return false;
        if (aa.mask.rows() != ab.mask.rows() || aa.mask.cols() != ab.mask.cols()) return false;
        if ((aa.mask != ab.mask).any()) return false;
      }
    }
  }
  return true;
}

}  // namespace minivis::syndata
