#include "cvcorr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cvcorr {

namespace {

// Counter-based draws: stream k = 0,1,2,... under a fixed seed.
struct HashStream {
  uint64_t seed;
  uint64_t k = 0;
  double unit() { return hash_unit(hash_combine(seed, ++k)); }
  double range(double lo, double hi) { return lo + (hi - lo) * unit(); }
  double symmetric(double r) { return r * (2.0 * unit() - 1.0); }
  int upto(int n) {  // 0..n-1
    return static_cast<int>(hash_combine(seed, ++k) % static_cast<uint64_t>(n));
  }
  double normal() {
    const uint64_t h1 = hash_combine(seed, ++k);
    const uint64_t h2 = hash_combine(seed, ++k);
    return hash_normal(h1, h2);
  }
};

// Per-shape constants precomputed once per render.
struct PreparedShape {
  const ObjectSpec* o;
  double cos_a, sin_a;
};

PreparedShape prepare(const ObjectSpec& o) {
  return PreparedShape{&o, std::cos(o.angle), std::sin(o.angle)};
}

bool inside(const PreparedShape& p, double wx, double wy, double* lx_out = nullptr,
            double* ly_out = nullptr) {
  const ObjectSpec& o = *p.o;
  const double dx = wx - o.cx, dy = wy - o.cy;
  const double lx = p.cos_a * dx + p.sin_a * dy;
  const double ly = -p.sin_a * dx + p.cos_a * dy;
  if (lx_out) *lx_out = lx;
  if (ly_out) *ly_out = ly;
  switch (o.kind) {
    case ShapeKind::rectangle:
      return std::abs(lx) <= o.sx && std::abs(ly) <= o.sy;
    case ShapeKind::ellipse: {
      const double ex = lx / o.sx, ey = ly / o.sy;
      return ex * ex + ey * ey <= 1.0;
    }
    case ShapeKind::triangle: {
      // isoceles: apex (0,-sy), base corners (+-sx, +sy)
      if (ly > o.sy || ly < -o.sy) return false;
      const double half_width = o.sx * (ly + o.sy) / (2.0 * o.sy);
      return std::abs(lx) <= half_width;
    }
  }
  return false;
}

// Texture pattern in object-local coordinates, so it rides with the
// object across views and stays a stable correspondence cue.
double texture_factor(const ObjectSpec& o, double lx, double ly) {
  switch (o.texture) {
    case 1:
      return 0.78 + 0.22 * std::sin(3.0 * M_PI * lx / o.sx);
    case 2:
      return (std::sin(2.5 * M_PI * lx / o.sx) * std::sin(2.5 * M_PI * ly / o.sy) >= 0.0)
                 ? 1.0
                 : 0.62;
    default:
      return 1.0;
  }
}

void background_color(const Scene& scene, double wx, double wy, double* rgb) {
  // muted per-scene base tone
  for (int ch = 0; ch < 3; ++ch)
    rgb[ch] = 0.30 + 0.25 * hash_unit(hash_combine(scene.rng_seed, 0xb6 + ch));
  switch (scene.background_texture) {
    case 1:
      // horizontal gradient, bounded so far-field pixels never saturate
      for (int ch = 0; ch < 3; ++ch) rgb[ch] += 0.18 * std::clamp(wx - 0.5, -1.0, 1.0);
      break;
    case 2: {
      const double f = (std::sin(6.0 * M_PI * wx) * std::sin(6.0 * M_PI * wy) >= 0.0) ? 0.05
                                                                                      : -0.05;
      for (int ch = 0; ch < 3; ++ch) rgb[ch] += f;
      break;
    }
    default:
      for (int ch = 0; ch < 3; ++ch) rgb[ch] += 0.10 * std::clamp(wx + wy - 1.0, -1.5, 1.5);
      break;
  }
}

ObjectSpec sample_object(HashStream& hs) {
  ObjectSpec o;
  o.kind = static_cast<ShapeKind>(hs.upto(3));
  o.cx = hs.range(0.18, 0.82);
  o.cy = hs.range(0.18, 0.82);
  const double base = hs.range(0.10, 0.20);
  const double aspect = hs.range(0.75, 1.25);
  o.sx = base * std::sqrt(aspect);
  o.sy = base / std::sqrt(aspect);
  o.angle = hs.range(0.0, M_PI);
  o.texture = hs.upto(3);
  for (int ch = 0; ch < 3; ++ch) o.color[ch] = hs.range(0.25, 0.95);
  return o;
}

bool invisible_injected(const DataConfig& cfg, int index) {
  const double r = cfg.invisible_rate;
  if (r <= 0.0) return false;
  return std::floor((index + 1) * r + 1e-9) > std::floor(index * r + 1e-9);
}

Scene drift_scene(const Scene& scene, int offset, double sigma, uint64_t seed) {
  Scene out = scene;
  if (offset <= 0 || sigma <= 0.0) return out;
  const double s = sigma * offset;
  HashStream hs{seed};
  for (auto& o : out.objects) {
    o.cx += s * hs.normal();
    o.cy += s * hs.normal();
  }
  for (auto& o : out.occluders) {
    o.cx += s * hs.normal();
    o.cy += s * hs.normal();
  }
  return out;
}

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw FormatError(path + ": truncated header");
  return v;
}

void pack_mask(const Tensor<float>& mask, std::vector<uint8_t>& bytes) {
  const int64_t n = mask.size();
  bytes.assign(static_cast<size_t>((n + 7) / 8), 0);
  for (int64_t i = 0; i < n; ++i)
    if (mask.ptr()[i] != 0.0f) bytes[static_cast<size_t>(i >> 3)] |= uint8_t(1u << (i & 7));
}

void unpack_mask(const std::vector<uint8_t>& bytes, Tensor<float>& mask) {
  const int64_t n = mask.size();
  for (int64_t i = 0; i < n; ++i)
    mask.ptr()[i] = (bytes[static_cast<size_t>(i >> 3)] >> (i & 7)) & 1u ? 1.0f : 0.0f;
}

}  // namespace

double shape_area(const ObjectSpec& o) {
  switch (o.kind) {
    case ShapeKind::rectangle: return 4.0 * o.sx * o.sy;
    case ShapeKind::ellipse: return M_PI * o.sx * o.sy;
    case ShapeKind::triangle: return 2.0 * o.sx * o.sy;
  }
  return 0.0;
}

double shape_perimeter(const ObjectSpec& o) {
  switch (o.kind) {
    case ShapeKind::rectangle:
      return 4.0 * (o.sx + o.sy);
    case ShapeKind::ellipse: {
      const double a = o.sx, b = o.sy;  // Ramanujan
      return M_PI * (3.0 * (a + b) - std::sqrt((3.0 * a + b) * (a + 3.0 * b)));
    }
    case ShapeKind::triangle:
      return 2.0 * o.sx + 2.0 * std::sqrt(o.sx * o.sx + 4.0 * o.sy * o.sy);
  }
  return 0.0;
}

DataConfig DataConfig::from_ini(const Ini& ini) {
  DataConfig c;
  const std::string s = "data";
  c.height = static_cast<int>(ini.get_int(s, "height", c.height));
  c.width = static_cast<int>(ini.get_int(s, "width", c.width));
  c.count = static_cast<int>(ini.get_int(s, "count", c.count));
  c.seed = static_cast<uint64_t>(ini.get_int(s, "seed", static_cast<int64_t>(c.seed)));
  c.difficulty = ini.get(s, "difficulty", c.difficulty);
  c.cross_ratio = ini.get_double(s, "cross_ratio", c.cross_ratio);
  c.invisible_rate = ini.get_double(s, "invisible_rate", c.invisible_rate);
  c.max_temporal_offset =
      static_cast<int>(ini.get_int(s, "max_temporal_offset", c.max_temporal_offset));
  c.drift_sigma = ini.get_double(s, "drift_sigma", c.drift_sigma);
  c.ego_scale_min = ini.get_double(s, "ego_scale_min", c.ego_scale_min);
  c.ego_scale_max = ini.get_double(s, "ego_scale_max", c.ego_scale_max);
  c.exo_scale_min = ini.get_double(s, "exo_scale_min", c.exo_scale_min);
  c.exo_scale_max = ini.get_double(s, "exo_scale_max", c.exo_scale_max);
  c.rot_max = ini.get_double(s, "rot_max", c.rot_max);
  c.aniso = ini.get_double(s, "aniso", c.aniso);
  c.focus_jitter_ego = ini.get_double(s, "focus_jitter_ego", c.focus_jitter_ego);
  c.focus_jitter_exo = ini.get_double(s, "focus_jitter_exo", c.focus_jitter_exo);
  c.fov_min = ini.get_double(s, "fov_min", c.fov_min);
  c.fov_max = ini.get_double(s, "fov_max", c.fov_max);
  c.brightness_range = ini.get_double(s, "brightness_range", c.brightness_range);
  c.contrast_min = ini.get_double(s, "contrast_min", c.contrast_min);
  c.contrast_max = ini.get_double(s, "contrast_max", c.contrast_max);
  c.noise_max = ini.get_double(s, "noise_max", c.noise_max);
  c.shift = ini.get_double(s, "shift", c.shift);
  c.validate();
  return c;
}

void DataConfig::validate() const {
  if (height < 8 || width < 8) throw ConfigError("data: image size must be at least 8x8");
  if (count < 0) throw ConfigError("data: negative sample count");
  if (cross_ratio < 0.0 || cross_ratio > 1.0) throw ConfigError("data: cross_ratio outside [0,1]");
  if (invisible_rate < 0.0 || invisible_rate > 1.0)
    throw ConfigError("data: invisible_rate outside [0,1]");
  if (max_temporal_offset < 0) throw ConfigError("data: negative max_temporal_offset");
  if (drift_sigma < 0.0) throw ConfigError("data: negative drift_sigma");
  if (difficulty != "easy" && difficulty != "medium" && difficulty != "hard")
    throw ConfigError("data: difficulty must be easy|medium|hard, got '" + difficulty + "'");
  if (exo_scale_min <= 0.0 || ego_scale_min <= 0.0)
    throw ConfigError("data: view scales must be positive");
  if (ego_scale_min <= exo_scale_max)
    throw ConfigError("data: ego scale range must sit above the exo range (close-up views)");
  if (shift < 0.0 || shift > 1.0) throw ConfigError("data: shift outside [0,1]");
}

Scene generate_scene(uint64_t seed, const std::string& difficulty) {
  HashStream hs{splitmix64(seed ^ 0x5ce9e)};
  Scene scene;
  scene.rng_seed = seed;
  int n_obj, n_occ;
  bool force_distractor = false;
  if (difficulty == "easy") {
    n_obj = 1;
    n_occ = 0;
  } else if (difficulty == "medium") {
    n_obj = 2 + hs.upto(3);  // 2..4
    n_occ = hs.upto(3);      // 0..2
  } else if (difficulty == "hard") {
    n_obj = 3 + hs.upto(4);  // 3..6
    n_occ = 1 + hs.upto(3);  // 1..3
    force_distractor = true;
  } else {
    throw ConfigError("generate_scene: unknown difficulty '" + difficulty + "'");
  }

  scene.objects.reserve(static_cast<size_t>(n_obj));
  for (int i = 0; i < n_obj; ++i) scene.objects.push_back(sample_object(hs));
  scene.query_index = hs.upto(n_obj);

  if (force_distractor) {
    // a look-alike: same shape and texture, close color and size. The color
    // offset must clear the photometric noise floor (pixel noise + brightness
    // jitter), otherwise the pair is indistinguishable in principle and the
    // conditioning task degenerates to a coin flip.
    const ObjectSpec& q = scene.objects[static_cast<size_t>(scene.query_index)];
    const int di = (scene.query_index + 1) % n_obj;
    ObjectSpec& d = scene.objects[static_cast<size_t>(di)];
    d.kind = q.kind;
    d.texture = q.texture;
    const double grow = hs.range(0.85, 1.15);
    d.sx = q.sx * grow;
    d.sy = q.sy * grow;
    for (int ch = 0; ch < 3; ++ch) {
      const double off = (hs.upto(2) == 0 ? -1.0 : 1.0) * hs.range(0.05, 0.12);
      d.color[ch] = std::clamp(q.color[ch] + off, 0.0, 1.0);
    }
    for (int tries = 0; tries < 50; ++tries) {
      const double dx = d.cx - q.cx, dy = d.cy - q.cy;
      if (dx * dx + dy * dy >= 0.22 * 0.22) break;
      d.cx = hs.range(0.18, 0.82);
      d.cy = hs.range(0.18, 0.82);
    }
  }

  scene.occluders.reserve(static_cast<size_t>(n_occ));
  for (int i = 0; i < n_occ; ++i) {
    ObjectSpec o;
    o.kind = hs.unit() < 0.5 ? ShapeKind::rectangle : ShapeKind::ellipse;
    o.cx = hs.range(0.10, 0.90);
    o.cy = hs.range(0.10, 0.90);
    o.sx = hs.range(0.05, 0.13);
    o.sy = hs.range(0.02, 0.06);
    o.angle = hs.range(0.0, M_PI);
    o.texture = 0;
    for (int ch = 0; ch < 3; ++ch) o.color[ch] = hs.range(0.10, 0.55);
    scene.occluders.push_back(o);
  }
  scene.background_texture = hs.upto(3);
  return scene;
}

ViewTransform sample_view(const DataConfig& cfg, bool ego, double focus_x, double focus_y,
                          uint64_t seed) {
  HashStream hs{splitmix64(seed ^ 0x71e04)};
  const double s = cfg.shift;
  double lo, hi;
  if (ego) {
    lo = cfg.ego_scale_min * (1.0 + 0.15 * s);
    hi = cfg.ego_scale_max * (1.0 + 0.15 * s);
  } else {
    lo = cfg.exo_scale_min * (1.0 - 0.20 * s);
    hi = cfg.exo_scale_max * (1.0 - 0.20 * s);
  }
  const double scale = hs.range(lo, hi);
  const double ax = scale * (1.0 + hs.symmetric(cfg.aniso));
  const double ay = scale * (1.0 + hs.symmetric(cfg.aniso));
  const double theta = hs.symmetric(cfg.rot_max);
  const double ca = std::cos(theta), sa = std::sin(theta);

  ViewTransform v;
  v.ego = ego;
  // R(theta) * diag(ax, ay)
  v.a00 = ca * ax;
  v.a01 = -sa * ay;
  v.a10 = sa * ax;
  v.a11 = ca * ay;
  const double jitter = ego ? cfg.focus_jitter_ego : cfg.focus_jitter_exo;
  const double fx = focus_x + hs.symmetric(jitter);
  const double fy = focus_y + hs.symmetric(jitter);
  v.tx = 0.5 - (v.a00 * fx + v.a01 * fy);
  v.ty = 0.5 - (v.a10 * fx + v.a11 * fy);
  v.brightness = hs.symmetric(cfg.brightness_range) + 0.22 * s;
  v.contrast = hs.range(cfg.contrast_min, cfg.contrast_max) * (1.0 - 0.25 * s);
  v.noise_sigma = cfg.noise_max * hs.unit() + 0.05 * s;
  v.fov_radius = hs.range(cfg.fov_min, cfg.fov_max);
  v.noise_seed = hash_combine(seed, 0xab);
  if (std::abs(v.det()) <= 1e-6)
    throw ConfigError("sample_view: degenerate transform (|det| <= 1e-6)");
  return v;
}

std::vector<Direction> direction_mix(const DataConfig& cfg) {
  const int n = cfg.count;
  const int cross = static_cast<int>(std::llround(cfg.cross_ratio * n));
  const int same = n - cross;
  const int e2x = cross - cross / 2;
  const int x2e = cross / 2;
  const int e2e = same - same / 2;
  const int x2x = same / 2;
  std::vector<Direction> dirs;
  dirs.reserve(static_cast<size_t>(n));
  dirs.insert(dirs.end(), static_cast<size_t>(e2x), Direction::ego2exo);
  dirs.insert(dirs.end(), static_cast<size_t>(x2e), Direction::exo2ego);
  dirs.insert(dirs.end(), static_cast<size_t>(e2e), Direction::ego2ego);
  dirs.insert(dirs.end(), static_cast<size_t>(x2x), Direction::exo2exo);
  // Fisher-Yates with a counter hash (fully specified, unlike std::shuffle)
  for (int i = n - 1; i > 0; --i) {
    const uint64_t h = hash_combine(cfg.seed ^ 0xd19ec7, static_cast<uint64_t>(i));
    std::swap(dirs[static_cast<size_t>(i)], dirs[static_cast<size_t>(h % (i + 1))]);
  }
  return dirs;
}

void render_view(const Scene& scene, const ViewTransform& view, int H, int W,
                 Tensor<float>& image, Tensor<float>& query_mask, bool& visible) {
  const double det = view.det();
  if (std::abs(det) <= 1e-6) throw ConfigError("render_view: degenerate transform");
  const double i00 = view.a11 / det, i01 = -view.a01 / det;
  const double i10 = -view.a10 / det, i11 = view.a00 / det;

  image = Tensor<float>({3, H, W});
  query_mask = Tensor<float>({H, W});
  visible = false;

  std::vector<PreparedShape> objs, occs;
  objs.reserve(scene.objects.size());
  for (const auto& o : scene.objects) objs.push_back(prepare(o));
  occs.reserve(scene.occluders.size());
  for (const auto& o : scene.occluders) occs.push_back(prepare(o));

  const double fov2 = view.fov_radius * view.fov_radius;
  const bool noisy = view.noise_sigma > 0.0;
  const int64_t plane = static_cast<int64_t>(H) * W;

  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const int64_t pix = static_cast<int64_t>(r) * W + c;
      const double ux = (c + 0.5) / W, uy = (r + 0.5) / H;
      if (view.ego) {
        const double ddx = ux - 0.5, ddy = uy - 0.5;
        if (ddx * ddx + ddy * ddy > fov2) continue;  // image and mask stay exactly 0
      }
      const double dx = ux - view.tx, dy = uy - view.ty;
      const double wx = i00 * dx + i01 * dy;
      const double wy = i10 * dx + i11 * dy;

      int owner = -1;  // -1 background, -2 occluder, else object index
      double lx = 0, ly = 0;
      for (size_t i = 0; i < objs.size(); ++i) {
        double tx2, ty2;
        if (inside(objs[i], wx, wy, &tx2, &ty2)) {
          owner = static_cast<int>(i);
          lx = tx2;
          ly = ty2;
        }
      }
      const ObjectSpec* occluder = nullptr;
      for (const auto& po : occs) {
        double tx2, ty2;
        if (inside(po, wx, wy, &tx2, &ty2)) {
          occluder = po.o;
          lx = tx2;
          ly = ty2;
        }
      }

      double rgb[3];
      if (occluder) {
        const double f = texture_factor(*occluder, lx, ly);
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = occluder->color[ch] * f;
      } else if (owner >= 0) {
        const ObjectSpec& o = scene.objects[static_cast<size_t>(owner)];
        const double f = texture_factor(o, lx, ly);
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = o.color[ch] * f;
      } else {
        background_color(scene, wx, wy, rgb);
      }

      for (int ch = 0; ch < 3; ++ch) {
        double v = view.contrast * (rgb[ch] - 0.5) + 0.5 + view.brightness;
        if (noisy) {
          const uint64_t idx = static_cast<uint64_t>(pix * 3 + ch);
          v += view.noise_sigma *
               hash_normal(hash_combine(view.noise_seed, 2 * idx),
                           hash_combine(view.noise_seed, 2 * idx + 1));
        }
        image.ptr()[ch * plane + pix] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      if (owner == scene.query_index && !occluder) {
        query_mask.ptr()[pix] = 1.0f;
        visible = true;
      }
    }
  }
}

SamplePair make_pair(const Scene& scene, const ViewTransform& src_view,
                     const ViewTransform& tgt_view, Direction direction, int temporal_offset,
                     uint64_t seed, const DataConfig& cfg) {
  SamplePair p;
  p.direction = direction;
  p.temporal_offset = temporal_offset;
  bool src_visible = false;
  render_view(scene, src_view, cfg.height, cfg.width, p.source_image, p.source_mask, src_visible);
  const Scene target_scene =
      drift_scene(scene, temporal_offset, cfg.drift_sigma, hash_combine(seed, 0xd41f7));
  render_view(target_scene, tgt_view, cfg.height, cfg.width, p.target_image, p.target_mask,
              p.visible);
  return p;
}

SamplePair make_sample(const DataConfig& cfg, int index, Direction direction) {
  const uint64_t base = hash_combine(cfg.seed, static_cast<uint64_t>(index));
  Scene scene = generate_scene(hash_combine(base, 1), cfg.difficulty);
  const int offset =
      cfg.max_temporal_offset > 0
          ? static_cast<int>(hash_combine(base, 2) %
                             static_cast<uint64_t>(cfg.max_temporal_offset + 1))
          : 0;

  const bool src_ego = direction == Direction::ego2exo || direction == Direction::ego2ego;
  const bool tgt_ego = direction == Direction::exo2ego || direction == Direction::ego2ego;

  SamplePair p;
  p.direction = direction;
  p.temporal_offset = offset;

  // Source: always from the undrifted scene; the query must be visible, so
  // retry the view draw (rare: full occlusion or out-of-frame jitter).
  const ObjectSpec& q = scene.objects[static_cast<size_t>(scene.query_index)];
  const double sfx = src_ego ? q.cx : 0.5;
  const double sfy = src_ego ? q.cy : 0.5;
  bool src_visible = false;
  for (int attempt = 0; attempt < 20 && !src_visible; ++attempt) {
    const ViewTransform sv = sample_view(cfg, src_ego, sfx, sfy, hash_combine(base, 10 + attempt));
    render_view(scene, sv, cfg.height, cfg.width, p.source_image, p.source_mask, src_visible);
  }
  if (!src_visible) {
    // deterministic last resort: drop occluders for this sample
    Scene bare = scene;
    bare.occluders.clear();
    const ViewTransform sv = sample_view(cfg, src_ego, sfx, sfy, hash_combine(base, 40));
    render_view(bare, sv, cfg.height, cfg.width, p.source_image, p.source_mask, src_visible);
    scene = bare;
  }

  // Target: drift first (the camera focus tracks the drifted query), then
  // optionally relocate the query out of the world to inject an invisible
  // sample for the CLS objective.
  Scene target_scene = drift_scene(scene, offset, cfg.drift_sigma, hash_combine(base, 3));
  const ObjectSpec& qd = target_scene.objects[static_cast<size_t>(target_scene.query_index)];
  const ViewTransform tv =
      sample_view(cfg, tgt_ego, tgt_ego ? qd.cx : 0.5, tgt_ego ? qd.cy : 0.5,
                  hash_combine(base, 50));
  if (invisible_injected(cfg, index)) {
    ObjectSpec& tq = target_scene.objects[static_cast<size_t>(target_scene.query_index)];
    tq.cx = 7.0;
    tq.cy = 7.0;
  }
  render_view(target_scene, tv, cfg.height, cfg.width, p.target_image, p.target_mask, p.visible);
  return p;
}

void build_dataset(const DataConfig& cfg, const std::string& path) {
  cfg.validate();
  const std::vector<Direction> dirs = direction_mix(cfg);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open dataset file for writing: " + path);
  out.write("CCVP", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<uint32_t>(cfg.height));
  write_u32(out, static_cast<uint32_t>(cfg.width));
  write_u32(out, static_cast<uint32_t>(cfg.count));

  std::vector<uint8_t> bits;
  for (int i = 0; i < cfg.count; ++i) {
    const SamplePair p = make_sample(cfg, i, dirs[static_cast<size_t>(i)]);
    const uint8_t head[4] = {static_cast<uint8_t>(p.direction),
                             static_cast<uint8_t>(p.visible ? 1 : 0), 0, 0};
    out.write(reinterpret_cast<const char*>(head), 4);
    const int32_t off = p.temporal_offset;
    out.write(reinterpret_cast<const char*>(&off), 4);
    out.write(reinterpret_cast<const char*>(p.source_image.ptr()),
              static_cast<std::streamsize>(p.source_image.size() * sizeof(float)));
    pack_mask(p.source_mask, bits);
    out.write(reinterpret_cast<const char*>(bits.data()),
              static_cast<std::streamsize>(bits.size()));
    out.write(reinterpret_cast<const char*>(p.target_image.ptr()),
              static_cast<std::streamsize>(p.target_image.size() * sizeof(float)));
    pack_mask(p.target_mask, bits);
    out.write(reinterpret_cast<const char*>(bits.data()),
              static_cast<std::streamsize>(bits.size()));
  }
  out.flush();
  if (!out) throw FormatError("write failed: " + path);
}

DatasetReader::DatasetReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw FormatError("cannot open dataset file: " + path);
  char magic[4] = {};
  in_.read(magic, 4);
  if (!in_ || std::memcmp(magic, "CCVP", 4) != 0)
    throw FormatError(path + ": bad magic (not a dataset file)");
  hdr_.version = read_u32(in_, path_);
  if (hdr_.version != 1)
    throw FormatError(path + ": unsupported dataset version " + std::to_string(hdr_.version));
  hdr_.height = read_u32(in_, path_);
  hdr_.width = read_u32(in_, path_);
  hdr_.count = read_u32(in_, path_);
  if (hdr_.height == 0 || hdr_.width == 0 || hdr_.height > 16384 || hdr_.width > 16384)
    throw FormatError(path + ": implausible image size in header");
}

bool DatasetReader::next(SamplePair& out) {
  if (read_ >= hdr_.count) return false;
  const int H = static_cast<int>(hdr_.height), W = static_cast<int>(hdr_.width);
  uint8_t head[4];
  in_.read(reinterpret_cast<char*>(head), 4);
  int32_t off = 0;
  in_.read(reinterpret_cast<char*>(&off), 4);
  if (!in_) throw FormatError(path_ + ": truncated record " + std::to_string(read_));
  if (head[0] > 3) throw FormatError(path_ + ": invalid direction tag");
  out.direction = static_cast<Direction>(head[0]);
  out.visible = head[1] != 0;
  out.temporal_offset = off;

  out.source_image = Tensor<float>({3, H, W});
  out.source_mask = Tensor<float>({H, W});
  out.target_image = Tensor<float>({3, H, W});
  out.target_mask = Tensor<float>({H, W});
  std::vector<uint8_t> bits(static_cast<size_t>((static_cast<int64_t>(H) * W + 7) / 8));

  in_.read(reinterpret_cast<char*>(out.source_image.ptr()),
           static_cast<std::streamsize>(out.source_image.size() * sizeof(float)));
  in_.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!in_) throw FormatError(path_ + ": truncated record " + std::to_string(read_));
  unpack_mask(bits, out.source_mask);
  in_.read(reinterpret_cast<char*>(out.target_image.ptr()),
           static_cast<std::streamsize>(out.target_image.size() * sizeof(float)));
  in_.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!in_) throw FormatError(path_ + ": truncated record " + std::to_string(read_));
  unpack_mask(bits, out.target_mask);
  ++read_;
  return true;
}

void DatasetReader::reset() {
  in_.clear();
  in_.seekg(20, std::ios::beg);  // magic + 4 header words
  read_ = 0;
}

std::vector<SamplePair> load_dataset(const std::string& path) {
  DatasetReader reader(path);
  std::vector<SamplePair> out;
  out.reserve(reader.header().count);
  SamplePair p;
  while (reader.next(p)) out.push_back(p);
  return out;
}

}  // namespace cvcorr
