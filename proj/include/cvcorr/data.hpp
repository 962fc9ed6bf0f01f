#pragma once

// Synthetic paired-view correspondence data.
//
// A Scene lives in the unit square in world coordinates: a handful of
// textured shapes, one of which is the designated query object, plus
// occluders drawn on top. A ViewTransform is an invertible 2x3 affine
// from world to unit image coordinates with photometric parameters; ego
// views are close-up (larger scale) and carry a circular field of view,
// exo views are wide. Rendering is per-pixel inverse mapping, so masks
// are exact rasterizations and the area oracle is analytic.
//
// Everything is pure in (config, seed): sample i derives all of its
// randomness from counter hashes, and a dataset builds byte-identically
// on every run.
//
// Dataset file ("CCVP"): header {magic, version, H, W, count}, then per
// sample {direction u8, visible u8, pad u16, temporal_offset i32,
// source image f32[3HW], source mask packed bits, target image, target
// mask}. Little-endian throughout; round trips are bit-exact.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cvcorr/config.hpp"
#include "cvcorr/tensor.hpp"

namespace cvcorr {

enum class Direction : uint8_t { ego2exo = 0, exo2ego = 1, ego2ego = 2, exo2exo = 3 };

inline const char* direction_name(Direction d) {
  switch (d) {
    case Direction::ego2exo: return "ego2exo";
    case Direction::exo2ego: return "exo2ego";
    case Direction::ego2ego: return "ego2ego";
    default: return "exo2exo";
  }
}
inline bool is_cross_view(Direction d) {
  return d == Direction::ego2exo || d == Direction::exo2ego;
}

enum class ShapeKind : uint8_t { rectangle = 0, ellipse = 1, triangle = 2 };

struct ObjectSpec {
  ShapeKind kind = ShapeKind::rectangle;
  double cx = 0.5, cy = 0.5;  // world center
  double sx = 0.1, sy = 0.1;  // half extents
  double angle = 0.0;         // local rotation, radians
  int texture = 0;            // 0 solid, 1 stripes, 2 checker
  double color[3] = {0.5, 0.5, 0.5};
};

struct Scene {
  uint64_t rng_seed = 0;
  std::vector<ObjectSpec> objects;  // draw order: later objects on top
  int query_index = 0;
  std::vector<ObjectSpec> occluders;  // always on top of objects
  int background_texture = 0;
};

struct ViewTransform {
  bool ego = false;
  double a00 = 1, a01 = 0, a10 = 0, a11 = 1;  // linear part, world -> unit image
  double tx = 0, ty = 0;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  double fov_radius = 0.5;  // only used when ego
  uint64_t noise_seed = 0;

  double det() const { return a00 * a11 - a01 * a10; }
};

struct SamplePair {
  Tensor<float> source_image;  // [3,H,W] in [0,1]
  Tensor<float> source_mask;   // [H,W] in {0,1}
  Tensor<float> target_image;
  Tensor<float> target_mask;
  bool visible = true;
  Direction direction = Direction::ego2exo;
  int temporal_offset = 0;
};

struct DataConfig {
  int height = 64, width = 64;
  int count = 2000;
  uint64_t seed = 1;
  std::string difficulty = "medium";  // easy | medium | hard
  double cross_ratio = 0.8;           // fraction of cross-view pairs
  double invisible_rate = 0.1;        // injected invisible-target fraction
  int max_temporal_offset = 3;        // 0 disables relaxed temporal alignment
  double drift_sigma = 0.015;         // world-units translation per frame offset

  // view sampling ranges (ego close-up, exo wide; ranges disjoint by default)
  double ego_scale_min = 1.4, ego_scale_max = 2.2;
  double exo_scale_min = 0.7, exo_scale_max = 1.1;
  double rot_max = 0.5;      // radians, +-
  double aniso = 0.12;       // relative axis-scale wobble, +-
  double focus_jitter_ego = 0.12;
  double focus_jitter_exo = 0.12;
  double fov_min = 0.42, fov_max = 0.50;
  double brightness_range = 0.08;  // +-
  double contrast_min = 0.9, contrast_max = 1.1;
  double noise_max = 0.02;

  // distribution-shift severity in [0,1] for held-out adaptation splits:
  // brightens, flattens contrast, adds noise, shrinks exo scale
  double shift = 0.0;

  static DataConfig from_ini(const Ini& ini);
  void validate() const;  // throws ConfigError
};

// --- generation -------------------------------------------------------------

Scene generate_scene(uint64_t seed, const std::string& difficulty);

// Deterministic view sample. `focus` is the world point mapped to image
// center (before jitter); pass the query center for ego views.
ViewTransform sample_view(const DataConfig& cfg, bool ego, double focus_x, double focus_y,
                          uint64_t seed);

// Exact per-direction counts for a dataset, in on-disk sample order.
std::vector<Direction> direction_mix(const DataConfig& cfg);

void render_view(const Scene& scene, const ViewTransform& view, int H, int W,
                 Tensor<float>& image, Tensor<float>& query_mask, bool& visible);

// Low-level pairing with explicit transforms (temporal drift applied to the
// target render when offset > 0).
SamplePair make_pair(const Scene& scene, const ViewTransform& src_view,
                     const ViewTransform& tgt_view, Direction direction, int temporal_offset,
                     uint64_t seed, const DataConfig& cfg);

// Full pipeline for dataset index i: scene, views, drift, invisible
// injection. Pure in (cfg, i, direction).
SamplePair make_sample(const DataConfig& cfg, int index, Direction direction);

// Analytic world-unit oracles for the area property.
double shape_area(const ObjectSpec& o);
double shape_perimeter(const ObjectSpec& o);

// --- serialization ----------------------------------------------------------

struct DatasetHeader {
  uint32_t version = 1;
  uint32_t height = 0, width = 0;
  uint32_t count = 0;
};

void build_dataset(const DataConfig& cfg, const std::string& path);

class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path);  // FormatError on bad header
  const DatasetHeader& header() const { return hdr_; }
  // False cleanly at end of stream; FormatError on a truncated record.
  bool next(SamplePair& out);
  void reset();

 private:
  std::ifstream in_;
  std::string path_;
  DatasetHeader hdr_;
  uint32_t read_ = 0;
};

std::vector<SamplePair> load_dataset(const std::string& path);

}  // namespace cvcorr
