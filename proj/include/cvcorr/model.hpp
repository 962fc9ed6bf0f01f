#pragma once

// Conditional binary segmentation model.
//
// Source path: a small strided conv backbone turns I_s into F_s
// [C, H/p, W/p]; the source mask is area-pooled to the same grid and
// normalized to sum ~1; z_s is the mask-weighted average of F_s. A
// linear projection of z_s forms the condition token (CDT).
//
// Target path: a p-stride conv patch embedding tokenizes I_t into n
// tokens; the encoder input is [CLS, CDT, x_1..x_n]; L pre-norm
// transformer blocks; a final layer norm. The mask head reshapes the n
// visual tokens to the token grid, applies two 3x3 convs to one channel,
// bilinearly upsamples to (H, W) and applies sigmoid. The CLS head is a
// linear visibility classifier on the CLS output token. The cosine
// variant replaces the conv head with sigmoid(tau_cos * cos(y_cdt, y_i)
// - beta) per token (tau_cos, beta learnable, init 10 / 5).
//
// Auxiliary masks come from configured intermediate layers through the
// *same* final norm and mask head.
//
// Every parameter carries a (component, layer, name) tag; freezing and
// layer-subset adaptation are tag filters. Parameters serialize in tag
// order ("CCKP" checkpoints, little-endian f32).

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvcorr/config.hpp"
#include "cvcorr/nn.hpp"

namespace cvcorr {

struct ModelConfig {
  int height = 64, width = 64;
  int patch = 8;  // token pitch; must equal 2^backbone_depth
  int depth = 4;  // encoder blocks
  int dim = 64;
  int heads = 4;
  int backbone_channels = 64;
  int backbone_depth = 3;
  int mask_hidden = 64;
  double tau = 1e-6;          // mask normalization constant
  std::string head = "direct";  // direct | cosine
  // "second_to_last" | "none" | comma list of 1-based block indices
  std::string aux_spec = "second_to_last";

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int tokens() const { return grid_h() * grid_w(); }

  std::vector<int> aux_layers() const;
  void validate() const;
  static ModelConfig from_ini(const Ini& ini);
};

inline std::vector<int> ModelConfig::aux_layers() const {
  if (aux_spec == "none") return {};
  if (aux_spec == "second_to_last")
    return depth >= 2 ? std::vector<int>{depth - 1} : std::vector<int>{};
  std::vector<int> out;
  size_t pos = 0;
  while (pos <= aux_spec.size()) {
    const size_t comma = aux_spec.find(',', pos);
    const std::string tok = aux_spec.substr(pos, comma == std::string::npos ? std::string::npos
                                                                            : comma - pos);
    if (tok.empty()) throw ConfigError("model: bad aux_spec '" + aux_spec + "'");
    char* end = nullptr;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0' || v < 1 || v > depth)
      throw ConfigError("model: aux layer '" + tok + "' outside 1.." + std::to_string(depth));
    out.push_back(static_cast<int>(v));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline void ModelConfig::validate() const {
  if (height <= 0 || width <= 0 || height % patch != 0 || width % patch != 0)
    throw ConfigError("model: image size must be positive and divisible by patch");
  if (patch < 1 || (patch & (patch - 1)) != 0)
    throw ConfigError("model: patch must be a power of two");
  if ((1 << backbone_depth) != patch)
    throw ConfigError("model: 2^backbone_depth must equal patch (stride product)");
  if (dim <= 0 || heads <= 0 || dim % heads != 0)
    throw ConfigError("model: dim must be divisible by heads");
  if (depth < 1) throw ConfigError("model: depth must be >= 1");
  if (backbone_channels < 1 || mask_hidden < 1)
    throw ConfigError("model: channel counts must be >= 1");
  if (tau <= 0.0) throw ConfigError("model: tau must be > 0");
  if (head != "direct" && head != "cosine")
    throw ConfigError("model: head must be direct|cosine, got '" + head + "'");
  (void)aux_layers();  // validates the spec string
}

inline ModelConfig ModelConfig::from_ini(const Ini& ini) {
  ModelConfig c;
  const std::string s = "model";
  c.height = static_cast<int>(ini.get_int(s, "height", c.height));
  c.width = static_cast<int>(ini.get_int(s, "width", c.width));
  c.patch = static_cast<int>(ini.get_int(s, "patch", c.patch));
  c.depth = static_cast<int>(ini.get_int(s, "depth", c.depth));
  c.dim = static_cast<int>(ini.get_int(s, "dim", c.dim));
  c.heads = static_cast<int>(ini.get_int(s, "heads", c.heads));
  c.backbone_channels =
      static_cast<int>(ini.get_int(s, "backbone_channels", c.backbone_channels));
  c.backbone_depth = static_cast<int>(ini.get_int(s, "backbone_depth", c.backbone_depth));
  c.mask_hidden = static_cast<int>(ini.get_int(s, "mask_hidden", c.mask_hidden));
  c.tau = ini.get_double(s, "tau", c.tau);
  c.head = ini.get(s, "head", c.head);
  c.aux_spec = ini.get(s, "aux_layers", c.aux_spec);
  c.validate();
  return c;
}

// --- parameters -------------------------------------------------------------

template <typename S>
struct ModelParams {
  struct Entry {
    std::string component;
    int layer = 0;  // encoder blocks are 1-based; everything else 0
    std::string name;
    Tensor<S> t;
  };
  std::vector<Entry> entries;  // canonical tag order

  Tensor<S>& at(const std::string& component, int layer, const std::string& name) {
    for (auto& e : entries)
      if (e.layer == layer && e.component == component && e.name == name) return e.t;
    throw UsageError("no parameter " + component + "." + std::to_string(layer) + "." + name);
  }
  const Tensor<S>& at(const std::string& component, int layer, const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(component, layer, name);
  }

  void push(std::string component, int layer, std::string name, Tensor<S> t) {
    t.set_requires_grad(true);
    entries.push_back(Entry{std::move(component), layer, std::move(name), std::move(t)});
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.t.size();
    return n;
  }

  ModelParams clone() const {
    ModelParams out;
    out.entries.reserve(entries.size());
    for (const auto& e : entries)
      out.entries.push_back(Entry{e.component, e.layer, e.name, e.t.clone()});
    return out;
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.entries.reserve(entries.size());
    for (const auto& e : entries)
      out.entries.push_back(
          typename ModelParams<T>::Entry{e.component, e.layer, e.name, e.t.template cast<T>()});
    return out;
  }

  void zero_grad() {
    for (auto& e : entries) e.t.zero_grad();
  }
};

namespace detail {

inline std::vector<int> backbone_stage_channels(const ModelConfig& cfg) {
  std::vector<int> ch(static_cast<size_t>(cfg.backbone_depth));
  for (int i = 0; i < cfg.backbone_depth; ++i) {
    const int shift = cfg.backbone_depth - 1 - i;
    ch[static_cast<size_t>(i)] = std::max(8, cfg.backbone_channels >> shift);
  }
  if (!ch.empty()) ch.back() = cfg.backbone_channels;
  return ch;
}

}  // namespace detail

// Analytic parameter count (pure function of the config).
inline int64_t param_count(const ModelConfig& cfg) {
  int64_t n = 0;
  int cin = 3;
  for (int c : detail::backbone_stage_channels(cfg)) {
    n += static_cast<int64_t>(c) * cin * 16 + c;  // 4x4 convs
    cin = c;
  }
  n += static_cast<int64_t>(cfg.dim) * 3 * cfg.patch * cfg.patch + cfg.dim;  // patch embed
  n += cfg.dim;                                                              // cls token
  n += static_cast<int64_t>(cfg.backbone_channels) * cfg.dim + cfg.dim;      // cdt proj
  const int64_t d = cfg.dim;
  n += cfg.depth * (2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d));
  n += 2 * d;  // final norm
  if (cfg.head == "direct") {
    n += static_cast<int64_t>(cfg.mask_hidden) * d * 9 + cfg.mask_hidden;
    n += static_cast<int64_t>(cfg.mask_hidden) * 9 + 1;
  } else {
    n += 2;  // tau_cos, beta
  }
  n += d + 1;  // cls head
  return n;
}

template <typename S = float>
ModelParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  // Counter-based init: fully specified, so checkpoints are reproducible
  // bit-for-bit across standard libraries (std::normal_distribution is not).
  const uint64_t base = hash_combine(seed, 0xC0DEull);
  uint64_t tensor_counter = 0;
  auto normal_tensor = [&](std::vector<int> shape, double std) {
    const uint64_t tseed = hash_combine(base, ++tensor_counter);
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) {
      const uint64_t u = static_cast<uint64_t>(i);
      t.ptr()[i] = static_cast<S>(
          hash_normal(hash_combine(tseed, 2 * u), hash_combine(tseed, 2 * u + 1)) * std);
    }
    return t;
  };
  auto const_tensor = [](std::vector<int> shape, double v) {
    return Tensor<S>(std::move(shape), static_cast<S>(v));
  };

  ModelParams<S> p;
  const int d = cfg.dim, C = cfg.backbone_channels;

  int cin = 3;
  const auto stages = detail::backbone_stage_channels(cfg);
  for (size_t i = 0; i < stages.size(); ++i) {
    const int cout = stages[i];
    p.push("backbone", 0, "w" + std::to_string(i),
           normal_tensor({cout, cin, 4, 4}, std::sqrt(2.0 / (cin * 16))));
    p.push("backbone", 0, "b" + std::to_string(i), const_tensor({cout}, 0.0));
    cin = cout;
  }
  p.push("patch_embed", 0, "w",
         normal_tensor({d, 3, cfg.patch, cfg.patch}, std::sqrt(2.0 / (3 * cfg.patch * cfg.patch))));
  p.push("patch_embed", 0, "b", const_tensor({d}, 0.0));
  p.push("cls_token", 0, "tok", normal_tensor({1, d}, 0.02));
  p.push("cdt_proj", 0, "w", normal_tensor({C, d}, std::sqrt(2.0 / (C + d))));
  p.push("cdt_proj", 0, "b", const_tensor({d}, 0.0));

  for (int l = 1; l <= cfg.depth; ++l) {
    const double attn_std = std::sqrt(1.0 / d);
    p.push("encoder", l, "ln1_g", const_tensor({d}, 1.0));
    p.push("encoder", l, "ln1_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "q_w", normal_tensor({d, d}, attn_std));
    p.push("encoder", l, "q_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "k_w", normal_tensor({d, d}, attn_std));
    p.push("encoder", l, "k_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "v_w", normal_tensor({d, d}, attn_std));
    p.push("encoder", l, "v_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "o_w", normal_tensor({d, d}, attn_std));
    p.push("encoder", l, "o_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "ln2_g", const_tensor({d}, 1.0));
    p.push("encoder", l, "ln2_b", const_tensor({d}, 0.0));
    p.push("encoder", l, "mlp_w1", normal_tensor({d, 4 * d}, std::sqrt(2.0 / (d + 4 * d))));
    p.push("encoder", l, "mlp_b1", const_tensor({4 * d}, 0.0));
    p.push("encoder", l, "mlp_w2", normal_tensor({4 * d, d}, std::sqrt(2.0 / (d + 4 * d))));
    p.push("encoder", l, "mlp_b2", const_tensor({d}, 0.0));
  }
  p.push("final_norm", 0, "g", const_tensor({d}, 1.0));
  p.push("final_norm", 0, "b", const_tensor({d}, 0.0));

  if (cfg.head == "direct") {
    p.push("mask_head", 0, "w1",
           normal_tensor({cfg.mask_hidden, d, 3, 3}, std::sqrt(2.0 / (d * 9))));
    p.push("mask_head", 0, "b1", const_tensor({cfg.mask_hidden}, 0.0));
    p.push("mask_head", 0, "w2",
           normal_tensor({1, cfg.mask_hidden, 3, 3}, std::sqrt(2.0 / (cfg.mask_hidden * 9))));
    // background prior: start predictions near sigmoid(-2) ~ 0.12
    p.push("mask_head", 0, "b2", const_tensor({1}, -2.0));
  } else {
    p.push("cosine_head", 0, "tau", const_tensor({1}, 10.0));
    p.push("cosine_head", 0, "beta", const_tensor({1}, 5.0));
  }
  p.push("cls_head", 0, "w", normal_tensor({d, 1}, std::sqrt(2.0 / (d + 1))));
  p.push("cls_head", 0, "b", const_tensor({1}, 0.0));
  return p;
}

// --- forward ----------------------------------------------------------------

template <typename S>
struct ForwardOutput {
  Tensor<S> mask;       // [H,W] in (0,1)
  Tensor<S> vis_logit;  // [1]
  std::vector<Tensor<S>> aux_masks;
  Tensor<S> z_s;  // [C]
};

template <typename S>
Tensor<S> extract_source_features(const ModelParams<S>& p, const ModelConfig& cfg,
                                  const Tensor<S>& img) {
  if (img.ndim() != 3 || img.dim(0) != 3 || img.dim(1) != cfg.height || img.dim(2) != cfg.width)
    throw ShapeError("extract_source_features: expected [3," + std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + "], got " + shape_str(img.shape()));
  Tensor<S> x = img;
  for (int i = 0; i < cfg.backbone_depth; ++i) {
    x = conv2d(x, p.at("backbone", 0, "w" + std::to_string(i)),
               p.at("backbone", 0, "b" + std::to_string(i)), 2, 1);
    x = gelu(x);
  }
  return x;  // [C, H/p, W/p]
}

// Shared by the final and auxiliary paths: post-norm tokens -> mask [H,W].
template <typename S>
Tensor<S> mask_from_tokens(const ModelParams<S>& p, const ModelConfig& cfg,
                           const Tensor<S>& normed_tokens) {
  const int h = cfg.grid_h(), w = cfg.grid_w();
  Tensor<S> vis = slice_rows(normed_tokens, 2, 2 + h * w);  // [n,d]
  Tensor<S> logits;
  if (cfg.head == "direct") {
    Tensor<S> grid = reshape(transpose(vis), {cfg.dim, h, w});
    Tensor<S> hid = gelu(conv2d(grid, p.at("mask_head", 0, "w1"), p.at("mask_head", 0, "b1"), 1, 1));
    logits = conv2d(hid, p.at("mask_head", 0, "w2"), p.at("mask_head", 0, "b2"), 1, 1);
  } else {
    Tensor<S> y_cdt = reshape(slice_rows(normed_tokens, 1, 2), {cfg.dim});
    Tensor<S> cos = cosine_rows(y_cdt, vis);  // [n]
    logits = reshape(sub(mul(cos, p.at("cosine_head", 0, "tau")), p.at("cosine_head", 0, "beta")),
                     {1, h, w});
  }
  Tensor<S> up = bilinear_upsample(logits, cfg.height, cfg.width);
  return sigmoid(reshape(up, {cfg.height, cfg.width}));
}

template <typename S>
ForwardOutput<S> forward(const ModelParams<S>& p, const ModelConfig& cfg, const Tensor<S>& I_s,
                         const Tensor<S>& M_s, const Tensor<S>& I_t, bool want_aux = true) {
  if (M_s.ndim() != 2 || M_s.dim(0) != cfg.height || M_s.dim(1) != cfg.width)
    throw ShapeError("forward: source mask shape " + shape_str(M_s.shape()));
  if (I_t.shape() != I_s.shape())
    throw ShapeError("forward: image shape mismatch " + shape_str(I_s.shape()) + " vs " +
                     shape_str(I_t.shape()));

  ForwardOutput<S> out;

  // condition token from the source view
  Tensor<S> F_s = extract_source_features(p, cfg, I_s);
  Tensor<S> Mn = normalize_mask(M_s, cfg.patch, static_cast<S>(cfg.tau));
  out.z_s = pool_masked_feature(F_s, Mn);
  Tensor<S> cdt = linear(reshape(out.z_s, {1, cfg.backbone_channels}), p.at("cdt_proj", 0, "w"),
                         p.at("cdt_proj", 0, "b"));

  // target tokens
  Tensor<S> temb = conv2d(I_t, p.at("patch_embed", 0, "w"), p.at("patch_embed", 0, "b"),
                          cfg.patch, 0);  // [d,h,w]
  Tensor<S> tokens = transpose(reshape(temb, {cfg.dim, cfg.tokens()}));
  Tensor<S> x = concat_rows<S>({p.at("cls_token", 0, "tok"), cdt, tokens});

  const std::vector<int> aux = cfg.aux_layers();
  std::vector<Tensor<S>> aux_states;
  for (int l = 1; l <= cfg.depth; ++l) {
    Tensor<S> xn = layer_norm(x, p.at("encoder", l, "ln1_g"), p.at("encoder", l, "ln1_b"));
    Tensor<S> q = linear(xn, p.at("encoder", l, "q_w"), p.at("encoder", l, "q_b"));
    Tensor<S> k = linear(xn, p.at("encoder", l, "k_w"), p.at("encoder", l, "k_b"));
    Tensor<S> v = linear(xn, p.at("encoder", l, "v_w"), p.at("encoder", l, "v_b"));
    Tensor<S> a = softmax_attention(q, k, v, cfg.heads);
    x = add(x, linear(a, p.at("encoder", l, "o_w"), p.at("encoder", l, "o_b")));
    Tensor<S> hn = layer_norm(x, p.at("encoder", l, "ln2_g"), p.at("encoder", l, "ln2_b"));
    Tensor<S> m = linear(gelu(linear(hn, p.at("encoder", l, "mlp_w1"), p.at("encoder", l, "mlp_b1"))),
                         p.at("encoder", l, "mlp_w2"), p.at("encoder", l, "mlp_b2"));
    x = add(x, m);
    if (want_aux)
      for (int al : aux)
        if (al == l) aux_states.push_back(x);
  }

  Tensor<S> y = layer_norm(x, p.at("final_norm", 0, "g"), p.at("final_norm", 0, "b"));
  out.mask = mask_from_tokens(p, cfg, y);
  out.vis_logit =
      reshape(linear(slice_rows(y, 0, 1), p.at("cls_head", 0, "w"), p.at("cls_head", 0, "b")), {1});
  for (auto& st : aux_states) {
    Tensor<S> yn = layer_norm(st, p.at("final_norm", 0, "g"), p.at("final_norm", 0, "b"));
    out.aux_masks.push_back(mask_from_tokens(p, cfg, yn));
  }
  return out;
}

// Reverse pass of the cycle: source and target roles swapped, conditioning
// on the model's own (soft) target prediction. Signature carries no
// ground-truth target mask at all.
template <typename S>
Tensor<S> cycle_predict_source(const ModelParams<S>& p, const ModelConfig& cfg,
                               const Tensor<S>& I_t, const Tensor<S>& M_hat_t,
                               const Tensor<S>& I_s) {
  return forward(p, cfg, I_t, M_hat_t, I_s, /*want_aux=*/false).mask;
}

// --- checkpoint io ----------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t read_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return v;
}
inline uint64_t read_u64(std::istream& in, const std::string& path) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return v;
}
inline double read_f64(std::istream& in, const std::string& path) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return v;
}
inline void write_str(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& in, const std::string& path) {
  const uint32_t n = read_u32(in, path);
  if (n > 4096) throw FormatError(path + ": implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_model_config(std::ostream& out, const ModelConfig& cfg) {
  using namespace detail;
  write_u32(out, static_cast<uint32_t>(cfg.height));
  write_u32(out, static_cast<uint32_t>(cfg.width));
  write_u32(out, static_cast<uint32_t>(cfg.patch));
  write_u32(out, static_cast<uint32_t>(cfg.depth));
  write_u32(out, static_cast<uint32_t>(cfg.dim));
  write_u32(out, static_cast<uint32_t>(cfg.heads));
  write_u32(out, static_cast<uint32_t>(cfg.backbone_channels));
  write_u32(out, static_cast<uint32_t>(cfg.backbone_depth));
  write_u32(out, static_cast<uint32_t>(cfg.mask_hidden));
  write_f64(out, cfg.tau);
  write_str(out, cfg.head);
  write_str(out, cfg.aux_spec);
}

inline ModelConfig read_model_config(std::istream& in, const std::string& path) {
  using namespace detail;
  ModelConfig cfg;
  cfg.height = static_cast<int>(read_u32(in, path));
  cfg.width = static_cast<int>(read_u32(in, path));
  cfg.patch = static_cast<int>(read_u32(in, path));
  cfg.depth = static_cast<int>(read_u32(in, path));
  cfg.dim = static_cast<int>(read_u32(in, path));
  cfg.heads = static_cast<int>(read_u32(in, path));
  cfg.backbone_channels = static_cast<int>(read_u32(in, path));
  cfg.backbone_depth = static_cast<int>(read_u32(in, path));
  cfg.mask_hidden = static_cast<int>(read_u32(in, path));
  cfg.tau = read_f64(in, path);
  cfg.head = read_str(in, path);
  cfg.aux_spec = read_str(in, path);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid model config in checkpoint: " + e.what());
  }
  return cfg;
}

inline void write_params(std::ostream& out, const ModelParams<float>& params) {
  detail::write_u64(out, static_cast<uint64_t>(params.total_size()));
  for (const auto& e : params.entries)
    out.write(reinterpret_cast<const char*>(e.t.ptr()),
              static_cast<std::streamsize>(e.t.size() * sizeof(float)));
}

inline void read_params(std::istream& in, ModelParams<float>& params, const std::string& path) {
  const uint64_t n = detail::read_u64(in, path);
  if (n != static_cast<uint64_t>(params.total_size()))
    throw FormatError(path + ": parameter count mismatch (" + std::to_string(n) + " vs " +
                      std::to_string(params.total_size()) + ")");
  for (auto& e : params.entries) {
    in.read(reinterpret_cast<char*>(e.t.ptr()),
            static_cast<std::streamsize>(e.t.size() * sizeof(float)));
    if (!in) throw FormatError(path + ": truncated parameter data");
  }
}

constexpr uint32_t kCheckpointVersion = 1;

// Model-only checkpoint (no training state trailer).
inline void save_model(const std::string& path, const ModelConfig& cfg,
                       const ModelParams<float>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write("CCKP", 4);
  detail::write_u32(out, kCheckpointVersion);
  write_model_config(out, cfg);
  write_params(out, params);
  out.put(char(0));  // no training state
  out.flush();
  if (!out) throw FormatError("write failed: " + path);
}

// Opens a checkpoint, reads config + params, and leaves the stream
// positioned at the training-state flag byte.
inline std::ifstream open_checkpoint(const std::string& path, ModelConfig& cfg,
                                     ModelParams<float>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CCKP", 4) != 0)
    throw FormatError(path + ": bad magic (not a checkpoint)");
  const uint32_t ver = detail::read_u32(in, path);
  if (ver != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ver));
  cfg = read_model_config(in, path);
  params = init_params<float>(cfg, 0);
  read_params(in, params, path);
  return in;
}

inline std::pair<ModelConfig, ModelParams<float>> load_model(const std::string& path) {
  ModelConfig cfg;
  ModelParams<float> params;
  open_checkpoint(path, cfg, params);
  return {cfg, std::move(params)};
}

}  // namespace cvcorr
