#pragma once

// Two-stage training with a decoupled-weight-decay Adam optimizer.
//
// Stage 1 is a probe: the backbone and patch embedding stay frozen (their
// bytes must not move) while the condition path, encoder, and mask head
// learn. Stage 2 unfreezes everything. The CLS visibility head trains in
// neither stage; `cls_post_train` fits it afterwards with balanced
// visible/invisible batches on the frozen rest of the model.
//
// Everything that samples is counter-hash based (batch composition is a
// pure function of seed/stage/step/slot), gradients accumulate over
// sequential per-sample tapes, and the EMA update is a fixed f32
// expression, so training is reproducible bit-for-bit and a resumed run
// continues exactly where the checkpoint left off.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cvcorr/data.hpp"
#include "cvcorr/losses.hpp"
#include "cvcorr/model.hpp"

namespace cvcorr {

struct TrainConfig {
  int stage1_steps = 300;
  int stage2_steps = 2700;
  int batch_size = 8;
  int accum = 1;  // optimizer steps on batch_size*accum samples
  double lr1_max = 3e-3, lr1_min = 3e-4;
  double lr2_max = 1e-3, lr2_min = 1e-4;
  double warmup_frac = 0.05;
  double weight_decay = 0.01;
  double ema_decay = 0.999;
  bool ema_final = true;  // evaluate/export the EMA weights
  LossWeights weights;
  int cls_steps = 300;
  double cls_lr = 1e-2;
  uint64_t seed = 1;
  int checkpoint_every = 0;  // optimizer steps between mid-run saves; 0 = final only
  int stop_after = 0;        // pause this run after N optimizer steps (0 = to completion);
                             // the saved checkpoint resumes bit-exactly

  static TrainConfig from_ini(const Ini& ini);
  void validate() const;
};

inline TrainConfig TrainConfig::from_ini(const Ini& ini) {
  TrainConfig c;
  const std::string s = "train";
  c.stage1_steps = static_cast<int>(ini.get_int(s, "stage1_steps", c.stage1_steps));
  c.stage2_steps = static_cast<int>(ini.get_int(s, "stage2_steps", c.stage2_steps));
  c.batch_size = static_cast<int>(ini.get_int(s, "batch_size", c.batch_size));
  c.accum = static_cast<int>(ini.get_int(s, "accum", c.accum));
  c.lr1_max = ini.get_double(s, "lr1_max", c.lr1_max);
  c.lr1_min = ini.get_double(s, "lr1_min", c.lr1_min);
  c.lr2_max = ini.get_double(s, "lr2_max", c.lr2_max);
  c.lr2_min = ini.get_double(s, "lr2_min", c.lr2_min);
  c.warmup_frac = ini.get_double(s, "warmup_frac", c.warmup_frac);
  c.weight_decay = ini.get_double(s, "weight_decay", c.weight_decay);
  c.ema_decay = ini.get_double(s, "ema_decay", c.ema_decay);
  c.ema_final = ini.get_bool(s, "ema_final", c.ema_final);
  c.weights.lambda_dice = ini.get_double(s, "lambda_dice", c.weights.lambda_dice);
  c.weights.lambda_aux = ini.get_double(s, "lambda_aux", c.weights.lambda_aux);
  c.weights.lambda_cycle = ini.get_double(s, "lambda_cycle", c.weights.lambda_cycle);
  c.weights.lambda_dice_cycle =
      ini.get_double(s, "lambda_dice_cycle", c.weights.lambda_dice_cycle);
  c.cls_steps = static_cast<int>(ini.get_int(s, "cls_steps", c.cls_steps));
  c.cls_lr = ini.get_double(s, "cls_lr", c.cls_lr);
  c.seed = static_cast<uint64_t>(ini.get_int(s, "seed", static_cast<int64_t>(c.seed)));
  c.checkpoint_every = static_cast<int>(ini.get_int(s, "checkpoint_every", c.checkpoint_every));
  c.stop_after = static_cast<int>(ini.get_int(s, "stop_after", c.stop_after));
  c.validate();
  return c;
}

inline void TrainConfig::validate() const {
  if (stage1_steps < 0 || stage2_steps < 0 || cls_steps < 0)
    throw ConfigError("train: step counts must be >= 0");
  if (batch_size < 1 || accum < 1) throw ConfigError("train: batch_size and accum must be >= 1");
  if (lr1_max <= 0 || lr2_max <= 0 || cls_lr <= 0) throw ConfigError("train: lr must be > 0");
  if (warmup_frac < 0 || warmup_frac > 0.5)
    throw ConfigError("train: warmup_frac outside [0, 0.5]");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("train: ema_decay outside [0,1]");
  if (weight_decay < 0) throw ConfigError("train: negative weight_decay");
  if (weights.lambda_dice < 0 || weights.lambda_aux < 0 || weights.lambda_cycle < 0 ||
      weights.lambda_dice_cycle < 0)
    throw ConfigError("train: loss weights must be >= 0");
  if (checkpoint_every < 0 || stop_after < 0)
    throw ConfigError("train: checkpoint_every/stop_after must be >= 0");
}

// Linear warmup to lr_max over `warmup` steps, then cosine decay to lr_min
// at the final step. At the exact cosine midpoint the rate is
// (lr_max + lr_min) / 2.
inline double lr_schedule(int step, int total, int warmup, double lr_max, double lr_min) {
  if (total <= 0) return lr_max;
  if (step < warmup) return lr_max * (step + 1) / warmup;
  const int span = total - 1 - warmup;
  const double t = span > 0 ? static_cast<double>(step - warmup) / span : 1.0;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t));
}

// --- optimizer ----------------------------------------------------------------

struct OptState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  uint64_t t = 0;
  std::vector<std::vector<float>> m, v;  // parallel to params.entries

  void init(const ModelParams<float>& p) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& e : p.entries) {
      m.emplace_back(static_cast<size_t>(e.t.size()), 0.0f);
      v.emplace_back(static_cast<size_t>(e.t.size()), 0.0f);
    }
  }
};

// One AdamW step over the entries selected by `update` (1 = trainable).
// Frozen entries are untouched: values, moments, everything.
inline void adamw_step(ModelParams<float>& p, OptState& opt, const std::vector<uint8_t>& update,
                       double lr) {
  if (update.size() != p.entries.size() || opt.m.size() != p.entries.size())
    throw UsageError("adamw_step: mask/state size mismatch");
  opt.t += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
  for (size_t i = 0; i < p.entries.size(); ++i) {
    if (!update[i]) continue;
    auto& tsr = p.entries[i].t;
    const std::vector<float>& g = tsr.grad();
    float* x = tsr.ptr();
    float* mi = opt.m[i].data();
    float* vi = opt.v[i].data();
    for (int64_t j = 0; j < tsr.size(); ++j) {
      const double gj = g[static_cast<size_t>(j)];
      const double mj = opt.beta1 * mi[j] + (1.0 - opt.beta1) * gj;
      const double vj = opt.beta2 * vi[j] + (1.0 - opt.beta2) * gj * gj;
      mi[j] = static_cast<float>(mj);
      vi[j] = static_cast<float>(vj);
      const double step_j =
          lr * ((mj / bc1) / (std::sqrt(vj / bc2) + opt.eps) + opt.weight_decay * x[j]);
      x[j] = static_cast<float>(x[j] - step_j);
    }
  }
}

// Plain SGD over selected entries (used by test-time training).
inline void sgd_step(ModelParams<float>& p, const std::vector<uint8_t>& update, double lr) {
  if (update.size() != p.entries.size()) throw UsageError("sgd_step: mask size mismatch");
  for (size_t i = 0; i < p.entries.size(); ++i) {
    if (!update[i]) continue;
    auto& tsr = p.entries[i].t;
    const std::vector<float>& g = tsr.grad();
    float* x = tsr.ptr();
    for (int64_t j = 0; j < tsr.size(); ++j)
      x[j] = static_cast<float>(x[j] - lr * g[static_cast<size_t>(j)]);
  }
}

// Trainability masks. Stage 1 probes on frozen backbone + patch embedding;
// stage 2 trains everything; the CLS head belongs to neither (it has its
// own post-training pass).
inline std::vector<uint8_t> update_mask_for_stage(const ModelParams<float>& p, int stage) {
  std::vector<uint8_t> mask(p.entries.size(), 0);
  for (size_t i = 0; i < p.entries.size(); ++i) {
    const std::string& c = p.entries[i].component;
    bool train = false;
    if (stage == 1)
      train = c != "backbone" && c != "patch_embed" && c != "cls_head";
    else if (stage == 2)
      train = c != "cls_head";
    else if (stage == 3)
      train = c == "cls_head";
    mask[i] = train ? 1 : 0;
  }
  return mask;
}

inline void ema_update(ModelParams<float>& ema, const ModelParams<float>& p, double decay) {
  const float d = static_cast<float>(decay);
  const float od = static_cast<float>(1.0 - decay);
  for (size_t i = 0; i < p.entries.size(); ++i) {
    float* e = ema.entries[i].t.ptr();
    const float* x = p.entries[i].t.ptr();
    for (int64_t j = 0; j < p.entries[i].t.size(); ++j) e[j] = d * e[j] + od * x[j];
  }
}

// --- checkpoints with training state -----------------------------------------

struct TrainState {
  uint32_t stage = 1;  // stage about to run / being run
  uint64_t step = 0;   // next optimizer step within that stage
  OptState opt;
  ModelParams<float> ema;
};

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ModelParams<float>& params, const TrainState* state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write("CCKP", 4);
  detail::write_u32(out, kCheckpointVersion);
  write_model_config(out, cfg);
  write_params(out, params);
  out.put(state ? char(1) : char(0));
  if (state) {
    detail::write_u32(out, state->stage);
    detail::write_u64(out, state->step);
    detail::write_u64(out, state->opt.t);
    for (const auto& mv : state->opt.m)
      out.write(reinterpret_cast<const char*>(mv.data()),
                static_cast<std::streamsize>(mv.size() * sizeof(float)));
    for (const auto& vv : state->opt.v)
      out.write(reinterpret_cast<const char*>(vv.data()),
                static_cast<std::streamsize>(vv.size() * sizeof(float)));
    write_params(out, state->ema);
  }
  out.flush();
  if (!out) throw FormatError("write failed: " + path);
}

// Returns true when the file carried training state and `state` was filled.
inline bool load_checkpoint(const std::string& path, ModelConfig& cfg, ModelParams<float>& params,
                            TrainState* state) {
  std::ifstream in = open_checkpoint(path, cfg, params);
  char flag = 0;
  in.read(&flag, 1);
  if (!in) throw FormatError(path + ": truncated checkpoint (missing state flag)");
  if (flag == 0 || state == nullptr) return flag != 0 && state != nullptr;
  state->stage = detail::read_u32(in, path);
  state->step = detail::read_u64(in, path);
  state->opt.init(params);
  state->opt.t = detail::read_u64(in, path);
  for (auto& mv : state->opt.m) {
    in.read(reinterpret_cast<char*>(mv.data()),
            static_cast<std::streamsize>(mv.size() * sizeof(float)));
    if (!in) throw FormatError(path + ": truncated optimizer state");
  }
  for (auto& vv : state->opt.v) {
    in.read(reinterpret_cast<char*>(vv.data()),
            static_cast<std::streamsize>(vv.size() * sizeof(float)));
    if (!in) throw FormatError(path + ": truncated optimizer state");
  }
  state->ema = init_params<float>(cfg, 0);
  read_params(in, state->ema, path);
  return true;
}

// --- training loop ------------------------------------------------------------

struct TrainLogRow {
  int stage = 0;
  int step = 0;
  double lr = 0;
  double loss = 0;
  double mask_term = 0, aux_term = 0, cycle_term = 0;
  double wall_ms = 0;
};

struct TrainResult {
  ModelParams<float> params;  // weights to evaluate (EMA when ema_final)
  ModelParams<float> raw;     // last raw weights
  ModelParams<float> ema;
  std::vector<TrainLogRow> log;
};

namespace detail {

// Deterministic batch composition: dataset index for slot k of a step.
inline size_t batch_index(uint64_t seed, int stage, int step, int slot, size_t n) {
  const uint64_t h = hash_combine(hash_combine(hash_combine(seed, 0x6a7c + stage),
                                               static_cast<uint64_t>(step)),
                                  static_cast<uint64_t>(slot));
  return static_cast<size_t>(h % n);
}

struct LossTerms {
  double mask = 0, aux = 0, cycle = 0;
};

// Builds the taped per-sample loss, already scaled by 1/samples_per_step.
inline Tensor<float> sample_loss(const ModelParams<float>& p, const ModelConfig& mcfg,
                                 const SamplePair& s, const LossWeights& w, float scale,
                                 LossTerms* terms) {
  const bool want_aux = w.lambda_aux > 0;
  const auto out = forward(p, mcfg, s.source_image, s.source_mask, s.target_image, want_aux);
  Tensor<float> loss = mask_loss(out.mask, s.target_mask, static_cast<float>(w.lambda_dice));
  if (terms) terms->mask += loss.item();
  if (want_aux && !out.aux_masks.empty()) {
    Tensor<float> a = aux_loss(out.aux_masks, s.target_mask, static_cast<float>(w.lambda_dice));
    if (terms) terms->aux += a.item();
    loss = add(loss, mul_scalar(a, static_cast<float>(w.lambda_aux)));
  }
  if (w.lambda_cycle > 0 && s.visible) {
    // reverse pass conditions on the soft forward prediction; the sample's
    // ground-truth target mask plays no part here
    const Tensor<float> back =
        cycle_predict_source(p, mcfg, s.target_image, out.mask, s.source_image);
    Tensor<float> c = cycle_loss(back, s.source_mask, static_cast<float>(w.lambda_dice_cycle));
    if (terms) terms->cycle += c.item();
    loss = add(loss, mul_scalar(c, static_cast<float>(w.lambda_cycle)));
  }
  return mul_scalar(loss, scale);
}

inline void append_log(const std::string& path, const TrainLogRow& r) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  out << r.stage << ',' << r.step << ',' << r.lr << ',' << r.loss << ',' << r.mask_term << ','
      << r.aux_term << ',' << r.cycle_term << ',' << r.wall_ms << '\n';
}

}  // namespace detail

inline void write_log_header(const std::string& path) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::trunc);
  out << "stage,step,lr,loss,mask,aux,cycle,wall_ms\n";
}

// Runs stage 1 + stage 2 from scratch, or continues from `resume`.
// Throws TrainingError on a non-finite loss (weights restored to the last
// completed step).
inline TrainResult train_model(const ModelConfig& mcfg, const TrainConfig& tcfg,
                               const std::vector<SamplePair>& data,
                               const std::string& resume = "",
                               const std::string& checkpoint_path = "",
                               const std::string& log_path = "") {
  mcfg.validate();
  tcfg.validate();
  if (data.empty()) throw TrainingError("train_model: empty dataset");

  ModelParams<float> params;
  TrainState st;
  if (!resume.empty()) {
    ModelConfig loaded;
    if (!load_checkpoint(resume, loaded, params, &st))
      throw FormatError(resume + ": checkpoint has no training state to resume from");
    if (param_count(loaded) != param_count(mcfg))
      throw ConfigError("resume: checkpoint model config differs from the requested one");
    st.opt.weight_decay = tcfg.weight_decay;
  } else {
    params = init_params<float>(mcfg, tcfg.seed);
    st.stage = tcfg.stage1_steps > 0 ? 1 : 2;
    st.step = 0;
    st.opt.init(params);
    st.opt.weight_decay = tcfg.weight_decay;
    st.ema = params.clone();
  }

  TrainResult result;
  const int samples_per_step = tcfg.batch_size * tcfg.accum;
  const float scale = 1.0f / static_cast<float>(samples_per_step);
  int executed = 0;

  auto finalize = [&]() {
    result.raw = params;
    result.ema = st.ema;
    result.params = tcfg.ema_final ? st.ema.clone() : params.clone();
  };

  for (int stage = static_cast<int>(st.stage); stage <= 2; ++stage) {
    const int total = stage == 1 ? tcfg.stage1_steps : tcfg.stage2_steps;
    const double lr_max = stage == 1 ? tcfg.lr1_max : tcfg.lr2_max;
    const double lr_min = stage == 1 ? tcfg.lr1_min : tcfg.lr2_min;
    const int warmup = std::max(1, static_cast<int>(std::lround(tcfg.warmup_frac * total)));
    const std::vector<uint8_t> mask = update_mask_for_stage(params, stage);
    const int first = stage == static_cast<int>(st.stage) ? static_cast<int>(st.step) : 0;

    for (int step = first; step < total; ++step) {
      const auto t0 = std::chrono::steady_clock::now();
      // snapshot so a non-finite batch cannot leave corrupted weights behind
      const ModelParams<float> backup = params.clone();
      params.zero_grad();

      detail::LossTerms terms;
      double batch_loss = 0;
      for (int k = 0; k < samples_per_step; ++k) {
        const SamplePair& s = data[detail::batch_index(tcfg.seed, stage, step, k, data.size())];
        Tape<float> tape;
        const Tensor<float> loss = detail::sample_loss(params, mcfg, s, tcfg.weights, scale, &terms);
        batch_loss += static_cast<double>(loss.item()) * samples_per_step;
        tape.backward(loss);
      }
      batch_loss /= samples_per_step;
      if (!std::isfinite(batch_loss)) {
        params = backup;
        throw TrainingError("non-finite loss at stage " + std::to_string(stage) + " step " +
                            std::to_string(step));
      }

      const double lr = lr_schedule(step, total, warmup, lr_max, lr_min);
      adamw_step(params, st.opt, mask, lr);
      ema_update(st.ema, params, tcfg.ema_decay);

      TrainLogRow row;
      row.stage = stage;
      row.step = step;
      row.lr = lr;
      row.loss = batch_loss;
      row.mask_term = terms.mask / samples_per_step;
      row.aux_term = terms.aux / samples_per_step;
      row.cycle_term = terms.cycle / samples_per_step;
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
      result.log.push_back(row);
      detail::append_log(log_path, row);

      ++executed;
      const bool pause = tcfg.stop_after > 0 && executed >= tcfg.stop_after;
      if (pause || (!checkpoint_path.empty() && tcfg.checkpoint_every > 0 &&
                    (step + 1) % tcfg.checkpoint_every == 0)) {
        if (checkpoint_path.empty())
          throw UsageError("train_model: stop_after/checkpoint_every need a checkpoint path");
        TrainState snap;
        snap.stage = static_cast<uint32_t>(stage);
        snap.step = static_cast<uint64_t>(step + 1);
        snap.opt = st.opt;
        snap.ema = st.ema.clone();
        save_checkpoint(checkpoint_path, mcfg, params, &snap);
      }
      if (pause) {
        finalize();
        return result;
      }
    }
    st.step = 0;  // next stage starts from its first step
  }

  finalize();
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, mcfg, result.params, nullptr);
  return result;
}

// Balanced visibility fit of the CLS head on an otherwise frozen model.
// Alternates visible / invisible samples so both classes carry equal weight
// regardless of the dataset mix.
inline std::vector<TrainLogRow> cls_post_train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                                               ModelParams<float>& params,
                                               const std::vector<SamplePair>& data,
                                               const std::string& log_path = "") {
  std::vector<size_t> visible, hidden;
  for (size_t i = 0; i < data.size(); ++i) (data[i].visible ? visible : hidden).push_back(i);
  if (visible.empty() || hidden.empty())
    throw TrainingError("cls_post_train: need both visible and invisible samples to balance");

  const std::vector<uint8_t> mask = update_mask_for_stage(params, 3);
  OptState opt;
  opt.init(params);
  opt.weight_decay = tcfg.weight_decay;
  const int total = tcfg.cls_steps;
  const int warmup = std::max(1, static_cast<int>(std::lround(tcfg.warmup_frac * total)));
  std::vector<TrainLogRow> log;

  for (int step = 0; step < total; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    params.zero_grad();
    double batch_loss = 0;
    const float scale = 1.0f / static_cast<float>(tcfg.batch_size);
    for (int k = 0; k < tcfg.batch_size; ++k) {
      const std::vector<size_t>& pool = (k % 2 == 0) ? visible : hidden;
      const uint64_t h = hash_combine(hash_combine(hash_combine(tcfg.seed, 0x6a7c + 3),
                                                   static_cast<uint64_t>(step)),
                                      static_cast<uint64_t>(k));
      const SamplePair& s = data[pool[static_cast<size_t>(h % pool.size())]];
      Tape<float> tape;
      const auto out =
          forward(params, mcfg, s.source_image, s.source_mask, s.target_image, false);
      const Tensor<float> y({1}, s.visible ? 1.0f : 0.0f);
      const Tensor<float> loss = mul_scalar(bce(sigmoid(out.vis_logit), y), scale);
      batch_loss += static_cast<double>(loss.item()) * tcfg.batch_size;
      tape.backward(loss);
    }
    batch_loss /= tcfg.batch_size;
    if (!std::isfinite(batch_loss))
      throw TrainingError("non-finite CLS loss at step " + std::to_string(step));
    const double lr = lr_schedule(step, total, warmup, tcfg.cls_lr, tcfg.cls_lr * 0.1);
    adamw_step(params, opt, mask, lr);

    TrainLogRow row;
    row.stage = 3;
    row.step = step;
    row.lr = lr;
    row.loss = batch_loss;
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
    detail::append_log(log_path, row);
  }
  return log;
}

}  // namespace cvcorr
