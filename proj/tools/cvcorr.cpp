// Command-line front end: dataset generation, training, evaluation, the TTT
// sweep, and the finite-difference gradient audit. Exit codes: 0 success,
// 1 assertion/tolerance/training failure, 2 usage or configuration error.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cvcorr/eval.hpp"
#include "cvcorr/grad_check.hpp"

namespace fs = std::filesystem;
using namespace cvcorr;

namespace {

struct TrainFlags {
  std::string config, data, out, log, resume;
  bool no_stage1 = false;
  double lambda_cycle = -1, lambda_aux = -1, lambda_dice = -1, lambda_dice_cycle = -1;
  int64_t seed = -1;
  int stop_after = 0, checkpoint_every = 0;
};

struct EvalFlags {
  std::string ckpt, data, out;
  bool ttt = false;
  int ttt_k = 4, ttt_t = 2;
  double ttt_lr = 5e-6;
};

int cmd_gen_data(const std::string& config, const std::string& out) {
  const Ini ini = Ini::parse_file(config);
  const DataConfig cfg = DataConfig::from_ini(ini);
  build_dataset(cfg, out);
  std::map<std::string, int> tally;
  for (Direction d : direction_mix(cfg)) tally[direction_name(d)]++;
  std::printf("wrote %s: %d samples %dx%d\n", out.c_str(), cfg.count, cfg.height, cfg.width);
  for (const auto& [name, n] : tally) std::printf("  %-8s %d\n", name.c_str(), n);
  return 0;
}

int cmd_train(const TrainFlags& f) {
  const Ini ini = Ini::parse_file(f.config);
  const ModelConfig mcfg = ModelConfig::from_ini(ini);
  TrainConfig tcfg = TrainConfig::from_ini(ini);
  if (f.no_stage1) tcfg.stage1_steps = 0;
  if (f.lambda_cycle >= 0) tcfg.weights.lambda_cycle = f.lambda_cycle;
  if (f.lambda_aux >= 0) tcfg.weights.lambda_aux = f.lambda_aux;
  if (f.lambda_dice >= 0) tcfg.weights.lambda_dice = f.lambda_dice;
  if (f.lambda_dice_cycle >= 0) tcfg.weights.lambda_dice_cycle = f.lambda_dice_cycle;
  if (f.seed >= 0) tcfg.seed = static_cast<uint64_t>(f.seed);
  if (f.stop_after > 0) tcfg.stop_after = f.stop_after;
  if (f.checkpoint_every > 0) tcfg.checkpoint_every = f.checkpoint_every;

  const std::vector<SamplePair> data = load_dataset(f.data);
  if (!data.empty() && (data[0].target_mask.dim(0) != mcfg.height ||
                        data[0].target_mask.dim(1) != mcfg.width))
    throw ConfigError("train: dataset is " + std::to_string(data[0].target_mask.dim(0)) + "x" +
                      std::to_string(data[0].target_mask.dim(1)) + " but the model expects " +
                      std::to_string(mcfg.height) + "x" + std::to_string(mcfg.width));

  if (!f.log.empty()) write_log_header(f.log);
  TrainResult res = train_model(mcfg, tcfg, data, f.resume, f.out, f.log);
  const bool paused =
      tcfg.stop_after > 0 && static_cast<int>(res.log.size()) >= tcfg.stop_after;
  if (paused) {
    std::printf("paused after %zu optimizer steps; resume with --resume %s\n", res.log.size(),
                f.out.c_str());
    return 0;
  }

  ModelParams<float> final_params = res.params;
  if (tcfg.cls_steps > 0) {
    const auto rows = cls_post_train(mcfg, tcfg, final_params, data, f.log);
    std::printf("cls post-train: %zu steps, final loss %.5f\n", rows.size(),
                rows.empty() ? 0.0 : rows.back().loss);
  }
  save_model(f.out, mcfg, final_params);

  double last = res.log.empty() ? 0.0 : res.log.back().loss;
  std::printf("trained %zu steps, final loss %.5f, checkpoint %s\n", res.log.size(), last,
              f.out.c_str());
  return 0;
}

int cmd_eval(const EvalFlags& f) {
  const auto [mcfg, params] = load_model(f.ckpt);
  const std::vector<SamplePair> data = load_dataset(f.data);
  fs::create_directories(f.out);

  EvalReport rep;
  if (f.ttt) {
    TTTConfig cfg;
    cfg.k = f.ttt_k;
    cfg.t = f.ttt_t;
    cfg.lr = f.ttt_lr;
    cfg.validate();
    rep = evaluate(params, mcfg, data, cfg);
  } else {
    rep = evaluate(params, mcfg, data);
  }

  rep.write_csv((fs::path(f.out) / "report.csv").string());
  const std::string summary = rep.summary();
  svg::write_file((fs::path(f.out) / "size_buckets.svg").string(), rep.size_bucket_svg());
  std::ofstream sum(fs::path(f.out) / "summary.txt");
  sum << summary;
  std::fputs(summary.c_str(), stdout);
  return 0;
}

int cmd_sweep(const std::string& ckpt, const std::string& dataset, std::vector<int> k_list,
              std::vector<int> t_list, const std::string& out, double lr) {
  const auto [mcfg, params] = load_model(ckpt);
  const std::vector<SamplePair> data = load_dataset(dataset);
  TTTConfig base;
  base.lr = lr;
  const auto cells = ttt_sweep(params, mcfg, data, k_list, t_list, base);
  fs::create_directories(out);
  write_sweep_csv((fs::path(out) / "sweep.csv").string(), cells);
  svg::write_file((fs::path(out) / "sweep.svg").string(), sweep_svg(cells));
  for (const auto& c : cells)
    std::printf("k=%-3d t=%-3d %-8s iou=%.4f latency=%.2fms n=%d\n", c.k, c.t,
                direction_name(c.direction), c.mean_iou, c.mean_latency_ms, c.n_samples);
  return 0;
}

// An op with a deliberately wrong backward rule; the audit must flag it.
Tensor<double> bad_square(const Tensor<double>& x) {
  Tensor<double> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out.ptr()[i] = x.ptr()[i] * x.ptr()[i];
  if (Tape<double>::active() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<double>::active()->record("bad_square", on, [xn, on] {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i];  // missing the 2x factor on purpose
    });
  }
  return out;
}

int cmd_grad_check(uint64_t seed, bool negative_control) {
  if (negative_control) {
    // wire a deliberately wrong backward rule through the audit: a healthy
    // audit must flag it and the process must exit nonzero
    auto f = [](std::vector<Tensor<double>>& in) { return sum_all(bad_square(in[0])); };
    Tensor<double> x = Tensor<double>::from({3}, {0.5, -1.25, 2.0}, true);
    const auto res = grad_check<double>(f, {x}, 1e-6);
    std::printf("%-22s %s  max rel err %.3g\n", "bad_square(control)",
                res.ok ? "ok" : "FAIL", res.max_rel_err);
    if (res.ok) {
      std::printf("audit failed to reject the corrupted backward rule\n");
      return 1;
    }
    return 1;
  }

  bool all_ok = true;
  double worst_err = 0;
  std::string worst_op;
  for (const auto& check : op_checks()) {
    const auto res = check.run(seed);
    std::printf("%-22s %s  max rel err %.3g\n", check.name.c_str(),
                res.ok ? "ok" : "FAIL", res.max_rel_err);
    if (res.max_rel_err > worst_err) {
      worst_err = res.max_rel_err;
      worst_op = check.name;
    }
    all_ok &= res.ok;
  }

  // Full model end to end at 64-bit on a small config. Probing every scalar
  // would square the runtime, so one representative tensor per component
  // family goes through the finite-difference mill.
  ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.patch = 2;
  cfg.backbone_depth = 1;
  cfg.depth = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.backbone_channels = 8;
  cfg.mask_hidden = 4;
  const auto p = init_params<double>(cfg, seed);
  Tensor<double> I_s({3, 8, 8}), I_t({3, 8, 8});
  for (int64_t i = 0; i < I_s.size(); ++i) {
    I_s.ptr()[i] = hash_unit(hash_combine(seed, 2 * static_cast<uint64_t>(i)));
    I_t.ptr()[i] = hash_unit(hash_combine(seed, 2 * static_cast<uint64_t>(i) + 1));
  }
  Tensor<double> M_s({8, 8}), M_t({8, 8});
  for (int i = 2; i < 6; ++i)
    for (int j = 2; j < 6; ++j) {
      M_s(i, j) = 1.0;
      M_t(i, j) = 1.0;
    }
  LossWeights w;
  auto loss_fn = [&](std::vector<Tensor<double>>&) {
    const auto out = forward(p, cfg, I_s, M_s, I_t);
    Tensor<double> loss = mask_loss(out.mask, M_t, w.lambda_dice);
    loss = add(loss, mul_scalar(aux_loss(out.aux_masks, M_t, w.lambda_dice), w.lambda_aux));
    const auto back = cycle_predict_source(p, cfg, I_t, out.mask, I_s);
    loss = add(loss, mul_scalar(cycle_loss(back, M_s, w.lambda_dice_cycle), w.lambda_cycle));
    loss = add(loss, bce(sigmoid(out.vis_logit), Tensor<double>({1}, 1.0)));
    return loss;
  };
  std::vector<Tensor<double>> probe = {
      p.at("backbone", 0, "w0"),    p.at("backbone", 0, "b0"),   p.at("patch_embed", 0, "w"),
      p.at("cls_token", 0, "tok"),  p.at("cdt_proj", 0, "w"),    p.at("encoder", 1, "q_w"),
      p.at("encoder", 1, "ln1_g"),  p.at("encoder", 2, "mlp_w2"), p.at("encoder", 2, "o_b"),
      p.at("final_norm", 0, "g"),   p.at("mask_head", 0, "w2"),  p.at("cls_head", 0, "w"),
  };
  const auto res = grad_check<double>(loss_fn, probe, 1e-6);
  std::printf("%-22s %s  max rel err %.3g (%s)\n", "full_model", res.ok ? "ok" : "FAIL",
              res.max_rel_err, res.worst.c_str());
  if (res.max_rel_err > worst_err) {
    worst_err = res.max_rel_err;
    worst_op = "full_model";
  }
  all_ok &= res.ok;

  std::printf("worst offender: %s (max rel err %.3g)\n", worst_op.c_str(), worst_err);
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-view object correspondence toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "INI config with a [data] section")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output dataset path")->required();

  // train
  auto* train = app.add_subcommand("train", "run the staged training pipeline");
  TrainFlags tf;
  train->add_option("--config", tf.config, "INI config with [model] and [train] sections")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--data", tf.data, "dataset file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tf.out, "checkpoint output path")->required();
  train->add_option("--log", tf.log, "training log CSV path");
  train->add_option("--resume", tf.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_flag("--no-stage1", tf.no_stage1, "skip the linear-probing stage");
  train->add_option("--lambda-cycle", tf.lambda_cycle, "override the cycle loss weight");
  train->add_option("--lambda-aux", tf.lambda_aux, "override the auxiliary loss weight");
  train->add_option("--lambda-dice", tf.lambda_dice, "override the dice weight in the mask loss");
  train->add_option("--lambda-dice-cycle", tf.lambda_dice_cycle,
                    "override the dice weight inside the cycle loss");
  train->add_option("--seed", tf.seed, "override the training seed");
  train->add_option("--stop-after", tf.stop_after,
                    "pause after N optimizer steps (checkpoint keeps full state)");
  train->add_option("--checkpoint-every", tf.checkpoint_every,
                    "also checkpoint every N optimizer steps");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  EvalFlags ef;
  ev->add_option("--ckpt", ef.ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ef.data, "dataset file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ef.out, "output directory")->required();
  ev->add_flag("--ttt", ef.ttt, "enable test-time training");
  ev->add_option("--ttt-k", ef.ttt_k, "TTT: adapt the last K encoder layers");
  ev->add_option("--ttt-t", ef.ttt_t, "TTT: gradient steps per sample");
  ev->add_option("--ttt-lr", ef.ttt_lr, "TTT: learning rate");

  // sweep-ttt
  auto* sw = app.add_subcommand("sweep-ttt", "grid-sweep TTT depth and steps");
  std::string sw_ckpt, sw_data, sw_out;
  std::vector<int> k_list, t_list;
  double sw_lr = 5e-6;
  sw->add_option("--ckpt", sw_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("--data", sw_data, "dataset file")->required()->check(CLI::ExistingFile);
  sw->add_option("--k-list", k_list, "encoder depths to sweep")->required()->delimiter(',');
  sw->add_option("--t-list", t_list, "step counts to sweep")->required()->delimiter(',');
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_option("--ttt-lr", sw_lr, "TTT learning rate");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference audit of every op");
  uint64_t gc_seed = 1;
  bool gc_negative = false;
  gc->add_option("--seed", gc_seed, "probe seed");
  gc->add_flag("--negative-control", gc_negative,
               "verify the audit rejects a wrong backward rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_config, gen_out);
    if (*train) return cmd_train(tf);
    if (*ev) return cmd_eval(ef);
    if (*sw) return cmd_sweep(sw_ckpt, sw_data, k_list, t_list, sw_out, sw_lr);
    if (*gc) return cmd_grad_check(gc_seed, gc_negative);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
