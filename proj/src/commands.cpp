// Copyright 2026 The DMM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dmm/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "dmm/image_io.hpp"
#include "dmm/metrics.hpp"
#include "dmm/training.hpp"

namespace fs = std::filesystem;

namespace dmm {

namespace {

int guarded(const char* name, const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const NumericsError& e) {
    std::fprintf(stderr, "%s: numerical failure: %s\n", name, e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "%s: i/o failure: %s\n", name, e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: %s\n", name, e.what());
    return 1;
  }
}

void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out_dir);
}

void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), "missing prerequisite: no " + what + " configured");
  require(fs::exists(path), "missing prerequisite file (" + what + "): " + path);
}

std::string pair_stem(int64_t pair_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair_%04lld", static_cast<long long>(pair_id));
  return buf;
}

std::string eta_suffix(double eta) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", eta);
  return buf;
}

TrainConfig train_config_of(const RunConfig& cfg) {
  TrainConfig tc;
  tc.lambda1 = cfg.lambda1;
  tc.lambda2 = cfg.lambda2;
  tc.lr_denoiser = cfg.lr_denoiser;
  tc.lr_regnet = cfg.lr_regnet;
  tc.epochs = cfg.epochs;
  tc.max_steps = cfg.max_steps;
  tc.batch_size = cfg.batch_size;
  tc.t_max = cfg.t_max;
  tc.beta_start = cfg.beta_start;
  tc.beta_end = cfg.beta_end;
  tc.seed = cfg.seed;
  tc.flow_avg_window = cfg.flow_avg_window;
  tc.stop_grad_at_nhat = cfg.stop_grad_at_nhat;
  tc.t_per_epoch = cfg.t_per_epoch;
  tc.dropout = cfg.dropout;
  tc.threads = cfg.threads;
  tc.checkpoint_interval = cfg.checkpoint_interval;
  return tc;
}

DmmModel model_of(const RunConfig& cfg) {
  DenoiserConfig d;
  d.base_channels = cfg.denoiser_base;
  d.levels = static_cast<int>(cfg.denoiser_levels);
  d.res_blocks = static_cast<int>(cfg.denoiser_res_blocks);
  d.dropout = cfg.dropout;
  RegConfig r;
  r.base_channels = cfg.regnet_base;
  return make_model(d, r, cfg.seed);
}

SupervisorNet load_supervisor(const RunConfig& cfg) {
  require_file(cfg.supervisor_ckpt, "supervisor checkpoint");
  return restore_supervisor(read_checkpoint(cfg.supervisor_ckpt));
}

EvalFlowSource flow_source_of(const RunConfig& cfg, const DmmModel& model,
                              const FlowField* unified) {
  EvalFlowSource src;
  if (cfg.synth_mode == "source-only") {
    require(unified != nullptr, "source-only mode needs a unified flow field");
    src.unified = unified;
  } else {
    require(cfg.synth_mode == "paired", "synth_mode must be 'paired' or 'source-only'");
    src.model = &model;
  }
  src.t_max = cfg.t_max;
  src.beta_start = cfg.beta_start;
  src.beta_end = cfg.beta_end;
  src.eval_t = cfg.eval_t;
  src.seed = cfg.seed;
  return src;
}

}  // namespace

PhantomParams phantom_proto(const RunConfig& cfg) {
  PhantomParams p = PhantomParams::defaults_for(cfg.image_size);
  if (cfg.phantom_g0 >= 0.0) p.g0 = cfg.phantom_g0;
  if (cfg.phantom_g1 >= 0.0) p.g1 = cfg.phantom_g1;
  if (cfg.phantom_o_max >= 0.0) p.o_max = cfg.phantom_o_max;
  p.noise_sigma = cfg.phantom_noise_sigma;
  require(p.g1 < p.g0, "config: phantom_g1 must be < phantom_g0");
  return p;
}

PairDataset load_pair_dataset(const std::string& dir) {
  std::string manifest = dir + "/manifest.tsv";
  require_file(manifest, "dataset manifest");
  PairDataset ds;
  int64_t pair_id = 0;
  for (const ManifestEntry& e : read_manifest(manifest)) {
    PairRecord rec;
    rec.pair_id = pair_id++;
    rec.source = read_image(dir + "/" + e.source);
    rec.target = read_image(dir + "/" + e.target);
    require(rec.source.shape() == rec.target.shape(),
            "dataset: source/target size mismatch for " + e.source);
    // ground-truth intermediates are optional (real datasets have none)
    auto pos = e.source.find("_source.");
    if (pos != std::string::npos) {
      std::string ext = e.source.substr(e.source.rfind('.'));
      for (double s : {0.25, 0.5, 0.75}) {
        std::string path =
            dir + "/" + e.source.substr(0, pos) + "_truth_s" + eta_suffix(s) + ext;
        if (fs::exists(path)) {
          rec.truth_severities.push_back(s);
          rec.truths.push_back(read_image(path));
        }
      }
    }
    ds.pairs.push_back(std::move(rec));
  }
  require(!ds.pairs.empty(), "dataset: manifest has no pairs");
  ds.height = ds.pairs[0].source.shape().dim(0);
  ds.width = ds.pairs[0].source.shape().dim(1);
  return ds;
}

int cmd_phantom_gen(const RunConfig& cfg) {
  return guarded("phantom-gen", [&] {
    PhantomParams proto = phantom_proto(cfg);
    require(cfg.image_format == "png" || cfg.image_format == "pgm",
            "config: image_format must be png or pgm");
    ensure_out_dir(cfg);
    PairDataset ds = generate_pair_dataset(cfg.pairs, cfg.image_size, cfg.seed, proto);
    std::string ext = "." + cfg.image_format;
    std::vector<ManifestEntry> manifest;
    for (const PairRecord& rec : ds.pairs) {
      std::string stem = pair_stem(rec.pair_id);
      write_image(cfg.out_dir + "/" + stem + "_source" + ext, rec.source);
      write_image(cfg.out_dir + "/" + stem + "_target" + ext, rec.target);
      for (size_t i = 0; i < rec.truths.size(); ++i)
        write_image(cfg.out_dir + "/" + stem + "_truth_s" + eta_suffix(rec.truth_severities[i]) + ext,
                    rec.truths[i]);
      manifest.push_back({stem + "_source" + ext, stem + "_target" + ext});
    }
    write_manifest(cfg.out_dir + "/manifest.tsv", manifest);
    write_resolved_config(cfg, cfg.out_dir + "/phantom-gen.resolved.cfg");
    std::printf("phantom-gen: wrote %lld pairs (%lldx%lld) to %s\n",
                static_cast<long long>(cfg.pairs), static_cast<long long>(cfg.image_size),
                static_cast<long long>(cfg.image_size), cfg.out_dir.c_str());
  });
}

int cmd_pretrain_supervisor(const RunConfig& cfg) {
  return guarded("pretrain-supervisor", [&] {
    require(cfg.sup_per_class >= 4, "config: sup_per_class must be >= 4");
    ensure_out_dir(cfg);
    PhantomParams proto = phantom_proto(cfg);
    auto make_class = [&](double lo, double hi, const char* tex_stream,
                          const char* sev_stream) {
      std::vector<Tensor> imgs;
      Rng sev_rng = substream(cfg.seed, sev_stream);
      for (int64_t i = 0; i < cfg.sup_per_class; ++i) {
        PhantomParams p = proto;
        p.texture_seed = substream_seed(cfg.seed, tex_stream, static_cast<uint64_t>(i));
        p.severity = sev_rng.uniform(lo, hi);
        imgs.push_back(generate_phantom(p));
      }
      return imgs;
    };
    std::vector<Tensor> lo = make_class(cfg.sup_lo_min, cfg.sup_lo_max, "sup-tex0", "sup-sev0");
    std::vector<Tensor> hi = make_class(cfg.sup_hi_min, cfg.sup_hi_max, "sup-tex1", "sup-sev1");
    PretrainConfig pc;
    pc.epochs = static_cast<int>(cfg.sup_epochs);
    pc.batch_size = static_cast<int>(cfg.sup_batch);
    pc.lr = cfg.sup_lr;
    pc.seed = cfg.seed;
    pc.target_accuracy = cfg.sup_target_accuracy;
    PretrainResult res = pretrain_supervisor(lo, hi, pc);
    write_checkpoint(cfg.out_dir + "/supervisor.dmmc", snapshot_supervisor(res.net));
    write_resolved_config(cfg, cfg.out_dir + "/pretrain-supervisor.resolved.cfg");
    std::printf("pretrain-supervisor: validation accuracy %.4f after %d epochs -> %s\n",
                res.validation_accuracy, res.epochs_run,
                (cfg.out_dir + "/supervisor.dmmc").c_str());
  });
}

int cmd_train(const RunConfig& cfg) {
  return guarded("train", [&] {
    require_file(cfg.data_dir + "/manifest.tsv", "dataset manifest");
    SupervisorNet supervisor = load_supervisor(cfg);
    PairDataset ds = load_pair_dataset(cfg.data_dir);
    ensure_out_dir(cfg);

    DmmModel model;
    TrainState state;
    if (!cfg.resume.empty()) {
      require_file(cfg.resume, "resume checkpoint");
      Checkpoint ckpt = read_checkpoint(cfg.resume);
      restore_model(ckpt, model, state);
      require(ckpt.rng.master_seed == cfg.seed,
              "resume: checkpoint seed does not match configured seed");
    } else {
      model = model_of(cfg);
    }
    TrainConfig tc = train_config_of(cfg);
    FitResult res = fit(model, supervisor, ds, tc, state, cfg.out_dir + "/loss_log.csv",
                        cfg.out_dir);
    if (static_cast<int64_t>(state.flow_history.size()) >= tc.flow_avg_window)
      write_flow_field(cfg.out_dir + "/phibar.dmmf",
                       average_flow(state.flow_history, tc.flow_avg_window));
    write_resolved_config(cfg, cfg.out_dir + "/train.resolved.cfg");
    if (!res.log.empty()) {
      const LossBreakdown& last = res.log.back().losses;
      std::printf("train: %lld steps, final l_hybrid=%.6f (l_diff=%.6f l_mph=%.6f l_sup=%.6f)\n",
                  static_cast<long long>(state.global_step), last.l_hybrid, last.l_diff,
                  last.l_mph, last.l_sup);
    }
  });
}

int cmd_synthesize(const RunConfig& cfg) {
  return guarded("synthesize", [&] {
    require_file(cfg.model_ckpt, "model checkpoint");
    require_file(cfg.data_dir + "/manifest.tsv", "dataset manifest");
    PairDataset ds = load_pair_dataset(cfg.data_dir);
    DmmModel model;
    TrainState state;
    restore_model(read_checkpoint(cfg.model_ckpt), model, state);
    ensure_out_dir(cfg);
    std::string frames_dir = cfg.out_dir + "/frames";
    std::error_code ec;
    fs::create_directories(frames_dir, ec);
    if (ec) throw IoError("cannot create " + frames_dir);

    FlowField unified;
    bool have_unified = false;
    if (cfg.synth_mode == "source-only") {
      if (!cfg.flow_field.empty()) {
        require_file(cfg.flow_field, "flow field");
        unified = read_flow_field(cfg.flow_field);
      } else {
        unified = average_flow(state.flow_history,
                               std::min<int64_t>(cfg.flow_avg_window,
                                                 static_cast<int64_t>(state.flow_history.size())));
      }
      have_unified = true;
    }
    EvalFlowSource src = flow_source_of(cfg, model, have_unified ? &unified : nullptr);

    std::string ext = "." + cfg.image_format;
    for (const PairRecord& pair : ds.pairs) {
      FlowField flow = src.flow_for(pair);
      std::vector<Tensor> frames = synthesize_sequence(pair.source, flow, cfg.etas);
      for (size_t i = 0; i < frames.size(); ++i)
        write_image(frames_dir + "/" + pair_stem(pair.pair_id) + "_eta" + eta_suffix(cfg.etas[i]) + ext,
                    frames[i]);
    }
    write_resolved_config(cfg, cfg.out_dir + "/synthesize.resolved.cfg");
    std::printf("synthesize: %zu frames per source for %zu pairs -> %s\n", cfg.etas.size(),
                ds.pairs.size(), frames_dir.c_str());
  });
}

int cmd_evaluate(const RunConfig& cfg) {
  return guarded("evaluate", [&] {
    require_file(cfg.model_ckpt, "model checkpoint");
    require_file(cfg.data_dir + "/manifest.tsv", "dataset manifest");
    PairDataset ds = load_pair_dataset(cfg.data_dir);
    DmmModel model;
    TrainState state;
    restore_model(read_checkpoint(cfg.model_ckpt), model, state);
    ensure_out_dir(cfg);

    FlowField unified;
    bool have_unified = false;
    if (cfg.synth_mode == "source-only") {
      if (!cfg.flow_field.empty()) {
        require_file(cfg.flow_field, "flow field");
        unified = read_flow_field(cfg.flow_field);
      } else {
        unified = average_flow(state.flow_history,
                               std::min<int64_t>(cfg.flow_avg_window,
                                                 static_cast<int64_t>(state.flow_history.size())));
      }
      have_unified = true;
    }
    EvalFlowSource src = flow_source_of(cfg, model, have_unified ? &unified : nullptr);
    EvalResult res = evaluate_run(src, ds, cfg.eval_etas, cfg.psnr_max_i);
    write_eval_csv(cfg.out_dir + "/eval_records.csv", res.records);
    write_summary_csv(cfg.out_dir + "/eval_summary.csv", res.summary);
    write_resolved_config(cfg, cfg.out_dir + "/evaluate.resolved.cfg");
    std::printf("evaluate: %zu records -> %s\n", res.records.size(),
                (cfg.out_dir + "/eval_records.csv").c_str());
  });
}

int cmd_sweep(const RunConfig& cfg) {
  return guarded("sweep", [&] {
    require_file(cfg.data_dir + "/manifest.tsv", "dataset manifest");
    SupervisorNet supervisor = load_supervisor(cfg);
    PairDataset ds = load_pair_dataset(cfg.data_dir);
    require(!cfg.sweep_lambda1.empty() && !cfg.sweep_lambda2.empty(),
            "config: sweep grid is empty");
    ensure_out_dir(cfg);

    std::ofstream csv(cfg.out_dir + "/sweep.csv");
    if (!csv) throw IoError("sweep: cannot open " + cfg.out_dir + "/sweep.csv");
    csv << "lambda1,lambda2,final_l_sup,neg_log_l_sup\n";
    for (double l1 : cfg.sweep_lambda1) {
      for (double l2 : cfg.sweep_lambda2) {
        RunConfig cell = cfg;
        cell.lambda1 = l1;
        cell.lambda2 = l2;
        cell.max_steps = cfg.sweep_steps;
        // identical per-cell seeds: results do not depend on sweep order
        DmmModel model = model_of(cell);
        TrainState state;
        TrainConfig tc = train_config_of(cell);
        std::string cell_dir = cfg.out_dir + "/cell_l1_" + eta_suffix(l1) + "_l2_" +
                               eta_suffix(l2);
        std::error_code ec;
        fs::create_directories(cell_dir, ec);
        if (ec) throw IoError("cannot create " + cell_dir);
        FitResult res = fit(model, supervisor, ds, tc, state, cell_dir + "/loss_log.csv", "");
        require(!res.log.empty(), "sweep: cell produced no steps");
        size_t tail = std::min<size_t>(20, res.log.size());
        double final_sup = 0.0;
        for (size_t i = res.log.size() - tail; i < res.log.size(); ++i)
          final_sup += res.log[i].losses.l_sup;
        final_sup /= static_cast<double>(tail);
        double neg_log = -std::log(std::max(final_sup, 1e-300));
        char row[160];
        // lambdas are config inputs: shortest form; losses: full precision
        std::snprintf(row, sizeof(row), "%g,%g,%.17g,%.17g\n", l1, l2, final_sup, neg_log);
        csv << row;
        std::printf("sweep: cell (%.3g, %.3g) final l_sup=%.6f\n", l1, l2, final_sup);
      }
    }
    if (!csv) throw IoError("sweep: write failed");
    write_resolved_config(cfg, cfg.out_dir + "/sweep.resolved.cfg");
  });
}

}  // namespace dmm
