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

#include "dmm/training.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

namespace dmm {

void TrainConfig::validate() const {
  require(lambda1 >= 0.0 && lambda2 >= 0.0, "TrainConfig: lambdas must be >= 0");
  require(lr_denoiser > 0.0 && lr_regnet > 0.0, "TrainConfig: learning rates must be > 0");
  require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  require(max_steps >= 0, "TrainConfig: max_steps must be >= 0");
  require(batch_size >= 1, "TrainConfig: batch size must be >= 1");
  require(t_max >= 2, "TrainConfig: t_max must be >= 2");
  require(flow_avg_window >= 1, "TrainConfig: flow average window must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "TrainConfig: dropout must be in [0,1)");
  require(threads >= 1, "TrainConfig: threads must be >= 1");
}

// -----------------------------------------------------------------------------
// Adam
// -----------------------------------------------------------------------------

void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get_mutable(name);
    require(p.shape() == g.shape(), "adam_step: shape mismatch for " + name);
    size_t n = static_cast<size_t>(p.numel());
    auto& [m, v] = state.moments[name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    require(m.size() == n && v.size() == n, "adam_step: moment size mismatch for " + name);
    double* pd = p.mutable_data();
    const double* gd = g.data();
    for (size_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// -----------------------------------------------------------------------------
// model
// -----------------------------------------------------------------------------

DmmModel make_model(const DenoiserConfig& dcfg, const RegConfig& rcfg, uint64_t seed) {
  Rng init_rng = substream(seed, "init");
  DmmModel m;
  m.denoiser = DenoiserNet(dcfg, init_rng);
  m.regnet = RegNet(rcfg, init_rng);
  return m;
}

// -----------------------------------------------------------------------------
// train_step
// -----------------------------------------------------------------------------

namespace {

struct SampleOut {
  std::map<std::string, Tensor> den_grads;
  std::map<std::string, Tensor> reg_grads;
  double l_diff = 0.0, l_mph = 0.0, l_sup = 0.0;
  Tensor phi;  // (2,H,W) values
};

SampleOut run_sample(const DmmModel& model, const SupervisorNet& supervisor,
                     const PairRecord& pair, int64_t t, const NoiseSchedule& schedule,
                     const TrainConfig& cfg, int64_t step, int64_t sample_idx) {
  Tape tape;
  ParamView den_pv(tape, model.denoiser.params(), /*trainable=*/true);
  ParamView reg_pv(tape, model.regnet.params(), /*trainable=*/true);
  Rng noise_rng = substream(cfg.seed, "noise", static_cast<uint64_t>(step),
                            static_cast<uint64_t>(sample_idx));
  Rng drop_rng = substream(cfg.seed, "dropout", static_cast<uint64_t>(step),
                           static_cast<uint64_t>(sample_idx));

  Tensor n = randn(pair.target.shape(), noise_rng);
  Tensor x_t = forward_perturb(pair.target, t, n, schedule);
  Tensor n_hat = model.denoiser.forward(tape, den_pv, pair.source, pair.target, x_t, t,
                                        /*training=*/true, drop_rng);
  Tensor l_diff = diffusion_loss(tape, as_nchw(n), n_hat);

  Tensor reg_in = cfg.stop_grad_at_nhat ? Tensor::from(n_hat.shape(), n_hat.vec()) : n_hat;
  Tensor phi = model.regnet.forward(tape, reg_pv, pair.source, reg_in);

  Tensor xs4 = as_nchw(pair.source);
  Tensor warped_full = warp(tape, xs4, phi);
  Tensor l_mph = morph_loss(tape, warped_full, as_nchw(pair.target));
  Tensor frame_half = warp(tape, xs4, scale_flow(tape, phi, 0.5));
  Tensor frame_three_quarter = warp(tape, xs4, scale_flow(tape, phi, 0.75));
  Tensor l_sup = supervision_loss(tape, supervisor, frame_half, frame_three_quarter);

  Tensor l_hybrid = add(tape, l_diff,
                        add(tape, scale(tape, l_mph, cfg.lambda1),
                            scale(tape, l_sup, cfg.lambda2)));
  tape.backward(l_hybrid);

  SampleOut out;
  out.l_diff = l_diff.at(0);
  out.l_mph = l_mph.at(0);
  out.l_sup = l_sup.at(0);
  for (const auto& [name, leaf] : den_pv.bound()) out.den_grads.emplace(name, tape.grad_of(leaf));
  for (const auto& [name, leaf] : reg_pv.bound()) out.reg_grads.emplace(name, tape.grad_of(leaf));
  out.phi = Tensor::from(Shape{2, phi.shape().dim(2), phi.shape().dim(3)}, phi.vec());
  return out;
}

void accumulate_grads(std::map<std::string, std::vector<double>>& acc,
                      const std::map<std::string, Tensor>& g) {
  for (const auto& [name, t] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      acc.emplace(name, t.vec());
    } else {
      std::vector<double>& v = it->second;
      const double* p = t.data();
      for (size_t i = 0; i < v.size(); ++i) v[i] += p[i];
    }
  }
}

std::map<std::string, Tensor> finish_grads(std::map<std::string, std::vector<double>>& acc,
                                           const ParamStore& params, double scale_by) {
  std::map<std::string, Tensor> out;
  for (auto& [name, v] : acc) {
    for (double& x : v) x *= scale_by;
    out.emplace(name, Tensor::from(params.get(name).shape(), std::move(v)));
  }
  return out;
}

}  // namespace

LossBreakdown train_step(DmmModel& model, const SupervisorNet& supervisor,
                         const std::vector<const PairRecord*>& batch,
                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                         TrainState& state) {
  require(!batch.empty(), "train_step: empty batch");
  require(supervisor.frozen(), "train_step: supervisor must be pre-trained and frozen");
  int64_t bsz = static_cast<int64_t>(batch.size());
  int64_t step = state.global_step;

  // Per-sample diffusion steps, drawn up front so worker scheduling cannot
  // reorder them.
  std::vector<int64_t> ts(static_cast<size_t>(bsz));
  if (cfg.t_per_epoch) {
    Rng tr = substream(cfg.seed, "diffusion-t-epoch", static_cast<uint64_t>(state.epoch));
    int64_t shared = tr.uniform_int(1, cfg.t_max - 1);
    for (auto& t : ts) t = shared;
  } else {
    for (int64_t i = 0; i < bsz; ++i) {
      Rng tr = substream(cfg.seed, "diffusion-t", static_cast<uint64_t>(step),
                         static_cast<uint64_t>(i));
      ts[static_cast<size_t>(i)] = tr.uniform_int(1, cfg.t_max - 1);
    }
  }

  std::vector<SampleOut> outs(static_cast<size_t>(bsz));
  int64_t workers = std::min<int64_t>(cfg.threads, bsz);
  if (workers <= 1) {
    for (int64_t i = 0; i < bsz; ++i)
      outs[static_cast<size_t>(i)] = run_sample(model, supervisor, *batch[static_cast<size_t>(i)],
                                                ts[static_cast<size_t>(i)], schedule, cfg, step, i);
  } else {
    std::atomic<int64_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        try {
          for (;;) {
            int64_t i = next.fetch_add(1);
            if (i >= bsz) break;
            outs[static_cast<size_t>(i)] =
                run_sample(model, supervisor, *batch[static_cast<size_t>(i)],
                           ts[static_cast<size_t>(i)], schedule, cfg, step, i);
          }
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) {
        try {
          std::rethrow_exception(e);
        } catch (const NumericsError& ne) {
          throw NumericsError("train_step " + std::to_string(step) + " aborted: " + ne.what());
        }
      }
    }
  }

  // Ordered reduction: gradients, losses and flow fields are combined in
  // sample-index order for bit-identical results at any thread count.
  std::map<std::string, std::vector<double>> den_acc, reg_acc;
  double l_diff = 0.0, l_mph = 0.0, l_sup = 0.0;
  std::vector<double> phi_mean;
  for (int64_t i = 0; i < bsz; ++i) {
    SampleOut& s = outs[static_cast<size_t>(i)];
    accumulate_grads(den_acc, s.den_grads);
    accumulate_grads(reg_acc, s.reg_grads);
    l_diff += s.l_diff;
    l_mph += s.l_mph;
    l_sup += s.l_sup;
    if (phi_mean.empty()) phi_mean.assign(static_cast<size_t>(s.phi.numel()), 0.0);
    for (int64_t k = 0; k < s.phi.numel(); ++k) phi_mean[static_cast<size_t>(k)] += s.phi.at(k);
    s = SampleOut{};  // release tape-sized buffers early
  }
  double inv_b = 1.0 / static_cast<double>(bsz);
  std::map<std::string, Tensor> den_grads = finish_grads(den_acc, model.denoiser.params(), inv_b);
  std::map<std::string, Tensor> reg_grads = finish_grads(reg_acc, model.regnet.params(), inv_b);
  adam_step(model.denoiser.params(), den_grads, state.adam_denoiser, cfg.lr_denoiser);
  adam_step(model.regnet.params(), reg_grads, state.adam_regnet, cfg.lr_regnet);

  for (double& x : phi_mean) x *= inv_b;
  int64_t h = batch[0]->source.shape().dim(0), w = batch[0]->source.shape().dim(1);
  state.flow_history.push_back(FlowField(Tensor::from(Shape{2, h, w}, std::move(phi_mean))));
  while (static_cast<int64_t>(state.flow_history.size()) > cfg.flow_avg_window)
    state.flow_history.pop_front();

  state.global_step += 1;

  LossBreakdown lb;
  lb.l_diff = l_diff * inv_b;
  lb.l_mph = l_mph * inv_b;
  lb.l_sup = l_sup * inv_b;
  lb.l_hybrid = lb.l_diff + cfg.lambda1 * lb.l_mph + cfg.lambda2 * lb.l_sup;
  if (!std::isfinite(lb.l_hybrid))
    throw NumericsError("train_step: non-finite loss at step " + std::to_string(step));
  return lb;
}

// -----------------------------------------------------------------------------
// fit
// -----------------------------------------------------------------------------

namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = substream(seed, "data", static_cast<uint64_t>(epoch));
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1],
              order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  return order;
}

}  // namespace

FitResult fit(DmmModel& model, const SupervisorNet& supervisor, const PairDataset& dataset,
              const TrainConfig& cfg, TrainState& state, const std::string& log_csv_path,
              const std::string& checkpoint_dir) {
  cfg.validate();
  require(!dataset.pairs.empty(), "fit: empty dataset");
  NoiseSchedule schedule = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end);

  std::ofstream csv;
  if (!log_csv_path.empty()) {
    bool fresh = state.global_step == 0;
    csv.open(log_csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("fit: cannot open loss log " + log_csv_path);
    if (fresh) csv << "step,epoch,l_diff,l_mph,l_sup,l_hybrid\n";
  }
  auto write_ckpt = [&](const std::string& name) {
    if (checkpoint_dir.empty()) return;
    write_checkpoint(checkpoint_dir + "/" + name, snapshot_model(model, state, cfg));
  };

  FitResult res;
  size_t n = dataset.pairs.size();
  int64_t num_batches =
      static_cast<int64_t>((n + static_cast<size_t>(cfg.batch_size) - 1) /
                           static_cast<size_t>(cfg.batch_size));
  bool done = false;
  while (!done && state.epoch < cfg.epochs) {
    std::vector<size_t> order = epoch_permutation(n, cfg.seed, state.epoch);
    for (int64_t bi = state.step_in_epoch; bi < num_batches && !done; ++bi) {
      size_t lo = static_cast<size_t>(bi) * static_cast<size_t>(cfg.batch_size);
      size_t hi = std::min(n, lo + static_cast<size_t>(cfg.batch_size));
      std::vector<const PairRecord*> batch;
      for (size_t k = lo; k < hi; ++k) batch.push_back(&dataset.pairs[order[k]]);
      LossBreakdown lb = train_step(model, supervisor, batch, schedule, cfg, state);
      state.step_in_epoch = bi + 1;
      LossRow row{state.global_step, state.epoch, lb};
      res.log.push_back(row);
      if (csv.is_open()) {
        csv << row.step << "," << row.epoch << "," << fmt_g17(lb.l_diff) << ","
            << fmt_g17(lb.l_mph) << "," << fmt_g17(lb.l_sup) << "," << fmt_g17(lb.l_hybrid)
            << "\n";
        csv.flush();
        if (!csv) throw IoError("fit: loss log write failed");
      }
      if (cfg.checkpoint_interval > 0 && state.global_step % cfg.checkpoint_interval == 0)
        write_ckpt("ckpt_step" + std::to_string(state.global_step) + ".dmmc");
      if (cfg.max_steps > 0 && state.global_step >= cfg.max_steps) done = true;
    }
    if (!done) {
      state.epoch += 1;
      state.step_in_epoch = 0;
    }
  }
  write_ckpt("model.dmmc");
  return res;
}

// -----------------------------------------------------------------------------
// flow averaging + synthesis
// -----------------------------------------------------------------------------

namespace {

FlowField average_flow_impl(const std::vector<const FlowField*>& hist, int64_t k) {
  require(k >= 1, "average_flow: k must be >= 1");
  require(static_cast<int64_t>(hist.size()) >= k, "average_flow: insufficient history");
  const FlowField& last = *hist.back();
  std::vector<double> acc(static_cast<size_t>(last.field.numel()), 0.0);
  for (int64_t i = static_cast<int64_t>(hist.size()) - k;
       i < static_cast<int64_t>(hist.size()); ++i) {
    const FlowField& f = *hist[static_cast<size_t>(i)];
    require(f.field.shape() == last.field.shape(), "average_flow: field shape mismatch");
    for (int64_t j = 0; j < f.field.numel(); ++j) acc[static_cast<size_t>(j)] += f.field.at(j);
  }
  double inv = 1.0 / static_cast<double>(k);
  for (double& x : acc) x *= inv;
  return FlowField(Tensor::from(last.field.shape(), std::move(acc)));
}

}  // namespace

FlowField average_flow(const std::deque<FlowField>& history, int64_t k) {
  std::vector<const FlowField*> ptrs;
  for (const auto& f : history) ptrs.push_back(&f);
  return average_flow_impl(ptrs, k);
}

FlowField average_flow(const std::vector<FlowField>& history, int64_t k) {
  std::vector<const FlowField*> ptrs;
  for (const auto& f : history) ptrs.push_back(&f);
  return average_flow_impl(ptrs, k);
}

std::vector<Tensor> synthesize_sequence(const Tensor& x_s, const FlowField& flow,
                                        const std::vector<double>& etas) {
  require(!etas.empty(), "synthesize_sequence: empty eta list");
  std::vector<Tensor> frames;
  frames.reserve(etas.size());
  for (double eta : etas) frames.push_back(warp(x_s, scale_flow(flow, eta)));
  return frames;
}

// -----------------------------------------------------------------------------
// checkpoint format (DMMC)
// -----------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t get_u64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

void put_f64(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(os, u);
}

double get_f64(std::istream& is) {
  uint64_t u = get_u64(is);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& is) {
  uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

void put_payload(std::ostream& os, const double* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) put_f64(os, p[i]);
}

std::vector<double> get_payload(std::istream& is, int64_t n) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = get_f64(is);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_checkpoint: cannot open " + path);
  os.write("DMMC", 4);
  put_u32(os, ckpt.version);
  put_str(os, ckpt.role);

  put_u32(os, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    put_str(os, name);
    os.put(0);  // dtype code 0 = f64
    os.put(static_cast<char>(t.shape().rank()));
    for (int i = 0; i < t.shape().rank(); ++i)
      put_u32(os, static_cast<uint32_t>(t.shape().dim(i)));
    put_payload(os, t.data(), t.numel());
  }

  put_u32(os, static_cast<uint32_t>(ckpt.optimizers.size()));
  for (const auto& [name, st] : ckpt.optimizers) {
    put_str(os, name);
    put_u64(os, static_cast<uint64_t>(st.step));
    put_u32(os, static_cast<uint32_t>(st.moments.size()));
    for (const auto& [pname, mv] : st.moments) {
      put_str(os, pname);
      put_u64(os, mv.first.size());
      put_payload(os, mv.first.data(), static_cast<int64_t>(mv.first.size()));
      put_payload(os, mv.second.data(), static_cast<int64_t>(mv.second.size()));
    }
  }

  put_u64(os, ckpt.rng.master_seed);
  put_u64(os, static_cast<uint64_t>(ckpt.rng.global_step));
  put_u64(os, static_cast<uint64_t>(ckpt.rng.epoch));
  put_u64(os, static_cast<uint64_t>(ckpt.rng.step_in_epoch));

  put_u32(os, static_cast<uint32_t>(ckpt.flow_history.size()));
  for (const FlowField& f : ckpt.flow_history) {
    put_u32(os, static_cast<uint32_t>(f.height()));
    put_u32(os, static_cast<uint32_t>(f.width()));
    put_payload(os, f.field.data(), f.field.numel());
  }
  if (!os) throw IoError("write_checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMMC", 4) != 0)
    throw IoError("read_checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = get_u32(is);
  if (ckpt.version != 1) throw IoError("read_checkpoint: unsupported version in " + path);
  ckpt.role = get_str(is);

  uint32_t n_params = get_u32(is);
  for (uint32_t i = 0; i < n_params; ++i) {
    std::string name = get_str(is);
    int dtype = is.get();
    if (dtype != 0) throw IoError("read_checkpoint: unsupported dtype code");
    int rank = is.get();
    std::vector<int64_t> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(get_u32(is));
    Shape shape = Shape::of(dims);
    ckpt.params.emplace(name, Tensor::from(shape, get_payload(is, shape.numel())));
  }

  uint32_t n_opt = get_u32(is);
  for (uint32_t i = 0; i < n_opt; ++i) {
    std::string name = get_str(is);
    AdamState st;
    st.step = static_cast<int64_t>(get_u64(is));
    uint32_t n_entries = get_u32(is);
    for (uint32_t k = 0; k < n_entries; ++k) {
      std::string pname = get_str(is);
      int64_t numel = static_cast<int64_t>(get_u64(is));
      std::vector<double> m = get_payload(is, numel);
      std::vector<double> v = get_payload(is, numel);
      st.moments.emplace(pname, std::make_pair(std::move(m), std::move(v)));
    }
    ckpt.optimizers.emplace(name, std::move(st));
  }

  ckpt.rng.master_seed = get_u64(is);
  ckpt.rng.global_step = static_cast<int64_t>(get_u64(is));
  ckpt.rng.epoch = static_cast<int64_t>(get_u64(is));
  ckpt.rng.step_in_epoch = static_cast<int64_t>(get_u64(is));

  uint32_t n_flow = get_u32(is);
  for (uint32_t i = 0; i < n_flow; ++i) {
    int64_t h = get_u32(is), w = get_u32(is);
    ckpt.flow_history.push_back(
        FlowField(Tensor::from(Shape{2, h, w}, get_payload(is, 2 * h * w))));
  }
  if (!is) throw IoError("read_checkpoint: truncated file " + path);
  return ckpt;
}

// -----------------------------------------------------------------------------
// model <-> checkpoint bridges
// -----------------------------------------------------------------------------

namespace {

void put_meta(Checkpoint& ckpt, const std::string& key, double v) {
  ckpt.params.emplace("meta." + key, Tensor::scalar(v));
}

double get_meta(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.params.find("meta." + key);
  require(it != ckpt.params.end(), "checkpoint: missing meta." + key);
  return it->second.at(0);
}

void export_params(Checkpoint& ckpt, const ParamStore& ps, const std::string& prefix) {
  for (const auto& [name, t] : ps.map()) ckpt.params.emplace(prefix + name, t.detached());
}

void import_params(const Checkpoint& ckpt, ParamStore& ps, const std::string& prefix) {
  for (auto& [name, t] : ps.map_mutable()) {
    auto it = ckpt.params.find(prefix + name);
    require(it != ckpt.params.end(), "checkpoint: missing parameter " + prefix + name);
    require(it->second.shape() == t.shape(),
            "checkpoint: shape mismatch for " + prefix + name);
    t = it->second;
    t.set_requires_grad(true);
  }
}

}  // namespace

Checkpoint snapshot_model(const DmmModel& model, const TrainState& state,
                          const TrainConfig& cfg) {
  Checkpoint ckpt;
  ckpt.role = "dmm";
  export_params(ckpt, model.denoiser.params(), "denoiser.");
  export_params(ckpt, model.regnet.params(), "regnet.");
  const DenoiserConfig& d = model.denoiser.config();
  put_meta(ckpt, "denoiser.base", static_cast<double>(d.base_channels));
  put_meta(ckpt, "denoiser.levels", d.levels);
  put_meta(ckpt, "denoiser.res_blocks", d.res_blocks);
  put_meta(ckpt, "denoiser.temb_dim", static_cast<double>(d.temb_dim));
  put_meta(ckpt, "denoiser.groups", d.groups);
  put_meta(ckpt, "denoiser.attn", d.middle_attention ? 1.0 : 0.0);
  put_meta(ckpt, "denoiser.dropout", d.dropout);
  const RegConfig& r = model.regnet.config();
  put_meta(ckpt, "regnet.base", static_cast<double>(r.base_channels));
  put_meta(ckpt, "regnet.levels", r.levels);
  put_meta(ckpt, "regnet.groups", r.groups);
  put_meta(ckpt, "regnet.output_scale", r.output_scale);
  ckpt.optimizers.emplace("denoiser", state.adam_denoiser);
  ckpt.optimizers.emplace("regnet", state.adam_regnet);
  ckpt.rng.master_seed = cfg.seed;
  ckpt.rng.global_step = state.global_step;
  ckpt.rng.epoch = state.epoch;
  ckpt.rng.step_in_epoch = state.step_in_epoch;
  ckpt.flow_history.assign(state.flow_history.begin(), state.flow_history.end());
  return ckpt;
}

void restore_model(const Checkpoint& ckpt, DmmModel& model, TrainState& state) {
  require(ckpt.role == "dmm", "restore_model: checkpoint role is '" + ckpt.role + "'");
  DenoiserConfig d;
  d.base_channels = static_cast<int64_t>(get_meta(ckpt, "denoiser.base"));
  d.levels = static_cast<int>(get_meta(ckpt, "denoiser.levels"));
  d.res_blocks = static_cast<int>(get_meta(ckpt, "denoiser.res_blocks"));
  d.temb_dim = static_cast<int64_t>(get_meta(ckpt, "denoiser.temb_dim"));
  d.groups = static_cast<int>(get_meta(ckpt, "denoiser.groups"));
  d.middle_attention = get_meta(ckpt, "denoiser.attn") != 0.0;
  d.dropout = get_meta(ckpt, "denoiser.dropout");
  RegConfig r;
  r.base_channels = static_cast<int64_t>(get_meta(ckpt, "regnet.base"));
  r.levels = static_cast<int>(get_meta(ckpt, "regnet.levels"));
  r.groups = static_cast<int>(get_meta(ckpt, "regnet.groups"));
  r.output_scale = get_meta(ckpt, "regnet.output_scale");
  model = make_model(d, r, ckpt.rng.master_seed);
  import_params(ckpt, model.denoiser.params(), "denoiser.");
  import_params(ckpt, model.regnet.params(), "regnet.");
  state = TrainState{};
  auto den_opt = ckpt.optimizers.find("denoiser");
  if (den_opt != ckpt.optimizers.end()) state.adam_denoiser = den_opt->second;
  auto reg_opt = ckpt.optimizers.find("regnet");
  if (reg_opt != ckpt.optimizers.end()) state.adam_regnet = reg_opt->second;
  state.global_step = ckpt.rng.global_step;
  state.epoch = ckpt.rng.epoch;
  state.step_in_epoch = ckpt.rng.step_in_epoch;
  state.flow_history.assign(ckpt.flow_history.begin(), ckpt.flow_history.end());
}

Checkpoint snapshot_supervisor(const SupervisorNet& net) {
  Checkpoint ckpt;
  ckpt.role = "supervisor";
  export_params(ckpt, net.params(), "supervisor.");
  const SupervisorConfig& c = net.config();
  put_meta(ckpt, "supervisor.base", static_cast<double>(c.base_channels));
  put_meta(ckpt, "supervisor.blocks", c.blocks);
  put_meta(ckpt, "supervisor.groups", c.groups);
  put_meta(ckpt, "supervisor.val_accuracy", net.validation_accuracy());
  return ckpt;
}

SupervisorNet restore_supervisor(const Checkpoint& ckpt) {
  require(ckpt.role == "supervisor",
          "restore_supervisor: checkpoint role is '" + ckpt.role + "'");
  SupervisorConfig c;
  c.base_channels = static_cast<int64_t>(get_meta(ckpt, "supervisor.base"));
  c.blocks = static_cast<int>(get_meta(ckpt, "supervisor.blocks"));
  c.groups = static_cast<int>(get_meta(ckpt, "supervisor.groups"));
  Rng rng(0);
  SupervisorNet net(c, rng);
  import_params(ckpt, net.params(), "supervisor.");
  net.set_validation_accuracy(get_meta(ckpt, "supervisor.val_accuracy"));
  net.freeze();
  return net;
}

}  // namespace dmm
