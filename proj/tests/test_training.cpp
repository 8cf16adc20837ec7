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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dmm/training.hpp"

using namespace dmm;

namespace {

DenoiserConfig tiny_denoiser() {
  DenoiserConfig d;
  d.base_channels = 8;
  d.levels = 2;
  d.res_blocks = 1;
  d.temb_dim = 16;
  d.groups = 4;
  return d;
}

RegConfig tiny_regnet() {
  RegConfig r;
  r.base_channels = 8;
  r.levels = 2;
  r.groups = 4;
  return r;
}

SupervisorNet tiny_supervisor(uint64_t seed) {
  SupervisorConfig c;
  c.base_channels = 8;
  c.blocks = 2;
  c.groups = 4;
  Rng rng(seed);
  SupervisorNet net(c, rng);
  net.freeze();
  return net;
}

DmmModel tiny_model(uint64_t seed) { return make_model(tiny_denoiser(), tiny_regnet(), seed); }

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.t_max = 20;
  cfg.batch_size = 2;
  cfg.max_steps = 4;
  cfg.epochs = 100;
  cfg.threads = 2;
  cfg.seed = 7;
  return cfg;
}

PairDataset tiny_dataset(int64_t n = 4) {
  return generate_pair_dataset(n, 16, 5, PhantomParams::defaults_for(16));
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("kaiming_init draws Normal(0, 2/fan_in)") {
  Rng rng(1);
  Tensor big = kaiming_init(Shape{4, 25000}, 50, rng);
  double mean = 0.0;
  for (int64_t i = 0; i < big.numel(); ++i) mean += big.at(i);
  mean /= static_cast<double>(big.numel());
  double var = 0.0;
  for (int64_t i = 0; i < big.numel(); ++i) {
    double d = big.at(i) - mean;
    var += d * d;
  }
  var /= static_cast<double>(big.numel());
  CHECK(var == doctest::Approx(2.0 / 50.0).epsilon(0.05));

  // determinism
  Rng r1(9), r2(9);
  Tensor a = kaiming_init(Shape{3, 3}, 9, r1);
  Tensor b = kaiming_init(Shape{3, 3}, 9, r2);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));

  // bias convention: zeros
  ParamStore ps;
  Rng r3(4);
  init_conv(ps, "c", 2, 3, 3, r3);
  const Tensor& bias = ps.get("c.b");
  for (int64_t i = 0; i < bias.numel(); ++i) CHECK(bias.at(i) == 0.0);

  CHECK_THROWS_AS(kaiming_init(Shape{2, 2}, 0, r3), Error);
}

TEST_CASE("adam_step zero gradient leaves parameters unchanged") {
  ParamStore ps;
  ps.add("w", Tensor::from(Shape{3}, {1.0, -2.0, 3.0}));
  AdamState st;
  std::map<std::string, Tensor> grads;
  grads.emplace("w", Tensor::zeros(Shape{3}));
  adam_step(ps, grads, st, 0.1);
  CHECK(ps.get("w").at(0) == 1.0);
  CHECK(ps.get("w").at(1) == -2.0);
  CHECK(ps.get("w").at(2) == 3.0);
}

TEST_CASE("adam first step magnitude is about lr") {
  ParamStore ps;
  ps.add("w", Tensor::from(Shape{1}, {5.0}));
  AdamState st;
  std::map<std::string, Tensor> grads;
  grads.emplace("w", Tensor::from(Shape{1}, {2.5}));
  adam_step(ps, grads, st, 0.01);
  CHECK(std::fabs(5.0 - ps.get("w").at(0)) == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("adam 10-step trajectory on f(x)=x^2 matches scalar oracle") {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamStore ps;
  ps.add("x", Tensor::from(Shape{1}, {1.3}));
  AdamState st;

  // independently coded scalar Adam
  double x_oracle = 1.3, m = 0.0, v = 0.0;
  for (int step = 1; step <= 10; ++step) {
    double g = 2.0 * ps.get("x").at(0);
    std::map<std::string, Tensor> grads;
    grads.emplace("x", Tensor::from(Shape{1}, {g}));
    adam_step(ps, grads, st, lr, b1, b2, eps);

    double g_o = 2.0 * x_oracle;
    m = b1 * m + (1 - b1) * g_o;
    v = b2 * v + (1 - b2) * g_o * g_o;
    double mhat = m / (1 - std::pow(b1, step));
    double vhat = v / (1 - std::pow(b2, step));
    x_oracle -= lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(ps.get("x").at(0) == doctest::Approx(x_oracle).epsilon(1e-10));
  }

  std::map<std::string, Tensor> bad;
  bad.emplace("x", Tensor::zeros(Shape{2}));
  CHECK_THROWS_AS(adam_step(ps, bad, st, lr), Error);
}

TEST_CASE("train_step: degenerate weights, decomposition, gradient flow") {
  PairDataset ds = tiny_dataset();
  SupervisorNet sup = tiny_supervisor(3);
  NoiseSchedule sched = make_schedule(20, 1e-4, 0.02);
  std::vector<const PairRecord*> batch = {&ds.pairs[0], &ds.pairs[1]};

  {
    // lambda1 = lambda2 = 0 -> hybrid equals diffusion loss exactly
    DmmModel model = tiny_model(7);
    TrainConfig cfg = tiny_config();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    TrainState state;
    LossBreakdown lb = train_step(model, sup, batch, sched, cfg, state);
    CHECK(lb.l_hybrid == lb.l_diff);
  }
  {
    // paper weights: exact recomposition from the returned components
    DmmModel model = tiny_model(7);
    TrainConfig cfg = tiny_config();
    TrainState state;
    LossBreakdown lb = train_step(model, sup, batch, sched, cfg, state);
    CHECK(std::fabs(lb.l_hybrid - (lb.l_diff + 0.1 * lb.l_mph + 0.01 * lb.l_sup)) <= 1e-12);
    CHECK(state.flow_history.size() == 1);
  }
  {
    // both nets move after one step
    DmmModel model = tiny_model(7);
    uint64_t den_digest = model.denoiser.params().digest();
    uint64_t reg_digest = model.regnet.params().digest();
    uint64_t sup_digest = sup.params().digest();
    TrainConfig cfg = tiny_config();
    TrainState state;
    train_step(model, sup, batch, sched, cfg, state);
    CHECK(model.denoiser.params().digest() != den_digest);
    CHECK(model.regnet.params().digest() != reg_digest);
    CHECK(sup.params().digest() == sup_digest);  // frozen supervisor untouched
  }
}

TEST_CASE("train_step is bit-identical for any thread count") {
  PairDataset ds = tiny_dataset();
  SupervisorNet sup = tiny_supervisor(3);
  NoiseSchedule sched = make_schedule(20, 1e-4, 0.02);
  std::vector<const PairRecord*> batch;
  for (const auto& p : ds.pairs) batch.push_back(&p);

  auto run = [&](int64_t threads) {
    DmmModel model = tiny_model(11);
    TrainConfig cfg = tiny_config();
    cfg.threads = threads;
    TrainState state;
    LossBreakdown lb = train_step(model, sup, batch, sched, cfg, state);
    return std::make_pair(lb, model.denoiser.params().digest() ^ model.regnet.params().digest());
  };
  auto [lb1, d1] = run(1);
  auto [lb4, d4] = run(4);
  CHECK(lb1.l_hybrid == lb4.l_hybrid);
  CHECK(lb1.l_diff == lb4.l_diff);
  CHECK(lb1.l_mph == lb4.l_mph);
  CHECK(lb1.l_sup == lb4.l_sup);
  CHECK(d1 == d4);
}

TEST_CASE("average_flow") {
  Rng rng(12);
  FlowField f(rand_uniform(Shape{2, 4, 4}, rng, -1.0, 1.0));
  std::deque<FlowField> hist;
  for (int i = 0; i < 3; ++i) hist.push_back(f);
  FlowField avg = average_flow(hist, 3);
  for (int64_t i = 0; i < f.field.numel(); ++i)
    CHECK(avg.field.at(i) == doctest::Approx(f.field.at(i)).epsilon(1e-15));

  // {phi, -phi} averages to zero
  FlowField neg(f.field);
  {
    double* p = neg.field.mutable_data();
    for (int64_t i = 0; i < neg.field.numel(); ++i) p[i] = -p[i];
  }
  std::deque<FlowField> pm = {f, neg};
  CHECK(average_flow(pm, 2).mean_abs() == 0.0);

  // five random fields vs a per-pixel accumulation oracle
  std::vector<FlowField> five;
  for (int i = 0; i < 5; ++i) five.push_back(FlowField(rand_uniform(Shape{2, 4, 4}, rng, -1, 1)));
  FlowField m = average_flow(five, 5);
  for (int64_t i = 0; i < m.field.numel(); ++i) {
    double acc = 0.0;
    for (const auto& g : five) acc += g.field.at(i);
    CHECK(m.field.at(i) == doctest::Approx(acc / 5.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(average_flow(pm, 3), Error);
}

TEST_CASE("synthesize_sequence") {
  Rng rng(13);
  Tensor x = rand_uniform(Shape{8, 8}, rng, -1.0, 1.0);
  FlowField phi(rand_uniform(Shape{2, 8, 8}, rng, -2.0, 2.0));

  std::vector<Tensor> frames = synthesize_sequence(x, phi);
  CHECK(frames.size() == 5);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(frames[0].at(i) == x.at(i));

  // monotone-displacement property on an analytic fixture: linear ramp
  // image and constant rightward flow, so |frame - x| grows linearly in eta
  std::vector<double> ramp(64);
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t xx = 0; xx < 8; ++xx) ramp[static_cast<size_t>(y * 8 + xx)] = 0.1 * static_cast<double>(xx);
  Tensor ramp_img = Tensor::from(Shape{8, 8}, ramp);
  std::vector<double> cflow(128, 0.0);
  for (int64_t i = 0; i < 64; ++i) cflow[static_cast<size_t>(i)] = 1.7;  // dx plane
  FlowField cf(Tensor::from(Shape{2, 8, 8}, cflow));
  std::vector<Tensor> seq = synthesize_sequence(ramp_img, cf);
  double prev = -1.0;
  for (const Tensor& frame : seq) {
    double diff = 0.0;
    for (int64_t i = 0; i < frame.numel(); ++i) diff += std::fabs(frame.at(i) - ramp_img.at(i));
    diff /= static_cast<double>(frame.numel());
    CHECK(diff >= prev);
    prev = diff;
  }

  CHECK_THROWS_AS(synthesize_sequence(x, phi, {}), Error);
  CHECK_THROWS_AS(synthesize_sequence(x, phi, {1.2}), Error);
}

TEST_CASE("fit: logging, determinism, loss-log shape") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_fit_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  PairDataset ds = tiny_dataset();
  SupervisorNet sup = tiny_supervisor(3);

  auto run = [&](const std::string& csv) {
    DmmModel model = tiny_model(21);
    TrainConfig cfg = tiny_config();
    TrainState state;
    FitResult res = fit(model, sup, ds, cfg, state, (dir / csv).string());
    return std::make_pair(res, model.denoiser.params().digest());
  };
  auto [res1, digest1] = run("a.csv");
  auto [res2, digest2] = run("b.csv");

  CHECK(res1.log.size() == 4);  // max_steps
  CHECK(res1.log.front().step == 1);
  CHECK(res1.log.back().step == 4);
  CHECK(digest1 == digest2);
  CHECK(read_file((dir / "a.csv").string()) == read_file((dir / "b.csv").string()));

  std::ifstream is(dir / "a.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,epoch,l_diff,l_mph,l_sup,l_hybrid");
  int rows = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip is lossless") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_ckpt_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::string path = (dir / "m.dmmc").string();

  PairDataset ds = tiny_dataset();
  SupervisorNet sup = tiny_supervisor(3);
  DmmModel model = tiny_model(31);
  TrainConfig cfg = tiny_config();
  TrainState state;
  NoiseSchedule sched = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end);
  std::vector<const PairRecord*> batch = {&ds.pairs[0], &ds.pairs[1]};
  train_step(model, sup, batch, sched, cfg, state);
  train_step(model, sup, batch, sched, cfg, state);

  Checkpoint ckpt = snapshot_model(model, state, cfg);
  write_checkpoint(path, ckpt);
  Checkpoint rd = read_checkpoint(path);

  CHECK(rd.role == "dmm");
  CHECK(rd.params.size() == ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    const Tensor& r = rd.params.at(name);
    REQUIRE(r.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(r.at(i) == t.at(i));
  }
  for (const auto& [name, st] : ckpt.optimizers) {
    const AdamState& r = rd.optimizers.at(name);
    CHECK(r.step == st.step);
    REQUIRE(r.moments.size() == st.moments.size());
    for (const auto& [pname, mv] : st.moments) {
      const auto& rmv = r.moments.at(pname);
      CHECK(rmv.first == mv.first);
      CHECK(rmv.second == mv.second);
    }
  }
  CHECK(rd.rng.master_seed == cfg.seed);
  CHECK(rd.rng.global_step == 2);
  REQUIRE(rd.flow_history.size() == ckpt.flow_history.size());
  for (size_t i = 0; i < rd.flow_history.size(); ++i)
    for (int64_t k = 0; k < rd.flow_history[i].field.numel(); ++k)
      CHECK(rd.flow_history[i].field.at(k) == ckpt.flow_history[i].field.at(k));

  // restored model continues identically to the original
  DmmModel restored;
  TrainState rstate;
  restore_model(rd, restored, rstate);
  LossBreakdown a = train_step(model, sup, batch, sched, cfg, state);
  LossBreakdown b = train_step(restored, sup, batch, sched, cfg, rstate);
  CHECK(a.l_hybrid == b.l_hybrid);
  CHECK(model.denoiser.params().digest() == restored.denoiser.params().digest());
  CHECK(model.regnet.params().digest() == restored.regnet.params().digest());
  fs::remove_all(dir);
}

TEST_CASE("interrupt and resume reproduces the uninterrupted run bit-exactly") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_resume_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  PairDataset ds = tiny_dataset(5);  // odd size: exercises partial batches
  SupervisorNet sup = tiny_supervisor(3);
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 6;

  // uninterrupted
  DmmModel full_model = tiny_model(41);
  TrainState full_state;
  fit(full_model, sup, ds, cfg, full_state, (dir / "full.csv").string());

  // interrupted at step 3 + resumed
  DmmModel part_model = tiny_model(41);
  TrainState part_state;
  TrainConfig first_half = cfg;
  first_half.max_steps = 3;
  fit(part_model, sup, ds, first_half, part_state, (dir / "resumed.csv").string());
  Checkpoint ckpt = snapshot_model(part_model, part_state, first_half);
  write_checkpoint((dir / "ckpt.dmmc").string(), ckpt);

  DmmModel resumed_model;
  TrainState resumed_state;
  restore_model(read_checkpoint((dir / "ckpt.dmmc").string()), resumed_model, resumed_state);
  fit(resumed_model, sup, ds, cfg, resumed_state, (dir / "resumed.csv").string());

  CHECK(read_file((dir / "full.csv").string()) == read_file((dir / "resumed.csv").string()));
  CHECK(full_model.denoiser.params().digest() == resumed_model.denoiser.params().digest());
  CHECK(full_model.regnet.params().digest() == resumed_model.regnet.params().digest());
  fs::remove_all(dir);
}

TEST_CASE("supervisor checkpoint role tag and round-trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_supckpt_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::string path = (dir / "s.dmmc").string();

  SupervisorNet sup = tiny_supervisor(51);
  sup.set_validation_accuracy(0.97);
  write_checkpoint(path, snapshot_supervisor(sup));
  Checkpoint ckpt = read_checkpoint(path);
  CHECK(ckpt.role == "supervisor");
  SupervisorNet back = restore_supervisor(ckpt);
  CHECK(back.frozen());
  CHECK(back.validation_accuracy() == 0.97);
  CHECK(back.params().digest() == sup.params().digest());

  DmmModel m;
  TrainState st;
  CHECK_THROWS_AS(restore_model(ckpt, m, st), Error);
  fs::remove_all(dir);
}
