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

#include <filesystem>
#include <fstream>

#include "dmm/commands.hpp"
#include "dmm/image_io.hpp"
#include "dmm/run_config.hpp"

using namespace dmm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  os << content;
}

RunConfig small_cfg(const TempDir& dir) {
  RunConfig cfg;
  cfg.out_dir = dir.str() + "/data";
  cfg.pairs = 3;
  cfg.image_size = 32;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("run config parsing") {
  TempDir dir("dmm_cfg_test");
  std::string path = dir.str() + "/run.cfg";
  write_file(path,
             "# comment line\n"
             "seed=42\n"
             "pairs = 12\n"
             "lambda1 = 0.25\n"
             "etas = 0,0.5,1\n"
             "stop_grad_at_nhat = true\n"
             "\n");
  RunConfig cfg = parse_run_config(path);
  CHECK(cfg.seed == 42);
  CHECK(cfg.pairs == 12);
  CHECK(cfg.lambda1 == 0.25);
  CHECK(cfg.etas.size() == 3);
  CHECK(cfg.stop_grad_at_nhat);

  // unknown keys are an error naming the key
  write_file(path, "not_a_key=1\n");
  try {
    parse_run_config(path);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
  }

  write_file(path, "seed=xyz\n");
  CHECK_THROWS_AS(parse_run_config(path), Error);
  write_file(path, "just a line\n");
  CHECK_THROWS_AS(parse_run_config(path), Error);

  // resolved config writes every key and parses back identically
  RunConfig defaults;
  defaults.etas = {0.0, 0.5, 1.0};
  std::string resolved = dir.str() + "/resolved.cfg";
  write_resolved_config(defaults, resolved);
  RunConfig back = parse_run_config(resolved);
  CHECK(back.seed == defaults.seed);
  CHECK(back.etas == defaults.etas);
  CHECK(back.lr_denoiser == defaults.lr_denoiser);
}

TEST_CASE("cmd_phantom_gen writes pairs, truths and a manifest; reruns are byte-identical") {
  TempDir dir("dmm_cli_gen_test");
  RunConfig cfg = small_cfg(dir);
  CHECK(cmd_phantom_gen(cfg) == 0);

  auto manifest = read_manifest(cfg.out_dir + "/manifest.tsv");
  CHECK(manifest.size() == 3);
  CHECK(fs::exists(cfg.out_dir + "/pair_0000_source.png"));
  CHECK(fs::exists(cfg.out_dir + "/pair_0002_truth_s0.75.png"));
  CHECK(fs::exists(cfg.out_dir + "/phantom-gen.resolved.cfg"));

  std::string before = read_file(cfg.out_dir + "/pair_0001_source.png");
  RunConfig cfg2 = cfg;
  cfg2.out_dir = dir.str() + "/data2";
  CHECK(cmd_phantom_gen(cfg2) == 0);
  CHECK(read_file(cfg2.out_dir + "/pair_0001_source.png") == before);

  // invalid geometry -> exit 1
  RunConfig bad = cfg;
  bad.phantom_g0 = 2.0;
  bad.phantom_g1 = 5.0;
  CHECK(cmd_phantom_gen(bad) == 1);

  // loader round-trip
  PairDataset ds = load_pair_dataset(cfg.out_dir);
  CHECK(ds.pairs.size() == 3);
  CHECK(ds.pairs[0].truths.size() == 3);
}

TEST_CASE("missing prerequisites exit with code 1 and name the file") {
  TempDir dir("dmm_cli_prereq_test");
  RunConfig cfg;
  cfg.out_dir = dir.str() + "/out";
  cfg.data_dir = dir.str() + "/nodata";
  cfg.supervisor_ckpt = dir.str() + "/missing.dmmc";
  CHECK(cmd_train(cfg) == 1);
  CHECK(cmd_synthesize(cfg) == 1);
  CHECK(cmd_evaluate(cfg) == 1);
  CHECK(cmd_sweep(cfg) == 1);
}

TEST_CASE("pipeline on a tiny configuration") {
  TempDir dir("dmm_cli_pipe_test");

  // 1) data
  RunConfig gen = small_cfg(dir);
  gen.pairs = 4;
  REQUIRE(cmd_phantom_gen(gen) == 0);

  // 2) supervisor
  RunConfig sup = gen;
  sup.out_dir = dir.str() + "/sup";
  sup.sup_per_class = 16;
  sup.sup_epochs = 60;
  sup.sup_batch = 8;
  REQUIRE(cmd_pretrain_supervisor(sup) == 0);
  REQUIRE(fs::exists(sup.out_dir + "/supervisor.dmmc"));

  // 3) train (tiny nets, few steps)
  RunConfig tr = gen;
  tr.out_dir = dir.str() + "/train";
  tr.data_dir = gen.out_dir;
  tr.supervisor_ckpt = sup.out_dir + "/supervisor.dmmc";
  tr.denoiser_base = 8;
  tr.denoiser_levels = 2;
  tr.denoiser_res_blocks = 1;
  tr.regnet_base = 8;
  tr.max_steps = 6;
  tr.batch_size = 2;
  tr.t_max = 20;
  tr.threads = 2;
  REQUIRE(cmd_train(tr) == 0);
  REQUIRE(fs::exists(tr.out_dir + "/model.dmmc"));
  REQUIRE(fs::exists(tr.out_dir + "/loss_log.csv"));
  REQUIRE(fs::exists(tr.out_dir + "/phibar.dmmf"));

  // train-then-resume reproduces the loss CSV byte-for-byte
  RunConfig tr_half = tr;
  tr_half.out_dir = dir.str() + "/train_resume";
  tr_half.max_steps = 3;
  tr_half.checkpoint_interval = 3;
  REQUIRE(cmd_train(tr_half) == 0);
  RunConfig tr_rest = tr;
  tr_rest.out_dir = tr_half.out_dir;
  tr_rest.resume = tr_half.out_dir + "/ckpt_step3.dmmc";
  REQUIRE(cmd_train(tr_rest) == 0);
  CHECK(read_file(tr.out_dir + "/loss_log.csv") ==
        read_file(tr_half.out_dir + "/loss_log.csv"));

  // 4) synthesize, paired mode: 5 frames per source, eta=0 byte-equal
  RunConfig sy = tr;
  sy.out_dir = dir.str() + "/synth";
  sy.model_ckpt = tr.out_dir + "/model.dmmc";
  REQUIRE(cmd_synthesize(sy) == 0);
  for (int p = 0; p < 4; ++p) {
    char pair_buf[64];
    std::snprintf(pair_buf, sizeof(pair_buf), "pair_%04d", p);
    int found = 0;
    for (const char* eta : {"0.00", "0.25", "0.50", "0.75", "1.00"})
      if (fs::exists(sy.out_dir + "/frames/" + pair_buf + "_eta" + eta + ".png")) ++found;
    CHECK(found == 5);
    CHECK(read_file(sy.out_dir + "/frames/" + pair_buf + "_eta0.00.png") ==
          read_file(gen.out_dir + "/" + pair_buf + "_source.png"));
  }

  // source-only mode through the stored unified field
  RunConfig so = sy;
  so.out_dir = dir.str() + "/synth_so";
  so.synth_mode = "source-only";
  so.flow_avg_window = 5;
  REQUIRE(cmd_synthesize(so) == 0);
  CHECK(fs::exists(so.out_dir + "/frames/pair_0000_eta1.00.png"));

  // 5) evaluate: pairs x 3 records
  RunConfig ev = sy;
  ev.out_dir = dir.str() + "/eval";
  REQUIRE(cmd_evaluate(ev) == 0);
  std::ifstream is(ev.out_dir + "/eval_records.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "pair_id,eta,psnr_db,nmse,mse");
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4 * 3);

  // 6) sweep: 2x2 grid -> 4 rows, cell (0.1, 0.01) present
  RunConfig sw = tr;
  sw.out_dir = dir.str() + "/sweep";
  sw.sweep_steps = 2;
  REQUIRE(cmd_sweep(sw) == 0);
  std::ifstream sws(sw.out_dir + "/sweep.csv");
  std::getline(sws, line);
  CHECK(line == "lambda1,lambda2,final_l_sup,neg_log_l_sup");
  rows = 0;
  bool has_selected_cell = false;
  while (std::getline(sws, line))
    if (!line.empty()) {
      ++rows;
      if (line.rfind("0.1,0.01", 0) == 0) has_selected_cell = true;
    }
  CHECK(rows == 4);
  CHECK(has_selected_cell);
}
