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

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dmm/commands.hpp"
#include "dmm/run_config.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  long long seed = -1;
};

int run(const CommonFlags& flags, int (*cmd)(const dmm::RunConfig&)) {
  dmm::RunConfig cfg;
  try {
    if (!flags.config_path.empty()) cfg = dmm::parse_run_config(flags.config_path);
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    if (flags.seed >= 0) cfg.seed = static_cast<uint64_t>(flags.seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return cmd(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based morphing model for synthetic knee severity sequences"};
  app.require_subcommand(1);

  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(const dmm::RunConfig&);
    CommonFlags flags;
  };
  std::vector<Verb> verbs = {
      {"phantom-gen", "generate a paired phantom dataset (+ manifest + ground truth)",
       dmm::cmd_phantom_gen, {}},
      {"pretrain-supervisor", "pre-train and freeze the severity classifier",
       dmm::cmd_pretrain_supervisor, {}},
      {"train", "train the denoiser + registration nets with the hybrid loss", dmm::cmd_train,
       {}},
      {"synthesize", "write the eta-graded frame sequence per source image", dmm::cmd_synthesize,
       {}},
      {"evaluate", "score synthesized frames against ground-truth intermediates",
       dmm::cmd_evaluate, {}},
      {"sweep", "grid sweep over (lambda1, lambda2)", dmm::cmd_sweep, {}},
  };

  for (Verb& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", v.flags.config_path, "key=value configuration file");
    sub->add_option("--out", v.flags.out_dir, "output directory (overrides out_dir)");
    sub->add_option("--seed", v.flags.seed, "rng seed (overrides seed)");
  }

  CLI11_PARSE(app, argc, argv);

  for (const Verb& v : verbs)
    if (app.got_subcommand(v.name)) return run(v.flags, v.fn);
  return 1;
}
