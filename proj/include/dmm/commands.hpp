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

#pragma once

#include "dmm/phantom.hpp"
#include "dmm/run_config.hpp"

namespace dmm {

// Command entry points. Exit codes: 0 success, 1 configuration or missing
// prerequisite, 2 I/O failure, 3 numerical failure.

int cmd_phantom_gen(const RunConfig& cfg);
int cmd_pretrain_supervisor(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_synthesize(const RunConfig& cfg);
int cmd_evaluate(const RunConfig& cfg);
int cmd_sweep(const RunConfig& cfg);

/// Phantom geometry from a run configuration (negative values select the
/// size-scaled defaults).
PhantomParams phantom_proto(const RunConfig& cfg);

/// Reads a dataset directory (manifest + images + any ground-truth
/// intermediates following the pair_XXXX_truth_sY.YY naming scheme).
PairDataset load_pair_dataset(const std::string& dir);

}  // namespace dmm
