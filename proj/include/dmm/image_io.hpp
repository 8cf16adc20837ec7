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

#include <string>
#include <vector>

#include "dmm/tensor.hpp"

namespace dmm {

// 8-bit grayscale image files. Images in memory are (H,W) tensors in
// [-1, 1]; files hold the nearest-integer 8-bit quantization, so
// read(write(img)) is exact for images that came from 8-bit data.

void write_pgm(const std::string& path, const Tensor& img);
Tensor read_pgm(const std::string& path);

void write_png8(const std::string& path, const Tensor& img);
Tensor read_png8(const std::string& path);

/// Dispatch by extension (.pgm / .png).
void write_image(const std::string& path, const Tensor& img);
Tensor read_image(const std::string& path);

/// Pairing manifest: one line per pair, "source_path<TAB>target_path",
/// paths relative to the manifest location.
struct ManifestEntry {
  std::string source;
  std::string target;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace dmm
