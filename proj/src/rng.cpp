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

#include "dmm/rng.hpp"

#include <sstream>

namespace dmm {

std::string Rng::save_state() const {
  std::ostringstream os;
  os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
  os.precision(17);
  os << spare_;
  return os.str();
}

void Rng::load_state(const std::string& s) {
  std::istringstream is(s);
  int spare_flag = 0;
  is >> engine_ >> spare_flag >> spare_;
  require(!is.fail(), "Rng::load_state: malformed state string");
  has_spare_ = spare_flag != 0;
}

namespace {

// splitmix64 finalizer; decorrelates seeds that differ in few bits.
uint64_t mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t substream_seed(uint64_t master, const std::string& name) {
  return mix(master ^ fnv1a(name));
}

uint64_t substream_seed(uint64_t master, const std::string& name, uint64_t k0) {
  return mix(substream_seed(master, name) ^ mix(k0 + 0x517cc1b727220a95ull));
}

uint64_t substream_seed(uint64_t master, const std::string& name, uint64_t k0, uint64_t k1) {
  return mix(substream_seed(master, name, k0) ^ mix(k1 + 0x2545f4914f6cdd1dull));
}

}  // namespace dmm
