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

#include "dmm/supervision.hpp"

#include <algorithm>
#include <cmath>

#include "dmm/training.hpp"

namespace dmm {

SupervisorNet::SupervisorNet(const SupervisorConfig& cfg, Rng& rng) : cfg_(cfg) {
  require(cfg.blocks >= 1, "SupervisorNet: blocks must be >= 1");
  auto ch = [&](int i) { return cfg.base_channels << std::min(i, 2); };
  for (int i = 0; i < cfg.blocks; ++i)
    require(ch(i) % cfg.groups == 0, "SupervisorNet: channels not divisible by groups");
  int64_t cin = 1;
  for (int i = 0; i < cfg.blocks; ++i) {
    init_conv(params_, "block" + std::to_string(i), cin, ch(i), 3, rng);
    init_group_norm(params_, "block" + std::to_string(i) + ".gn", ch(i));
    cin = ch(i);
  }
  init_linear(params_, "head", cin, 2, rng);
}

Tensor SupervisorNet::forward(Tape& tp, const ParamView& pv, const Tensor& image) const {
  require(initialized(), "SupervisorNet: uninitialized parameters");
  Tensor h = to_nchw(tp, image);
  require(h.shape().dim(0) == 1 && h.shape().dim(1) == 1,
          "SupervisorNet: image must be (H,W) or (1,1,H,W)");
  for (int i = 0; i < cfg_.blocks; ++i) {
    h = conv_fwd(tp, pv, "block" + std::to_string(i), h, 2, 1);
    h = group_norm_fwd(tp, pv, "block" + std::to_string(i) + ".gn", h, cfg_.groups);
    h = swish(tp, h);
  }
  h = global_avg_pool(tp, h);  // (1, C)
  return linear_fwd(tp, pv, "head", h);
}

Tensor classify(const SupervisorNet& net, const Tensor& image) {
  require(net.initialized(), "classify: uninitialized net");
  Tape tape;
  ParamView pv(tape, net.params(), /*trainable=*/false);
  Tensor logits = net.forward(tape, pv, image);
  return Tensor::from(Shape{2}, logits.vec());
}

namespace {

int argmax2(const Tensor& logits) { return logits.at(0) >= logits.at(1) ? 0 : 1; }

double accuracy_on(const SupervisorNet& net, const std::vector<const Tensor*>& images,
                   const std::vector<int>& labels) {
  int64_t hit = 0;
  for (size_t i = 0; i < images.size(); ++i)
    if (argmax2(classify(net, *images[i])) == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

}  // namespace

PretrainResult pretrain_supervisor(const std::vector<Tensor>& dataset_kl2,
                                   const std::vector<Tensor>& dataset_kl3,
                                   const PretrainConfig& config, const SupervisorConfig& arch) {
  require(!dataset_kl2.empty() && !dataset_kl3.empty(), "pretrain_supervisor: empty dataset");

  // Disjoint train/validation split, tail of each class held out.
  std::vector<const Tensor*> train_imgs, val_imgs;
  std::vector<int> train_labels, val_labels;
  auto split = [&](const std::vector<Tensor>& ds, int label) {
    size_t val_n = std::max<size_t>(1, static_cast<size_t>(std::llround(
                                           config.validation_fraction * static_cast<double>(ds.size()))));
    if (val_n >= ds.size()) val_n = ds.size() - 1;
    size_t train_n = ds.size() - val_n;
    for (size_t i = 0; i < ds.size(); ++i) {
      if (i < train_n) {
        train_imgs.push_back(&ds[i]);
        train_labels.push_back(label);
      } else {
        val_imgs.push_back(&ds[i]);
        val_labels.push_back(label);
      }
    }
  };
  split(dataset_kl2, 0);
  split(dataset_kl3, 1);
  require(!train_imgs.empty() && !val_imgs.empty(), "pretrain_supervisor: degenerate split");

  Rng init_rng = substream(config.seed, "init");
  PretrainResult res;
  res.net = SupervisorNet(arch, init_rng);
  AdamState adam;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // deterministic shuffle
    std::vector<size_t> order(train_imgs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = substream(config.seed, "data", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      std::map<std::string, std::vector<double>> acc;
      double inv_b = 1.0 / static_cast<double>(end - start);
      for (size_t k = start; k < end; ++k) {
        Tape tape;
        ParamView pv(tape, res.net.params(), /*trainable=*/true);
        Tensor logits = res.net.forward(tape, pv, *train_imgs[order[k]]);
        Tensor loss = cross_entropy(tape, logits, train_labels[order[k]]);
        tape.backward(loss);
        for (const auto& [name, leaf] : pv.bound()) {
          Tensor g = tape.grad_of(leaf);
          auto it = acc.find(name);
          if (it == acc.end()) {
            acc.emplace(name, g.vec());
          } else {
            for (int64_t i = 0; i < g.numel(); ++i) it->second[i] += g.at(i);
          }
        }
      }
      std::map<std::string, Tensor> grads;
      for (auto& [name, v] : acc) {
        for (double& x : v) x *= inv_b;
        grads.emplace(name, Tensor::from(res.net.params().get(name).shape(), std::move(v)));
      }
      adam_step(res.net.params(), grads, adam, config.lr);
    }
    res.epochs_run = epoch + 1;
    res.validation_accuracy = accuracy_on(res.net, val_imgs, val_labels);
    if (res.validation_accuracy >= config.target_accuracy) break;
  }

  if (res.validation_accuracy < config.min_accuracy)
    throw Error("pretrain_supervisor: validation accuracy " +
                std::to_string(res.validation_accuracy) + " below required " +
                std::to_string(config.min_accuracy) + " after " +
                std::to_string(res.epochs_run) + " epochs");
  res.net.set_validation_accuracy(res.validation_accuracy);
  res.net.freeze();
  return res;
}

Tensor supervision_loss(Tape& tp, const SupervisorNet& net, const Tensor& frame_half,
                        const Tensor& frame_three_quarter) {
  require(net.frozen(), "supervision_loss: supervisor must be frozen");
  ParamView pv(tp, net.params(), /*trainable=*/false);
  // eta = 0.5 anchors to class 0 (KL-2), eta = 0.75 to class 1 (KL-3)
  Tensor ce_half = cross_entropy(tp, net.forward(tp, pv, frame_half), 0);
  Tensor ce_three_quarter = cross_entropy(tp, net.forward(tp, pv, frame_three_quarter), 1);
  return add(tp, ce_half, ce_three_quarter);
}

double supervision_loss(const SupervisorNet& net, const Tensor& frame_half,
                        const Tensor& frame_three_quarter) {
  Tape tp;
  return supervision_loss(tp, net, frame_half.detached(), frame_three_quarter.detached()).at(0);
}

}  // namespace dmm
