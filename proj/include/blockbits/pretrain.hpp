#pragma once

#include <cmath>
#include <vector>

#include "blockbits/corpus.hpp"
#include "blockbits/model.hpp"

namespace blockbits {

struct PretrainOptions {
  std::size_t steps = 2000;
  double lr = 1.0;
  std::size_t batch_seqs = 4;
  std::size_t log_every = 0;  // 0 disables the loss history
};

struct PretrainResult {
  ModelBundle model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<std::size_t, double>> history;
};

// Batch `step` of the fixed schedule: consecutive windows of seq_len tokens,
// wrapping around the stream.
inline Batch training_batch(const std::vector<int>& corpus, std::size_t seq_len, std::size_t batch_seqs,
                            std::size_t step) {
  const std::size_t windows = corpus.size() / seq_len;
  if (windows == 0) throw SizeError("training corpus shorter than one sequence");
  Batch b;
  b.reserve(batch_seqs);
  for (std::size_t i = 0; i < batch_seqs; ++i) {
    const std::size_t w = (step * batch_seqs + i) % windows;
    const auto start = corpus.begin() + static_cast<std::ptrdiff_t>(w * seq_len);
    b.emplace_back(start, start + static_cast<std::ptrdiff_t>(seq_len));
  }
  return b;
}

// Plain minibatch SGD on mean next-token cross-entropy.
inline PretrainResult pretrain(ModelBundle model, const std::vector<int>& corpus, const PretrainOptions& opt) {
  PretrainResult res;
  const std::size_t seq_len = model.spec().seq_len;
  double loss = 0.0;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const Batch batch = training_batch(corpus, seq_len, opt.batch_seqs, step);
    TapedForward f = forward_tape(WeightView(model), batch);
    loss = f.loss_value();
    if (!std::isfinite(loss)) throw TrainingError("loss diverged at step " + std::to_string(step));
    if (step == 0) res.initial_loss = loss;
    if (opt.log_every && step % opt.log_every == 0) res.history.emplace_back(step, loss);
    auto grads = f.gradients();
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto p = model.params()[i].data();
      auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= opt.lr * g[j];
    }
  }
  res.final_loss = opt.steps ? loss : 0.0;
  res.model = std::move(model);
  return res;
}

}  // namespace blockbits
