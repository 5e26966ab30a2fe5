#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccenet/data.hpp"
#include "ccenet/metrics.hpp"
#include "ccenet/model.hpp"
#include "ccenet/optim.hpp"

namespace ccenet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainLogRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double wbce_main = 0.0;
  double dice_main = 0.0;
  double wbce_aux = 0.0;
  double dice_aux = 0.0;
  double total = 0.0;
  double main_loss = 0.0;  // wbce_main + lambda * dice_main
};

inline const char* train_log_header() { return "iter,lr,wbce_main,dice_main,wbce_aux,dice_aux,total"; }

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.iter, r.lr,
                r.wbce_main, r.dice_main, r.wbce_aux, r.dice_aux, r.total);
  return buf;
}

// Independent random streams derived from the config seed. Parameter
// initialization uses Rng(seed) directly inside Network.
inline Rng order_stream(std::uint64_t seed) { return Rng(seed ^ 0x9e3779b97f4a7c15ull); }
inline Rng augment_stream(std::uint64_t seed) { return Rng(seed ^ 0xc2b2ae3d27d4eb4full); }

/// Cycles through shuffled epochs of sample indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::uint64_t seed)
      : order_(dataset_size), rng_(order_stream(seed)) {
    if (dataset_size == 0) throw ConfigError("training set is empty");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

using LogSink = std::function<void(const TrainLogRow&)>;
using CheckpointHook = std::function<void(std::size_t iter)>;

/// Runs cfg.total_iters SGD iterations over `data`. Serial and
/// deterministic for a fixed config.
inline std::vector<TrainLogRow> train(Network& net, const std::vector<SegSample>& data,
                                      const LogSink& sink = {}, const CheckpointHook& hook = {},
                                      std::size_t checkpoint_every = 0) {
  const ModelConfig& cfg = net.config();
  cfg.validate();
  BatchSampler sampler(data.size(), cfg.seed);
  Rng aug_rng = augment_stream(cfg.seed);
  Sgd sgd(net.parameters(), cfg.momentum);
  std::vector<TrainLogRow> log;
  log.reserve(cfg.total_iters);
  for (std::size_t iter = 0; iter < cfg.total_iters; ++iter) {
    std::vector<SegSample> batch;
    for (std::size_t i : sampler.next(cfg.batch_size)) {
      batch.push_back(cfg.augment.any() ? augment(data[i], cfg.augment, cfg.input_size, aug_rng)
                                        : resize_sample(data[i], cfg.input_size));
    }
    auto [images, masks] = stack_batch(batch);

    Tape tape;
    LossTerms terms;
    {
      TapeScope scope(tape);
      ForwardResult r = net.forward(images, true);
      terms = net.loss(r, masks);
    }
    TrainLogRow row;
    row.iter = iter;
    row.lr = poly_lr(cfg.lr0, iter, cfg.total_iters, cfg.poly_power);
    row.wbce_main = terms.wbce_main;
    row.dice_main = terms.dice_main;
    row.wbce_aux = terms.wbce_aux;
    row.dice_aux = terms.dice_aux;
    row.total = terms.total.item();
    row.main_loss = terms.main_branch();
    if (!std::isfinite(row.total)) {
      throw TrainingError("non-finite loss at iteration " + std::to_string(iter) + " (lr " +
                          std::to_string(row.lr) + "): " + format_log_row(row));
    }
    tape.backward(terms.total);
    sgd.step(row.lr);
    log.push_back(row);
    if (sink) sink(row);
    if (hook && checkpoint_every > 0 && (iter + 1) % checkpoint_every == 0) hook(iter + 1);
  }
  return log;
}

/// Predicts one sample at the network's input size and maps the probability
/// back to the sample's own resolution.
inline Prediction predict_sample(Network& net, const SegSample& sample) {
  const std::size_t size = net.config().input_size;
  const Shape s = sample.image.shape();
  SegSample in = resize_sample(sample, size);
  Prediction p = net.predict(in.image);
  if (s.h != size || s.w != size) {
    p.main = bilinear_resize(p.main, s.h, s.w);
    if (p.aux.defined()) p.aux = bilinear_resize(p.aux, s.h, s.w);
    p.mask = threshold_mask(p.main);
  }
  return p;
}

inline std::vector<ImageRecord> evaluate(Network& net, const std::vector<SegSample>& samples) {
  std::vector<ImageRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const Prediction p = predict_sample(net, s);
    ImageRecord r;
    r.id = s.id;
    r.category = category_name(s.category);
    r.counts = confusion(p.mask, s.mask);
    r.scores = compute_metrics(r.counts);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ccenet
