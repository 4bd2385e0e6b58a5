#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "hies/transformer.hpp"

namespace hies {

struct TrainConfig {
  int epochs = 8;
  int batch_size = 32;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t shuffle_seed = 0;  // 0: derive from model seed
};

struct TrainStats {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;
};

inline double mean_loss(const GatedTransformer& model, const Dataset& data,
                        const GateVector& gates) {
  if (data.empty()) throw InputError("empty dataset");
  double s = 0.0;
  for (const auto& ex : data.items) s += model.loss_only(ex, gates);
  return s / data.size();
}

// Plain Adam over full-batch shuffled minibatches. NaN loss raises TrainError
// with the step index.
inline TrainStats train(GatedTransformer& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw InputError("empty training dataset");
  if (cfg.lr < 0.0) throw ConfigError("learning rate must be >= 0");
  const GateVector open_gates = GateVector::ones(model.config());
  auto prefs = model.params();

  std::vector<Tensor> m(prefs.size()), v(prefs.size()), acc(prefs.size());
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    m[i] = Tensor(prefs[i].tensor->shape());
    v[i] = Tensor(prefs[i].tensor->shape());
  }

  TrainStats stats;
  try {
    stats.initial_loss = mean_loss(model, data, open_gates);
  } catch (const InputError& e) {
    throw TrainError(std::string("training diverged at step 0: ") + e.what());
  }

  std::mt19937_64 rng(cfg.shuffle_seed ? cfg.shuffle_seed : model.config().seed + 0x9e3779b9ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
      for (auto& a : acc) a = Tensor();
      double batch_loss = 0.0;
      ++step;
      try {
        for (std::size_t b = 0; b < bsz; ++b) {
          const Example& ex = data.items[order[pos + b]];
          ForwardPass fp;
          model.run_forward(ex, open_gates, fp, /*want_records=*/false);
          model.run_backward(fp);
          batch_loss += fp.loss_value();
          for (std::size_t i = 0; i < prefs.size(); ++i) {
            if (acc[i].empty()) acc[i] = Tensor(prefs[i].tensor->shape());
            for (std::size_t k = 0; k < acc[i].size(); ++k)
              acc[i][k] += fp.param_grads[i][k] / static_cast<double>(bsz);
          }
        }
      } catch (const InputError& e) {
        // Non-finite intermediates surface here once parameters blow up.
        throw TrainError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      batch_loss /= static_cast<double>(bsz);
      epoch_sum += batch_loss * bsz;
      if (!std::isfinite(batch_loss))
        throw TrainError("training loss diverged at step " + std::to_string(step));

      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < prefs.size(); ++i) {
        Tensor& p = *prefs[i].tensor;
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double g = acc[i][k];
          m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g;
          v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g * g;
          const double mhat = m[i][k] / bc1;
          const double vhat = v[i][k] / bc2;
          p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
      }
      pos += bsz;
    }
    stats.epoch_loss.push_back(epoch_sum / data.size());
  }
  stats.final_loss = mean_loss(model, data, open_gates);
  return stats;
}

inline double accuracy(const GatedTransformer& model, const Dataset& data,
                       const GateVector& gates) {
  if (data.empty()) throw InputError("empty eval dataset");
  int hits = 0;
  for (const auto& ex : data.items) hits += (model.predict(ex, gates) == ex.label) ? 1 : 0;
  return static_cast<double>(hits) / data.size();
}

}  // namespace hies
