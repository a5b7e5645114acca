#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cvrnet/param_store.hpp"

namespace cvrnet {

/// Training protocol defaults: Adam at lr 1e-4 (beta1 0.9, beta2 0.999,
/// no AMSGrad), learning rate cut to a tenth after 12 epochs without
/// validation improvement.
struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool amsgrad = false;

  int plateau_patience = 12;
  double plateau_factor = 0.1;
  double min_lr = 1e-7;
  double min_improvement = 1e-6;

  int epochs = 50;
  int batch_size = 16;
  std::uint64_t seed = 42;
  int workers = 1;

  void validate() const {
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
      throw ValueError("adam betas must lie in (0, 1)");
    if (epsilon <= 0) throw ValueError("adam epsilon must be > 0");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw ValueError("plateau factor must lie in (0, 1)");
    if (plateau_patience < 1) throw ValueError("plateau patience must be >= 1");
    if (lr0 <= 0 || min_lr <= 0 || min_lr > lr0) throw ValueError("invalid learning rate range");
    if (epochs < 0 || batch_size < 1) throw ValueError("invalid epochs/batch size");
    if (workers < 1) throw ValueError("workers must be >= 1");
  }
};

/// First/second moment estimates per trainable parameter, in store order.
template <typename T>
struct AdamStateT {
  std::int64_t step = 0;
  std::vector<TensorT<T>> m;
  std::vector<TensorT<T>> v;
  std::vector<TensorT<T>> v_max;  // populated only when amsgrad is on

  void init_like(const ParamStoreT<T>& ps, bool amsgrad = false) {
    step = 0;
    m.clear();
    v.clear();
    v_max.clear();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& e = ps.entry_at(i);
      if (!e.trainable) {
        m.emplace_back();
        v.emplace_back();
        if (amsgrad) v_max.emplace_back();
        continue;
      }
      m.emplace_back(e.value.shape());
      v.emplace_back(e.value.shape());
      if (amsgrad) v_max.emplace_back(e.value.shape());
    }
  }
};

using AdamState = AdamStateT<float>;

/// One Adam update over every trainable, non-frozen parameter:
///   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
///   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Every parameter must carry a populated gradient slot.
template <typename T>
void adam_step(ParamStoreT<T>& params, AdamStateT<T>& state, T lr, const TrainConfig& cfg,
               const std::vector<std::string>& frozen_prefixes = {}) {
  if (state.m.size() != params.size()) {
    throw ValueError("adam state does not match parameter store (call init_like first)");
  }
  state.step += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.epsilon);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.step)));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& e = params.entry_at(i);
    if (!e.trainable) continue;
    bool frozen = false;
    for (const std::string& p : frozen_prefixes) {
      if (e.name.rfind(p, 0) == 0) {
        frozen = true;
        break;
      }
    }
    if (frozen) continue;
    if (e.grad.empty()) throw ValueError("missing gradient for parameter " + e.name);

    TensorT<T>& m = state.m[i];
    TensorT<T>& v = state.v[i];
    for (std::int64_t j = 0; j < e.value.numel(); ++j) {
      const T g = e.grad[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const T m_hat = m[j] / bc1;
      T v_hat = v[j] / bc2;
      if (cfg.amsgrad) {
        TensorT<T>& vm = state.v_max[i];
        if (v_hat > vm[j]) vm[j] = v_hat;
        v_hat = vm[j];
      }
      e.value[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

/// Reduce-on-plateau state. An epoch improves when its validation loss drops
/// below the best seen by at least min_improvement; `patience` consecutive
/// non-improving epochs multiply the rate by `factor` (floored at min_lr)
/// and restart the count.
struct LrState {
  double current_lr = 1e-4;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
};

inline double lr_on_plateau(LrState& state, double val_loss, const TrainConfig& cfg) {
  if (std::isnan(val_loss)) throw NumericError("validation loss is NaN; training aborted");
  if (val_loss < state.best_val_loss - cfg.min_improvement) {
    state.best_val_loss = val_loss;
    state.epochs_since_improvement = 0;
    return state.current_lr;
  }
  state.epochs_since_improvement += 1;
  if (state.epochs_since_improvement >= cfg.plateau_patience) {
    state.current_lr = std::max(cfg.min_lr, state.current_lr * cfg.plateau_factor);
    state.epochs_since_improvement = 0;
  }
  return state.current_lr;
}

}  // namespace cvrnet
