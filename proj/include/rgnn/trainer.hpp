#pragma once

// Full-batch training for the node- and graph-level models: Adam or plain
// SGD, L2 regularization folded into the gradient, inverted dropout from the
// taped forward, and early stopping on validation accuracy with snapshot
// restore of the best epoch. Training is bit-reproducible for a fixed seed.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rgnn/errors.hpp"
#include "rgnn/model.hpp"

namespace rgnn {

enum class Optim { adam, sgd };

inline const char* optim_name(Optim o) { return o == Optim::adam ? "adam" : "sgd"; }

inline Optim parse_optim(const std::string& s) {
  if (s == "adam") return Optim::adam;
  if (s == "sgd") return Optim::sgd;
  throw ConfigError("unknown optimizer '" + s + "' (want adam|sgd)");
}

struct TrainConfig {
  Optim optim = Optim::adam;
  float lr = 0.01f;
  float weight_decay = 5e-4f;  // applied in-gradient to weight matrices only
  int epochs = 200;
  int patience = 20;  // epochs without a new best validation accuracy
  uint64_t seed = 0;
  const PruneMasks* masks = nullptr;  // re-applied after every step (pruned fine-tuning)

  void validate() const {
    if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ConfigError("lr must be >= 0");
    if (!(weight_decay >= 0.0f) || !std::isfinite(weight_decay))
      throw ConfigError("weight_decay must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (patience < 0) throw ConfigError("patience must be >= 0");
  }
};

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = -1;  // -1 when no validation nodes exist
  double best_val_acc = 0.0;
  std::vector<double> train_loss;  // one entry per epoch run
  std::vector<double> val_acc;     // parallel to train_loss when validating
};

namespace traindetail {

struct OptimState {
  std::vector<DenseMatrix> m1, m2;  // Adam moments, lazily sized
  long t = 0;
};

inline void step(const TrainConfig& tc, OptimState& st, Tape& tape,
                 std::vector<TapedParam>& params) {
  if (tc.optim == Optim::adam && st.m1.empty()) {
    for (const auto& p : params) {
      st.m1.emplace_back(p.host->rows(), p.host->cols());
      st.m2.emplace_back(p.host->rows(), p.host->cols());
    }
  }
  ++st.t;
  constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  const double bc1 = 1.0 - std::pow(double(b1), double(st.t));
  const double bc2 = 1.0 - std::pow(double(b2), double(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    float* w = params[i].host->data();
    const float* g = tape.grad(params[i].id).data();
    const size_t n = params[i].host->size();
    const bool decay = params[i].decay && tc.weight_decay > 0.0f;
    if (tc.optim == Optim::sgd) {
      for (size_t j = 0; j < n; ++j) {
        const float gj = g[j] + (decay ? tc.weight_decay * w[j] : 0.0f);
        w[j] -= tc.lr * gj;
      }
      continue;
    }
    float* m1 = st.m1[i].data();
    float* m2 = st.m2[i].data();
    for (size_t j = 0; j < n; ++j) {
      const float gj = g[j] + (decay ? tc.weight_decay * w[j] : 0.0f);
      m1[j] = b1 * m1[j] + (1.0f - b1) * gj;
      m2[j] = b2 * m2[j] + (1.0f - b2) * gj * gj;
      const float mhat = static_cast<float>(m1[j] / bc1);
      const float vhat = static_cast<float>(m2[j] / bc2);
      w[j] -= tc.lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Logits under training-time aggregation semantics (no dropout). Used for
// validation during training, before any calibration table exists.
inline DenseMatrix train_mode_logits(Model& m, const Graph& g,
                                     const std::vector<int>* pool_group,
                                     int num_graphs) {
  Tape tape;
  std::mt19937_64 rng(0);
  auto tf = build_train_graph(m, tape, g, rng, /*with_dropout=*/false, pool_group, num_graphs);
  return tape.value(tf.logits);
}

inline bool any_set(const std::vector<uint8_t>& mask) {
  for (uint8_t b : mask)
    if (b) return true;
  return false;
}

inline TrainResult train_impl(Model& m, const TrainConfig& tc, const Graph& g,
                              const std::vector<int>& labels,
                              const std::vector<uint8_t>& train_mask,
                              const std::vector<uint8_t>& val_mask,
                              const std::vector<int>* pool_group, int num_graphs) {
  tc.validate();
  m.cfg.validate();
  if (!any_set(train_mask)) throw ConfigError("training mask selects nothing");

  std::mt19937_64 rng(tc.seed);
  OptimState st;
  TrainResult res;
  const bool has_val = any_set(val_mask);
  Model best = m;
  double best_acc = -1.0;
  int bad = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Tape tape;
    auto tf = build_train_graph(m, tape, g, rng, /*with_dropout=*/true, pool_group, num_graphs);
    const NodeId loss = tape.cross_entropy(tf.logits, labels, train_mask);
    const double lv = tape.value(loss).at(0, 0);
    if (!std::isfinite(lv)) throw TrainError("training loss diverged", epoch);
    tape.backward(loss);
    step(tc, st, tape, tf.params);
    if (tc.masks) apply_masks(m, *tc.masks);
    for (const auto& p : tf.params)
      if (!p.host->all_finite()) throw TrainError("parameters diverged", epoch);

    res.train_loss.push_back(lv);
    res.epochs_run = epoch + 1;
    if (has_val) {
      const DenseMatrix logits = train_mode_logits(m, g, pool_group, num_graphs);
      const double va = masked_accuracy(logits, labels, val_mask);
      res.val_acc.push_back(va);
      if (va > best_acc) {
        best_acc = va;
        res.best_epoch = epoch;
        best = m;
        bad = 0;
      } else if (++bad > tc.patience) {
        break;
      }
    }
  }
  if (has_val) {
    m = std::move(best);
    res.best_val_acc = best_acc;
  }
  calibrate_model(m, g);
  return res;
}

}  // namespace traindetail

inline TrainResult train_node_model(Model& m, const Graph& g, const TrainConfig& tc) {
  if (m.cfg.widths.back() < g.num_classes)
    throw ConfigError("model output width smaller than class count");
  return traindetail::train_impl(m, tc, g, g.labels, g.train_mask, g.val_mask, nullptr, 0);
}

inline TrainResult train_graph_model(Model& m, const GraphBatch& b, const TrainConfig& tc) {
  if (m.cfg.widths.back() < b.merged.num_classes)
    throw ConfigError("model output width smaller than class count");
  return traindetail::train_impl(m, tc, b.merged, b.labels, b.train_mask, b.val_mask,
                                 &b.graph_of_node, b.num_graphs);
}

// Inference-mode accuracy on a node mask (stats-dependent aggregators must be
// calibrated first; train_* does this on return).
inline double evaluate_nodes(const Model& m, const Graph& g, const std::vector<uint8_t>& mask) {
  return masked_accuracy(forward_nodes(m, g), g.labels, mask);
}

inline double evaluate_graphs(const Model& m, const GraphBatch& b,
                              const std::vector<uint8_t>& mask) {
  return masked_accuracy(forward_graphs(m, b), b.labels, mask);
}

}  // namespace rgnn
