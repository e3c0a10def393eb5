#pragma once

// Message-passing models over pluggable neighborhood aggregation.
//
// GCN layer: aggregate degree-scaled rows over {v} ∪ N(v), rescale by
// sqrt(deg(v)+1), then transform; with plain mean aggregation this equals the
// dense normalized-adjacency propagation exactly. GIN layer: aggregate raw
// rows over N(v) and update with a two-layer MLP on h_v + agg. Calibration
// tables and the dynamic-weight centers live in the representation the
// aggregator actually sees (the scaled rows for GCN).
//
// Checkpoints are a self-describing single file: a text header (magic,
// config, tensor table) followed by raw little-endian float32 payloads.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rgnn/aggregators.hpp"
#include "rgnn/autodiff.hpp"
#include "rgnn/errors.hpp"
#include "rgnn/graph.hpp"
#include "rgnn/matrix.hpp"

namespace rgnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes little-endian float32");

enum class Arch { gcn, gin };

inline const char* arch_name(Arch a) { return a == Arch::gcn ? "gcn" : "gin"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "gcn") return Arch::gcn;
  if (s == "gin") return Arch::gin;
  throw ConfigError("unknown architecture: '" + s + "'");
}

struct ModelConfig {
  Arch arch = Arch::gcn;
  std::vector<int> widths;  // input, hidden..., classes
  float dropout = 0.5f;
  AggregatorConfig aggregator;

  int num_layers() const { return static_cast<int>(widths.size()) - 1; }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("model needs at least one layer");
    for (int w : widths)
      if (w <= 0) throw ConfigError("layer widths must be positive");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("dropout must be in [0,1)");
    aggregator.validate();
  }
};

struct Layer {
  DenseMatrix weight;      // gcn: in x out
  DenseMatrix mlp1, mlp2;  // gin: in x out, out x out
  DenseMatrix m_g;         // 1 x in, learned center for dynamic weighting
  StatsTable stats;        // calibrated over this layer's aggregation inputs
};

struct Model {
  ModelConfig cfg;
  std::vector<Layer> layers;
  DenseMatrix s;  // 1 x 3 combination scalars

  int num_layers() const { return static_cast<int>(layers.size()); }

  bool calibrated() const {
    for (const auto& l : layers)
      if (!l.stats.ready()) return false;
    return !layers.empty();
  }

  // Transform weights only: the fault-injection "weights" site, the weight
  // decay set, and the pruning set. m_g / s / stats are excluded.
  std::vector<DenseMatrix*> weight_matrices() {
    std::vector<DenseMatrix*> v;
    for (auto& l : layers) {
      if (cfg.arch == Arch::gcn) {
        v.push_back(&l.weight);
      } else {
        v.push_back(&l.mlp1);
        v.push_back(&l.mlp2);
      }
    }
    return v;
  }
  std::vector<const DenseMatrix*> weight_matrices() const {
    std::vector<const DenseMatrix*> v;
    for (const auto& l : layers) {
      if (cfg.arch == Arch::gcn) {
        v.push_back(&l.weight);
      } else {
        v.push_back(&l.mlp1);
        v.push_back(&l.mlp2);
      }
    }
    return v;
  }
};

inline Model init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  for (int i = 0; i + 1 < static_cast<int>(cfg.widths.size()); ++i) {
    Layer l;
    const int in = cfg.widths[size_t(i)], out = cfg.widths[size_t(i) + 1];
    if (cfg.arch == Arch::gcn) {
      l.weight = DenseMatrix::glorot(in, out, rng);
    } else {
      l.mlp1 = DenseMatrix::glorot(in, out, rng);
      l.mlp2 = DenseMatrix::glorot(out, out, rng);
    }
    l.m_g = DenseMatrix(1, in);  // zeros
    m.layers.push_back(std::move(l));
  }
  m.s = DenseMatrix(1, 3);
  for (int k = 0; k < 3; ++k) m.s.at(0, k) = 1.0f / 3.0f;
  return m;
}

// ----- inference -----

// Called with stage 0 on the input features, then with stage i+1 on each
// layer's output (the last call carries the logits). Mutations feed forward.
using ForwardHook = std::function<void(int stage, DenseMatrix& h)>;

struct InferStats {
  double agg_seconds = 0.0;
  DiscardCounter discards;
};

namespace modeldetail {

inline std::vector<float> inv_sqrt_deg1(const Graph& g) {
  std::vector<float> v(static_cast<size_t>(g.num_nodes));
  for (int i = 0; i < g.num_nodes; ++i)
    v[size_t(i)] = 1.0f / std::sqrt(static_cast<float>(g.degree(i) + 1));
  return v;
}

inline AggRuntime layer_runtime(const Model& m, const Layer& l, bool training) {
  AggRuntime rt;
  rt.training = training;
  rt.stats = &l.stats;
  rt.m_g = l.m_g.row(0);
  rt.s = m.s.row(0);
  return rt;
}

// The aggregation half of one layer: fills `agg` (num_nodes x dim) from the
// current representation. For GCN, `src` must already be degree-scaled and the
// result is rescaled per node here. Optionally records backward caches.
inline void aggregate_all_nodes(const AggregatorConfig& cfg, const AggRuntime& rt,
                                const Graph& g, const DenseMatrix& src, bool with_self,
                                const float* post_scale, DenseMatrix& agg,
                                DiscardCounter* dc, std::vector<KernelCache>* caches) {
  const int n = g.num_nodes, d = src.cols();
  std::vector<const float*> ptrs;
  AggScratch sc;
  for (int v = 0; v < n; ++v) {
    ptrs.clear();
    if (with_self) ptrs.push_back(src.row(v));
    for (int u : g.neighbors(v)) ptrs.push_back(src.row(u));
    aggregate_row(cfg, rt, ptrs.data(), static_cast<int>(ptrs.size()), src.row(v), d,
                  agg.row(v), sc, dc, caches ? &(*caches)[size_t(v)] : nullptr);
    if (post_scale) {
      float* o = agg.row(v);
      for (int j = 0; j < d; ++j) o[j] *= post_scale[v];
    }
  }
}

}  // namespace modeldetail

inline DenseMatrix forward_nodes(const Model& m, const Graph& g,
                                 const ForwardHook& hook = {},
                                 InferStats* stats = nullptr) {
  m.cfg.validate();
  if (g.feat_dim() != m.cfg.widths[0])
    throw ShapeError("feature width " + std::to_string(g.feat_dim()) +
                     " does not match model input " + std::to_string(m.cfg.widths[0]));
  if (static_cast<int>(m.layers.size()) != m.cfg.num_layers())
    throw ContractError("model layer count does not match config");

  const bool gcn = m.cfg.arch == Arch::gcn;
  std::vector<float> inv, scl;
  if (gcn) {
    inv = modeldetail::inv_sqrt_deg1(g);
    scl.resize(inv.size());
    for (size_t i = 0; i < inv.size(); ++i) scl[i] = 1.0f / inv[i];
  }

  DenseMatrix h = g.features;
  if (hook) hook(0, h);
  for (int li = 0; li < m.num_layers(); ++li) {
    const Layer& L = m.layers[size_t(li)];
    const AggRuntime rt = modeldetail::layer_runtime(m, L, false);
    const int d = h.cols();
    DenseMatrix agg(g.num_nodes, d);

    const auto t0 = std::chrono::steady_clock::now();
    if (gcn) {
      DenseMatrix hhat = h;
      for (int v = 0; v < g.num_nodes; ++v) {
        float* r = hhat.row(v);
        for (int j = 0; j < d; ++j) r[j] *= inv[size_t(v)];
      }
      modeldetail::aggregate_all_nodes(m.cfg.aggregator, rt, g, hhat, true, scl.data(),
                                       agg, stats ? &stats->discards : nullptr, nullptr);
    } else {
      modeldetail::aggregate_all_nodes(m.cfg.aggregator, rt, g, h, false, nullptr, agg,
                                       stats ? &stats->discards : nullptr, nullptr);
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (stats) stats->agg_seconds += std::chrono::duration<double>(t1 - t0).count();

    if (gcn) {
      h = agg.matmul(L.weight);
      if (li + 1 < m.num_layers())
        h = h.map([](float x) { return x > 0.0f ? x : 0.0f; });
    } else {
      agg += h;  // h_v + aggregate
      DenseMatrix z = agg.matmul(L.mlp1);
      z = z.map([](float x) { return x > 0.0f ? x : 0.0f; });
      h = z.matmul(L.mlp2);
    }
    if (hook) hook(li + 1, h);
  }
  return h;
}

// Mean-pools node outputs into per-graph rows.
inline DenseMatrix pool_graphs(const DenseMatrix& node_out, const GraphBatch& b) {
  if (node_out.rows() != b.merged.num_nodes)
    throw ShapeError("pool_graphs: node rows != batch nodes");
  DenseMatrix out(b.num_graphs, node_out.cols());
  for (int gi = 0; gi < b.num_graphs; ++gi) {
    const int beg = static_cast<int>(b.node_ranges[size_t(gi)]);
    const int end = static_cast<int>(b.node_ranges[size_t(gi) + 1]);
    if (beg >= end) throw ContractError("pool_graphs: empty graph");
    for (int j = 0; j < node_out.cols(); ++j) {
      double acc = 0.0;
      for (int v = beg; v < end; ++v) acc += node_out.at(v, j);
      out.at(gi, j) = static_cast<float>(acc / (end - beg));
    }
  }
  return out;
}

inline DenseMatrix forward_graphs(const Model& m, const GraphBatch& b,
                                  const ForwardHook& hook = {},
                                  InferStats* stats = nullptr) {
  return pool_graphs(forward_nodes(m, b.merged, hook, stats), b);
}

// Recomputes every layer's calibration table from one clean pass: each
// layer's table is recorded from the aggregation inputs it would see, then
// that layer runs with the fresh table so deeper layers calibrate on the
// representation inference will actually produce.
inline void calibrate_model(Model& m, const Graph& g) {
  m.cfg.validate();
  if (g.feat_dim() != m.cfg.widths[0])
    throw ShapeError("calibrate_model: feature width mismatch");
  if (g.num_nodes < 2) throw ConfigError("calibration needs at least 2 nodes");

  const bool gcn = m.cfg.arch == Arch::gcn;
  std::vector<float> inv, scl;
  if (gcn) {
    inv = modeldetail::inv_sqrt_deg1(g);
    scl.resize(inv.size());
    for (size_t i = 0; i < inv.size(); ++i) scl[i] = 1.0f / inv[i];
  }

  DenseMatrix h = g.features;
  for (int li = 0; li < m.num_layers(); ++li) {
    Layer& L = m.layers[size_t(li)];
    const int d = h.cols();
    DenseMatrix agg(g.num_nodes, d);
    if (gcn) {
      DenseMatrix hhat = h;
      for (int v = 0; v < g.num_nodes; ++v) {
        float* r = hhat.row(v);
        for (int j = 0; j < d; ++j) r[j] *= inv[size_t(v)];
      }
      L.stats = calibrate_stats(hhat);
      const AggRuntime rt = modeldetail::layer_runtime(m, L, false);
      modeldetail::aggregate_all_nodes(m.cfg.aggregator, rt, g, hhat, true, scl.data(),
                                       agg, nullptr, nullptr);
    } else {
      L.stats = calibrate_stats(h);
      const AggRuntime rt = modeldetail::layer_runtime(m, L, false);
      modeldetail::aggregate_all_nodes(m.cfg.aggregator, rt, g, h, false, nullptr, agg,
                                       nullptr, nullptr);
    }
    if (gcn) {
      h = agg.matmul(L.weight);
      if (li + 1 < m.num_layers())
        h = h.map([](float x) { return x > 0.0f ? x : 0.0f; });
    } else {
      agg += h;
      DenseMatrix z = agg.matmul(L.mlp1);
      z = z.map([](float x) { return x > 0.0f ? x : 0.0f; });
      h = z.matmul(L.mlp2);
    }
  }
}

// ----- taped training forward -----

struct TapedParam {
  DenseMatrix* host;  // the model matrix the optimizer should update
  NodeId id;
  bool decay;  // weight decay applies to transform weights only
};

struct TapedForward {
  NodeId node_out = -1;  // per-node representation (N x C)
  NodeId logits = -1;    // == node_out, or pooled per-graph rows
  std::vector<TapedParam> params;
};

namespace modeldetail {

// One fused tape op: gather -> (scale) -> aggregate -> (rescale). Parents are
// the layer input, the layer's m_g, and (for combined) the shared s row.
// The graph must outlive the tape.
inline NodeId aggregate_train_op(Tape& tape, const AggregatorConfig& cfg, Arch arch,
                                 NodeId h_id, NodeId mg_id, NodeId s_id,
                                 const Graph& g) {
  const DenseMatrix& H = tape.value(h_id);
  const int n = H.rows(), d = H.cols();
  if (n != g.num_nodes) throw ShapeError("aggregate op: rows != nodes");
  const bool gcn = arch == Arch::gcn;

  auto inv = std::make_shared<std::vector<float>>();
  auto scl = std::make_shared<std::vector<float>>();
  auto hhat = std::make_shared<DenseMatrix>();
  if (gcn) {
    *inv = inv_sqrt_deg1(g);
    scl->resize(inv->size());
    for (size_t i = 0; i < inv->size(); ++i) (*scl)[i] = 1.0f / (*inv)[i];
    *hhat = H;
    for (int v = 0; v < n; ++v) {
      float* r = hhat->row(v);
      for (int j = 0; j < d; ++j) r[j] *= (*inv)[size_t(v)];
    }
  }
  const DenseMatrix& src = gcn ? *hhat : H;

  AggRuntime rt;
  rt.training = true;
  rt.m_g = tape.value(mg_id).row(0);
  if (s_id >= 0) rt.s = tape.value(s_id).row(0);

  auto caches = std::make_shared<std::vector<KernelCache>>(static_cast<size_t>(n));
  DenseMatrix out(n, d);
  aggregate_all_nodes(cfg, rt, g, src, gcn, gcn ? scl->data() : nullptr, out, nullptr,
                      caches.get());

  std::vector<NodeId> parents{h_id, mg_id};
  if (s_id >= 0) parents.push_back(s_id);
  const Graph* gp = &g;
  return tape.custom(
      parents, std::move(out), [=](Tape& t, NodeId self) {
        const DenseMatrix& G = t.grad(self);
        const DenseMatrix& Hv = t.value(h_id);
        const DenseMatrix& S = gcn ? *hhat : Hv;
        const int dd = Hv.cols();
        AggRuntime brt;
        brt.training = true;
        brt.m_g = t.value(mg_id).row(0);
        if (s_id >= 0) brt.s = t.value(s_id).row(0);
        DenseMatrix& dH = t.grad_mut(h_id);
        float* dmg = t.grad_mut(mg_id).row(0);
        float* ds = s_id >= 0 ? t.grad_mut(s_id).row(0) : nullptr;

        std::vector<const float*> ptrs;
        std::vector<int> ids;
        std::vector<float> gv(static_cast<size_t>(dd));
        std::vector<float> drows;
        for (int v = 0; v < gp->num_nodes; ++v) {
          ptrs.clear();
          ids.clear();
          if (gcn) {
            ptrs.push_back(S.row(v));
            ids.push_back(v);
          }
          for (int u : gp->neighbors(v)) {
            ptrs.push_back(S.row(u));
            ids.push_back(u);
          }
          const int nv = static_cast<int>(ptrs.size());
          const float sv = gcn ? (*scl)[size_t(v)] : 1.0f;
          for (int j = 0; j < dd; ++j) gv[size_t(j)] = G.at(v, j) * sv;
          drows.assign(static_cast<size_t>(nv + 1) * dd, 0.0f);
          aggregate_backward((*caches)[size_t(v)], brt, ptrs.data(), nv, S.row(v),
                             gv.data(), dd, drows.data(), dmg, ds);
          for (int k = 0; k <= nv; ++k) {
            const int u = k == nv ? v : ids[size_t(k)];
            const float f = gcn ? (*inv)[size_t(u)] : 1.0f;
            float* dst = dH.row(u);
            const float* sr = drows.data() + static_cast<size_t>(k) * dd;
            for (int j = 0; j < dd; ++j) dst[j] += sr[j] * f;
          }
        }
      });
}

}  // namespace modeldetail

// Builds the training computation for one step. Dropout (inverted, applied to
// every layer input) only when with_dropout. For graph-level tasks pass the
// batch's node->graph map to pool logits per graph.
inline TapedForward build_train_graph(Model& m, Tape& tape, const Graph& g,
                                      std::mt19937_64& rng, bool with_dropout = true,
                                      const std::vector<int>* pool_group = nullptr,
                                      int num_graphs = 0) {
  m.cfg.validate();
  if (g.feat_dim() != m.cfg.widths[0])
    throw ShapeError("build_train_graph: feature width mismatch");

  TapedForward tf;
  NodeId s_id = -1;
  if (m.cfg.aggregator.kind == AggKind::combined) {
    s_id = tape.leaf(m.s);
    tf.params.push_back({&m.s, s_id, false});
  }
  NodeId h = tape.leaf(g.features);
  const bool gcn = m.cfg.arch == Arch::gcn;
  for (int li = 0; li < m.num_layers(); ++li) {
    Layer& L = m.layers[size_t(li)];
    if (with_dropout && m.cfg.dropout > 0.0f) h = tape.dropout(h, m.cfg.dropout, rng);
    const NodeId mg = tape.leaf(L.m_g);
    tf.params.push_back({&L.m_g, mg, false});
    const NodeId agg =
        modeldetail::aggregate_train_op(tape, m.cfg.aggregator, m.cfg.arch, h, mg, s_id, g);
    if (gcn) {
      const NodeId w = tape.leaf(L.weight);
      tf.params.push_back({&L.weight, w, true});
      const NodeId z = tape.matmul(agg, w);
      h = li + 1 < m.num_layers() ? tape.relu(z) : z;
    } else {
      const NodeId w1 = tape.leaf(L.mlp1);
      const NodeId w2 = tape.leaf(L.mlp2);
      tf.params.push_back({&L.mlp1, w1, true});
      tf.params.push_back({&L.mlp2, w2, true});
      const NodeId zsum = tape.add(h, agg);
      h = tape.matmul(tape.relu(tape.matmul(zsum, w1)), w2);
    }
  }
  tf.node_out = h;
  tf.logits = pool_group ? tape.mean_pool(h, *pool_group, num_graphs) : h;
  return tf;
}

// ----- evaluation helpers -----

// Ties resolve to the lowest class index (strict > keeps the earlier winner).
inline int argmax_row(const DenseMatrix& m, int r) {
  int best = 0;
  for (int j = 1; j < m.cols(); ++j)
    if (m.at(r, j) > m.at(r, best)) best = j;
  return best;
}

inline double masked_accuracy(const DenseMatrix& logits, const std::vector<int>& labels,
                              const std::vector<uint8_t>& mask) {
  if (logits.rows() != static_cast<int>(labels.size()) || labels.size() != mask.size())
    throw ShapeError("masked_accuracy: size mismatch");
  long total = 0, correct = 0;
  for (int i = 0; i < logits.rows(); ++i) {
    if (!mask[size_t(i)]) continue;
    ++total;
    if (argmax_row(logits, i) == labels[size_t(i)]) ++correct;
  }
  if (total == 0) throw ContractError("masked_accuracy: empty mask");
  return double(correct) / double(total);
}

// ----- magnitude pruning -----

struct PruneMasks {
  std::vector<DenseMatrix> masks;  // parallel to weight_matrices(), 1 = kept
};

// Zeros the floor(sparsity * total) globally smallest-|w| transform weights;
// ties break on the flattened global index. Returns the keep masks so
// fine-tuning can re-apply them after each optimizer step.
inline PruneMasks magnitude_prune(Model& m, float sparsity) {
  if (!(sparsity >= 0.0f && sparsity <= 1.0f))
    throw ConfigError("sparsity must be in [0,1]");
  auto mats = m.weight_matrices();
  long total = 0;
  for (auto* w : mats) total += w->size();
  const long k = static_cast<long>(std::floor(double(sparsity) * double(total)));

  std::vector<std::pair<float, long>> order;
  order.reserve(static_cast<size_t>(total));
  long idx = 0;
  for (auto* w : mats)
    for (long i = 0; i < static_cast<long>(w->size()); ++i, ++idx) {
      const float v = w->data()[i];
      order.emplace_back(std::isfinite(v) ? std::fabs(v) : std::numeric_limits<float>::max(),
                         idx);
    }
  std::sort(order.begin(), order.end());

  PruneMasks pm;
  for (auto* w : mats) {
    DenseMatrix mask(w->rows(), w->cols());
    mask = mask.map([](float) { return 1.0f; });
    pm.masks.push_back(std::move(mask));
  }
  std::vector<long> starts(mats.size() + 1, 0);
  for (size_t i = 0; i < mats.size(); ++i) starts[i + 1] = starts[i] + mats[i]->size();
  for (long i = 0; i < k; ++i) {
    const long gi = order[size_t(i)].second;
    size_t mi = 0;
    while (starts[mi + 1] <= gi) ++mi;
    const long off = gi - starts[mi];
    mats[mi]->data()[off] = 0.0f;
    pm.masks[mi].data()[off] = 0.0f;
  }
  return pm;
}

inline void apply_masks(Model& m, const PruneMasks& pm) {
  auto mats = m.weight_matrices();
  if (mats.size() != pm.masks.size()) throw ShapeError("mask count mismatch");
  for (size_t i = 0; i < mats.size(); ++i) {
    if (!mats[i]->same_shape(pm.masks[i])) throw ShapeError("mask shape mismatch");
    for (size_t j = 0; j < mats[i]->size(); ++j) mats[i]->data()[j] *= pm.masks[i].data()[j];
  }
}

// ----- checkpoint I/O -----

namespace modeldetail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string aggregator_spec(const AggregatorConfig& c) {
  return std::string(aggregator_name(c.kind)) + ":a=" + fmt_g(c.a) + ",b=" + fmt_g(c.b) +
         ",alpha=" + fmt_g(c.alpha) + ",beta=" + fmt_g(c.beta) +
         ",T=" + fmt_g(c.temperature);
}

inline std::vector<std::pair<std::string, const DenseMatrix*>> checkpoint_tensors(
    const Model& m, long stats_count) {
  std::vector<std::pair<std::string, const DenseMatrix*>> t;
  for (int i = 0; i < m.num_layers(); ++i) {
    const Layer& l = m.layers[size_t(i)];
    const std::string p = "layer" + std::to_string(i) + ".";
    if (m.cfg.arch == Arch::gcn) {
      t.emplace_back(p + "weight", &l.weight);
    } else {
      t.emplace_back(p + "mlp1.weight", &l.mlp1);
      t.emplace_back(p + "mlp2.weight", &l.mlp2);
    }
    t.emplace_back(p + "m_g", &l.m_g);
    if (stats_count > 0) {
      t.emplace_back(p + "stats.mu", &l.stats.mu);
      t.emplace_back(p + "stats.sigma", &l.stats.sigma);
      t.emplace_back(p + "clip_lo", &l.stats.lo);
      t.emplace_back(p + "clip_hi", &l.stats.hi);
    }
  }
  t.emplace_back("combine.s", &m.s);
  return t;
}

}  // namespace modeldetail

inline void save_model(const Model& m, const std::string& path) {
  m.cfg.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint for writing: " + path);
  const long stats_count = m.calibrated() ? m.layers[0].stats.count : 0;

  f << "RGNN1\n";
  f << "arch=" << arch_name(m.cfg.arch) << "\n";
  f << "widths=";
  for (size_t i = 0; i < m.cfg.widths.size(); ++i)
    f << (i ? "," : "") << m.cfg.widths[i];
  f << "\n";
  f << "dropout=" << modeldetail::fmt_g(m.cfg.dropout) << "\n";
  f << "aggregator=" << modeldetail::aggregator_spec(m.cfg.aggregator) << "\n";
  f << "stats_count=" << stats_count << "\n";

  const auto tensors = modeldetail::checkpoint_tensors(m, stats_count);
  f << "tensors " << tensors.size() << "\n";
  for (const auto& [name, mat] : tensors)
    f << name << " " << mat->rows() << " " << mat->cols() << "\n";
  f << "DATA\n";
  for (const auto& [name, mat] : tensors)
    f.write(reinterpret_cast<const char*>(mat->data()),
            static_cast<std::streamsize>(mat->size()) * 4);
  f.flush();
  if (!f) throw ValidationError("checkpoint write failed: " + path);
}

inline Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint: " + path);
  int lineno = 0;
  auto next_line = [&](std::string& out) {
    if (!std::getline(f, out)) throw ParseError("unexpected end of checkpoint", lineno);
    ++lineno;
  };

  std::string line;
  next_line(line);
  if (line != "RGNN1") throw ParseError("bad checkpoint magic", 1);

  std::map<std::string, std::string> cfgkv;
  size_t tensor_count = 0;
  for (;;) {
    next_line(line);
    if (line.rfind("tensors ", 0) == 0) {
      try {
        tensor_count = std::stoul(line.substr(8));
      } catch (const std::exception&) {
        throw ParseError("bad tensor count", lineno);
      }
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
    cfgkv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"arch", "widths", "dropout", "aggregator", "stats_count"})
    if (!cfgkv.count(key))
      throw ParseError(std::string("missing checkpoint key: ") + key, lineno);

  ModelConfig cfg;
  cfg.arch = parse_arch(cfgkv["arch"]);
  {
    const std::string& ws = cfgkv["widths"];
    size_t pos = 0;
    while (pos < ws.size()) {
      size_t end = ws.find(',', pos);
      if (end == std::string::npos) end = ws.size();
      try {
        cfg.widths.push_back(std::stoi(ws.substr(pos, end - pos)));
      } catch (const std::exception&) {
        throw ParseError("bad widths list", lineno);
      }
      pos = end + 1;
    }
  }
  long stats_count = 0;
  try {
    cfg.dropout = std::stof(cfgkv["dropout"]);
    stats_count = std::stol(cfgkv["stats_count"]);
  } catch (const std::exception&) {
    throw ParseError("bad numeric checkpoint key", lineno);
  }
  cfg.aggregator = parse_aggregator(cfgkv["aggregator"]);
  cfg.validate();

  Model m = init_model(cfg, 0);
  if (stats_count > 0) {
    for (auto& l : m.layers) {
      const int in = l.m_g.cols();
      l.stats.mu = DenseMatrix(1, in);
      l.stats.sigma = DenseMatrix(1, in);
      l.stats.lo = DenseMatrix(1, in);
      l.stats.hi = DenseMatrix(1, in);
      l.stats.count = stats_count;
    }
  }

  // name -> destination, shapes fixed by the config
  const auto expected = modeldetail::checkpoint_tensors(m, stats_count);
  std::map<std::string, const DenseMatrix*> dest;
  for (const auto& [name, mat] : expected) dest[name] = mat;

  struct Header {
    std::string name;
    int rows, cols;
  };
  std::vector<Header> headers;
  for (size_t i = 0; i < tensor_count; ++i) {
    next_line(line);
    Header h;
    char name[256];
    if (std::sscanf(line.c_str(), "%255s %d %d", name, &h.rows, &h.cols) != 3)
      throw ParseError("bad tensor header: " + line, lineno);
    h.name = name;
    headers.push_back(std::move(h));
  }
  next_line(line);
  if (line != "DATA") throw ParseError("expected DATA marker", lineno);

  std::set<std::string> seen;
  for (const auto& h : headers) {
    auto it = dest.find(h.name);
    if (it == dest.end()) throw ParseError("unknown tensor: " + h.name, lineno);
    if (!seen.insert(h.name).second) throw ParseError("duplicate tensor: " + h.name, lineno);
    DenseMatrix* mat = const_cast<DenseMatrix*>(it->second);
    if (mat->rows() != h.rows || mat->cols() != h.cols)
      throw ValidationError("tensor shape mismatch for " + h.name + ": got " +
                            std::to_string(h.rows) + "x" + std::to_string(h.cols) +
                            ", expected " + mat->shape_str());
    f.read(reinterpret_cast<char*>(mat->data()),
           static_cast<std::streamsize>(mat->size()) * 4);
    if (!f) throw ParseError("truncated checkpoint payload at " + h.name, lineno);
  }
  for (const auto& [name, mat] : expected) {
    (void)mat;
    if (!seen.count(name)) throw ParseError("missing tensor: " + name, lineno);
  }
  if (f.peek() != std::char_traits<char>::eof())
    throw ParseError("trailing bytes after checkpoint payload", lineno);
  return m;
}

}  // namespace rgnn
