#pragma once

// Reverse-mode autodiff over a dynamically recorded tape of matrix ops.
// Forward values are float32 (64-bit accumulation inside reductions); backward
// walks the tape once in reverse creation order, accumulating into parent grads.
// relu uses subgradient 0 at 0; cross_entropy is stabilized by max-subtraction.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "rgnn/errors.hpp"
#include "rgnn/matrix.hpp"

namespace rgnn {

using NodeId = int;

class Tape {
 public:
  // Leaf node. Whether it is a parameter is the caller's business; every node
  // gets a gradient buffer, and leaves untouched by the forward pass keep an
  // exactly-zero gradient.
  NodeId leaf(DenseMatrix v) { return push(std::move(v), {}, nullptr); }

  const DenseMatrix& value(NodeId id) const { return node(id).value; }
  const DenseMatrix& grad(NodeId id) const { return node(id).grad; }
  DenseMatrix& grad_mut(NodeId id) { return node(id).grad; }
  int size() const { return static_cast<int>(nodes_.size()); }
  // Number of op-node backward visits in the last backward() call.
  long last_backward_visits() const { return visits_; }

  // ----- ops -----

  NodeId matmul(NodeId a, NodeId b) {
    DenseMatrix out = value(a).matmul(value(b));
    return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
      const DenseMatrix& g = t.grad(self);
      t.grad_mut(a) += g.matmul(t.value(b).transpose());
      t.grad_mut(b) += t.value(a).transpose().matmul(g);
    });
  }

  NodeId add(NodeId a, NodeId b) {
    DenseMatrix out = value(a) + value(b);
    return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
      t.grad_mut(a) += t.grad(self);
      t.grad_mut(b) += t.grad(self);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    DenseMatrix out = value(a) - value(b);
    return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
      t.grad_mut(a) += t.grad(self);
      t.grad_mut(b) -= t.grad(self);
    });
  }

  NodeId scale(NodeId a, float s) {
    DenseMatrix out = value(a) * s;
    return push(std::move(out), {a}, [a, s](Tape& t, NodeId self) {
      t.grad_mut(a) += t.grad(self) * s;
    });
  }

  NodeId hadamard(NodeId a, NodeId b) {
    DenseMatrix out = value(a).hadamard(value(b));
    return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
      t.grad_mut(a) += t.grad(self).hadamard(t.value(b));
      t.grad_mut(b) += t.grad(self).hadamard(t.value(a));
    });
  }

  NodeId relu(NodeId a) {
    DenseMatrix out = value(a).map([](float x) { return x > 0.0f ? x : 0.0f; });
    return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
      const DenseMatrix& x = t.value(a);
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j)
          if (x.at(i, j) > 0.0f) dx.at(i, j) += g.at(i, j);  // subgradient 0 at 0
    });
  }

  // Generic differentiable elementwise map: out = f(x), d out/dx = df(x).
  NodeId apply(NodeId a, std::function<float(float)> f, std::function<float(float)> df) {
    DenseMatrix out = value(a).map(f);
    return push(std::move(out), {a}, [a, df = std::move(df)](Tape& t, NodeId self) {
      const DenseMatrix& x = t.value(a);
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) dx.at(i, j) += g.at(i, j) * df(x.at(i, j));
    });
  }

  // Inverted dropout: kept entries scale by 1/(1-rate). rate in [0,1).
  NodeId dropout(NodeId a, float rate, std::mt19937_64& rng) {
    if (rate < 0.0f || rate >= 1.0f) throw ConfigError("dropout rate must be in [0,1)");
    if (rate == 0.0f) return a;
    auto mask = std::make_shared<DenseMatrix>(value(a).rows(), value(a).cols());
    std::bernoulli_distribution keep(1.0 - rate);
    const float inv = 1.0f / (1.0f - rate);
    for (int i = 0; i < mask->rows(); ++i)
      for (int j = 0; j < mask->cols(); ++j) mask->at(i, j) = keep(rng) ? inv : 0.0f;
    DenseMatrix out = value(a).hadamard(*mask);
    return push(std::move(out), {a}, [a, mask](Tape& t, NodeId self) {
      t.grad_mut(a) += t.grad(self).hadamard(*mask);
    });
  }

  // Row-stabilized softmax; each output row sums to 1 (up to rounding).
  NodeId softmax_rows(NodeId a) {
    const DenseMatrix& x = value(a);
    auto probs = std::make_shared<DenseMatrix>(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) softmax_row(x.row(i), x.cols(), probs->row(i));
    DenseMatrix out = *probs;
    return push(std::move(out), {a}, [a, probs](Tape& t, NodeId self) {
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < probs->rows(); ++i) {
        double dot = 0.0;
        for (int j = 0; j < probs->cols(); ++j) dot += double(g.at(i, j)) * probs->at(i, j);
        for (int j = 0; j < probs->cols(); ++j)
          dx.at(i, j) += probs->at(i, j) * (g.at(i, j) - static_cast<float>(dot));
      }
    });
  }

  // Rowwise reductions: N x C -> N x 1.
  NodeId row_sum(NodeId a) {
    const DenseMatrix& x = value(a);
    DenseMatrix out(x.rows(), 1);
    for (int i = 0; i < x.rows(); ++i) {
      double acc = 0.0;
      for (int j = 0; j < x.cols(); ++j) acc += x.at(i, j);
      out.at(i, 0) = static_cast<float>(acc);
    }
    return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < dx.rows(); ++i)
        for (int j = 0; j < dx.cols(); ++j) dx.at(i, j) += g.at(i, 0);
    });
  }

  NodeId row_mean(NodeId a) {
    const int c = value(a).cols();
    if (c == 0) throw ShapeError("row_mean of zero-column matrix");
    return scale(row_sum(a), 1.0f / static_cast<float>(c));
  }

  NodeId row_max(NodeId a) {
    const DenseMatrix& x = value(a);
    if (x.cols() == 0) throw ShapeError("row_max of zero-column matrix");
    auto arg = std::make_shared<std::vector<int>>(x.rows(), 0);
    DenseMatrix out(x.rows(), 1);
    for (int i = 0; i < x.rows(); ++i) {
      int best = 0;
      for (int j = 1; j < x.cols(); ++j)
        if (x.at(i, j) > x.at(i, best)) best = j;
      (*arg)[i] = best;
      out.at(i, 0) = x.at(i, best);
    }
    return push(std::move(out), {a}, [a, arg](Tape& t, NodeId self) {
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < dx.rows(); ++i) dx.at(i, (*arg)[i]) += g.at(i, 0);
    });
  }

  NodeId sum_all(NodeId a) {
    DenseMatrix out(1, 1);
    out.at(0, 0) = static_cast<float>(value(a).sum());
    return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
      const float g = t.grad(self).at(0, 0);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < dx.rows(); ++i)
        for (int j = 0; j < dx.cols(); ++j) dx.at(i, j) += g;
    });
  }

  // Graph-level mean pooling: rows grouped by `group` (values in [0,num_groups)).
  NodeId mean_pool(NodeId a, std::vector<int> group, int num_groups) {
    const DenseMatrix& x = value(a);
    if (static_cast<int>(group.size()) != x.rows())
      throw ShapeError("mean_pool group size mismatch");
    auto counts = std::make_shared<std::vector<int>>(num_groups, 0);
    for (int gi : group) {
      if (gi < 0 || gi >= num_groups) throw ShapeError("mean_pool group id out of range");
      ++(*counts)[gi];
    }
    for (int c : *counts)
      if (c == 0) throw ContractError("mean_pool: empty group");
    DenseMatrix out(num_groups, x.cols());
    {
      std::vector<std::vector<double>> acc(num_groups,
                                           std::vector<double>(x.cols(), 0.0));
      for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) acc[group[i]][j] += x.at(i, j);
      for (int gi = 0; gi < num_groups; ++gi)
        for (int j = 0; j < x.cols(); ++j)
          out.at(gi, j) = static_cast<float>(acc[gi][j] / (*counts)[gi]);
    }
    auto grp = std::make_shared<std::vector<int>>(std::move(group));
    return push(std::move(out), {a}, [a, grp, counts](Tape& t, NodeId self) {
      const DenseMatrix& g = t.grad(self);
      DenseMatrix& dx = t.grad_mut(a);
      for (int i = 0; i < dx.rows(); ++i) {
        const int gi = (*grp)[i];
        const float w = 1.0f / static_cast<float>((*counts)[gi]);
        for (int j = 0; j < dx.cols(); ++j) dx.at(i, j) += g.at(gi, j) * w;
      }
    });
  }

  // Mean cross-entropy over masked rows; labels are class indices. 1x1 output.
  NodeId cross_entropy(NodeId logits, std::vector<int> labels, std::vector<uint8_t> mask) {
    const DenseMatrix& z = value(logits);
    if (static_cast<int>(labels.size()) != z.rows() ||
        static_cast<int>(mask.size()) != z.rows())
      throw ShapeError("cross_entropy labels/mask length mismatch");
    long m = 0;
    for (uint8_t u : mask) m += (u != 0);
    if (m == 0) throw ContractError("cross_entropy: empty mask");
    auto probs = std::make_shared<DenseMatrix>(z.rows(), z.cols());
    double total = 0.0;
    for (int i = 0; i < z.rows(); ++i) {
      if (!mask[i]) continue;
      const int y = labels[i];
      if (y < 0 || y >= z.cols()) throw ShapeError("cross_entropy label out of range");
      total += ce_row(z.row(i), z.cols(), y, probs->row(i));
    }
    DenseMatrix out(1, 1);
    out.at(0, 0) = static_cast<float>(total / static_cast<double>(m));
    auto lab = std::make_shared<std::vector<int>>(std::move(labels));
    auto msk = std::make_shared<std::vector<uint8_t>>(std::move(mask));
    return push(std::move(out), {logits},
                [logits, probs, lab, msk, m](Tape& t, NodeId self) {
                  const float g = t.grad(self).at(0, 0) / static_cast<float>(m);
                  DenseMatrix& dz = t.grad_mut(logits);
                  for (int i = 0; i < dz.rows(); ++i) {
                    if (!(*msk)[i]) continue;
                    for (int j = 0; j < dz.cols(); ++j) {
                      const float p = probs->at(i, j);
                      dz.at(i, j) += g * (j == (*lab)[i] ? p - 1.0f : p);
                    }
                  }
                });
  }

  // Escape hatch for fused ops (neighborhood aggregation lives outside this
  // header). `back` reads grad(self) and accumulates into its parents.
  NodeId custom(std::vector<NodeId> parents, DenseMatrix value,
                std::function<void(Tape&, NodeId)> back) {
    return push(std::move(value), std::move(parents), std::move(back));
  }

  // Backward from a scalar root. Re-zeros all gradients first.
  void backward(NodeId root) {
    const DenseMatrix& r = value(root);
    if (r.rows() != 1 || r.cols() != 1)
      throw ContractError("backward root must be 1x1, got " + r.shape_str());
    for (auto& n : nodes_) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
    node(root).grad.at(0, 0) = 1.0f;
    visits_ = 0;
    for (NodeId id = root; id >= 0; --id) {
      if (nodes_[id].back) {
        nodes_[id].back(*this, id);
        ++visits_;
      }
    }
  }

  // ----- shared numeric kernels (also used tape-free) -----

  static void softmax_row(const float* z, int n, float* out) {
    float mx = z[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(double(z[j]) - mx);
    for (int j = 0; j < n; ++j)
      out[j] = static_cast<float>(std::exp(double(z[j]) - mx) / denom);
  }

  // Stabilized -log softmax(z)[y]; fills probs as a side effect.
  static double ce_row(const float* z, int n, int y, float* probs) {
    float mx = z[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(double(z[j]) - mx);
    for (int j = 0; j < n; ++j)
      probs[j] = static_cast<float>(std::exp(double(z[j]) - mx) / denom);
    return -(double(z[y]) - mx - std::log(denom));
  }

 private:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;
    std::vector<NodeId> parents;
    std::function<void(Tape&, NodeId)> back;  // null for leaves
  };

  NodeId push(DenseMatrix v, std::vector<NodeId> parents,
              std::function<void(Tape&, NodeId)> back) {
    for (NodeId p : parents) node(p);  // range-check
    nodes_.push_back(Node{std::move(v), DenseMatrix(), std::move(parents), std::move(back)});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  Node& node(NodeId id) {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw ContractError("bad tape node id");
    return nodes_[id];
  }
  const Node& node(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw ContractError("bad tape node id");
    return nodes_[id];
  }

  std::vector<Node> nodes_;
  long visits_ = 0;
};

}  // namespace rgnn
