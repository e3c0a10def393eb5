#pragma once

// Graph storage: CSR-style sorted neighbor lists, node features, labels, masks.
// Self-loops are never stored (models add them logically). Undirected graphs
// store both directions and must be symmetric. A small text format round-trips
// graphs bit-exactly; a planted-partition generator provides synthetic data.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rgnn/errors.hpp"
#include "rgnn/matrix.hpp"

namespace rgnn {

enum class Task { node, graph_level };

struct Graph {
  int num_nodes = 0;
  int num_classes = 0;
  bool directed = false;
  Task task = Task::node;
  DenseMatrix features;  // num_nodes x feat_dim
  std::vector<int> labels;
  std::vector<uint8_t> train_mask, val_mask, test_mask;
  // CSR adjacency: neighbors of v are adjacency[offsets[v] .. offsets[v+1]),
  // sorted ascending, no self-loops, no duplicates.
  std::vector<int64_t> offsets;
  std::vector<int> adjacency;

  int feat_dim() const { return features.cols(); }
  int degree(int v) const { return static_cast<int>(offsets[v + 1] - offsets[v]); }
  std::span<const int> neighbors(int v) const {
    return {adjacency.data() + offsets[v], static_cast<size_t>(degree(v))};
  }
  // Directed slot count: for undirected graphs this is twice the edge count.
  int64_t num_edge_slots() const { return static_cast<int64_t>(adjacency.size()); }
  int64_t num_undirected_edges() const {
    return directed ? -1 : num_edge_slots() / 2;
  }
};

// ----- construction -----

// Builds CSR from (u,v) pairs. For undirected graphs each pair is mirrored.
// Rejects self-loops and duplicates.
inline void set_edge_pairs(Graph& g, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<std::vector<int>> adj(g.num_nodes);
  auto push = [&](int u, int v) {
    if (u < 0 || u >= g.num_nodes || v < 0 || v >= g.num_nodes)
      throw ValidationError("edge endpoint out of range: " + std::to_string(u) + "-" +
                            std::to_string(v));
    if (u == v) throw ValidationError("self-loop rejected at node " + std::to_string(u));
    adj[u].push_back(v);
  };
  for (auto [u, v] : pairs) {
    push(u, v);
    if (!g.directed) push(v, u);
  }
  g.offsets.assign(g.num_nodes + 1, 0);
  g.adjacency.clear();
  for (int v = 0; v < g.num_nodes; ++v) {
    std::sort(adj[v].begin(), adj[v].end());
    if (std::adjacent_find(adj[v].begin(), adj[v].end()) != adj[v].end())
      throw ValidationError("duplicate edge at node " + std::to_string(v));
    g.offsets[v + 1] = g.offsets[v] + static_cast<int64_t>(adj[v].size());
    g.adjacency.insert(g.adjacency.end(), adj[v].begin(), adj[v].end());
  }
}

// Canonical edge pair list: (u < v) once per edge for undirected graphs,
// every stored arc for directed ones.
inline std::vector<std::pair<int, int>> edge_pairs(const Graph& g) {
  std::vector<std::pair<int, int>> out;
  for (int v = 0; v < g.num_nodes; ++v)
    for (int u : g.neighbors(v))
      if (g.directed || v < u) out.emplace_back(v, u);
  return out;
}

// Full structural validation; throws ValidationError on the first violation.
inline void validate(const Graph& g) {
  if (g.num_nodes < 0) throw ValidationError("negative node count");
  if (g.features.rows() != g.num_nodes) throw ValidationError("feature row count mismatch");
  if (static_cast<int>(g.labels.size()) != g.num_nodes)
    throw ValidationError("label count mismatch");
  for (int y : g.labels)
    if (y < 0 || y >= g.num_classes)
      throw ValidationError("label out of range [0," + std::to_string(g.num_classes) + ")");
  for (const auto* m : {&g.train_mask, &g.val_mask, &g.test_mask})
    if (static_cast<int>(m->size()) != g.num_nodes)
      throw ValidationError("mask length mismatch");
  if (static_cast<int>(g.offsets.size()) != g.num_nodes + 1)
    throw ValidationError("offsets length mismatch");
  if (g.offsets[0] != 0 || g.offsets[g.num_nodes] != g.num_edge_slots())
    throw ValidationError("offsets do not span adjacency");
  for (int v = 0; v < g.num_nodes; ++v) {
    if (g.offsets[v] > g.offsets[v + 1]) throw ValidationError("offsets not monotone");
    auto nb = g.neighbors(v);
    for (size_t i = 0; i < nb.size(); ++i) {
      if (nb[i] < 0 || nb[i] >= g.num_nodes)
        throw ValidationError("neighbor id out of range at node " + std::to_string(v));
      if (nb[i] == v) throw ValidationError("stored self-loop at node " + std::to_string(v));
      if (i > 0 && nb[i - 1] >= nb[i])
        throw ValidationError("neighbor list not strictly sorted at node " +
                              std::to_string(v));
    }
  }
  if (!g.directed) {
    for (int v = 0; v < g.num_nodes; ++v)
      for (int u : g.neighbors(v)) {
        auto nb = g.neighbors(u);
        if (!std::binary_search(nb.begin(), nb.end(), v))
          throw ValidationError("asymmetric undirected edge " + std::to_string(v) + "-" +
                                std::to_string(u));
      }
  }
}

// ----- text format -----
//
// line 1: nodes=<N> feats=<F> classes=<C> directed=<0|1> task=<node|graph>
// N feature lines, N label lines, E edge lines "u v", 3 mask lines (N 0/1 each).

namespace detail {

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().find_first_not_of(" \t") == std::string::npos)
    lines.pop_back();  // tolerate trailing blank lines only
  return lines;
}

inline long parse_long(const std::string& tok, const char* what, long lineno) {
  size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(tok, &pos);
  } catch (const std::exception&) {
    throw ParseError(std::string("expected integer for ") + what + ", got '" + tok + "'",
                     lineno);
  }
  if (pos != tok.size())
    throw ParseError(std::string("trailing junk in ") + what + ": '" + tok + "'", lineno);
  return v;
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream iss(s);
  std::vector<std::string> toks;
  std::string t;
  while (iss >> t) toks.push_back(t);
  return toks;
}

}  // namespace detail

inline Graph load_graph(std::istream& in) {
  using detail::parse_long;
  auto lines = detail::read_lines(in);
  if (lines.empty()) throw ParseError("empty graph file: missing header", 1);

  // header
  auto head = detail::split_ws(lines[0]);
  long n = -1, f = -1, c = -1, dir = -1;
  std::string task_str;
  for (const auto& tok : head) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw ParseError("header token lacks '=': " + tok, 1);
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "nodes") n = parse_long(val, "nodes", 1);
    else if (key == "feats") f = parse_long(val, "feats", 1);
    else if (key == "classes") c = parse_long(val, "classes", 1);
    else if (key == "directed") dir = parse_long(val, "directed", 1);
    else if (key == "task") task_str = val;
    else throw ParseError("unknown header key: " + key, 1);
  }
  if (n < 0 || f < 0 || c < 0 || dir < 0 || task_str.empty())
    throw ParseError("incomplete header: need nodes, feats, classes, directed, task", 1);
  if (dir != 0 && dir != 1) throw ParseError("directed must be 0 or 1", 1);
  if (task_str != "node" && task_str != "graph")
    throw ParseError("task must be 'node' or 'graph'", 1);

  Graph g;
  g.num_nodes = static_cast<int>(n);
  g.num_classes = static_cast<int>(c);
  g.directed = dir == 1;
  g.task = task_str == "node" ? Task::node : Task::graph_level;

  const long total = static_cast<long>(lines.size());
  long at = 1;
  if (total < 1 + n) throw ParseError("truncated file: missing feature section", total);
  g.features = DenseMatrix(g.num_nodes, static_cast<int>(f));
  for (int i = 0; i < n; ++i, ++at) {
    auto toks = detail::split_ws(lines[at]);
    if (static_cast<long>(toks.size()) != f)
      throw ParseError("feature line has " + std::to_string(toks.size()) + " values, want " +
                           std::to_string(f),
                       at + 1);
    for (long j = 0; j < f; ++j) {
      try {
        size_t pos = 0;
        g.features.at(i, static_cast<int>(j)) = std::stof(toks[j], &pos);
        if (pos != toks[j].size()) throw std::invalid_argument("junk");
      } catch (const std::exception&) {
        throw ParseError("bad feature value '" + toks[j] + "'", at + 1);
      }
    }
  }

  if (total < at + n) throw ParseError("truncated file: missing label section", total);
  g.labels.resize(g.num_nodes);
  for (int i = 0; i < n; ++i, ++at)
    g.labels[i] = static_cast<int>(parse_long(lines[at], "label", at + 1));

  const long remaining = total - at;
  if (remaining < 3) throw ParseError("truncated file: missing mask section", total);
  const long num_edges = remaining - 3;

  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(num_edges);
  for (long e = 0; e < num_edges; ++e, ++at) {
    auto toks = detail::split_ws(lines[at]);
    if (toks.size() != 2) throw ParseError("edge line needs 'u v'", at + 1);
    pairs.emplace_back(static_cast<int>(parse_long(toks[0], "edge endpoint", at + 1)),
                       static_cast<int>(parse_long(toks[1], "edge endpoint", at + 1)));
  }

  auto read_mask = [&](std::vector<uint8_t>& mask) {
    auto toks = detail::split_ws(lines[at]);
    if (static_cast<long>(toks.size()) != n)
      throw ParseError("mask line has " + std::to_string(toks.size()) + " values, want " +
                           std::to_string(n),
                       at + 1);
    mask.resize(g.num_nodes);
    for (int i = 0; i < n; ++i) {
      const long v = parse_long(toks[i], "mask value", at + 1);
      if (v != 0 && v != 1) throw ParseError("mask value must be 0 or 1", at + 1);
      mask[i] = static_cast<uint8_t>(v);
    }
    ++at;
  };
  read_mask(g.train_mask);
  read_mask(g.val_mask);
  read_mask(g.test_mask);

  set_edge_pairs(g, pairs);  // throws ValidationError on bad endpoints
  validate(g);
  return g;
}

inline Graph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open graph file: " + path, 0);
  return load_graph(in);
}

inline void save_graph(const Graph& g, std::ostream& out) {
  out << "nodes=" << g.num_nodes << " feats=" << g.feat_dim()
      << " classes=" << g.num_classes << " directed=" << (g.directed ? 1 : 0)
      << " task=" << (g.task == Task::node ? "node" : "graph") << "\n";
  char buf[64];
  for (int i = 0; i < g.num_nodes; ++i) {
    for (int j = 0; j < g.feat_dim(); ++j) {
      // %.9g round-trips float32 exactly through text
      std::snprintf(buf, sizeof buf, "%.9g", double(g.features.at(i, j)));
      out << (j ? " " : "") << buf;
    }
    out << "\n";
  }
  for (int i = 0; i < g.num_nodes; ++i) out << g.labels[i] << "\n";
  for (auto [u, v] : edge_pairs(g)) out << u << " " << v << "\n";
  for (const auto* m : {&g.train_mask, &g.val_mask, &g.test_mask}) {
    for (int i = 0; i < g.num_nodes; ++i) out << (i ? " " : "") << int((*m)[i]);
    out << "\n";
  }
}

inline void save_graph(const Graph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for write: " + path, 0);
  save_graph(g, out);
}

// ----- synthetic generator -----

struct PlantedPartitionParams {
  int n = 200;
  int k = 2;
  double p_in = 0.1;
  double p_out = 0.01;
  int feat_dim = 16;
  double noise = 0.3;
  uint64_t seed = 1;
};

// Planted partition: k even communities, intra-edge prob p_in, inter p_out.
// Features are orthogonal unit-norm community centroids (one-hot) plus iid
// Gaussian noise. Stratified 60/20/20 train/val/test masks per community.
inline Graph synth_planted_partition(const PlantedPartitionParams& p) {
  if (!(p.p_out >= 0.0 && p.p_out < p.p_in && p.p_in <= 1.0))
    throw ConfigError("planted partition requires 0 <= p_out < p_in <= 1");
  if (p.k < 2) throw ConfigError("planted partition requires k >= 2");
  if (p.n < p.k) throw ConfigError("planted partition requires n >= k");
  if (p.feat_dim < p.k)
    throw ConfigError("feat_dim must be >= k for orthogonal centroids");
  if (p.noise < 0.0) throw ConfigError("noise must be >= 0");

  std::mt19937_64 rng(p.seed);
  Graph g;
  g.num_nodes = p.n;
  g.num_classes = p.k;
  g.directed = false;
  g.task = Task::node;

  // contiguous even split: community sizes differ by at most one
  std::vector<int> comm(p.n);
  {
    const int base = p.n / p.k, extra = p.n % p.k;
    int node = 0;
    for (int c = 0; c < p.k; ++c) {
      const int sz = base + (c < extra ? 1 : 0);
      for (int i = 0; i < sz; ++i) comm[node++] = c;
    }
  }
  g.labels = comm;

  g.features = DenseMatrix(p.n, p.feat_dim);
  std::normal_distribution<float> gauss(0.0f, static_cast<float>(p.noise));
  for (int v = 0; v < p.n; ++v) {
    for (int j = 0; j < p.feat_dim; ++j)
      g.features.at(v, j) = (p.noise > 0.0 ? gauss(rng) : 0.0f);
    g.features.at(v, comm[v]) += 1.0f;  // unit-norm one-hot centroid
  }

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < p.n; ++i)
    for (int j = i + 1; j < p.n; ++j)
      if (u(rng) < (comm[i] == comm[j] ? p.p_in : p.p_out)) pairs.emplace_back(i, j);
  set_edge_pairs(g, pairs);

  g.train_mask.assign(p.n, 0);
  g.val_mask.assign(p.n, 0);
  g.test_mask.assign(p.n, 0);
  for (int c = 0; c < p.k; ++c) {
    std::vector<int> members;
    for (int v = 0; v < p.n; ++v)
      if (comm[v] == c) members.push_back(v);
    std::shuffle(members.begin(), members.end(), rng);
    const int m = static_cast<int>(members.size());
    const int ntr = static_cast<int>(m * 0.6), nva = static_cast<int>(m * 0.2);
    for (int i = 0; i < m; ++i) {
      if (i < ntr) g.train_mask[members[i]] = 1;
      else if (i < ntr + nva) g.val_mask[members[i]] = 1;
      else g.test_mask[members[i]] = 1;
    }
  }

  validate(g);
  return g;
}

// ----- batching (graph-level tasks) -----

struct GraphBatch {
  Graph merged;                     // disjoint union; merged.task == graph_level
  std::vector<int> graph_of_node;   // size merged.num_nodes
  std::vector<int64_t> node_ranges; // num_graphs+1; nodes of graph i are [r[i], r[i+1])
  int num_graphs = 0;
  std::vector<int> labels;          // per graph
  std::vector<uint8_t> train_mask, val_mask, test_mask;  // per graph
};

inline GraphBatch make_batch(const std::vector<Graph>& graphs,
                             const std::vector<int>& graph_labels,
                             const std::vector<uint8_t>& train,
                             const std::vector<uint8_t>& val,
                             const std::vector<uint8_t>& test) {
  if (graphs.empty()) throw ContractError("make_batch: empty graph list");
  if (graph_labels.size() != graphs.size() || train.size() != graphs.size() ||
      val.size() != graphs.size() || test.size() != graphs.size())
    throw ShapeError("make_batch: per-graph vectors must match graph count");
  GraphBatch b;
  b.num_graphs = static_cast<int>(graphs.size());
  b.labels = graph_labels;
  b.train_mask = train;
  b.val_mask = val;
  b.test_mask = test;
  const int fdim = graphs[0].feat_dim();
  int total = 0;
  for (const auto& g : graphs) {
    if (g.feat_dim() != fdim) throw ShapeError("make_batch: feature dims differ");
    if (g.directed != graphs[0].directed) throw ShapeError("make_batch: mixed directedness");
    total += g.num_nodes;
  }
  b.merged.num_nodes = total;
  b.merged.directed = graphs[0].directed;
  b.merged.task = Task::graph_level;
  b.merged.num_classes =
      std::max(*std::max_element(graph_labels.begin(), graph_labels.end()) + 1,
               graphs[0].num_classes);
  b.merged.features = DenseMatrix(total, fdim);
  b.merged.labels.assign(total, 0);
  b.merged.train_mask.assign(total, 0);
  b.merged.val_mask.assign(total, 0);
  b.merged.test_mask.assign(total, 0);
  b.node_ranges.assign(b.num_graphs + 1, 0);
  b.graph_of_node.resize(total);
  std::vector<std::pair<int, int>> pairs;
  int base = 0;
  for (int gi = 0; gi < b.num_graphs; ++gi) {
    const Graph& g = graphs[gi];
    for (int v = 0; v < g.num_nodes; ++v) {
      b.graph_of_node[base + v] = gi;
      b.merged.labels[base + v] = graph_labels[gi];
      for (int j = 0; j < fdim; ++j)
        b.merged.features.at(base + v, j) = g.features.at(v, j);
    }
    for (auto [u, v] : edge_pairs(g)) pairs.emplace_back(base + u, base + v);
    base += g.num_nodes;
    b.node_ranges[gi + 1] = base;
  }
  set_edge_pairs(b.merged, pairs);
  return b;
}

// Recovers graph `gi` from a batch (structure + features).
inline Graph slice(const GraphBatch& b, int gi) {
  if (gi < 0 || gi >= b.num_graphs) throw ShapeError("slice: graph index out of range");
  const int lo = static_cast<int>(b.node_ranges[gi]);
  const int hi = static_cast<int>(b.node_ranges[gi + 1]);
  Graph g;
  g.num_nodes = hi - lo;
  g.num_classes = b.merged.num_classes;
  g.directed = b.merged.directed;
  g.task = Task::node;
  g.features = DenseMatrix(g.num_nodes, b.merged.feat_dim());
  for (int v = lo; v < hi; ++v)
    for (int j = 0; j < b.merged.feat_dim(); ++j)
      g.features.at(v - lo, j) = b.merged.features.at(v, j);
  g.labels.assign(g.num_nodes, b.labels[gi]);
  g.train_mask.assign(g.num_nodes, 0);
  g.val_mask.assign(g.num_nodes, 0);
  g.test_mask.assign(g.num_nodes, 0);
  std::vector<std::pair<int, int>> pairs;
  for (int v = lo; v < hi; ++v)
    for (int u : b.merged.neighbors(v)) {
      if (u < lo || u >= hi)
        throw ValidationError("batch graph " + std::to_string(gi) + " is not self-contained");
      if (g.directed || v < u) pairs.emplace_back(v - lo, u - lo);
    }
  set_edge_pairs(g, pairs);
  return g;
}

// Connected components (used for task=graph files, where components are the
// individual graphs and a graph's label/mask come from its first node).
inline std::vector<int> connected_components(const Graph& g, int* count_out = nullptr) {
  std::vector<int> comp(g.num_nodes, -1);
  int count = 0;
  std::vector<int> stack;
  for (int s = 0; s < g.num_nodes; ++s) {
    if (comp[s] >= 0) continue;
    stack.push_back(s);
    comp[s] = count;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int u : g.neighbors(v))
        if (comp[u] < 0) {
          comp[u] = count;
          stack.push_back(u);
        }
    }
    ++count;
  }
  if (count_out) *count_out = count;
  return comp;
}

inline GraphBatch batch_from_components(const Graph& g) {
  int count = 0;
  auto comp = connected_components(g, &count);
  std::vector<Graph> parts;
  std::vector<int> labels;
  std::vector<uint8_t> tr, va, te;
  for (int c = 0; c < count; ++c) {
    std::vector<int> nodes;
    for (int v = 0; v < g.num_nodes; ++v)
      if (comp[v] == c) nodes.push_back(v);
    Graph part;
    part.num_nodes = static_cast<int>(nodes.size());
    part.num_classes = g.num_classes;
    part.directed = g.directed;
    part.features = DenseMatrix(part.num_nodes, g.feat_dim());
    std::vector<int> local(g.num_nodes, -1);
    for (size_t i = 0; i < nodes.size(); ++i) {
      local[nodes[i]] = static_cast<int>(i);
      for (int j = 0; j < g.feat_dim(); ++j)
        part.features.at(static_cast<int>(i), j) = g.features.at(nodes[i], j);
    }
    part.labels.assign(part.num_nodes, g.labels[nodes[0]]);
    part.train_mask.assign(part.num_nodes, 0);
    part.val_mask.assign(part.num_nodes, 0);
    part.test_mask.assign(part.num_nodes, 0);
    std::vector<std::pair<int, int>> pairs;
    for (int v : nodes)
      for (int u : g.neighbors(v))
        if (g.directed || v < u) pairs.emplace_back(local[v], local[u]);
    set_edge_pairs(part, pairs);
    parts.push_back(std::move(part));
    labels.push_back(g.labels[nodes[0]]);
    tr.push_back(g.train_mask[nodes[0]]);
    va.push_back(g.val_mask[nodes[0]]);
    te.push_back(g.test_mask[nodes[0]]);
  }
  return make_batch(parts, labels, tr, va, te);
}

}  // namespace rgnn
