#pragma once

// Bit-flip fault model. Every memory bit of an injection site flips
// independently with probability `ber`; realized by drawing K ~ Binomial(bits,
// ber) and then K distinct uniform bit positions (rejection on duplicates).
// Float words are flipped in place via bit_cast XOR, so NaN/Inf patterns appear
// naturally and are preserved. Adjacency is modeled as a logical one-bit-per-
// entry N x N matrix; undirected graphs store the upper triangle and mirror
// every toggle, so symmetry survives injection by construction.

#include <bit>
#include <cstdint>
#include <random>
#include <set>
#include <unordered_set>
#include <vector>

#include "rgnn/errors.hpp"
#include "rgnn/graph.hpp"
#include "rgnn/matrix.hpp"

namespace rgnn {

enum class FaultSite { weights, embeddings, adjacency };

struct FaultSpec {
  FaultSite site = FaultSite::weights;
  double ber = 0.0;
  uint64_t seed = 0;
};

inline const char* to_string(FaultSite s) {
  switch (s) {
    case FaultSite::weights: return "weights";
    case FaultSite::embeddings: return "embeddings";
    case FaultSite::adjacency: return "adjacency";
  }
  return "?";
}

struct InjectionReport {
  uint64_t bits_total = 0;
  uint64_t bits_flipped = 0;
  uint64_t words_affected = 0;  // distinct float words hit (matrix sites)
  uint64_t entries_toggled = 0; // adjacency site: logical 0<->1 toggles

  InjectionReport& operator+=(const InjectionReport& o) {
    bits_total += o.bits_total;
    bits_flipped += o.bits_flipped;
    words_affected += o.words_affected;
    entries_toggled += o.entries_toggled;
    return *this;
  }
};

inline float flip_word(float v, uint32_t xor_mask) {
  return std::bit_cast<float>(std::bit_cast<uint32_t>(v) ^ xor_mask);
}

namespace detail {

inline void check_ber(double ber) {
  if (!(ber >= 0.0 && ber <= 1.0)) throw ConfigError("ber must lie in [0,1]");
}

// K distinct uniform draws from [0, space). Uses complement sampling when K is
// more than half the space so rejection stays cheap; ber=1 is exact.
inline std::vector<uint64_t> sample_distinct(uint64_t space, uint64_t k,
                                             std::mt19937_64& rng) {
  if (k > space) throw ContractError("sample_distinct: k exceeds space");
  std::vector<uint64_t> out;
  if (k == space) {
    out.resize(space);
    for (uint64_t i = 0; i < space; ++i) out[i] = i;
    return out;
  }
  const bool complement = k > space / 2;
  const uint64_t want = complement ? space - k : k;
  std::unordered_set<uint64_t> seen;
  seen.reserve(static_cast<size_t>(want) * 2 + 1);
  std::uniform_int_distribution<uint64_t> u(0, space - 1);
  while (seen.size() < want) seen.insert(u(rng));  // rejection on duplicates
  if (!complement) {
    out.assign(seen.begin(), seen.end());
    return out;
  }
  out.reserve(static_cast<size_t>(k));
  for (uint64_t i = 0; i < space; ++i)
    if (!seen.count(i)) out.push_back(i);
  return out;
}

inline uint64_t draw_flip_count(uint64_t bits, double ber, std::mt19937_64& rng) {
  if (ber == 0.0 || bits == 0) return 0;
  if (ber == 1.0) return bits;
  std::binomial_distribution<uint64_t> bin(bits, ber);
  return bin(rng);
}

}  // namespace detail

// Flip bits of a float32 buffer in place.
inline InjectionReport inject_matrix(DenseMatrix& m, double ber, std::mt19937_64& rng) {
  detail::check_ber(ber);
  InjectionReport rep;
  rep.bits_total = 32ull * m.size();
  const uint64_t k = detail::draw_flip_count(rep.bits_total, ber, rng);
  rep.bits_flipped = k;
  if (k == 0) return rep;
  auto positions = detail::sample_distinct(rep.bits_total, k, rng);
  std::unordered_set<uint64_t> words;
  words.reserve(positions.size() * 2);
  float* data = m.data();
  for (uint64_t pos : positions) {
    const uint64_t word = pos / 32, bit = pos % 32;
    data[word] = flip_word(data[word], 1u << bit);
    words.insert(word);
  }
  rep.words_affected = words.size();
  return rep;
}

// Toggle logical adjacency entries. The sample space excludes the diagonal
// (self-loops are not stored, so injection can never corrupt the logical
// self-loop); undirected graphs sample unordered pairs and mirror the toggle.
inline InjectionReport inject_adjacency(Graph& g, double ber, std::mt19937_64& rng) {
  detail::check_ber(ber);
  const uint64_t n = static_cast<uint64_t>(g.num_nodes);
  InjectionReport rep;
  rep.bits_total = g.directed ? n * (n - 1) : n * (n - 1) / 2;
  const uint64_t k = detail::draw_flip_count(rep.bits_total, ber, rng);
  rep.bits_flipped = k;
  rep.entries_toggled = k;
  if (k == 0) return rep;
  auto entries = detail::sample_distinct(rep.bits_total, k, rng);

  std::set<std::pair<int, int>> edges;
  for (auto e : edge_pairs(g)) edges.insert(e);
  for (uint64_t t : entries) {
    int i, j;
    if (g.directed) {
      i = static_cast<int>(t / (n - 1));
      const int r = static_cast<int>(t % (n - 1));
      j = r >= i ? r + 1 : r;
    } else {
      // unordered pair index -> (i<j); row i holds (n-1-i) pairs
      uint64_t rem = t;
      i = 0;
      while (rem >= n - 1 - static_cast<uint64_t>(i)) {
        rem -= n - 1 - static_cast<uint64_t>(i);
        ++i;
      }
      j = i + 1 + static_cast<int>(rem);
    }
    const auto key = std::make_pair(i, j);
    if (auto it = edges.find(key); it != edges.end()) edges.erase(it);
    else edges.insert(key);
  }
  set_edge_pairs(g, {edges.begin(), edges.end()});
  return rep;
}

}  // namespace rgnn
