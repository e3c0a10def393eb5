#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "rgnn/aggregators.hpp"
#include "util.hpp"

using namespace rgnn;

namespace {

constexpr float kNaN = std::numeric_limits<float>::quiet_NaN();
constexpr float kInf = std::numeric_limits<float>::infinity();

DenseMatrix from_rows(const std::vector<std::vector<float>>& vals) {
  const int r = static_cast<int>(vals.size());
  const int c = r ? static_cast<int>(vals[0].size()) : 0;
  DenseMatrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m.at(i, j) = vals[i][j];
  return m;
}

DenseMatrix one_row(const std::vector<float>& vals) { return from_rows({vals}); }

// Independent oracle: per-dim order statistics on doubles after a full sort,
// dropping non-finite values first.
struct SortOracle {
  static std::vector<double> finite_sorted(const DenseMatrix& rows, int j) {
    std::vector<double> v;
    for (int r = 0; r < rows.rows(); ++r)
      if (std::isfinite(rows.at(r, j))) v.push_back(rows.at(r, j));
    std::sort(v.begin(), v.end());
    return v;
  }
  static double median(const DenseMatrix& rows, int j, double fallback) {
    auto v = finite_sorted(rows, j);
    const size_t m = v.size();
    if (m == 0) return fallback;
    return m % 2 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
  }
  static double trimmed(const DenseMatrix& rows, int j, double beta, double fallback) {
    auto v = finite_sorted(rows, j);
    const long t = static_cast<long>(std::floor(beta * rows.rows()));
    const long m = static_cast<long>(v.size());
    if (m - 2 * t <= 0) return fallback;
    double acc = 0.0;
    for (long i = t; i < m - t; ++i) acc += v[i];
    return acc / (m - 2 * t);
  }
};

StatsTable manual_stats(const std::vector<float>& mu, const std::vector<float>& sigma,
                        const std::vector<float>& lo, const std::vector<float>& hi) {
  StatsTable t;
  t.mu = one_row(mu);
  t.sigma = one_row(sigma);
  t.lo = one_row(lo);
  t.hi = one_row(hi);
  t.count = 100;
  return t;
}

// Finite-difference rig around aggregate_row / aggregate_backward.
struct AggFd {
  AggregatorConfig cfg;
  DenseMatrix rows;    // n x d neighborhood
  DenseMatrix target;  // 1 x d
  DenseMatrix mg;      // 1 x d (may stay empty)
  std::array<float, 3> s{1.f / 3, 1.f / 3, 1.f / 3};
  bool use_s = false;
  StatsTable stats;
  bool use_stats = false;
  bool training = false;

  AggRuntime runtime() const {
    AggRuntime rt;
    rt.training = training;
    if (!mg.empty()) rt.m_g = mg.row(0);
    if (use_s) rt.s = s.data();
    if (use_stats) rt.stats = &stats;
    return rt;
  }

  DenseMatrix forward(KernelCache* cache = nullptr) const {
    const int n = rows.rows(), d = target.cols();
    std::vector<const float*> ptrs(n);
    for (int r = 0; r < n; ++r) ptrs[r] = rows.row(r);
    DenseMatrix out(1, d);
    AggScratch sc;
    aggregate_row(cfg, runtime(), ptrs.data(), n, target.row(0), d, out.row(0), sc,
                  nullptr, cache);
    return out;
  }

  double loss(const DenseMatrix& proj) const {
    DenseMatrix out = forward();
    double l = 0.0;
    for (int j = 0; j < out.cols(); ++j) l += double(proj.at(0, j)) * out.at(0, j);
    return l;
  }

  // Checks every row entry, the target row, m_g and s against central
  // differences of the projected output.
  void check(const DenseMatrix& proj, double h) {
    const int n = rows.rows(), d = target.cols();
    KernelCache cache;
    DenseMatrix out = forward(&cache);
    DenseMatrix d_rows(n + 1, d);
    DenseMatrix d_mg(1, d);
    std::array<float, 3> d_s{0, 0, 0};
    std::vector<const float*> ptrs(n);
    for (int r = 0; r < n; ++r) ptrs[r] = rows.row(r);
    aggregate_backward(cache, runtime(), ptrs.data(), n, target.row(0), proj.row(0), d,
                       d_rows.data(), mg.empty() ? nullptr : d_mg.data(),
                       use_s ? d_s.data() : nullptr);

    auto fd_slot = [&](float* slot) {
      const float saved = *slot;
      *slot = saved + static_cast<float>(h);
      const double up = loss(proj);
      *slot = saved - static_cast<float>(h);
      const double dn = loss(proj);
      *slot = saved;
      return (up - dn) / (2.0 * h);
    };

    for (int r = 0; r < n; ++r)
      for (int j = 0; j < d; ++j) {
        INFO("row " << r << " dim " << j);
        REQUIRE(testutil::grad_close(fd_slot(&rows.at(r, j)), d_rows.at(r, j)));
      }
    for (int j = 0; j < d; ++j) {
      INFO("target dim " << j);
      REQUIRE(testutil::grad_close(fd_slot(&target.at(0, j)), d_rows.at(n, j)));
    }
    if (!mg.empty())
      for (int j = 0; j < d; ++j) {
        INFO("m_g dim " << j);
        REQUIRE(testutil::grad_close(fd_slot(&mg.at(0, j)), d_mg.at(0, j)));
      }
    if (use_s)
      for (int k = 0; k < 3; ++k) {
        INFO("s " << k);
        REQUIRE(testutil::grad_close(fd_slot(&s[k]), d_s[k]));
      }
  }
};

DenseMatrix separated_rows(int n, int d, unsigned seed) {
  // integer lattice plus a small jitter: distinct values with gaps >> fd step
  auto g = testutil::rng(seed);
  std::uniform_int_distribution<int> base(-5, 5);
  std::uniform_real_distribution<float> jit(-0.05f, 0.05f);
  DenseMatrix m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      float v;
      bool distinct;
      do {
        v = static_cast<float>(base(g)) + jit(g);
        distinct = true;
        for (int r = 0; r < i; ++r)
          if (std::fabs(m.at(r, j) - v) < 0.3f) distinct = false;
      } while (!distinct);
      m.at(i, j) = v;
    }
  return m;
}

}  // namespace

TEST_CASE("fixed-value aggregation results") {
  AggRuntime rt;
  const DenseMatrix rows = from_rows({{1, 2}, {3, 4}});
  const DenseMatrix tgt = one_row({7, 8});

  SECTION("mean") {
    auto out = aggregate(parse_aggregator("mean"), rt, rows, tgt);
    CHECK(out.at(0, 0) == 2.0f);
    CHECK(out.at(0, 1) == 3.0f);
  }
  SECTION("sum") {
    auto out = aggregate(parse_aggregator("sum"), rt, rows, tgt);
    CHECK(out.at(0, 0) == 4.0f);
    CHECK(out.at(0, 1) == 6.0f);
  }
  SECTION("max") {
    auto out = aggregate(parse_aggregator("max"), rt, rows, tgt);
    CHECK(out.at(0, 0) == 3.0f);
    CHECK(out.at(0, 1) == 4.0f);
  }
  SECTION("median odd and even counts") {
    auto odd = aggregate(parse_aggregator("median"), rt,
                         from_rows({{1}, {5}, {100}}), one_row({0}));
    CHECK(odd.at(0, 0) == 5.0f);
    auto even = aggregate(parse_aggregator("median"), rt,
                          from_rows({{1}, {2}, {3}, {10}}), one_row({0}));
    CHECK(even.at(0, 0) == 2.5f);
  }
  SECTION("trimmed mean drops floor(beta*n) per side") {
    // n=10, beta=0.1: drop min and max; second dim has NaNs dropped first
    std::vector<std::vector<float>> v;
    for (int i = 1; i <= 10; ++i)
      v.push_back({float(i), i <= 8 ? float(i) : kNaN});
    auto out = aggregate(parse_aggregator("trimmed_mean:beta=0.1"), rt, from_rows(v),
                         one_row({0, 0}));
    CHECK(out.at(0, 0) == 5.5f);  // mean of 2..9
    CHECK(out.at(0, 1) == 4.5f);  // mean of 2..7 (8 finite, drop 1 per side)
  }
  SECTION("soft median concentrates on the central row at low temperature") {
    auto out = aggregate(parse_aggregator("soft_median:T=1e-4"), rt,
                         from_rows({{0}, {1}, {10}}), one_row({0}));
    CHECK_THAT(out.at(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-4));
    auto flat = aggregate(parse_aggregator("soft_median:T=1e6"), rt,
                          from_rows({{0}, {1}, {10}}), one_row({0}));
    CHECK_THAT(flat.at(0, 0), Catch::Matchers::WithinAbs(11.0 / 3.0, 1e-3));
  }
  SECTION("distribution keeps strictly inside the interval, mu fallback") {
    AggRuntime drt;
    auto st = manual_stats({1.0f}, {0.1f}, {0}, {0});
    drt.stats = &st;
    DiscardCounter dc;
    auto out = aggregate(parse_aggregator("distribution:a=3,b=3"), drt,
                         from_rows({{0.9f}, {1.0f}, {1.1f}, {100.0f}}), one_row({0}), &dc);
    CHECK_THAT(out.at(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-6));
    CHECK(dc.slots_total == 4);
    CHECK(dc.slots_discarded == 1);
    // nothing inside: calibrated mean
    auto fb = aggregate(parse_aggregator("distribution"), drt,
                        from_rows({{50.0f}, {-50.0f}}), one_row({0}));
    CHECK(fb.at(0, 0) == 1.0f);
  }
  SECTION("distribution sigma==0 keeps exact matches only") {
    AggRuntime drt;
    auto st = manual_stats({2.0f}, {0.0f}, {0}, {0});
    drt.stats = &st;
    auto out = aggregate(parse_aggregator("distribution"), drt,
                         from_rows({{2.0f}, {2.0f}, {3.0f}}), one_row({0}));
    CHECK(out.at(0, 0) == 2.0f);
  }
  SECTION("dynamic weighting: equal distances average, outliers vanish") {
    AggRuntime drt;
    DenseMatrix mg(1, 2);  // zeros
    drt.m_g = mg.row(0);
    auto out = aggregate(parse_aggregator("dynamic_weight"), drt,
                         from_rows({{1, 0}, {0, 1}}), one_row({9, 9}));
    CHECK_THAT(out.at(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-6));
    CHECK_THAT(out.at(0, 1), Catch::Matchers::WithinAbs(0.5, 1e-6));
    // a bit-flip magnitude row underflows to weight zero
    auto rob = aggregate(parse_aggregator("dynamic_weight"), drt,
                         from_rows({{1, 0}, {0, 1}, {1e30f, 0}}), one_row({9, 9}));
    CHECK_THAT(rob.at(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-6));
    CHECK_THAT(rob.at(0, 1), Catch::Matchers::WithinAbs(0.5, 1e-6));
  }
  SECTION("cosine pruning by similarity to the target") {
    const DenseMatrix t2 = one_row({1, 0});
    auto keep_one = aggregate(parse_aggregator("cosine:alpha=0.5"), rt,
                              from_rows({{2, 0}, {-1, 0}, {0, 3}}), t2);
    CHECK(keep_one.at(0, 0) == 2.0f);
    CHECK(keep_one.at(0, 1) == 0.0f);
    auto keep_two = aggregate(parse_aggregator("cosine:alpha=0"), rt,
                              from_rows({{2, 0}, {-1, 0}, {0, 3}}), t2);
    CHECK(keep_two.at(0, 0) == 1.0f);
    CHECK(keep_two.at(0, 1) == 1.5f);
  }
  SECTION("activation clip averages clamped values") {
    AggRuntime crt;
    auto st = manual_stats({0}, {1}, {0.0f}, {1.0f});
    crt.stats = &st;
    auto out = aggregate(parse_aggregator("activation_clip"), crt,
                         from_rows({{-5.0f}, {0.5f}, {7.0f}}), one_row({0}));
    CHECK_THAT(out.at(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-6));
  }
  SECTION("combined is the s-weighted sum of its three components") {
    auto g = testutil::rng(11);
    DenseMatrix rws = testutil::random_matrix(5, 3, g, -1.0f, 1.0f);
    DenseMatrix t3 = testutil::random_matrix(1, 3, g, -1.0f, 1.0f);
    DenseMatrix mg = testutil::random_matrix(1, 3, g, -0.5f, 0.5f);
    auto st = manual_stats({0, 0, 0}, {10, 10, 10}, {-9, -9, -9}, {9, 9, 9});
    std::array<float, 3> s{0.2f, 0.5f, 0.3f};
    AggRuntime crt;
    crt.stats = &st;
    crt.m_g = mg.row(0);
    crt.s = s.data();

    auto comb = aggregate(parse_aggregator("combined"), crt, rws, t3);
    auto c1 = aggregate(parse_aggregator("distribution"), crt, rws, t3);
    auto c2 = aggregate(parse_aggregator("dynamic_weight"), crt, rws, t3);
    auto c3 = aggregate(parse_aggregator("cosine"), crt, rws, t3);
    for (int j = 0; j < 3; ++j) {
      const float want =
          s[0] * c1.at(0, j) + s[1] * c2.at(0, j) + s[2] * c3.at(0, j);
      CHECK_THAT(comb.at(0, j), Catch::Matchers::WithinAbs(want, 1e-6));
    }
    // pure-distribution weights reproduce the component exactly
    std::array<float, 3> s100{1, 0, 0};
    crt.s = s100.data();
    auto pure = aggregate(parse_aggregator("combined"), crt, rws, t3);
    for (int j = 0; j < 3; ++j) CHECK(pure.at(0, j) == c1.at(0, j));
  }
}

TEST_CASE("order-statistic kinds match a full-sort oracle exactly on integer inputs") {
  auto g = testutil::rng(2024);
  std::uniform_int_distribution<int> val(-50, 50);
  AggRuntime rt;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + int(g() % 12), d = 1 + int(g() % 5);
    DenseMatrix rows(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) rows.at(i, j) = static_cast<float>(val(g));
    DenseMatrix tgt(1, d);
    for (int j = 0; j < d; ++j) tgt.at(0, j) = static_cast<float>(val(g));

    auto med = aggregate(parse_aggregator("median"), rt, rows, tgt);
    auto tri = aggregate(parse_aggregator("trimmed_mean:beta=0.2"), rt, rows, tgt);
    for (int j = 0; j < d; ++j) {
      CHECK(med.at(0, j) == static_cast<float>(SortOracle::median(rows, j, tgt.at(0, j))));
      CHECK(tri.at(0, j) ==
            static_cast<float>(SortOracle::trimmed(rows, j, 0.2, tgt.at(0, j))));
    }
  }
}

TEST_CASE("aggregation is invariant to neighbor order") {
  auto g = testutil::rng(55);
  DenseMatrix rows = testutil::random_matrix(9, 4, g, -2.0f, 2.0f);
  DenseMatrix tgt = testutil::random_matrix(1, 4, g, -2.0f, 2.0f);
  DenseMatrix mg = testutil::random_matrix(1, 4, g, -0.5f, 0.5f);
  auto st = manual_stats({0, 0, 0, 0}, {1, 1, 1, 1}, {-2, -2, -2, -2}, {2, 2, 2, 2});
  std::array<float, 3> s{0.4f, 0.3f, 0.3f};
  AggRuntime rt;
  rt.stats = &st;
  rt.m_g = mg.row(0);
  rt.s = s.data();

  std::vector<int> perm(rows.rows());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::shuffle(perm.begin(), perm.end(), g);
  DenseMatrix shuffled(rows.rows(), rows.cols());
  for (int i = 0; i < rows.rows(); ++i)
    for (int j = 0; j < rows.cols(); ++j) shuffled.at(i, j) = rows.at(perm[i], j);

  for (const char* spec :
       {"mean", "sum", "max", "median", "trimmed_mean:beta=0.2", "soft_median",
        "activation_clip", "distribution", "dynamic_weight", "cosine:alpha=-0.2",
        "combined"}) {
    INFO(spec);
    auto a = aggregate(parse_aggregator(spec), rt, rows, tgt);
    auto b = aggregate(parse_aggregator(spec), rt, shuffled, tgt);
    REQUIRE(a.allclose(b, 1e-6f));
  }
}

TEST_CASE("degenerate configurations reduce to plain mean") {
  auto g = testutil::rng(77);
  AggRuntime rt;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + int(g() % 10), d = 1 + int(g() % 6);
    DenseMatrix rows = testutil::random_matrix(n, d, g, -3.0f, 3.0f);
    DenseMatrix tgt = testutil::random_matrix(1, d, g, -3.0f, 3.0f);
    auto mean = aggregate(parse_aggregator("mean"), rt, rows, tgt);

    SECTION("case group " + std::to_string(trial)) {}  // keep sections cheap

    // huge interval: nothing trimmed
    auto st = calibrate_stats(rows);
    AggRuntime drt = rt;
    drt.stats = &st;
    auto dist = aggregate(parse_aggregator("distribution:a=1e9,b=1e9"), drt, rows, tgt);
    REQUIRE(dist.allclose(mean, 1e-6f));

    // beta=0: trimmed mean keeps everything
    auto tri = aggregate(parse_aggregator("trimmed_mean:beta=0"), rt, rows, tgt);
    REQUIRE(tri.allclose(mean, 1e-6f));

    // alpha=-1: cosine keeps everything
    auto cos = aggregate(parse_aggregator("cosine:alpha=-1"), rt, rows, tgt);
    REQUIRE(cos.allclose(mean, 1e-6f));

    // rows scaled to a common norm with m_g = 0: equal weights
    DenseMatrix unit = rows;
    for (int i = 0; i < n; ++i) {
      double norm = 0.0;
      for (int j = 0; j < d; ++j) norm += double(unit.at(i, j)) * unit.at(i, j);
      norm = std::sqrt(norm);
      if (norm == 0.0) unit.at(i, 0) = 1.0f, norm = 1.0;
      for (int j = 0; j < d; ++j)
        unit.at(i, j) = static_cast<float>(unit.at(i, j) / norm);
    }
    DenseMatrix mg(1, d);
    AggRuntime wrt = rt;
    wrt.m_g = mg.row(0);
    auto dyn = aggregate(parse_aggregator("dynamic_weight"), wrt, unit, tgt);
    DenseMatrix unit_mean = aggregate(parse_aggregator("mean"), rt, unit, tgt);
    REQUIRE(dyn.allclose(unit_mean, 1e-5f));
  }
}

TEST_CASE("non-finite values: robust kinds contain, plain kinds propagate") {
  auto g = testutil::rng(99);
  DenseMatrix mgz(1, 3);
  auto st = manual_stats({0, 0, 0}, {1, 1, 1}, {-3, -3, -3}, {3, 3, 3});
  std::array<float, 3> s{1.f / 3, 1.f / 3, 1.f / 3};

  for (int deg = 3; deg <= 10; ++deg) {
    DenseMatrix rows = testutil::random_matrix(deg, 3, g, -1.0f, 1.0f);
    DenseMatrix tgt = testutil::random_matrix(1, 3, g, -1.0f, 1.0f);
    for (int j = 0; j < 3; ++j) rows.at(0, j) = (j % 2) ? kNaN : kInf;  // corrupt row 0

    AggRuntime rt;
    rt.stats = &st;
    rt.m_g = mgz.row(0);
    rt.s = s.data();

    const float beta = 1.0f / static_cast<float>(deg);
    const std::string trimmed = "trimmed_mean:beta=" + std::to_string(beta);
    for (const std::string& spec :
         {std::string("distribution"), std::string("dynamic_weight"),
          std::string("median"), trimmed, std::string("soft_median")}) {
      INFO("deg=" << deg << " " << spec);
      auto out = aggregate(parse_aggregator(spec), rt, rows, tgt);
      REQUIRE(out.all_finite());
    }
    auto mean_out = aggregate(parse_aggregator("mean"), rt, rows, tgt);
    auto sum_out = aggregate(parse_aggregator("sum"), rt, rows, tgt);
    bool mean_bad = false, sum_bad = false;
    for (int j = 0; j < 3; ++j) {
      mean_bad |= !std::isfinite(mean_out.at(0, j));
      sum_bad |= !std::isfinite(sum_out.at(0, j));
    }
    CHECK(mean_bad);
    CHECK(sum_bad);
  }
}

TEST_CASE("distribution trimming discards the expected tail mass of a normal sample") {
  // [DERIVED] two-sided 3-sigma tail of a standard normal: 2*Phi(-3) ~ 0.0027
  auto g = testutil::rng(123456);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  const long n = 1'000'000;
  std::vector<float> xs(n);
  for (auto& x : xs) x = nd(g);

  double sum = 0.0;
  for (float x : xs) sum += x;
  const double mu = sum / n;
  double ss = 0.0;
  for (float x : xs) ss += (x - mu) * (x - mu);
  const double sigma = std::sqrt(ss / (n - 1));

  const auto r = distribution_trim(xs.data(), n, static_cast<float>(mu),
                                   static_cast<float>(sigma), 3.0f, 3.0f);
  const double frac = double(r.discarded) / double(n);
  CHECK_THAT(frac, Catch::Matchers::WithinAbs(0.0027, 0.001));
  CHECK(r.kept + r.discarded == n);
  CHECK_THAT(r.mean, Catch::Matchers::WithinAbs(0.0, 0.01));
}

TEST_CASE("distribution and clip outputs are bounded by calibrated statistics") {
  auto g = testutil::rng(31415);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 4 + int(g() % 8), d = 3;
    DenseMatrix clean = testutil::random_matrix(n, d, g, -1.0f, 1.0f);
    auto st = calibrate_stats(clean);

    DenseMatrix dirty = clean;
    dirty.at(0, 0) = kInf;
    dirty.at(1, 1) = 3.0e38f;
    dirty.at(2, 2) = -2.9e38f;
    DenseMatrix tgt = testutil::random_matrix(1, d, g, -1.0f, 1.0f);

    AggRuntime rt;
    rt.stats = &st;
    auto dist = aggregate(parse_aggregator("distribution"), rt, dirty, tgt);
    auto clip = aggregate(parse_aggregator("activation_clip"), rt, dirty, tgt);
    for (int j = 0; j < d; ++j) {
      const float mu = st.mu.at(0, j), sg = st.sigma.at(0, j);
      CHECK(dist.at(0, j) >= mu - 3 * sg);
      CHECK(dist.at(0, j) <= mu + 3 * sg);
      CHECK(clip.at(0, j) >= st.lo.at(0, j));
      CHECK(clip.at(0, j) <= st.hi.at(0, j));
    }
    // NaN is documented to pass through clip (clip bounds magnitudes only)
    DenseMatrix nan_rows = clean;
    nan_rows.at(0, 0) = kNaN;
    auto clip_nan = aggregate(parse_aggregator("activation_clip"), rt, nan_rows, tgt);
    CHECK(std::isnan(clip_nan.at(0, 0)));
  }
}

TEST_CASE("zero surviving neighbors fall back to the target row") {
  DenseMatrix empty(0, 0);
  const DenseMatrix tgt = one_row({1.5f, -2.5f});
  DenseMatrix mgz(1, 2);
  auto st = manual_stats({0, 0}, {1, 1}, {-1, -1}, {1, 1});
  std::array<float, 3> s{1.f / 3, 1.f / 3, 1.f / 3};
  AggRuntime rt;
  rt.stats = &st;
  rt.m_g = mgz.row(0);
  rt.s = s.data();

  for (const char* spec : {"mean", "sum", "max", "median", "trimmed_mean",
                           "soft_median", "activation_clip", "distribution",
                           "dynamic_weight", "cosine", "combined"}) {
    INFO(spec);
    auto out = aggregate(parse_aggregator(spec), rt, empty, tgt);
    REQUIRE(out.at(0, 0) == 1.5f);
    REQUIRE(out.at(0, 1) == -2.5f);
  }
  // dynamic: every row non-finite -> all weights zero -> fallback
  auto dyn = aggregate(parse_aggregator("dynamic_weight"), rt,
                       from_rows({{kNaN, 1}, {kInf, 2}}), tgt);
  CHECK(dyn.at(0, 0) == 1.5f);
  // cosine: everything pruned -> fallback
  auto cosf = aggregate(parse_aggregator("cosine:alpha=0.9"), rt,
                        from_rows({{-1.5f, 2.5f}}), tgt);
  CHECK(cosf.at(0, 0) == 1.5f);
}

TEST_CASE("training mode: calibration-dependent kinds behave as plain mean") {
  auto g = testutil::rng(808);
  DenseMatrix rows = testutil::random_matrix(6, 4, g, -2.0f, 2.0f);
  DenseMatrix tgt = testutil::random_matrix(1, 4, g, -2.0f, 2.0f);
  AggRuntime rt;
  rt.training = true;  // note: no stats provided, must not throw
  auto mean = aggregate(parse_aggregator("mean"), rt, rows, tgt);
  auto dist = aggregate(parse_aggregator("distribution"), rt, rows, tgt);
  auto clip = aggregate(parse_aggregator("activation_clip"), rt, rows, tgt);
  CHECK(dist.bit_identical(mean));
  CHECK(clip.bit_identical(mean));

  AggRuntime infer;
  CHECK_THROWS_AS(aggregate(parse_aggregator("distribution"), infer, rows, tgt),
                  ConfigError);
  CHECK_THROWS_AS(aggregate(parse_aggregator("activation_clip"), infer, rows, tgt),
                  ConfigError);
  CHECK_THROWS_AS(aggregate(parse_aggregator("dynamic_weight"), infer, rows, tgt),
                  ConfigError);
  CHECK_THROWS_AS(aggregate(parse_aggregator("combined"), infer, rows, tgt), ConfigError);
}

TEST_CASE("discard accounting") {
  AggRuntime rt;
  SECTION("median discards all but the central slots") {
    DiscardCounter dc;
    aggregate(parse_aggregator("median"), rt,
              from_rows({{1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}}), one_row({0, 0}), &dc);
    CHECK(dc.slots_total == 10);
    CHECK(dc.slots_discarded == 8);  // keeps 1 of 5 per dim
  }
  SECTION("trimmed mean discards 2*floor(beta*n) per dim") {
    DiscardCounter dc;
    std::vector<std::vector<float>> v;
    for (int i = 0; i < 10; ++i) v.push_back({float(i)});
    aggregate(parse_aggregator("trimmed_mean:beta=0.1"), rt, from_rows(v), one_row({0}),
              &dc);
    CHECK(dc.slots_total == 10);
    CHECK(dc.slots_discarded == 2);
    CHECK_THAT(dc.fraction(), Catch::Matchers::WithinAbs(0.2, 1e-12));
  }
  SECTION("cosine counts whole pruned rows") {
    DiscardCounter dc;
    aggregate(parse_aggregator("cosine:alpha=0.5"), rt,
              from_rows({{2, 0}, {-1, 0}, {0, 3}}), one_row({1, 0}), &dc);
    CHECK(dc.slots_total == 6);
    CHECK(dc.slots_discarded == 4);
  }
  SECTION("non-trimming kinds report zero discards") {
    for (const char* spec : {"mean", "sum", "max", "soft_median"}) {
      DiscardCounter dc;
      aggregate(parse_aggregator(spec), rt, from_rows({{1}, {2}, {5}}), one_row({0}), &dc);
      INFO(spec);
      CHECK(dc.slots_total == 3);
      CHECK(dc.slots_discarded == 0);
    }
  }
  SECTION("combined accounts all three component passes") {
    DenseMatrix mgz(1, 1);
    auto st = manual_stats({2}, {1}, {0}, {4});
    std::array<float, 3> s{1.f / 3, 1.f / 3, 1.f / 3};
    AggRuntime crt;
    crt.stats = &st;
    crt.m_g = mgz.row(0);
    crt.s = s.data();
    DiscardCounter dc;
    aggregate(parse_aggregator("combined"), crt, from_rows({{1}, {2}, {3}}), one_row({2}),
              &dc);
    CHECK(dc.slots_total == 9);
  }
}

TEST_CASE("cosine pruning separates planted communities on clean features") {
  PlantedPartitionParams p;
  p.n = 40;
  p.k = 2;
  p.p_in = 1.0f;
  p.p_out = 0.4f;
  p.feat_dim = 4;
  p.noise = 0.0f;
  p.seed = 9;
  Graph g = synth_planted_partition(p);

  long inter_edges = 0;
  for (int v = 0; v < g.num_nodes; ++v)
    for (int u : g.neighbors(v))
      if (g.labels[size_t(u)] != g.labels[size_t(v)]) ++inter_edges;
  REQUIRE(inter_edges > 0);  // the fixture actually plants spurious edges

  auto kept = cosine_prune(g, g.features, 0.5f);
  for (int v = 0; v < g.num_nodes; ++v) {
    std::vector<int> want;
    for (int u : g.neighbors(v))
      if (g.labels[size_t(u)] == g.labels[size_t(v)]) want.push_back(u);
    REQUIRE(kept[size_t(v)] == want);
  }
}

TEST_CASE("aggregation backward matches finite differences") {
  auto g = testutil::rng(4242);
  const int n = 6, d = 4;
  DenseMatrix proj = testutil::random_matrix(1, d, g, -1.0f, 1.0f);

  auto make = [&](const char* spec, unsigned seed) {
    AggFd fd;
    fd.cfg = parse_aggregator(spec);
    fd.rows = separated_rows(n, d, seed);
    fd.target = separated_rows(1, d, seed + 1);
    return fd;
  };

  SECTION("piecewise-linear kinds (fixed selections)") {
    for (const char* spec :
         {"mean", "sum", "max", "median", "trimmed_mean:beta=0.2"}) {
      INFO(spec);
      auto fd = make(spec, 100);
      fd.check(proj, 1e-2);
    }
  }
  SECTION("activation clip") {
    auto fd = make("activation_clip", 200);
    // ranges from a wider sample so every value is strictly inside or outside
    auto gg = testutil::rng(201);
    fd.stats = calibrate_stats(testutil::random_matrix(40, d, gg, -3.5f, 3.5f));
    fd.use_stats = true;
    fd.check(proj, 1e-2);
  }
  SECTION("distribution at inference") {
    auto fd = make("distribution", 300);
    auto gg = testutil::rng(301);
    fd.stats = calibrate_stats(testutil::random_matrix(60, d, gg, -6.0f, 6.0f));
    fd.use_stats = true;
    fd.check(proj, 1e-2);
  }
  SECTION("cosine with well-separated similarities") {
    AggFd fd;
    fd.cfg = parse_aggregator("cosine:alpha=0");
    auto gg = testutil::rng(400);
    fd.target = testutil::random_matrix(1, d, gg, 0.5f, 1.5f);
    fd.rows = DenseMatrix(n, d);
    for (int i = 0; i < n; ++i) {
      const float sign = (i % 2) ? 1.0f : -1.0f;
      for (int j = 0; j < d; ++j)
        fd.rows.at(i, j) =
            sign * fd.target.at(0, j) + 0.01f * (float(gg() % 100) / 100.0f - 0.5f);
    }
    fd.check(proj, 1e-2);
  }
  SECTION("dynamic weighting including m_g") {
    auto fd = make("dynamic_weight", 500);
    auto gg = testutil::rng(501);
    fd.mg = testutil::random_matrix(1, d, gg, -0.5f, 0.5f);
    fd.check(proj, 3e-3);
  }
  SECTION("soft median, odd and even neighborhoods") {
    for (int nn : {5, 6}) {
      AggFd fd;
      fd.cfg = parse_aggregator("soft_median:T=2");
      fd.rows = separated_rows(nn, d, 600 + unsigned(nn));
      fd.target = separated_rows(1, d, 700 + unsigned(nn));
      fd.check(proj, 3e-3);
    }
  }
  SECTION("combined including m_g and s") {
    auto fd = make("combined", 800);
    fd.cfg.alpha = -1.0f;  // keep cosine away from prune boundaries
    auto gg = testutil::rng(801);
    fd.mg = testutil::random_matrix(1, d, gg, -0.5f, 0.5f);
    fd.s = {0.5f, 0.3f, 0.2f};
    fd.use_s = true;
    fd.stats = calibrate_stats(testutil::random_matrix(60, d, gg, -6.0f, 6.0f));
    fd.use_stats = true;
    fd.check(proj, 3e-3);
  }
  SECTION("fallback routes the upstream gradient to the target row") {
    AggFd fd;
    fd.cfg = parse_aggregator("cosine:alpha=0.99");
    auto gg = testutil::rng(900);
    fd.target = testutil::random_matrix(1, d, gg, 0.5f, 1.5f);
    fd.rows = DenseMatrix(2, d);
    for (int j = 0; j < d; ++j) {
      fd.rows.at(0, j) = -fd.target.at(0, j);
      fd.rows.at(1, j) = (j == 0) ? 1.0f : -1.0f;
    }
    KernelCache cache;
    fd.forward(&cache);
    REQUIRE(cache.fallback);
    fd.check(proj, 1e-2);
  }
}

TEST_CASE("aggregator spec parsing") {
  CHECK(parse_aggregator("mean").kind == AggKind::mean);
  CHECK(parse_aggregator("trimmed:beta=0.15").beta == 0.15f);
  CHECK(parse_aggregator("softmedian:T=0.5").temperature == 0.5f);
  CHECK(parse_aggregator("distribution:a=2,b=4").a == 2.0f);
  CHECK(parse_aggregator("distribution:a=2,b=4").b == 4.0f);
  CHECK(parse_aggregator("cosine:alpha=-0.25").alpha == -0.25f);
  CHECK(parse_aggregator("dynamic").kind == AggKind::dynamic_weight);
  CHECK(parse_aggregator("clip").kind == AggKind::activation_clip);

  CHECK_THROWS_AS(parse_aggregator("harmonic"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("mean:gamma=1"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("cosine:alpha"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("cosine:alpha=abc"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("trimmed:beta=0.6"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("softmedian:T=0"), ConfigError);
  CHECK_THROWS_AS(parse_aggregator("distribution:a=-1"), ConfigError);
}

TEST_CASE("stats calibration records moments and ranges per dimension") {
  auto t = calibrate_stats(from_rows({{1, 10}, {3, 10}}));
  CHECK(t.ready());
  CHECK(t.mu.at(0, 0) == 2.0f);
  CHECK_THAT(t.sigma.at(0, 0), Catch::Matchers::WithinRel(std::sqrt(2.0), 1e-6));
  CHECK(t.lo.at(0, 0) == 1.0f);
  CHECK(t.hi.at(0, 0) == 3.0f);
  CHECK(t.mu.at(0, 1) == 10.0f);
  CHECK(t.sigma.at(0, 1) == 0.0f);

  CHECK_THROWS_AS(calibrate_stats(from_rows({{1, 2}})), ConfigError);

  // unbiased sigma against the reference moments helper
  auto g = testutil::rng(5);
  DenseMatrix rows = testutil::random_matrix(50, 1, g, -2.0f, 2.0f);
  std::vector<double> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(rows.at(i, 0));
  auto mom = testutil::moments(xs);
  auto t2 = calibrate_stats(rows);
  CHECK_THAT(t2.mu.at(0, 0), Catch::Matchers::WithinAbs(mom.mean, 1e-5));
  CHECK_THAT(t2.sigma.at(0, 0), Catch::Matchers::WithinAbs(std::sqrt(mom.var), 1e-5));
}
