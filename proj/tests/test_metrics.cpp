#include "oracles.hpp"

#include "mixem/metrics.hpp"

#include <doctest.h>

using namespace mixem;
namespace mt = mixem::testing;

TEST_CASE("relative distance") {
  const NoiseParams truth{0.005, 0.1};
  CHECK(distance_ab(truth, truth) == 0.0);
  CHECK(distance_ab({0.01, 0.2}, truth) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(distance_ab({0.0, 0.0}, truth) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(distance_ab({0.0075, 0.1}, truth) == doctest::Approx(0.5).epsilon(1e-14));
  // invariant under a common rescaling of estimate and truth
  CHECK(distance_ab({0.03, 0.7}, {0.01, 0.5}) == doctest::Approx(distance_ab({3.0, 70.0}, {1.0, 50.0})).epsilon(1e-14));
  CHECK_THROWS_AS((void)distance_ab(truth, {0.0, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS((void)distance_ab(truth, {0.1, 0.0}), std::invalid_argument);
}

TEST_CASE("bins") {
  const auto e = bin_edges(-1.0, 1.0, 4);
  REQUIRE(e.size() == 5);
  CHECK(e.front() == -1.0);
  CHECK(e.back() == 1.0);
  CHECK(e[2] == doctest::Approx(0.0));
  CHECK(bin_of(-1.0, -1.0, 1.0, 4) == 0);
  CHECK(bin_of(1.0, -1.0, 1.0, 4) == 3);
  CHECK(bin_of(-0.49, -1.0, 1.0, 4) == 1);
  CHECK(bin_of(-7.0, -1.0, 1.0, 4) == 0);
  CHECK(bin_of(7.0, -1.0, 1.0, 4) == 3);
}

TEST_CASE("marginal histograms") {
  const Box box = Box::cube(3, -1.0, 1.0);
  SUBCASE("single bin holds everything") {
    Rng rng(1);
    const Mat xs = uniform_box(box.lo, box.hi, 100, rng);
    const auto m = marginal_histograms(xs, box, 1, 1);
    REQUIRE(m.diagonal.size() == 3);
    REQUIRE(m.pairs.size() == 3);
    for (const auto& h : m.diagonal) CHECK(h.counts == std::vector<long>{100});
    CHECK(m.pairs[0].dim_i == 0);
    CHECK(m.pairs[0].dim_j == 1);
    CHECK(m.pairs[2].dim_i == 1);
    CHECK(m.pairs[2].dim_j == 2);
  }
  SUBCASE("totals and truth") {
    Rng rng(2);
    const Mat xs = 2.0 * standard_normal(3, 500, rng);
    const auto m = marginal_histograms(xs, box, 50, 40, Vec::Constant(3, 0.25));
    for (const auto& h : m.diagonal) {
      CHECK(h.total() == 500);
      CHECK(h.counts.size() == 50);
      CHECK(h.truth == 0.25);
    }
    for (const auto& h : m.pairs) {
      CHECK(h.total() == 500);
      CHECK(h.counts.size() == 1600);
      CHECK(h.truth->first == 0.25);
    }
  }
  SUBCASE("uniform samples give flat counts") {
    Rng rng(3);
    const Mat xs = uniform_box(box.lo, box.hi, 100000, rng);
    const auto m = marginal_histograms(xs, box, 20, 4);
    for (const auto& h : m.diagonal) {
      const double expected = 100000.0 / 20.0;
      double chi2 = 0.0;
      for (const long c : h.counts) chi2 += std::pow(static_cast<double>(c) - expected, 2) / expected;
      CHECK(mt::chi_square_sf(chi2, 19.0) > 0.01);
    }
  }
}

TEST_CASE("trace thinning") {
  std::vector<TraceRow> trace;
  for (int r = 0; r <= 300; ++r) trace.push_back({r, {0.1, 0.2}, -1.0 * r, 0.0});
  const auto rows = trace_export(trace, 20);
  REQUIRE(rows.size() == 16);
  CHECK(rows.front().iter == 0);
  CHECK(rows.back().iter == 300);
  CHECK(rows[3].elbo == -60.0);
  // validation every 7 iterations: only common multiples survive
  std::vector<TraceRow> sparse;
  for (int r = 0; r <= 300; r += 7) sparse.push_back({r, {0.1, 0.2}, 0.0, 0.0});
  CHECK(trace_export(sparse, 20).size() == 3);
}

TEST_CASE("trace CSV round trip") {
  Rng rng(4);
  std::vector<TracePoint> rows;
  for (int r = 0; r < 10; ++r) {
    rows.push_back({20 * r, std::exp(standard_normal(1, 1, rng)(0)), 1e-3 * std::exp(standard_normal(1, 1, rng)(0)),
                    -1e3 * std::exp(standard_normal(1, 1, rng)(0))});
  }
  const FileHeader header{"abc123", 42};
  const std::string text = trace_csv(rows, header);
  CHECK(text.rfind("# config_hash=abc123,seed=42\niter,a,b,elbo\n", 0) == 0);
  const auto back = parse_trace_csv(text);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].iter == rows[i].iter);
    CHECK(std::abs(back[i].a - rows[i].a) <= 1e-12 * std::abs(rows[i].a));
    CHECK(std::abs(back[i].b - rows[i].b) <= 1e-12 * std::abs(rows[i].b));
    CHECK(std::abs(back[i].elbo - rows[i].elbo) <= 1e-12 * std::abs(rows[i].elbo));
  }
  CHECK_THROWS((void)parse_trace_csv("iter,a,b,elbo\n1,2,x,4\n"));
}

TEST_CASE("histogram CSV files") {
  const Box box = Box::cube(2, 0.0, 1.0);
  Mat xs(2, 3);
  xs << 0.1, 0.1, 0.9, 0.5, 0.5, 0.5;
  const auto m = marginal_histograms(xs, box, 2, 2, Vec::Constant(2, 0.3));
  const FileHeader header{"h", 1};
  const std::string marg = marginals_csv(m, header);
  CHECK(marg.find("dim,bin_lo,bin_hi,count\n") != std::string::npos);
  CHECK(marg.find("0,0.0,0.5,2\n") != std::string::npos);
  CHECK(marg.find("0,0.5,1.0,1\n") != std::string::npos);
  CHECK(marg.find("truth") != std::string::npos);
  const std::string pairs = pairs_csv(m, header);
  CHECK(pairs.find("dim_i,dim_j,bin_i,bin_j,count\n") != std::string::npos);
  CHECK(pairs.find("0,1,0,1,2\n") != std::string::npos);
  CHECK(pairs.find("0,1,1,1,1\n") != std::string::npos);
  CHECK(pairs.find("0,1,0,0,") == std::string::npos);
}

TEST_CASE("metric report JSON") {
  MetricReport r;
  r.method = "forward";
  r.count = 8;
  r.seed = 1003;
  r.config_hash = "feed";
  r.theta = {0.0061, 0.093};
  r.truth = NoiseParams{0.005, 0.1};
  r.distance = distance_ab(r.theta, *r.truth);
  r.elbo = {12.5, 500, 0.3};
  r.best_iter = 240;
  r.trace = {{0, 1.0, 2.0, -3.0}, {20, 0.5, 0.4, 1.0}};
  const auto back = metric_report_from_json(Json::parse(to_json(r).dump()));
  CHECK(back.method == r.method);
  CHECK(back.count == 8);
  CHECK(back.theta == r.theta);
  CHECK(back.distance == r.distance);
  CHECK(back.trace.size() == 2);
  CHECK(back.trace[1].iter == 20);
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK_THROWS((void)median({}));
}
