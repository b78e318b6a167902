#include <doctest.h>

#include <cmath>

#include "flm/rng.hpp"
#include "flm/trainer.hpp"

using namespace flm;

namespace {

std::vector<RunLogRow> stationary(std::size_t n, std::uint64_t seed, double sigma = 0.01) {
  Rng rng(seed);
  std::vector<RunLogRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    RunLogRow r;
    r.step = static_cast<std::int64_t>(i + 1);
    r.loss = 2.0 + sigma * rng.normal();
    r.grad_norm = 0.5 + 0.02 * rng.normal();
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_SUITE("spike") {
  TEST_CASE("short windows yield nothing") {
    CHECK_FALSE(detect_spike(stationary(19, 1)).has_value());
    CHECK(scan_spikes(stationary(20, 1)).empty());
  }

  TEST_CASE("a three-step bump is transient") {
    auto rows = stationary(100, 2);
    for (std::size_t i = 50; i < 53; ++i) rows[i].loss += 0.5;
    const auto e = detect_spike(rows);
    REQUIRE(e.has_value());
    CHECK(e->kind == SpikeKind::transient);
    CHECK(e->step == 51);
    CHECK(e->duration == 3);
    CHECK(e->loss_delta == doctest::Approx(0.5).epsilon(0.1));
    CHECK(e->grad_norm_normal);
    CHECK_FALSE(e->abort_recommended);
  }

  TEST_CASE("a bump with a gradient excursion is flagged") {
    auto rows = stationary(100, 3);
    rows[60].loss += 0.5;
    rows[60].grad_norm = 5.0;
    const auto e = detect_spike(rows);
    REQUIRE(e.has_value());
    CHECK(e->kind == SpikeKind::transient);
    CHECK_FALSE(e->grad_norm_normal);
    CHECK(e->grad_norm_at_spike == 5.0);
  }

  TEST_CASE("a noisy climb is sustained") {
    // Doubling every ten steps with large jitter: never 20 rising steps in a
    // row, and the band tracks the climb, so only the window median sees it.
    Rng rng(9);
    auto rows = stationary(60, 5);
    for (std::size_t i = 40; i < 140; ++i) {
      RunLogRow r;
      r.step = static_cast<std::int64_t>(i + 1);
      r.loss = 2.0 * std::pow(2.0, (static_cast<double>(i) - 40.0) / 10.0) * (1.0 + 0.4 * rng.normal());
      r.grad_norm = 0.5;
      if (i < rows.size()) {
        rows[i] = r;
      } else {
        rows.push_back(r);
      }
    }
    const auto events = scan_spikes(rows);
    bool sustained = false;
    for (const auto& e : events) sustained = sustained || e.kind == SpikeKind::sustained;
    CHECK(sustained);
  }

  TEST_CASE("a level shift is sustained") {
    auto rows = stationary(120, 4);
    for (std::size_t i = 60; i < 120; ++i) rows[i].loss += 1.0;
    const auto e = detect_spike(rows);
    REQUIRE(e.has_value());
    CHECK(e->kind == SpikeKind::sustained);
    CHECK(e->step == 61);
    CHECK(e->abort_recommended);
  }

  TEST_CASE("a slow monotone climb is sustained") {
    auto rows = stationary(100, 5, 0.0);
    for (std::size_t i = 40; i < 100; ++i) rows[i].loss = 2.0 + 0.001 * static_cast<double>(i - 39);
    const auto e = detect_spike(rows);
    REQUIRE(e.has_value());
    CHECK(e->kind == SpikeKind::sustained);
  }

  TEST_CASE("non-finite losses are spikes") {
    auto rows = stationary(60, 6);
    rows[40].loss = std::nan("");
    const auto events = scan_spikes(rows);
    REQUIRE(events.size() == 1);
    CHECK(events[0].step == 41);
  }

  TEST_CASE("no false positives on stationary noise") {
    std::size_t events = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) events += scan_spikes(stationary(1000, 100 + seed)).size();
    CHECK(events == 0);
  }
}
