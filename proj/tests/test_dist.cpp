#include <cmath>
#include <vector>

#include <doctest.h>

#include "hwm/dist.hpp"
#include "testutil.hpp"

using hwm::Tensor;
using hwm::TwoHotBins;
using testutil::check_gradients;
using testutil::rand_leaf;

using Td = Tensor<double>;

TEST_CASE("symlog / symexp are inverse, odd, and compress") {
  for (double x : {-50.0, -3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0, 50.0}) {
    CHECK(hwm::symexp(hwm::symlog(x)) == doctest::Approx(x).epsilon(1e-12));
    CHECK(hwm::symlog(-x) == doctest::Approx(-hwm::symlog(x)).epsilon(1e-12));
  }
  CHECK(hwm::symlog(0.0) == 0.0);
  CHECK(hwm::symlog(1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(hwm::symlog(100.0) < 5.0);  // compression
}

TEST_CASE("unimix: floor, normalisation, gradients") {
  hwm::Rng rng(41);
  auto logits = Td::leaf({2, 8}, std::vector<double>(16, 0.0));
  // one dominant logit per row; other classes still get at least u/C
  logits.raw_value()[0] = 100.0;
  logits.raw_value()[8 + 3] = 100.0;
  auto p = hwm::unimix_probs(logits, 0.01);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double v = p.value()[r * 8 + i];
      CHECK(v >= 0.01 / 8.0 - 1e-15);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(p.value()[1] == doctest::Approx(0.01 / 8.0).epsilon(1e-9));  // fully squashed class
  CHECK(p.value()[0] == doctest::Approx(0.99 + 0.01 / 8.0).epsilon(1e-9));

  // u = 0 falls back to the plain softmax
  auto x = rand_leaf({3, 5}, rng);
  auto plain = hwm::unimix_probs(x, 0.0);
  auto sm = hwm::softmax_last(x);
  for (std::size_t i = 0; i < sm.size(); ++i) CHECK(plain.value()[i] == sm.value()[i]);

  auto w = rand_leaf({3, 5}, rng);
  w.set_requires_grad(false);
  check_gradients([&] { return hwm::sum_all(hwm::mul(hwm::unimix_probs(x, 0.01), w)); }, {&x});
}

TEST_CASE("entropy rows") {
  auto logits = Td::from_vec({2, 4}, {0, 0, 0, 0, 50, 0, 0, 0});
  logits.set_requires_grad(true);
  auto h = hwm::entropy_rows(logits);
  CHECK(h.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));  // uniform
  CHECK(std::abs(h.value()[1]) < 1e-12);  // deterministic row
  hwm::Rng rng(42);
  auto x = rand_leaf({3, 6}, rng);
  auto w = Td::from_vec({3}, {1.0, -2.0, 0.5});
  check_gradients([&] { return hwm::sum_all(hwm::mul(hwm::entropy_rows(x), w)); }, {&x});
}

TEST_CASE("two-hot encoding: pinned examples over 41 bins in [-10, 10]") {
  TwoHotBins bins;
  REQUIRE(bins.step() == doctest::Approx(0.5).epsilon(1e-15));
  REQUIRE(std::abs(bins.center(20)) < 1e-15);

  std::vector<double> row(41);
  // value 0 lands exactly on the centre bin
  CHECK(!bins.encode(0.0, row.data()));
  for (int i = 0; i < 41; ++i) CHECK(row[static_cast<std::size_t>(i)] == (i == 20 ? 1.0 : 0.0));

  // value 1: symlog = ln 2 = 0.6931, split across the 0.5 and 1.0 bins
  CHECK(!bins.encode(1.0, row.data()));
  const double whi = (std::log(2.0) - 0.5) / 0.5;
  CHECK(row[21] == doctest::Approx(1.0 - whi).epsilon(1e-12));  // 0.61371
  CHECK(row[22] == doctest::Approx(whi).epsilon(1e-12));        // 0.38629
  CHECK(row[21] == doctest::Approx(0.613706).epsilon(1e-5));
  double s = 0.0;
  for (double v : row) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

  // out-of-range clamps to the edge bin and reports it
  CHECK(bins.encode(1e9, row.data()));
  CHECK(row[40] == 1.0);
  CHECK(bins.encode(-1e9, row.data()));
  CHECK(row[0] == 1.0);
  CHECK(!bins.encode(hwm::symexp(10.0), row.data()));  // exactly on the edge

  long long clamped = 0;
  auto batch = bins.encode_batch<double>({0.0, 1.0, 5e8}, clamped);
  CHECK(batch.shape() == hwm::Shape{3, 41});
  CHECK(clamped == 1);
}

TEST_CASE("two-hot decode inverts encode through matching probabilities") {
  TwoHotBins bins;
  hwm::Rng rng(43);
  for (double y : {0.0, 1.0, -1.0, 2.5, -7.25, 1000.0, -123.456}) {
    std::vector<double> row(41);
    bins.encode(y, row.data());
    // logits = log(target + tiny): softmax reproduces the target weights
    std::vector<double> logits(41);
    for (int i = 0; i < 41; ++i) logits[static_cast<std::size_t>(i)] = std::log(row[static_cast<std::size_t>(i)] + 1e-300);
    auto dec = bins.decode(Td::from_vec({1, 41}, std::move(logits)));
    CHECK(dec[0] == doctest::Approx(y).epsilon(1e-6));
  }
}

TEST_CASE("two-hot nll gradients and value") {
  TwoHotBins bins;
  hwm::Rng rng(44);
  auto logits = rand_leaf({4, 41}, rng);
  long long clamped = 0;
  auto targets = bins.encode_batch<double>({0.0, 1.0, -2.0, 0.99}, clamped);
  CHECK(clamped == 0);
  check_gradients([&] { return bins.nll(logits, targets); }, {&logits});

  // perfect logits give nll equal to the target entropy
  std::vector<double> row(41);
  bins.encode(1.0, row.data());
  std::vector<double> perfect(41);
  for (int i = 0; i < 41; ++i) perfect[static_cast<std::size_t>(i)] = std::log(row[static_cast<std::size_t>(i)] + 1e-300);
  double want = 0.0;
  for (double v : row)
    if (v > 0.0) want -= v * std::log(v);
  auto nll = bins.nll(Td::from_vec({1, 41}, std::move(perfect)),
                      Td::from_vec({1, 41}, std::move(row)));
  CHECK(nll.item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("bernoulli bce with logits") {
  auto logits = Td::leaf({4}, {0.0, 3.0, -3.0, 10.0});
  auto targets = Td::from_vec({4}, {1.0, 1.0, 0.0, 0.0});
  auto loss = hwm::bce_with_logits_mean(logits, targets);
  auto manual = [](double l, double t) {
    const double p = 1.0 / (1.0 + std::exp(-l));
    return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  };
  const double want =
      (manual(0, 1) + manual(3, 1) + manual(-3, 0) + manual(10, 0)) / 4.0;
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-9));

  hwm::Rng rng(45);
  auto x = rand_leaf({2, 3}, rng);
  auto t = Td::from_vec({2, 3}, {1, 0, 1, 0, 0, 1});
  check_gradients([&] { return hwm::bce_with_logits_mean(x, t); }, {&x});

  // stable at extreme logits where the naive form would produce inf
  auto extreme = Td::from_vec({2}, {500.0, -500.0});
  auto te = Td::from_vec({2}, {0.0, 1.0});
  CHECK(hwm::bce_with_logits_mean(extreme, te).item() == doctest::Approx(500.0).epsilon(1e-12));
}
