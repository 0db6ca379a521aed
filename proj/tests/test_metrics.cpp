#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "hwm/metrics.hpp"
#include "json.hpp"

using hwm::MetricsRecord;

TEST_CASE("metric lines keep insertion order and write non-finite values as null") {
  const MetricsRecord rec = {{"beta", 2.5},
                             {"alpha", 1.0},
                             {"bad", std::numeric_limits<double>::quiet_NaN()},
                             {"worse", -std::numeric_limits<double>::infinity()}};
  const std::string line = hwm::metrics_line(7, rec);
  CHECK(line == R"({"step":7,"beta":2.5,"alpha":1.0,"bad":null,"worse":null})");

  const auto j = nlohmann::ordered_json::parse(line);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) {
    (void)v;
    keys.push_back(k);
  }
  CHECK(keys == std::vector<std::string>{"step", "beta", "alpha", "bad", "worse"});
  CHECK(j["bad"].is_null());
  CHECK(j["step"].get<long long>() == 7);
}

TEST_CASE("writer appends one line per record and an unopened writer drops silently") {
  hwm::MetricsWriter closed;
  CHECK(!closed.is_open());
  closed.write(0, {{"x", 1.0}});  // must be a no-op

  const std::string path = "metrics_test_tmp.jsonl";
  {
    hwm::MetricsWriter w(path);
    CHECK(w.is_open());
    w.write(0, {{"x", 1.0}});
    w.write(1, {{"x", 2.0}});
  }
  {
    hwm::MetricsWriter w(path, /*append=*/true);
    w.write(2, {{"x", 3.0}});
  }
  std::ifstream in(path);
  std::string line;
  std::vector<double> steps, xs;
  while (std::getline(in, line)) {
    const auto j = nlohmann::ordered_json::parse(line);
    steps.push_back(j["step"].get<double>());
    xs.push_back(j["x"].get<double>());
  }
  CHECK(steps == std::vector<double>{0, 1, 2});
  CHECK(xs == std::vector<double>{1.0, 2.0, 3.0});

  {
    hwm::MetricsWriter w(path);  // truncate mode starts fresh
    w.write(9, {{"x", 0.5}});
  }
  std::ifstream in2(path);
  std::size_t n = 0;
  while (std::getline(in2, line)) ++n;
  CHECK(n == 1);
  std::remove(path.c_str());
}

TEST_CASE("csv export unions evolving keys and quotes awkward strings") {
  std::istringstream jsonl(
      "{\"step\":0,\"a\":1.0,\"b\":2.0}\n"
      "\n"
      "{\"step\":1,\"b\":3.0,\"c\":null}\n"
      "{\"step\":2,\"c\":4.5,\"s\":\"x,y\"}\n");
  std::ostringstream csv;
  const std::size_t n = hwm::export_csv(jsonl, csv);
  CHECK(n == 3);
  CHECK(csv.str() ==
        "step,a,b,c,s\n"
        "0,1.0,2.0,,\n"
        "1,,3.0,,\n"
        "2,,,4.5,\"x,y\"\n");
}

TEST_CASE("csv export rejects lines that are not json objects") {
  std::istringstream jsonl("{\"step\":0}\n[1,2]\n");
  std::ostringstream csv;
  CHECK_THROWS_WITH_AS(hwm::export_csv(jsonl, csv),
                       doctest::Contains("line 2"), std::runtime_error);
}
