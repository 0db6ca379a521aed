#include <sstream>
#include <string>

#include "doctest.h"
#include "hwm/config.hpp"

using hwm::apply_kv;
using hwm::RunConfig;

TEST_CASE("defaults finalize into a consistent bundle") {
  RunConfig c;
  c.finalize();
  CHECK(c.wm.obs_dim == 256);
  CHECK(c.wm.action_dim == 5);
  CHECK(c.agent.action_dim == 5);
  CHECK(c.agent.action_mode == hwm::ActionMode::discrete);
  CHECK(c.agent.bins.n == c.wm.bins.n);
  CHECK(c.agent.bins.low == c.wm.bins.low);
  CHECK(c.batch_size == 8);
  CHECK(c.batch_length == 16);
  CHECK(c.mask_ratio == 0.5);
  CHECK(c.cube.pk == 2);
  CHECK(c.cube.ph == 4);
  CHECK(c.cube.pw == 4);
}

TEST_CASE("canonical dump is a parse fixed point and hashes stably") {
  RunConfig a;
  const std::string dump = hwm::dump_config(a);
  CHECK(dump.find("[env]") != std::string::npos);
  CHECK(dump.find("grid = 8") != std::string::npos);
  CHECK(dump.find("[trainer]") != std::string::npos);

  RunConfig b;
  b.batch_size = 999;  // gets overwritten by the parse below
  std::istringstream in(dump);
  hwm::load_config(b, in, "dump");
  CHECK(hwm::dump_config(b) == dump);
  CHECK(hwm::config_hash(b) == hwm::config_hash(a));

  RunConfig c;
  apply_kv(c, "trainer.batch_size", "4");
  CHECK(hwm::config_hash(c) != hwm::config_hash(a));
  CHECK(hwm::config_hash_hex(a).size() == 16);
}

TEST_CASE("overrides hit typed fields and reject junk") {
  RunConfig c;
  apply_kv(c, "trainer.batch_size", "4");
  CHECK(c.batch_size == 4);
  apply_kv(c, "agent.lambda", "0.9");
  CHECK(c.agent.lam == 0.9);
  apply_kv(c, "env.noise", "stripes");
  CHECK(c.env.noise == hwm::Noise::stripes);
  apply_kv(c, "world_model.sim_pairing", "masked_pair");
  CHECK(c.wm.sim_pairing == hwm::SimPairing::masked_pair);
  apply_kv(c, "trainer.collector_thread", "true");
  CHECK(c.collector_thread);
  apply_kv(c, "world_model.bins_count", "21");
  CHECK(c.wm.bins.n == 21);
  apply_kv(c, "trainer.model_lr", "3e-4");
  CHECK(c.model_lr == 3e-4);

  CHECK_THROWS_AS(apply_kv(c, "trainer.batchsize", "4"), std::invalid_argument);
  CHECK_THROWS_AS(apply_kv(c, "trainer.batch_size", "four"), std::invalid_argument);
  CHECK_THROWS_AS(apply_kv(c, "trainer.batch_size", "-1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_kv(c, "env.noise", "confetti"), std::invalid_argument);
  CHECK_THROWS_AS(apply_kv(c, "trainer.collector_thread", "maybe"), std::invalid_argument);
  try {
    apply_kv(c, "agent.horizont", "5");
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("agent.horizont") != std::string::npos);
  }
}

TEST_CASE("config files parse with sections, comments, and line-numbered errors") {
  RunConfig c;
  std::istringstream good(
      "# a comment\n"
      "\n"
      "[env]\n"
      "grid = 4\n"
      "image = 8\n"
      "; another comment style\n"
      "[trainer]\n"
      "batch_size = 2\n"
      "  seed   =   7\n");
  hwm::load_config(c, good, "good.ini");
  CHECK(c.env.grid == 4);
  CHECK(c.env.image == 8);
  CHECK(c.batch_size == 2);
  CHECK(c.seed == 7);

  auto expect_error = [](const std::string& text, const std::string& fragment) {
    RunConfig cfg;
    std::istringstream in(text);
    try {
      hwm::load_config(cfg, in, "bad.ini");
      FAIL_CHECK("expected a throw for: " << fragment);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect_error("grid = 4\n", "before any [section]");
  expect_error("[env]\ngrid = 4\ngrid = 5\n", "duplicate key");
  expect_error("[env]\ngrid\n", "expected 'key = value'");
  expect_error("[env\ngrid = 4\n", "unterminated section");
  expect_error("[env]\nwheels = 4\n", "unknown config key");
  expect_error("[env]\n\ngrid = oops\n", "bad.ini:3");
}

TEST_CASE("finalize rejects inconsistent bundles") {
  RunConfig a;
  a.batch_length = 15;  // cuboid depth 2 cannot tile 15 frames
  CHECK_THROWS_AS(a.finalize(), std::invalid_argument);

  RunConfig b;
  b.mask_ratio = 1.0;
  CHECK_THROWS_AS(b.finalize(), std::invalid_argument);

  RunConfig c;
  c.env.continuous_actions = true;
  c.action_mode = "discrete";
  CHECK_THROWS_AS(c.finalize(), std::invalid_argument);

  RunConfig d;
  d.env.continuous_actions = true;
  d.finalize();
  CHECK(d.agent.action_mode == hwm::ActionMode::continuous);
  CHECK(d.wm.action_dim == 2);
  CHECK(d.agent.action_dim == 2);

  RunConfig e;
  e.cube.ph = 5;  // image 16 is not tiled by 5-pixel cells
  CHECK_THROWS_AS(e.finalize(), std::invalid_argument);

  RunConfig f;
  f.replay_capacity = 4;  // smaller than one window
  CHECK_THROWS_AS(f.finalize(), std::invalid_argument);
}

TEST_CASE("help text documents every key with its default") {
  const std::string help = hwm::config_help();
  for (const auto& k : hwm::config_keys()) CHECK(help.find(k.key) != std::string::npos);
  CHECK(help.find("trainer.batch_size = 8") != std::string::npos);
  CHECK(help.find("masking.mask_ratio = 0.5") != std::string::npos);
}
