#include <gtest/gtest.h>

#include <cstdlib>

#include "flowseg/config.hpp"

using namespace flowseg;

TEST(Config, DefaultsSurviveEmptyText) {
  const RunConfig c = parse_config("# nothing here\n\n");
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.folds, 3);
  EXPECT_EQ(c.guidance.T, 30);
  EXPECT_EQ(c.guidance.tau, 15);
}

TEST(Config, RoundTripsEveryKey) {
  RunConfig c;
  c.seed = 77;
  c.corpus_size = 12;
  c.phantom.dims = {16, 20, 24};
  c.phantom.spacing = {0.5f, 0.75f, 2.0f};
  c.ae.lr = 1.25e-3f;
  c.flow.steps = 17;
  c.predictor.k = 5;
  c.augmentation.zoom_max = 1.3f;
  c.guidance.s = 2.5f;
  c.guidance.smooth_residual = true;
  c.identity_latent = true;
  const std::string text = serialize_config(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.phantom.dims, c.phantom.dims);
  EXPECT_EQ(back.phantom.spacing, c.phantom.spacing);
  EXPECT_EQ(back.ae.lr, c.ae.lr);
  EXPECT_EQ(back.guidance.s, 2.5f);
  EXPECT_TRUE(back.guidance.smooth_residual);
  EXPECT_TRUE(back.identity_latent);
  // Every key appears exactly once.
  for (const auto& key : config_keys()) {
    const auto first = text.find(key + " = ");
    ASSERT_NE(first, std::string::npos) << key;
  }
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed\n"), ConfigError);
  EXPECT_THROW(parse_config("folds = three\n"), ConfigError);
  EXPECT_THROW(parse_config("guidance.smooth_residual = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("phantom.dims = 8,8\n"), ConfigError);
  try {
    parse_config("seed = 3\n\nbogus = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, ValidatesConstraints) {
  EXPECT_THROW(parse_config("guidance.tau = 40\n"), ConfigError);
  EXPECT_THROW(parse_config("folds = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("val_fraction = 1.5\n"), ConfigError);
  EXPECT_NO_THROW(parse_config("guidance.tau = 25\nguidance.m = 5\n"));
}

TEST(Config, SeedFromEnvironment) {
  RunConfig c;
  ::setenv("FLOWSEG_SEED", "1234", 1);
  apply_seed_override(c);
  EXPECT_EQ(c.seed, 1234u);
  ::setenv("FLOWSEG_SEED", "x", 1);
  EXPECT_THROW(apply_seed_override(c), ConfigError);
  ::unsetenv("FLOWSEG_SEED");
  apply_seed_override(c);
  EXPECT_EQ(c.seed, 1234u);
}

TEST(Config, MissingFile) { EXPECT_THROW(load_config("/nonexistent/flowseg.cfg"), ConfigError); }
