#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "flowseg/pipeline.hpp"

using namespace flowseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig tiny_config(const fs::path& out, bool identity) {
  RunConfig c;
  c.output_dir = out.string();
  c.corpus_size = 6;
  c.folds = 2;
  c.identity_latent = identity;
  c.phantom.dims = {24, 24, 16};
  c.phantom.min_radius_mm = 2.0f;
  c.phantom.max_radius_mm = 2.5f;
  c.ae.hidden = 4;
  c.ae.latent_channels = 2;
  c.ae.steps = 6;
  c.ae.batch = 2;
  c.flow.hidden = 4;
  c.flow.steps = 6;
  c.flow.batch = 2;
  c.predictor.k = 3;
  c.predictor.hidden1 = 4;
  c.predictor.hidden2 = 4;
  c.predictor.iterations = 20;
  c.predictor.batch = 4;
  c.predictor.validate_every = 10;
  c.guidance.T = 6;
  c.guidance.tau = 3;
  c.guidance.m = 2;
  return c;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("flowseg_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(Methods, NamesRoundTrip) {
  for (Method m : all_methods()) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("unet"), ConfigError);
}

TEST_F(PipelineTest, SplitsArePartitions) {
  Pipeline p(tiny_config(dir_, true));
  p.generate_data();
  std::set<std::int64_t> evals;
  for (int fold = 0; fold < 2; ++fold) {
    const FoldSplit s = p.split(fold);
    EXPECT_EQ(s.train.size() + s.eval.size(), 6u);
    EXPECT_EQ(s.predictor_train.size() + s.predictor_val.size(), s.train.size());
    EXPECT_FALSE(s.predictor_val.empty());
    for (auto id : s.eval) {
      EXPECT_TRUE(evals.insert(id).second);
      EXPECT_EQ(std::count(s.train.begin(), s.train.end(), id), 0);
    }
    for (auto id : s.predictor_val) EXPECT_EQ(std::count(s.predictor_train.begin(), s.predictor_train.end(), id), 0);
  }
  EXPECT_EQ(evals.size(), 6u);
  EXPECT_THROW(p.split(2), ConfigError);
}

TEST_F(PipelineTest, MissingArtifactsAreReported) {
  Pipeline p(tiny_config(dir_, false));
  EXPECT_THROW(p.manifest(), MissingArtifact);
  p.generate_data();
  EXPECT_THROW(p.train_flow(0), MissingArtifact);
  EXPECT_THROW(p.segment(0, Method::cam), MissingArtifact);
  try {
    p.evaluate({Method::tfg});
    FAIL();
  } catch (const MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("vol_"), std::string::npos);
  }
}

TEST_F(PipelineTest, EndToEndIsDeterministic) {
  const RunConfig cfg = tiny_config(dir_ / "a", false);
  Pipeline a(cfg);
  const auto rows = a.run_all(2);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.volumes, 6u);
    EXPECT_GE(r.mean_dice, 0.0);
    EXPECT_LE(r.mean_dice, 1.0);
  }
  for (const char* f : {"eval/results.csv", "eval/summary.csv", "eval/table.txt", "config.txt", "fold0/ae.fsg",
                        "fold1/flow.fsg", "fold0/predictor.fsg", "fold1/predictor_eval.csv", "fold0/tfg/guidance.csv",
                        "fold1/threshold.txt"}) {
    EXPECT_TRUE(fs::exists(dir_ / "a" / f)) << f;
  }
  EXPECT_EQ(parse_config(slurp(dir_ / "a" / "config.txt")).seed, cfg.seed);
  EXPECT_EQ(read_guidance_records(dir_ / "a" / "fold0" / "tfg" / "guidance.csv").size(), a.split(0).eval.size());

  RunConfig cfg_b = cfg;
  cfg_b.output_dir = (dir_ / "b").string();
  Pipeline b(cfg_b);
  b.run_all(1);
  EXPECT_EQ(slurp(dir_ / "a" / "eval" / "results.csv"), slurp(dir_ / "b" / "eval" / "results.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "fold1" / "flow.fsg"), slurp(dir_ / "b" / "fold1" / "flow.fsg"));
}

TEST_F(PipelineTest, SingleVolumeSegmentationAndSeedChange) {
  Pipeline p(tiny_config(dir_, true));
  p.generate_data();
  p.train_flow(0);
  p.train_predictor(0);
  const auto id = p.split(0).eval.front();
  EXPECT_THROW(p.segment(0, Method::tfg, id), MissingArtifact);
  p.calibrate(0);
  EXPECT_TRUE(fs::exists(p.fold_dir(0) / "threshold.txt"));
  p.segment(0, Method::tfg, id);
  EXPECT_TRUE(fs::exists(p.method_dir(0, Method::tfg) / (Pipeline::volume_stem(id) + "_mask.fsvl")));
  EXPECT_EQ(read_guidance_records(p.method_dir(0, Method::tfg) / "guidance.csv").size(), 1u);
  const auto other = p.split(1).eval.front();
  EXPECT_THROW(p.segment(0, Method::tfg, other), ConfigError);

  RunConfig reseeded = tiny_config(dir_ / "seed2", true);
  reseeded.seed = 2;
  Pipeline q(reseeded);
  q.generate_data();
  EXPECT_NE(slurp(p.data_dir() / "vol_000.fsvl"), slurp(q.data_dir() / "vol_000.fsvl"));
}

TEST_F(PipelineTest, ResumeMatchesUninterruptedTraining) {
  RunConfig full = tiny_config(dir_ / "full", false);
  Pipeline pf(full);
  pf.generate_data();
  pf.train_ae(0);
  pf.train_flow(0);

  RunConfig half = full;
  half.output_dir = (dir_ / "half").string();
  half.ae.steps = 3;
  half.flow.steps = 3;
  Pipeline ph(half);
  ph.generate_data();
  ph.train_ae(0);
  RunConfig rest = half;
  rest.ae.steps = full.ae.steps;
  Pipeline pr(rest);
  pr.train_ae(0, true);
  // The flow sees latents of the finished autoencoder in both runs.
  ph.train_flow(0);
  rest.flow.steps = full.flow.steps;
  Pipeline(rest).train_flow(0, true);
  EXPECT_EQ(slurp(pf.fold_dir(0) / "ae.fsg"), slurp(pr.fold_dir(0) / "ae.fsg"));
  EXPECT_EQ(slurp(pf.fold_dir(0) / "flow.fsg"), slurp(pr.fold_dir(0) / "flow.fsg"));
}
