#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pose/bench.hpp"
#include "pose/checkpoint.hpp"
#include "pose/trainer.hpp"

using namespace pose;
using namespace pose::train;
namespace fs = std::filesystem;

namespace {

constexpr int kSize = 16;

// K classes of per_class images, one domain (plus a stamp) per class.
TrainingData tiny_data(int num_classes = 3, int per_class = 16, std::uint64_t seed = 1) {
  static const char* domains[] = {"fields", "shapes", "waves", "mosaic", "cells"};
  TrainingData d;
  d.num_classes = num_classes;
  d.images = Tensor<float>(num_classes * per_class, 3, kSize, kSize);
  for (int c = 0; c < num_classes; ++c) {
    const auto corpus = bench::synth_base_corpus(domains[c % 5], per_class, seed + c, kSize);
    std::copy(corpus.data(), corpus.data() + corpus.size(), d.images.data() + c * per_class * corpus.sample_size());
    for (int i = 0; i < per_class; ++i) d.labels.push_back(c);
  }
  return d;
}

TrainConfig tiny_config(TrainMode mode = TrainMode::Pose, int epochs = 3) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = epochs;
  c.input_size = kSize;
  c.channels = {4, 4, 8, 8};
  c.embed_dim = 8;
  c.aug_steps_per_epoch = 4;
  c.batch_per_class = 4;
  c.lr_task = 1e-3;
  c.aug_arch.hidden = 8;
  c.seed = 5;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pose_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string params_checksum(const AugmentationModel<float>& m) { return ckpt::weight_checksum(m.params()); }

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig d;
  EXPECT_EQ(d.epochs, 20);
  EXPECT_DOUBLE_EQ(d.lr_task, 1e-4);
  EXPECT_DOUBLE_EQ(d.lr_aug, 1e-2);
  EXPECT_DOUBLE_EQ(d.lr_decay, 0.9);
  EXPECT_EQ(d.lr_decay_every, 500);
  EXPECT_EQ(d.batch_per_class, 8);
  EXPECT_EQ(d.input_size, 128);
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.epochs = 0; }).validate(), InvalidParameter);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_task = 0; }).validate(), InvalidParameter);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_aug = -1; }).validate(), InvalidParameter);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_per_class = 1; }).validate(), InvalidParameter);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_decay = 1.5; }).validate(), InvalidParameter);
}

TEST(TrainConfig, Modes) {
  for (const char* m : {"pose", "base", "pose-nodiv", "joint"}) EXPECT_EQ(to_string(mode_from_string(m)), m);
  EXPECT_THROW(mode_from_string("progressive"), InvalidParameter);
  TrainConfig c;
  c.mode = TrainMode::PoseNoDiv;
  EXPECT_EQ(c.effective_loss().alpha, 0.0);
  EXPECT_EQ(c.effective_loss().beta, 0.0);
  c.mode = TrainMode::Pose;
  EXPECT_EQ(c.effective_loss().alpha, c.loss.alpha);
}

TEST(Sampler, BalancedBatchForFiveClasses) {
  std::vector<int> labels;
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 20 + 3 * c; ++i) labels.push_back(c);
  const BalancedSampler s(labels, 5, 8);
  Rng rng(1);
  const auto batches = s.epoch(rng);
  EXPECT_EQ(batches.size(), (32u + 7) / 8);
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 40u);
    std::vector<int> per(5, 0);
    for (int i : b) ++per[labels[i]];
    for (int n : per) EXPECT_EQ(n, 8);
  }
  std::set<int> seen_largest;
  for (const auto& b : batches)
    for (int i : b)
      if (labels[i] == 4) seen_largest.insert(i);
  EXPECT_EQ(seen_largest.size(), 32u);
}

TEST(Train, DataErrors) {
  auto d = tiny_data(3, 3);
  EXPECT_THROW(train_pose(d, tiny_config()), DatasetError);
  auto one = tiny_data(3, 8);
  one.num_classes = 1;
  EXPECT_THROW(train_pose(one, tiny_config()), DatasetError);
  auto wrong = tiny_data(3, 8);
  EXPECT_THROW(train_pose(wrong, [] {
                 auto c = tiny_config();
                 c.input_size = 32;
                 return c;
               }()),
               DatasetError);
  auto bad_label = tiny_data(3, 8);
  bad_label.labels[0] = 7;
  EXPECT_THROW(train_pose(bad_label, tiny_config()), DatasetError);
}

TEST(Train, SingleEpochNeverUsesDiversity) {
  const auto s = train_pose(tiny_data(), tiny_config(TrainMode::Pose, 1));
  EXPECT_EQ(s->pool.size(), 1u);
  ASSERT_EQ(s->history.size(), 1u);
  ASSERT_EQ(s->history[0].aug.size(), 1u);
  EXPECT_FALSE(s->history[0].aug[0].diversity);
}

TEST(Train, PoolSizeFollowsMode) {
  const auto data = tiny_data();
  EXPECT_EQ(train_pose(data, tiny_config(TrainMode::Pose, 3))->pool.size(), 3u);
  EXPECT_EQ(train_pose(data, tiny_config(TrainMode::PoseNoDiv, 3))->pool.size(), 3u);
  EXPECT_EQ(train_pose(data, tiny_config(TrainMode::Base, 3))->pool.size(), 0u);
  const auto joint = train_pose(data, tiny_config(TrainMode::Joint, 3));
  const auto prog = train_pose(data, tiny_config(TrainMode::Pose, 3));
  ASSERT_EQ(joint->pool.size(), prog->pool.size());
  for (std::size_t i = 0; i < joint->pool.size(); ++i) {
    const auto a = joint->pool[i].params(), b = prog->pool[i].params();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value.shape(), b[k]->value.shape());
  }
}

TEST(Train, DiversityFromSecondEpoch) {
  const auto s = train_pose(tiny_data(), tiny_config(TrainMode::Pose, 3));
  EXPECT_FALSE(s->history[0].aug[0].diversity);
  EXPECT_TRUE(s->history[1].aug[0].diversity);
  EXPECT_TRUE(s->history[2].aug[0].diversity);
  const auto nd = train_pose(tiny_data(), tiny_config(TrainMode::PoseNoDiv, 3));
  for (const auto& h : nd->history) EXPECT_FALSE(h.aug[0].diversity);
}

TEST(Train, ReproducibleFromSeed) {
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  const auto a = train_pose(tiny_data(), tiny_config(TrainMode::Pose, 3), d1);
  const auto b = train_pose(tiny_data(), tiny_config(TrainMode::Pose, 3), d2);
  for (std::size_t e = 0; e < a->history.size(); ++e)
    EXPECT_EQ(a->history[e].task.train_accuracy, b->history[e].task.train_accuracy);
  EXPECT_EQ(slurp(d1 / "metrics.jsonl"), slurp(d2 / "metrics.jsonl"));
  EXPECT_FALSE(slurp(d1 / "metrics.jsonl").empty());
  auto other = tiny_config(TrainMode::Pose, 3);
  other.seed = 6;
  const auto c = train_pose(tiny_data(), other);
  EXPECT_NE(ckpt::weight_checksum(std::as_const(a->task).params()), ckpt::weight_checksum(std::as_const(c->task).params()));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Train, EarlierModelsNeverChange) {
  const auto dir = scratch("prog");
  const auto s = train_pose(tiny_data(), tiny_config(TrainMode::Pose, 3), dir);
  for (int e = 0; e < 3; ++e) {
    const auto run = load_checkpoint(epoch_dir(dir, e));
    ASSERT_EQ(run.pool.size(), static_cast<std::size_t>(e + 1));
    for (int i = 0; i <= e; ++i) EXPECT_EQ(params_checksum(run.pool[i]), params_checksum(s->pool[i])) << e << " " << i;
  }
  const auto fin = load_checkpoint(final_dir(dir));
  EXPECT_EQ(fin.pool.size(), 3u);
  fs::remove_all(dir);
}

TEST(Train, MetricsLogHasOneRecordPerStep) {
  const auto dir = scratch("log");
  const auto cfg = tiny_config(TrainMode::Pose, 2);
  const auto s = train_pose(tiny_data(), cfg, dir);
  std::ifstream is(dir / "metrics.jsonl");
  std::string line;
  std::map<std::string, int> phases;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    ++phases[j.at("phase").get<std::string>()];
    if (j["phase"] != "epoch") {
      EXPECT_TRUE(j.contains("epoch"));
      EXPECT_TRUE(j.contains("step"));
      EXPECT_TRUE(j.contains("loss"));
      EXPECT_TRUE(j.contains("lr"));
    }
  }
  EXPECT_EQ(phases["aug"], 2 * cfg.aug_steps_per_epoch);
  EXPECT_EQ(phases["epoch"], 2);
  EXPECT_EQ(phases["task"], 2 * 4);  // 16 images per class, 4 per batch
  fs::remove_all(dir);
}

TEST(Train, NonFiniteLossRaisesDivergence) {
  auto d = tiny_data();
  for (auto& v : d.images.vec()) v = std::numeric_limits<float>::quiet_NaN();
  try {
    train_pose(d, tiny_config());
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 0);
    EXPECT_EQ(e.step(), 2);
  }
}

TEST(Train, TrainAccuracyImproves) {
  auto cfg = tiny_config(TrainMode::Pose, 4);
  const auto s = train_pose(tiny_data(3, 24), cfg);
  EXPECT_GE(s->history.back().task.train_accuracy, s->history.front().task.train_accuracy);
}

TEST(Measure, ResidualMseAndCentroidSimilarity) {
  const auto data = tiny_data();
  const auto s = train_pose(data, tiny_config(TrainMode::Pose, 2));
  const double mse = residual_mse(s->pool[0], data.images);
  EXPECT_GE(mse, 0.0);
  EXPECT_TRUE(std::isfinite(mse));
  const double cs = centroid_similarity(s->task, s->pool.members(), data.images);
  EXPECT_LE(cs, 1.0 + 1e-9);
  EXPECT_GE(cs, -1.0 - 1e-9);
  const std::vector<AugmentationModel<float>> same{s->pool[0], s->pool[0]};
  EXPECT_NEAR(centroid_similarity(s->task, same, data.images), 1.0, 1e-9);
  EXPECT_THROW(centroid_similarity(s->task, {s->pool[0]}, data.images), InvalidInput);
}

TEST(Feasibility, IdenticalTargetCannotGetWorse) {
  const auto src = bench::synth_base_corpus("fields", 12, 3, kSize);
  FeasibilityConfig cfg;
  cfg.steps = 30;
  cfg.batch = 6;
  cfg.arch.hidden = 8;
  const auto [model, rep] = spectral_feasibility(src, src, cfg);
  EXPECT_DOUBLE_EQ(rep.baseline_distance, 0.0);
  EXPECT_LE(rep.final_distance, rep.initial_distance);
  for (double v : {rep.initial_distance, rep.final_distance, rep.final_mse}) EXPECT_TRUE(std::isfinite(v));
  const auto j = to_json(rep);
  for (const char* k : {"baseline_distance", "initial_distance", "final_distance", "final_mse", "steps"})
    EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Feasibility, ResolutionMismatch) {
  const auto a = bench::synth_base_corpus("fields", 2, 3, 16), b = bench::synth_base_corpus("fields", 2, 3, 32);
  EXPECT_THROW(spectral_feasibility(a, b, FeasibilityConfig{}), InvalidInput);
}
