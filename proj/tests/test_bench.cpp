#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pose/bench.hpp"
#include "pose/evalkit.hpp"
#include "pose/image_io.hpp"
#include "pose/spectrum.hpp"
#include "pose/trainer.hpp"

using namespace pose;
using namespace pose::bench;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pose_test_bench_" + name);
  fs::remove_all(p);
  return p;
}

BenchSpec tiny_spec() {
  BenchSpec s = default_bench_spec();
  s.input_size = 16;
  s.train_per_class = 6;
  s.test_per_class = 3;
  return s;
}

Tensor<float> stamped_corpus(const TraceStamp& st, const std::string& cls, int count, std::uint64_t gs = 7) {
  Tensor<float> out(count, 3, 32, 32);
  for (int i = 0; i < count; ++i) {
    const auto img = make_class_image(cls, st.base_domain, &st, gs, i, 32);
    std::copy(img.data(), img.data() + img.size(), out.data() + i * out.sample_size());
  }
  return out;
}

}  // namespace

TEST(BaseCorpus, DeterministicAndInRange) {
  for (const auto& d : domain_tags()) {
    const auto a = synth_base_corpus(d, 4, 99, 24), b = synth_base_corpus(d, 4, 99, 24);
    EXPECT_EQ(a.vec(), b.vec()) << d;
    for (float v : a.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_NE(a.vec(), synth_base_corpus(d, 4, 100, 24).vec()) << d;
  }
}

TEST(BaseCorpus, Errors) {
  EXPECT_THROW(synth_base_corpus("fields", 0, 1, 16), InvalidParameter);
  EXPECT_THROW(synth_base_corpus("faces", 3, 1, 16), InvalidParameter);
}

TEST(BaseCorpus, DomainProfilesDiffer) {
  std::vector<spectrum::SpectrumProfile> profiles;
  for (const auto& d : domain_tags()) profiles.push_back(spectrum::mean_profile(synth_base_corpus(d, 100, 5, 32), false));
  for (std::size_t i = 0; i < profiles.size(); ++i)
    for (std::size_t j = i + 1; j < profiles.size(); ++j)
      EXPECT_GT(spectrum::profile_distance(profiles[i], profiles[j]), 0.0)
          << domain_tags()[i] << " vs " << domain_tags()[j];
}

TEST(Trace, ZeroAmplitudeIsIdentity) {
  const auto x = synth_base_corpus("shapes", 2, 3, 16);
  const TraceStamp st{5, "conv2_k3", 0.0, "shapes"};
  EXPECT_EQ(apply_trace(st, x).vec(), x.vec());
}

TEST(Trace, DeterministicBoundedAndClipped) {
  const auto x = synth_base_corpus("fields", 3, 4, 16);
  for (const auto& arch : architecture_tags()) {
    const TraceStamp st{42, arch, 0.02, "fields"};
    const auto a = apply_trace(st, x), b = apply_trace(st, x);
    EXPECT_EQ(a.vec(), b.vec()) << arch;
    double mad = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_GE(a[i], 0.0f);
      EXPECT_LE(a[i], 1.0f);
      mad += std::abs(a[i] - x[i]) / a.size();
    }
    EXPECT_LE(mad, st.amplitude) << arch;
    EXPECT_GT(mad, 0.0) << arch;
  }
  const TraceStamp loud{1, "conv2_k3", 1.0, "fields"};
  for (float v : apply_trace(loud, Tensor<float>(1, 3, 8, 8, 0.99f)).vec()) EXPECT_LE(v, 1.0f);
}

TEST(Trace, NetworkDependsOnSeedArchitectureAmplitudeOnly) {
  const auto x = synth_base_corpus("fields", 2, 8, 16);
  const StampNetwork a(TraceStamp{3, "conv2_k5", 0.02, "fields"});
  const StampNetwork b(TraceStamp{3, "conv2_k5", 0.02, "waves"});
  const StampNetwork c(TraceStamp{4, "conv2_k5", 0.02, "fields"});
  EXPECT_EQ(a(x).vec(), b(x).vec());
  EXPECT_NE(a(x).vec(), c(x).vec());
}

TEST(Trace, DefaultAmplitudeIsImperceptible) {
  const BenchSpec spec = default_bench_spec();
  std::vector<StampSpec> all = spec.seen;
  all.insert(all.end(), spec.unseen.begin(), spec.unseen.end());
  for (const auto& s : all) {
    const auto base = synth_base_corpus(s.stamp.base_domain, 20, 11, 32);
    EXPECT_GE(psnr(base, apply_trace(s.stamp, base)), 30.0) << s.name;
  }
}

// Two stamps that differ only in seed: a small classifier trained on 200
// images of each tells held-out images apart.
TEST(Trace, SeedOnlyStampsAreSeparableByProbe) {
  for (const auto& arch : {"conv2_k3", "conv1_k3"}) {
    const TraceStamp s1{101, arch, 0.02, "fields"}, s2{201, arch, 0.02, "fields"};
    const auto a = stamped_corpus(s1, "probe_a", 300), b = stamped_corpus(s2, "probe_b", 300);
    train::TrainingData data;
    data.images = concat({std::make_unique<Tensor<float>>(a.slice(0, 200)).get(),
                          std::make_unique<Tensor<float>>(b.slice(0, 200)).get()});
    for (int i = 0; i < 400; ++i) data.labels.push_back(i < 200 ? 0 : 1);
    data.num_classes = 2;
    train::TrainConfig cfg;
    cfg.mode = train::TrainMode::Base;
    cfg.epochs = 8;
    cfg.input_size = 32;
    cfg.channels = {8, 8, 16, 16, 32, 32};
    cfg.lr_task = 1e-3;
    const auto state = train::train_pose(data, cfg);
    const Tensor<float> ta = a.slice(200, 100), tb = b.slice(200, 100);
    int correct = 0;
    for (const auto& [imgs, label] : {std::pair{&ta, 0}, std::pair{&tb, 1}}) {
      const auto logits = classify(state->task, *imgs);
      for (int i = 0; i < logits.n(); ++i) {
        const auto s = logits.sample(i);
        correct += ((s[1] > s[0]) ? 1 : 0) == label;
      }
    }
    EXPECT_GT(correct / 200.0, 0.9) << arch;
  }
}

TEST(Spec, DefaultDeskLayout) {
  const BenchSpec s = default_bench_spec();
  EXPECT_NO_THROW(validate(s));
  EXPECT_EQ(s.num_known(), 5);
  EXPECT_EQ(s.train_per_class, 200);
  EXPECT_EQ(s.test_per_class, 100);
  std::map<eval::UnseenType, int> counts;
  for (const auto& u : s.unseen) ++counts[u.type];
  EXPECT_EQ(counts[eval::UnseenType::Seed], 4);
  EXPECT_EQ(counts[eval::UnseenType::Architecture], 4);
  EXPECT_EQ(counts[eval::UnseenType::Dataset], 4);
  for (const auto& st : s.seen) EXPECT_DOUBLE_EQ(st.stamp.amplitude, 0.02);
}

TEST(Spec, SharingConstraintsEnforced) {
  auto with = [](auto mutate) {
    BenchSpec s = default_bench_spec();
    mutate(s);
    return s;
  };
  // unseen-seed reusing the seen seed
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[0].stamp.seed = 101; })), InvalidSpec);
  // unseen-seed on an architecture no seen stamp has in that domain
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[0].stamp.architecture = "conv3_k3"; })), InvalidSpec);
  // unseen-architecture copying a seen architecture
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[4].stamp.architecture = "conv2_k3"; })), InvalidSpec);
  // unseen-dataset with the seen domain
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[8].stamp.base_domain = "fields"; })), InvalidSpec);
  // unseen-dataset with a new seed
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[8].stamp.seed = 999; })), InvalidSpec);
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[1].name = "fake_a"; })), InvalidSpec);
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.seen[0].stamp.base_domain = "mosaic"; })), InvalidSpec);
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[0].stamp.architecture = "vit"; })), InvalidSpec);
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.unseen[0].type = eval::UnseenType::None; })), InvalidSpec);
  EXPECT_THROW(validate(with([](BenchSpec& s) { s.input_size = 15; })), InvalidSpec);
}

TEST(Build, ManifestInvariantsAndHygiene) {
  const auto dir = scratch("build");
  const BenchSpec spec = tiny_spec();
  const auto m = build_benchmark(spec, dir);
  EXPECT_NO_THROW(check_manifest(m));
  EXPECT_EQ(m.num_known, 5);
  EXPECT_EQ(m.known_class_names.front(), "real");

  const auto loaded = load_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(loaded.records, m.records);
  EXPECT_EQ(loaded.checksum, m.checksum);

  std::set<std::string> unseen_names;
  for (const auto& u : spec.unseen) unseen_names.insert(u.name);
  std::size_t real_unseen = 0;
  for (const auto& r : m.records) {
    EXPECT_TRUE(fs::exists(dir / r.image_path)) << r.image_path;
    if (r.split == "train") {
      EXPECT_EQ(r.openness, "seen");
      EXPECT_FALSE(unseen_names.count(r.class_name)) << r.class_name;
    }
    if (r.class_name == "real_unseen") {
      ++real_unseen;
      EXPECT_EQ(r.known_class_id, 0);
      EXPECT_EQ(r.split, "test");
    }
    if (r.openness == "unseen") {
      EXPECT_EQ(r.known_class_id, -1);
    }
  }
  EXPECT_EQ(real_unseen, static_cast<std::size_t>(spec.test_per_class));
  EXPECT_EQ(m.records.size(), 5u * 9 + 3 + 12u * 3);

  const auto groups = summarize(m);
  EXPECT_EQ(groups.at("seen_real").at("train"), 6u);
  EXPECT_EQ(groups.at("seen_fake").at("train"), 24u);
  EXPECT_EQ(groups.at("unseen_real").at("test"), 3u);
  EXPECT_EQ(groups.at("unseen_fake").at("test"), 36u);
  fs::remove_all(dir);
}

TEST(Build, ManifestRecordFields) {
  const auto dir = scratch("fields");
  build_benchmark(tiny_spec(), dir);
  std::ifstream is(dir / "manifest.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(is, line));
  const auto j = nlohmann::json::parse(line);
  std::set<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"image_path", "class_name", "known_class_id", "split", "openness",
                                         "unseen_type"}));
  fs::remove_all(dir);
}

TEST(Build, RegenerationGivesIdenticalChecksum) {
  const auto d1 = scratch("regen1"), d2 = scratch("regen2");
  const auto a = build_benchmark(tiny_spec(), d1);
  const auto b = build_benchmark(tiny_spec(), d2);
  EXPECT_EQ(a.checksum, b.checksum);
  EXPECT_EQ(manifest_checksum(d1 / "manifest.jsonl"), a.checksum);
  BenchSpec other = tiny_spec();
  other.global_seed = 8;
  const auto d3 = scratch("regen3");
  EXPECT_NE(build_benchmark(other, d3).checksum, a.checksum);
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}

TEST(Build, LoadSplitAlignsWithManifest) {
  const auto dir = scratch("split");
  const auto m = build_benchmark(tiny_spec(), dir);
  const auto test = load_split(m, dir, "test");
  std::size_t k = 0;
  for (const auto& r : m.records) {
    if (r.split != "test") continue;
    EXPECT_EQ(test.labels[k], r.known_class_id);
    EXPECT_EQ(test.types[k], r.unseen_type);
    EXPECT_EQ(test.class_names[k], r.class_name);
    ++k;
  }
  EXPECT_EQ(static_cast<std::size_t>(test.images.n()), k);
  fs::remove_all(dir);
}

TEST(Build, RejectsBadManifest) {
  const auto dir = scratch("bad");
  build_benchmark(tiny_spec(), dir);
  {
    std::ofstream os(dir / "manifest.jsonl", std::ios::app);
    os << R"({"image_path":"x.ppm","class_name":"u","known_class_id":2,"split":"test","openness":"unseen","unseen_type":"seed"})"
       << '\n';
  }
  EXPECT_THROW(load_manifest(dir / "manifest.jsonl"), DatasetError);
  {
    std::ofstream os(dir / "manifest.jsonl");
    os << R"({"image_path":"x.ppm","class_name":"real","known_class_id":0,"split":"train","openness":"seen","unseen_type":"none","extra":1})"
       << '\n';
  }
  EXPECT_THROW(load_manifest(dir / "manifest.jsonl"), DatasetError);
  EXPECT_THROW(load_manifest(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST(Perturb, StrengthZeroIsIdentity) {
  const auto x = synth_base_corpus("shapes", 2, 1, 16);
  for (auto k : {PerturbKind::Blur, PerturbKind::Jpeg, PerturbKind::Lighting, PerturbKind::Noise,
                 PerturbKind::CropResize})
    EXPECT_EQ(perturb(x, k, 0.0).vec(), x.vec());
}

TEST(Perturb, FullCropResamplesToItself) {
  const auto x = synth_base_corpus("fields", 2, 2, 16);
  const auto y = resample_window(x, 0.0, 0.0, 16.0, 16);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(Perturb, JpegQuality100IsNearLossless) {
  Rng rng(3);
  Tensor<float> x(1, 3, 32, 32);
  for (auto& v : x.vec()) v = static_cast<float>(uniform01(rng));
  EXPECT_GT(psnr(x, io::jpeg_roundtrip(x, 100)), 40.0);
}

TEST(Perturb, DeterministicClippedAndDegrading) {
  const auto x = synth_base_corpus("fields", 2, 6, 16);
  for (auto k : {PerturbKind::Blur, PerturbKind::Jpeg, PerturbKind::Lighting, PerturbKind::Noise,
                 PerturbKind::CropResize}) {
    const double s = strength_range(k).second / 2;
    const auto a = perturb(x, k, s, 9), b = perturb(x, k, s, 9);
    EXPECT_EQ(a.vec(), b.vec());
    EXPECT_GT(mean_squared_difference(a, x), 0.0);
    for (float v : a.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Perturb, Errors) {
  const auto x = synth_base_corpus("fields", 1, 6, 8);
  EXPECT_THROW(perturb_kind_from_string("rotate"), InvalidParameter);
  EXPECT_THROW(perturb(x, PerturbKind::Blur, -1.0), InvalidParameter);
  EXPECT_THROW(perturb(x, PerturbKind::Noise, 0.9), InvalidParameter);
  EXPECT_EQ(perturb_kind_from_string("crop_resize"), PerturbKind::CropResize);
}
