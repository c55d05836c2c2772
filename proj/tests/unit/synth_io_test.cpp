#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <random>

#include "tcip/dataset.hpp"
#include "tcip/metrics.hpp"
#include "tcip/synth.hpp"
#include "tcip/volume_io.hpp"

using namespace tcip;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("tcip_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.grid_size = 16;
  s.num_blobs = 6;
  s.seed = seed;
  return s;
}

// Default spec at seed 0.
constexpr double kPinnedFixedSum = 1294.845403790;
constexpr int kPinnedBackground = 30347;

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

IoErrorKind io_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no IoError thrown";
  return IoErrorKind::Unreadable;
}

/// v with v(y) = -u(y + v(y)), by fixed-point iteration.
Tensor inverse_field(const Tensor& u) {
  NoGradGuard guard;
  Tensor v = mul_scalar(u, -1.0);
  for (int i = 0; i < 60; ++i) v = mul_scalar(warp(u, v), -1.0);
  return v;
}

}  // namespace

TEST(Synth, ZeroAmplitudeGivesIdenticalPair) {
  SynthSpec s = small_spec(1);
  s.deform_amplitude = 0.0;
  const SynthPair p = make_pair(s);
  EXPECT_EQ(p.fixed.data, p.moving.data);
  EXPECT_EQ(p.fixed_labels.labels, p.moving_labels.labels);
  for (double v : p.gt_field.values()) EXPECT_EQ(v, 0.0);
}

TEST(Synth, SameSeedSameBytes) {
  const SynthPair a = make_pair(small_spec(7)), b = make_pair(small_spec(7)), c = make_pair(small_spec(8));
  EXPECT_EQ(a.fixed.data, b.fixed.data);
  EXPECT_EQ(a.moving.data, b.moving.data);
  EXPECT_EQ(a.moving_labels.labels, b.moving_labels.labels);
  EXPECT_EQ(a.gt_field.values(), b.gt_field.values());
  EXPECT_NE(a.fixed.data, c.fixed.data);
}

TEST(Synth, GroundTruthFieldsNeverFold) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SynthPair p = make_pair(small_spec(seed));
    EXPECT_EQ(jacobian_folding_fraction(p.gt_field), 0.0) << "seed " << seed;
  }
}

TEST(Synth, AmplitudeIsTheMaximumDisplacement) {
  const SynthPair p = make_pair(small_spec(3));
  const Index sp = p.gt_field.shape().spatial();
  const auto u = p.gt_field.values();
  double peak = 0.0;
  for (Index v = 0; v < sp; ++v)
    peak = std::max(peak, std::sqrt(u[v] * u[v] + u[sp + v] * u[sp + v] + u[2 * sp + v] * u[2 * sp + v]));
  EXPECT_NEAR(peak, 2.0, 1e-12);
}

TEST(Synth, IntensitiesInUnitRangeAndLabelsMatchBlobs) {
  const SynthPair p = make_pair(small_spec(4));
  for (float v : p.fixed.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  for (std::size_t i = 0; i < p.fixed.data.size(); ++i) EXPECT_EQ(p.fixed.data[i] > 0.0f, p.fixed_labels.labels[i] > 0);
  EXPECT_LE(*p.fixed_labels.label_set().rbegin(), 6);
}

TEST(Synth, DeformationReducesOverlap) {
  const SynthPair p = make_pair(small_spec(5));
  const double d = mean_dice(p.fixed_labels, p.moving_labels);
  EXPECT_LT(d, 1.0);
  EXPECT_GT(d, 0.3);
}

TEST(Synth, InverseFieldRecoversTheFixedImage) {
  SynthSpec s;
  s.seed = 11;
  const SynthPair p = make_pair(s);
  const Volume back = warp_volume(p.moving, inverse_field(p.gt_field));
  double mae = 0.0;
  for (std::size_t i = 0; i < back.data.size(); ++i) mae += std::abs(back.data[i] - p.fixed.data[i]);
  mae /= static_cast<double>(back.data.size());
  EXPECT_LT(mae, 0.02);
}

TEST(Synth, PinnedGeneratorOutputAt32) {
  // Guards against unintended changes to the generator.
  SynthSpec s;
  const SynthPair p = make_pair(s);
  double total = 0.0;
  for (float v : p.fixed.data) total += v;
  std::map<int, int> counts;
  for (auto l : p.fixed_labels.labels) ++counts[l];
  EXPECT_EQ(p.fixed.data.size(), 32u * 32u * 32u);
  EXPECT_NEAR(total, kPinnedFixedSum, 1e-3);
  EXPECT_EQ(counts[0], kPinnedBackground);
}

TEST(Synth, RejectsBadSpec) {
  SynthSpec s;
  s.grid_size = 24;
  EXPECT_THROW(make_pair(s), ConfigError);
  s = {};
  s.blob_radius_max = 1.0;
  EXPECT_THROW(make_pair(s), ConfigError);
}

TEST(VolumeIo, RoundTripsAreExact) {
  TempDir dir;
  Volume v(Dims3{3, 4, 5}, 0.0f, {1.0, 0.5, 2.0});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-5.0f, 5.0f);
  for (float& x : v.data) x = u(rng);
  save_volume(dir / "img", v);
  const Volume r = load_volume(dir / "img.raw");
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.spacing, v.spacing);
  EXPECT_EQ(r.data, v.data);

  LabelVolume l(Dims3{2, 3, 4});
  for (std::size_t i = 0; i < l.labels.size(); ++i) l.labels[i] = static_cast<std::uint16_t>(i * 2711 % 65536);
  save_labels(dir / "lab.json", l);
  EXPECT_EQ(load_labels(dir / "lab").labels, l.labels);

  Tensor f = Tensor::from_data(Shape{1, 3, 1, 2, 2}, {0.5, -1, 2, 3, 4, 5, 6, 7, 8, 9, 10, -0.25});
  save_field(dir / "field", f);
  EXPECT_EQ(load_field(dir / "field").values(), f.values());
}

TEST(VolumeIo, TruncatedPayload) {
  TempDir dir;
  save_volume(dir / "img", Volume(Dims3{4, 4, 4}));
  fs::resize_file(dir / "img.raw", 4 * 63);
  EXPECT_EQ(io_kind([&] { load_volume(dir / "img"); }), IoErrorKind::TruncatedPayload);
}

TEST(VolumeIo, MalformedHeaders) {
  TempDir dir;
  save_volume(dir / "img", Volume(Dims3{2, 2, 2}));
  const std::string header = dir / "img.json";
  for (const std::string text :
       {"{not json", "[]", R"({"dims":[2,2],"spacing":[1,1,1],"dtype":"f32","byte_order":"little"})",
        R"({"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f64","byte_order":"little"})",
        R"({"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32","byte_order":"big"})",
        R"({"dims":[2,-2,2],"spacing":[1,1,1],"dtype":"f32","byte_order":"little"})",
        R"({"dims":[2,2,2],"spacing":[1,0,1],"dtype":"f32","byte_order":"little"})",
        R"({"dims":[2,2,2],"spacing":[1,1,1],"byte_order":"little"})"}) {
    write_text(header, text);
    EXPECT_EQ(io_kind([&] { load_volume(dir / "img"); }), IoErrorKind::MalformedHeader) << text;
  }
  // A label file read as an image.
  save_labels(dir / "lab", LabelVolume(Dims3{2, 2, 2}));
  EXPECT_EQ(io_kind([&] { load_volume(dir / "lab"); }), IoErrorKind::MalformedHeader);
  EXPECT_EQ(io_kind([&] { load_volume(dir / "missing"); }), IoErrorKind::Unreadable);
}

TEST(VolumeIo, DimensionOverflow) {
  TempDir dir;
  write_text(dir / "big.json", R"({"dims":[2048,2048,1024],"spacing":[1,1,1],"dtype":"f32","byte_order":"little"})");
  EXPECT_EQ(io_kind([&] { load_volume(dir / "big"); }), IoErrorKind::DimensionOverflow);
}

TEST(Dataset, WriteThenLoadMatchesInMemoryPairs) {
  TempDir dir;
  const SynthSpec spec = small_spec(20);
  const Manifest written = write_synth_dataset(dir / "ds", spec, 3);
  const Manifest m = load_manifest(dir / "ds");
  ASSERT_EQ(m.pairs.size(), 3u);
  EXPECT_EQ(m.pairs[2].id, "pair_002");
  EXPECT_EQ(m.spec.seed, 20u);
  const auto disk = load_pairs(m);
  const auto mem = synth_pairs(spec, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(disk[i].id, mem[i].id);
    EXPECT_EQ(disk[i].moving.data, mem[i].moving.data);
    EXPECT_EQ(disk[i].moving_labels.labels, mem[i].moving_labels.labels);
  }
  EXPECT_EQ(load_manifest(dir / "ds/manifest.json").pairs.size(), 3u);
}

TEST(Dataset, EmptyDatasetIsValid) {
  TempDir dir;
  write_synth_dataset(dir / "empty", small_spec(0), 0);
  EXPECT_TRUE(load_manifest(dir / "empty").pairs.empty());
}

TEST(Dataset, ManifestIsSortedAndRejectsDuplicates) {
  TempDir dir;
  write_synth_dataset(dir / "ds", small_spec(1), 2);
  Json j = read_json_file(dir / "ds/manifest.json");
  std::swap(j["pairs"][0], j["pairs"][1]);
  write_json_file(dir / "ds/manifest.json", j);
  EXPECT_EQ(load_manifest(dir / "ds").pairs.front().id, "pair_000");
  j["pairs"][1]["id"] = j["pairs"][0]["id"];
  write_json_file(dir / "ds/manifest.json", j);
  EXPECT_EQ(io_kind([&] { load_manifest(dir / "ds"); }), IoErrorKind::MalformedHeader);
  write_text(dir / "ds/manifest.json", R"({"format":"other"})");
  EXPECT_EQ(io_kind([&] { load_manifest(dir / "ds"); }), IoErrorKind::MalformedHeader);
}

TEST(Dataset, MismatchedPairGridsAreAShapeError) {
  TempDir dir;
  const Manifest m = write_synth_dataset(dir / "ds", small_spec(2), 1);
  save_labels(dir / "ds/pair_000/moving_labels", LabelVolume(Dims3{16, 16, 8}));
  EXPECT_THROW(load_pair(m, m.pairs[0]), ShapeError);
}
