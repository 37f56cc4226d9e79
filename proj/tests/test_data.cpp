#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "helpers.hpp"
#include "reid/datasets.hpp"
#include "reid/image_io.hpp"
#include "reid/synthetic.hpp"

using namespace reid;
using testing_util::TempDir;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::io_error;
}

void touch(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p) << "x";
}

std::vector<ImageRecord> records_for(const std::vector<int>& ids) {
  std::vector<ImageRecord> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.push_back({"img" + std::to_string(i) + ".png", ids[i], 1 + static_cast<int>(i % 3), Split::train});
  return out;
}

}  // namespace

// ---------------------------------------------------------------- filenames

TEST(Filenames, Examples) {
  EXPECT_EQ(parse_market_filename("0002_c1s1_000451_03.jpg"), (ParsedName{2, 1}));
  EXPECT_EQ(parse_market_filename("-1_c3s2_000100_00.jpg"), (ParsedName{-1, 3}));
  EXPECT_EQ(parse_market_filename("0702_c8_f0012345.jpg"), (ParsedName{702, 8}));
  EXPECT_EQ(parse_filename("0702_c8_f0012345.jpg", Layout::duke), (ParsedName{702, 8}));
  EXPECT_EQ(parse_filename("0000_c6s3_094992_01.png", Layout::market), (ParsedName{0, 6}));
}

TEST(Filenames, Malformed) {
  for (const char* bad : {"0002_c1s1_000451_03.bmp", "abc_c1s1_000451_03.jpg", "0002_c1s1_000451.jpg",
                          "0002c1s1_000451_03.jpg", "", "0702_c8_f12.jpeg", "0002_c1s1_000451_03.jpg.txt"}) {
    EXPECT_EQ(kind_of([&] { parse_market_filename(bad); }), ErrorKind::malformed_filename) << bad;
  }
  EXPECT_EQ(kind_of([] { parse_filename("0702_c8_f0012345.jpg", Layout::market); }), ErrorKind::malformed_filename);
  EXPECT_EQ(kind_of([] { parse_filename("0002_c1s1_000451_03.jpg", Layout::duke); }), ErrorKind::malformed_filename);
}

TEST(Filenames, FormatParseRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pid(-1, 20000), cam(1, 99);
  for (int t = 0; t < 500; ++t) {
    const ParsedName id{pid(rng), cam(rng)};
    for (Layout layout : {Layout::market, Layout::duke}) {
      const std::string name = format_filename(id, layout, 1 + t % 6, t, t % 100, t % 2 ? "jpg" : "png");
      EXPECT_EQ(parse_filename(name, layout), id) << name;
      EXPECT_EQ(parse_market_filename(name), id) << name;
    }
  }
}

// ---------------------------------------------------------------- ingest

TEST(Ingest, SyntheticEightByFour) {
  TempDir dir;
  SyntheticSpec spec;
  spec.train_per_id = 4;
  make_synthetic_dataset(dir.path(), spec);
  const IngestResult r = ingest(dir.path(), Layout::market);
  EXPECT_EQ(r.count(Split::train), 32u);
  EXPECT_EQ(r.train_identities, 8u);
  EXPECT_EQ(r.count(Split::query), 8u);
  EXPECT_EQ(r.count(Split::gallery), 32u);
  for (const ImageRecord& rec : r.records) {
    EXPECT_GE(rec.camera_id, 1);
    EXPECT_TRUE(std::filesystem::exists(rec.path));
  }
}

TEST(Ingest, Deterministic) {
  const auto a = ingest(testing_util::fixture_root(1), Layout::market);
  const auto b = ingest(testing_util::fixture_root(1), Layout::market);
  EXPECT_EQ(a.records, b.records);
}

TEST(Ingest, SplitRolesAndDistractors) {
  TempDir dir;
  touch(dir / "bounding_box_train/0001_c1s1_000001_00.jpg");
  touch(dir / "bounding_box_train/0001_c2s1_000002_00.jpg");
  touch(dir / "bounding_box_train/0003_c2s1_000002_00.png");
  touch(dir / "bounding_box_train/Thumbs.db");
  touch(dir / "query/0001_c1s1_000009_00.jpg");
  touch(dir / "bounding_box_test/-1_c1s1_000003_00.jpg");
  touch(dir / "bounding_box_test/0000_c1s1_000004_00.jpg");
  touch(dir / "bounding_box_test/0001_c3s1_000005_00.jpg");
  const IngestResult r = ingest(dir.path(), Layout::market);
  EXPECT_EQ(r.count(Split::train), 3u);
  EXPECT_EQ(r.train_identities, 2u);
  EXPECT_EQ(r.count(Split::query), 1u);
  EXPECT_EQ(r.count(Split::gallery), 3u);
  EXPECT_EQ(filter_split(r.records, Split::gallery).front().person_id, -1);
}

TEST(Ingest, GenericLayoutAccepted) {
  TempDir dir;
  touch(dir / "train/0001_c1_f0000001.jpg");
  touch(dir / "query/0001_c2_f0000002.jpg");
  touch(dir / "gallery/0001_c3_f0000003.jpg");
  const IngestResult r = ingest(dir.path(), Layout::duke);
  EXPECT_EQ(r.records.size(), 3u);
  EXPECT_EQ(r.records[0].split, Split::train);
}

TEST(Ingest, Errors) {
  TempDir dir;
  EXPECT_EQ(kind_of([&] { ingest(dir.path(), Layout::market); }), ErrorKind::missing_directory);
  std::filesystem::create_directories(dir / "bounding_box_train");
  std::filesystem::create_directories(dir / "query");
  std::filesystem::create_directories(dir / "bounding_box_test");
  EXPECT_EQ(kind_of([&] { ingest(dir.path(), Layout::market); }), ErrorKind::empty_split);
  touch(dir / "bounding_box_train/0001_c1s1_000001_00.jpg");
  touch(dir / "query/0001_c1s1_000001_00.jpg");
  touch(dir / "bounding_box_test/junk_c1s1.jpg");
  EXPECT_EQ(kind_of([&] { ingest(dir.path(), Layout::market); }), ErrorKind::malformed_filename);
  std::filesystem::remove(dir / "bounding_box_test/junk_c1s1.jpg");
  touch(dir / "bounding_box_test/0001_c0s1_000001_00.jpg");
  EXPECT_EQ(kind_of([&] { ingest(dir.path(), Layout::market); }), ErrorKind::malformed_filename);
}

TEST(LabelMap, DenseSortedIndices) {
  const LabelMap m = LabelMap::from_records(records_for({42, 7, 42, 0, -1, 19}));
  EXPECT_EQ(m.size(), 3u);
  EXPECT_EQ(m.label(7), 0);
  EXPECT_EQ(m.label(19), 1);
  EXPECT_EQ(m.label(42), 2);
  EXPECT_EQ(kind_of([&] { m.label(0); }), ErrorKind::label_out_of_range);
}

// ---------------------------------------------------------------- sampler

TEST(Sampler, DefaultBatchShape) {
  const TaskData t = testing_util::fixture_task(1);
  const PkBatch b = sample_pk_batch(t.train, 8, 4, 1);
  EXPECT_EQ(b.records.size(), 32u);
  EXPECT_EQ(b.mask.batch_size, 32u);
  EXPECT_EQ(b.mask.pairs.size(), 24u);
}

TEST(Sampler, TwoByTwoPairsAreValid) {
  const auto recs = records_for({1, 1, 2, 2});
  // Every pairing allowed by the contract: a positive slot whose successor
  // shares its identity, paired with a slot of the other identity.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PkBatch b = sample_pk_batch(recs, 2, 2, seed);
    std::set<std::pair<std::size_t, std::size_t>> allowed;
    for (std::size_t i = 0; i + 1 < 4; ++i) {
      if (b.records[i].person_id != b.records[i + 1].person_id) continue;
      for (std::size_t j = 0; j < 4; ++j)
        if (b.records[j].person_id != b.records[i].person_id) allowed.insert({i, j});
    }
    ASSERT_EQ(b.mask.pairs.size(), 2u);
    for (const auto& p : b.mask.pairs) EXPECT_TRUE(allowed.count(p)) << p.first << "," << p.second;
    EXPECT_EQ(b.mask.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {2, 0}}));
  }
}

TEST(Sampler, InsufficientIdentities) {
  EXPECT_EQ(kind_of([] { sample_pk_batch(records_for({1, 1, 1}), 2, 2, 0); }), ErrorKind::insufficient_identities);
  EXPECT_EQ(kind_of([] { sample_pk_batch(records_for({1, 2, 3}), 1, 2, 0); }), ErrorKind::insufficient_identities);
}

TEST(Sampler, ReplacementForSmallIdentities) {
  const auto recs = records_for({1, 2, 2, 2, 3});
  const PkBatch b = sample_pk_batch(recs, 3, 4, 2);
  EXPECT_EQ(b.records.size(), 12u);
  EXPECT_EQ(kind_of([&] { PkSampler(recs, 2, 4, 0, false); }), ErrorKind::insufficient_instances);
}

TEST(Sampler, Invariants) {
  const TaskData t = testing_util::fixture_task(2);
  PkSampler sampler(t.train, 4, 3, 99);
  for (int i = 0; i < 50; ++i) {
    const PkBatch b = sampler.next();
    std::map<int, int> counts;
    for (std::size_t s = 0; s < b.records.size(); ++s) {
      ++counts[b.records[s].person_id];
      if (s % 3 != 0) EXPECT_EQ(b.records[s].person_id, b.records[s - 1].person_id);
    }
    EXPECT_EQ(counts.size(), 4u);
    for (const auto& [id, n] : counts) EXPECT_EQ(n, 3);
    EXPECT_GE(b.mask.pairs.size(), 4u * 2u);
    for (const auto& [p, n] : b.mask.pairs) {
      EXPECT_NE(b.records[p].person_id, b.records[n].person_id);
      EXPECT_EQ(b.records[p].person_id, b.records[p + 1].person_id);
    }
    EXPECT_NO_THROW(b.mask.validate(b.records.size()));
  }
}

TEST(Sampler, SeedDeterminesBatches) {
  const TaskData t = testing_util::fixture_task(1);
  PkSampler a(t.train, 4, 2, 7), b(t.train, 4, 2, 7), c(t.train, 4, 2, 8);
  bool differs = false;
  for (int i = 0; i < 5; ++i) {
    const PkBatch x = a.next(), y = b.next(), z = c.next();
    EXPECT_EQ(x.records, y.records);
    EXPECT_EQ(x.mask.pairs, y.mask.pairs);
    differs = differs || x.records != z.records;
  }
  EXPECT_TRUE(differs);
  PkSampler d(t.train, 4, 2, 7);
  d.set_rng_state(a.rng_state());
  EXPECT_EQ(d.next().records, a.next().records);
}

// ---------------------------------------------------------------- images

TEST(ImageLoader, NormalizesRgbPlanes) {
  TempDir dir;
  cv::Mat img(4, 2, CV_8UC3, cv::Scalar(0, 128, 255));  // BGR
  cv::imwrite((dir / "x.png").string(), img);
  ImageLoader loader({4, 2});
  const ImageRecord rec{dir / "x.png", 1, 1, Split::query};
  const Tensor t = loader.load_batch(std::span(&rec, 1));
  EXPECT_EQ(t.shape(), (Shape{1, 3, 4, 2}));
  EXPECT_NEAR(t.at(0, 0, 0, 0), (1.0 - 0.485) / 0.229, 1e-12);
  EXPECT_NEAR(t.at(0, 1, 3, 1), (128.0 / 255.0 - 0.456) / 0.224, 1e-12);
  EXPECT_NEAR(t.at(0, 2, 2, 0), (0.0 - 0.406) / 0.225, 1e-12);
}

TEST(ImageLoader, ResizesAndCaches) {
  ImageLoader loader({32, 16}, 2);
  const TaskData t = testing_util::fixture_task(1);
  const Tensor a = loader.load_batch(std::span(t.train).subspan(0, 3));
  EXPECT_EQ(a.shape(), (Shape{3, 3, 32, 16}));
  const Tensor b = loader.load_batch(std::span(t.train).subspan(0, 3));
  EXPECT_EQ(a, b);
  const ImageRecord missing{"/nonexistent/0001_c1s1_000001_00.png", 1, 1, Split::train};
  EXPECT_EQ(kind_of([&] { loader.load_batch(std::span(&missing, 1)); }), ErrorKind::io_error);
}

TEST(Synthetic, DistractorsAndCameras) {
  TempDir dir;
  SyntheticSpec spec;
  spec.identities = 3;
  spec.distractors = 2;
  make_synthetic_dataset(dir.path(), spec);
  const IngestResult r = ingest(dir.path(), Layout::market);
  int distractors = 0;
  for (const ImageRecord& rec : filter_split(r.records, Split::gallery)) distractors += rec.person_id == -1;
  EXPECT_EQ(distractors, 2);
  for (const ImageRecord& rec : filter_split(r.records, Split::query)) EXPECT_EQ(rec.camera_id, 1);
}
