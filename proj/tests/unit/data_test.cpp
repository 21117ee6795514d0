#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "fsens/data.hpp"
#include "fsens/errors.hpp"

using namespace fsens;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fsens_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

Dataset tiny_dataset(std::size_t n, std::size_t side = 16) {
  Dataset d;
  d.height = d.width = side;
  d.n_classes = 3;
  for (std::size_t i = 0; i < n; ++i) {
    ImageSample s;
    s.label = static_cast<std::uint32_t>(i % 3);
    s.source_id = i;
    s.pixels.resize(side * side);
    for (std::size_t p = 0; p < s.pixels.size(); ++p) s.pixels[p] = static_cast<std::uint8_t>((p * 7 + i * 31) % 256);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

TEST_CASE("synth_generate is deterministic and counts match") {
  const Dataset a = synth_generate(1, 40, 50, 32);
  const Dataset b = synth_generate(1, 40, 50, 32);
  CHECK(a == b);
  CHECK(a.size() == 2000);
  CHECK(a.n_classes == 40);
  std::vector<int> counts(40);
  for (const auto& s : a.samples) ++counts[s.label];
  for (int c : counts) CHECK(c == 50);
  CHECK_FALSE(synth_generate(2, 40, 50, 32) == a);
}

TEST_CASE("synth_generate rejects out-of-range arguments") {
  CHECK_THROWS_AS(synth_generate(1, 9, 50, 32), ParameterError);
  CHECK_THROWS_AS(synth_generate(1, 10, 29, 32), ParameterError);
  CHECK_THROWS_AS(synth_generate(1, 10, 30, 8), ParameterError);
}

TEST_CASE("shifted corpus differs from the default corpus") {
  const Dataset a = synth_generate(1, 10, 30, 16);
  const Dataset b = synth_generate_shifted(1, 10, 30, 16);
  CHECK(a.size() == b.size());
  CHECK_FALSE(a == b);
}

TEST_CASE("IDX fixture round trip with independent checksums") {
  const fs::path dir = scratch_dir("fixture");
  const Dataset d = tiny_dataset(4);
  write_idx(d, dir / "img.idx", dir / "lab.idx");

  const auto img = read_bytes(dir / "img.idx");
  const auto lab = read_bytes(dir / "lab.idx");
  REQUIRE(img.size() == 16 + 4 * 256);
  CHECK(img[0] == 0x00);
  CHECK(img[1] == 0x00);
  CHECK(img[2] == 0x08);
  CHECK(img[3] == 0x03);
  CHECK(be32(img, 4) == 4);
  CHECK(be32(img, 8) == 16);
  CHECK(be32(img, 12) == 16);
  CHECK(lab[3] == 0x01);
  CHECK(be32(lab, 4) == 4);

  // Checksums straight from the file bytes, then from the parsed samples.
  std::vector<std::uint64_t> from_file(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t p = 0; p < 256; ++p) from_file[i] += (p + 1) * img[16 + i * 256 + p];
  const Dataset loaded = load_idx(dir / "img.idx", dir / "lab.idx");
  REQUIRE(loaded.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    std::uint64_t sum = 0;
    for (std::size_t p = 0; p < 256; ++p) sum += (p + 1) * loaded.samples[i].pixels[p];
    CHECK(sum == from_file[i]);
    CHECK(loaded.samples[i].label == lab[8 + i]);
  }
  CHECK(loaded.samples == d.samples);
}

TEST_CASE("IDX empty payload gives an empty dataset") {
  const fs::path dir = scratch_dir("empty");
  write_bytes(dir / "img.idx", {0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 16, 0, 0, 0, 16});
  write_bytes(dir / "lab.idx", {0, 0, 8, 1, 0, 0, 0, 0});
  CHECK(load_idx(dir / "img.idx", dir / "lab.idx").empty());
}

TEST_CASE("IDX format errors") {
  const fs::path dir = scratch_dir("errors");
  write_idx(tiny_dataset(4), dir / "img.idx", dir / "lab.idx");
  auto img = read_bytes(dir / "img.idx");
  auto lab = read_bytes(dir / "lab.idx");

  SUBCASE("label count 5 vs image count 4") {
    auto bad = lab;
    bad[7] = 5;
    bad.push_back(0);
    write_bytes(dir / "lab5.idx", bad);
    CHECK_THROWS_AS(load_idx(dir / "img.idx", dir / "lab5.idx"), FormatError);
  }
  SUBCASE("bad magic names the offset") {
    auto bad = img;
    bad[2] = 0x09;
    write_bytes(dir / "badmagic.idx", bad);
    try {
      load_idx(dir / "badmagic.idx", dir / "lab.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  SUBCASE("truncated payload") {
    auto bad = img;
    bad.resize(bad.size() - 10);
    write_bytes(dir / "short.idx", bad);
    try {
      load_idx(dir / "short.idx", dir / "lab.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  SUBCASE("truncated header") {
    write_bytes(dir / "hdr.idx", {0, 0, 8, 3, 0, 0});
    CHECK_THROWS_AS(load_idx(dir / "hdr.idx", dir / "lab.idx"), FormatError);
  }
}

TEST_CASE("manifest round trip and unknown keys") {
  const fs::path dir = scratch_dir("manifest");
  Manifest m;
  m.n_classes = 40;
  m.image_size = 32;
  m.seed = 9;
  m.split = default_split(40);
  write_manifest(m, dir / "manifest.txt");
  const Manifest back = read_manifest(dir / "manifest.txt");
  CHECK(back.split.train_classes == m.split.train_classes);
  CHECK(back.split.test_classes == m.split.test_classes);
  CHECK(back.seed == 9);
  std::ofstream(dir / "manifest.txt", std::ios::app) << "colour=blue\n";
  CHECK_THROWS_AS(read_manifest(dir / "manifest.txt"), FormatError);
}

TEST_CASE("corpus save and load") {
  const fs::path dir = scratch_dir("corpus");
  const Dataset d = synth_generate(3, 10, 30, 16);
  save_corpus(d, default_split(10), 3, dir);
  const CorpusOnDisk c = load_corpus(dir);
  CHECK(c.dataset == d);
  CHECK(c.split.train_classes.size() == 6);
}

TEST_CASE("default split is 24/8/8 for 40 classes and disjoint") {
  const ClassSplit s = default_split(40);
  CHECK(s.train_classes.size() == 24);
  CHECK(s.val_classes.size() == 8);
  CHECK(s.test_classes.size() == 8);
  std::set<std::uint32_t> all;
  for (const auto* part : {&s.train_classes, &s.val_classes, &s.test_classes})
    for (auto c : *part) CHECK(all.insert(c).second);
  CHECK(all.size() == 40);
  CHECK_NOTHROW(s.validate(40, 5));
}

TEST_CASE("split validation errors") {
  ClassSplit s = default_split(40);
  s.val_classes.push_back(s.train_classes.front());
  CHECK_THROWS_AS(s.validate(40), ParameterError);
  ClassSplit e = default_split(40);
  e.val_classes.clear();
  CHECK_THROWS_AS(e.validate(40), ParameterError);
  ClassSplit small = default_split(40);
  small.test_classes.resize(3);
  CHECK_THROWS_AS(small.validate(40, 5), ParameterError);
  ClassSplit range = default_split(40);
  range.test_classes.push_back(40);
  CHECK_THROWS_AS(range.validate(40), ParameterError);
}

TEST_CASE("augment determinism and degenerate policy") {
  const Dataset d = synth_generate(1, 10, 30, 16);
  const ImageSample& s = d.samples[5];
  Rng r1(1), r2(2);
  const Tensor a = augment(s, d, AugmentPolicy::disabled(), r1);
  const Tensor b = augment(s, d, AugmentPolicy::disabled(), r2);
  CHECK(a == b);
  CHECK(a.shape == Shape{1, 16, 16});
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(2.0 * s.pixels[i] / 255.0 - 1.0));

  AugmentPolicy flat;
  flat.crop_lo = flat.crop_hi = 1.0;
  flat.color_jitter = 0.0;
  flat.noise_std = 0.0;
  Rng r3(3);
  const Tensor c = augment(s, d, flat, r3);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(c[i] - a[i]) < 1e-12);
}

TEST_CASE("distinct streams give different augmentations") {
  const Dataset d = synth_generate(1, 10, 30, 32);
  AugmentPolicy p;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const ImageSample& s = d.samples[trial * 3];
    Rng a = Rng::stream(trial, "aug-a"), b = Rng::stream(trial, "aug-b");
    const Tensor x = augment(s, d, p, a), y = augment(s, d, p, b);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) differ += x[i] != y[i];
    CHECK(differ >= x.numel() / 100);
  }
}

TEST_CASE("augment keeps shape and range") {
  const Dataset d = synth_generate(4, 10, 30, 32);
  AugmentPolicy p;
  p.noise_std = 0.5;
  p.color_jitter = 0.5;
  p.crop_lo = 0.5;
  Rng rng(8);
  for (std::size_t i = 0; i < 50; ++i) {
    const Tensor t = augment(d.samples[i], d, p, rng);
    CHECK(t.shape == Shape{1, 32, 32});
    for (double v : t.data) {
      CHECK(v >= -3.0);
      CHECK(v <= 3.0);
    }
  }
}

TEST_CASE("augment policy validation") {
  AugmentPolicy p;
  p.crop_lo = 0.9;
  p.crop_hi = 0.8;
  CHECK_THROWS_AS(p.validate(), ParameterError);
  p = AugmentPolicy{};
  p.crop_lo = 0.0;
  CHECK_THROWS_AS(p.validate(), ParameterError);
  p = AugmentPolicy{};
  p.noise_std = -1.0;
  CHECK_THROWS_AS(p.validate(), ParameterError);
}

TEST_CASE("make_batches partitions a seeded permutation") {
  Rng r1(5), r2(5);
  const auto a = make_batches(10, 4, r1);
  const auto b = make_batches(10, 4, r2);
  REQUIRE(a.size() == 3);
  CHECK(a[0].positions.size() == 4);
  CHECK(a[1].positions.size() == 4);
  CHECK(a[2].positions.size() == 2);
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].positions == b[i].positions);
    all.insert(all.end(), a[i].positions.begin(), a[i].positions.end());
  }
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(all[i] == i);
  Rng r3(5);
  CHECK_THROWS_AS(make_batches(0, 4, r3), StateError);
  CHECK_THROWS_AS(make_batches(10, 0, r3), ParameterError);
}

TEST_CASE("select_classes remaps labels") {
  const Dataset d = synth_generate(1, 10, 30, 16);
  const LabeledSubset s = select_classes(d, {7, 2});
  CHECK(s.indices.size() == 60);
  CHECK(s.n_classes == 2);
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    const auto orig = d.samples[s.indices[i]].label;
    CHECK(s.labels[i] == (orig == 7 ? 0u : 1u));
  }
}

TEST_CASE("materialize_batch shapes and ids") {
  const Dataset d = synth_generate(1, 10, 30, 16);
  const LabeledSubset s = select_classes(d, {0, 1, 2});
  BatchPlan plan{{0, 5, 40}};
  Rng rng(1);
  const Batch b = materialize_batch(d, s, plan, AugmentPolicy::disabled(), rng);
  CHECK(b.images.shape == Shape{3, 1, 16, 16});
  CHECK(b.labels == std::vector<std::size_t>{s.labels[0], s.labels[5], s.labels[40]});
  CHECK(b.source_ids[2] == d.samples[s.indices[40]].source_id);
}
