#include "fsens/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "fsens/errors.hpp"
#include "fsens/keyvalue.hpp"

namespace fsens {

void Dataset::validate() const {
  if (height < 4 || width < 4) throw FormatError("dataset: image dimensions too small");
  if (channels != 1 && channels != 3) throw FormatError("dataset: channels must be 1 or 3");
  for (const auto& s : samples) {
    if (s.pixels.size() != pixel_count()) {
      throw FormatError("dataset: sample " + std::to_string(s.source_id) + " has " +
                        std::to_string(s.pixels.size()) + " pixels, expected " +
                        std::to_string(pixel_count()));
    }
    if (s.label >= n_classes) {
      throw FormatError("dataset: sample " + std::to_string(s.source_id) + " label " +
                        std::to_string(s.label) + " >= class count " + std::to_string(n_classes));
    }
  }
}

void ClassSplit::validate(std::size_t n_classes, std::size_t min_test_classes) const {
  std::set<std::uint32_t> seen;
  auto check = [&](const std::vector<std::uint32_t>& ids, const char* name) {
    if (ids.empty()) throw ParameterError(std::string("class split: ") + name + " split is empty");
    for (auto id : ids) {
      if (id >= n_classes) {
        throw ParameterError(std::string("class split: ") + name + " class " + std::to_string(id) +
                             " >= class count " + std::to_string(n_classes));
      }
      if (!seen.insert(id).second) {
        throw ParameterError("class split: class " + std::to_string(id) + " appears twice");
      }
    }
  };
  check(train_classes, "train");
  check(val_classes, "val");
  check(test_classes, "test");
  if (test_classes.size() < min_test_classes) {
    throw ParameterError("class split: test split has " + std::to_string(test_classes.size()) +
                         " classes, need at least " + std::to_string(min_test_classes));
  }
}

ClassSplit default_split(std::size_t n_classes) {
  if (n_classes < 3) throw ParameterError("default_split: need at least 3 classes");
  const auto n_train = static_cast<std::size_t>(std::lround(0.6 * static_cast<double>(n_classes)));
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n_classes))));
  ClassSplit s;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const auto id = static_cast<std::uint32_t>(c);
    if (c < n_train) {
      s.train_classes.push_back(id);
    } else if (c < n_train + n_val) {
      s.val_classes.push_back(id);
    } else {
      s.test_classes.push_back(id);
    }
  }
  return s;
}

void AugmentPolicy::validate() const {
  if (!(std::isfinite(crop_lo) && std::isfinite(crop_hi) && crop_lo > 0.0 && crop_hi <= 1.0 &&
        crop_lo <= crop_hi)) {
    throw ParameterError("augment policy: crop_fraction_range must satisfy 0 < lo <= hi <= 1");
  }
  if (!(std::isfinite(color_jitter) && color_jitter >= 0.0)) {
    throw ParameterError("augment policy: color_jitter must be finite and >= 0");
  }
  if (!(std::isfinite(noise_std) && noise_std >= 0.0)) {
    throw ParameterError("augment policy: noise_std must be finite and >= 0");
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr std::uint8_t kTypeU8 = 0x08;

void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + p.string());
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset;
};

IdxHeader parse_idx_header(const std::string& bytes, const std::filesystem::path& path,
                           std::initializer_list<std::uint8_t> allowed_ranks) {
  if (bytes.size() < 4) {
    throw FormatError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) +
                      " while reading magic");
  }
  const auto b = [&](std::size_t i) { return static_cast<std::uint8_t>(bytes[i]); };
  if (b(0) != 0 || b(1) != 0 || b(2) != kTypeU8 ||
      std::find(allowed_ranks.begin(), allowed_ranks.end(), b(3)) == allowed_ranks.end()) {
    throw FormatError(path.string() + ": bad magic at offset 0");
  }
  IdxHeader h;
  const std::size_t rank = b(3);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t off = 4 + 4 * d;
    if (bytes.size() < off + 4) {
      throw FormatError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) +
                        " while reading dimension " + std::to_string(d));
    }
    h.dims.push_back((std::uint32_t{b(off)} << 24) | (std::uint32_t{b(off + 1)} << 16) |
                     (std::uint32_t{b(off + 2)} << 8) | std::uint32_t{b(off + 3)});
  }
  h.payload_offset = 4 + 4 * rank;
  return h;
}

}  // namespace

void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  dataset.validate();
  std::string img;
  img.reserve(16 + dataset.size() * dataset.pixel_count());
  img.push_back(0);
  img.push_back(0);
  img.push_back(static_cast<char>(kTypeU8));
  img.push_back(static_cast<char>(dataset.channels == 1 ? 3 : 4));
  put_be32(img, static_cast<std::uint32_t>(dataset.size()));
  put_be32(img, static_cast<std::uint32_t>(dataset.height));
  put_be32(img, static_cast<std::uint32_t>(dataset.width));
  if (dataset.channels != 1) put_be32(img, static_cast<std::uint32_t>(dataset.channels));
  for (const auto& s : dataset.samples) img.append(s.pixels.begin(), s.pixels.end());

  std::string lab;
  lab.push_back(0);
  lab.push_back(0);
  lab.push_back(static_cast<char>(kTypeU8));
  lab.push_back(1);
  put_be32(lab, static_cast<std::uint32_t>(dataset.size()));
  for (const auto& s : dataset.samples) {
    if (s.label > 255) throw FormatError("write_idx: label " + std::to_string(s.label) + " exceeds u8");
    lab.push_back(static_cast<char>(s.label));
  }
  write_file(images_path, img);
  write_file(labels_path, lab);
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = read_file(images_path);
  const std::string lab = read_file(labels_path);
  const IdxHeader ih = parse_idx_header(img, images_path, {3, 4});
  const IdxHeader lh = parse_idx_header(lab, labels_path, {1});

  Dataset ds;
  const std::size_t n = ih.dims[0];
  ds.height = ih.dims[1];
  ds.width = ih.dims[2];
  ds.channels = ih.dims.size() == 4 ? ih.dims[3] : 1;
  if (lh.dims[0] != n) {
    throw FormatError(labels_path.string() + ": label count " + std::to_string(lh.dims[0]) +
                      " at offset 4 does not match image count " + std::to_string(n));
  }
  const std::size_t px = ds.pixel_count();
  const std::size_t want_img = ih.payload_offset + n * px;
  if (img.size() < want_img) {
    throw FormatError(images_path.string() + ": truncated at offset " + std::to_string(img.size()) +
                      ", expected " + std::to_string(want_img) + " bytes");
  }
  if (img.size() > want_img) {
    throw FormatError(images_path.string() + ": trailing bytes after offset " + std::to_string(want_img));
  }
  const std::size_t want_lab = lh.payload_offset + n;
  if (lab.size() != want_lab) {
    throw FormatError(labels_path.string() + ": payload size mismatch at offset " +
                      std::to_string(std::min(lab.size(), want_lab)) + ", expected " +
                      std::to_string(want_lab) + " bytes");
  }
  ds.samples.resize(n);
  std::uint32_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    const auto* begin = reinterpret_cast<const std::uint8_t*>(img.data() + ih.payload_offset + i * px);
    s.pixels.assign(begin, begin + px);
    s.label = static_cast<std::uint8_t>(lab[lh.payload_offset + i]);
    s.source_id = i;
    max_label = std::max(max_label, s.label);
  }
  ds.n_classes = n == 0 ? 0 : max_label + 1;
  if (n > 0) ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string join_ids(const std::vector<std::uint32_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<std::uint32_t> parse_ids(const std::string& key, const std::string& text) {
  std::vector<std::uint32_t> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    ids.push_back(static_cast<std::uint32_t>(parse_u64(key, item)));
  }
  return ids;
}

}  // namespace

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "# few-shot ensemble corpus manifest\n";
  os << "images=" << m.images << '\n';
  os << "labels=" << m.labels << '\n';
  os << "n_classes=" << m.n_classes << '\n';
  os << "image_size=" << m.image_size << '\n';
  os << "seed=" << m.seed << '\n';
  os << "train_classes=" << join_ids(m.split.train_classes) << '\n';
  os << "val_classes=" << join_ids(m.split.val_classes) << '\n';
  os << "test_classes=" << join_ids(m.split.test_classes) << '\n';
  write_file(path, os.str());
}

Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  const auto kv = parse_key_values(read_file(path), path.string());
  for (const auto& [key, value] : kv) {
    if (key == "images") {
      m.images = value;
    } else if (key == "labels") {
      m.labels = value;
    } else if (key == "n_classes") {
      m.n_classes = parse_u64(key, value);
    } else if (key == "image_size") {
      m.image_size = parse_u64(key, value);
    } else if (key == "seed") {
      m.seed = parse_u64(key, value);
    } else if (key == "train_classes") {
      m.split.train_classes = parse_ids(key, value);
    } else if (key == "val_classes") {
      m.split.val_classes = parse_ids(key, value);
    } else if (key == "test_classes") {
      m.split.test_classes = parse_ids(key, value);
    } else {
      throw FormatError(path.string() + ": unknown manifest key '" + key + "'");
    }
  }
  return m;
}

CorpusOnDisk load_corpus(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir / "manifest.txt");
  CorpusOnDisk c{load_idx(dir / m.images, dir / m.labels), m.split};
  if (m.n_classes > 0) {
    if (c.dataset.n_classes > m.n_classes) {
      throw FormatError(dir.string() + ": labels exceed manifest n_classes");
    }
    c.dataset.n_classes = m.n_classes;
  }
  c.split.validate(c.dataset.n_classes);
  return c;
}

void save_corpus(const Dataset& dataset, const ClassSplit& split, std::uint64_t seed,
                 const std::filesystem::path& dir) {
  split.validate(dataset.n_classes);
  std::filesystem::create_directories(dir);
  Manifest m;
  m.n_classes = dataset.n_classes;
  m.image_size = dataset.height;
  m.seed = seed;
  m.split = split;
  write_idx(dataset, dir / m.images, dir / m.labels);
  write_manifest(m, dir / "manifest.txt");
}

// ---------------------------------------------------------------------------
// Augmentation and batching

Tensor augment(const ImageSample& sample, const Dataset& geometry, const AugmentPolicy& policy,
               Rng& rng) {
  const std::size_t h = geometry.height, w = geometry.width, c = geometry.channels;
  Tensor out({c, h, w});
  auto pixel = [&](std::size_t ch, std::size_t y, std::size_t x) {
    return static_cast<double>(sample.pixels[(y * w + x) * c + ch]) / 255.0;
  };
  if (!policy.enabled) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = 2.0 * pixel(ch, y, x) - 1.0;
    return out;
  }
  const double frac = rng.uniform(policy.crop_lo, policy.crop_hi);
  const double cw = frac * static_cast<double>(w), chh = frac * static_cast<double>(h);
  const double ox = rng.uniform(0.0, static_cast<double>(w) - cw);
  const double oy = rng.uniform(0.0, static_cast<double>(h) - chh);
  const double sx = cw / static_cast<double>(w), sy = chh / static_cast<double>(h);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy_src = std::clamp(oy + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                     static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy_src);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = fy_src - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx_src = std::clamp(ox + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                       static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx_src);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = fx_src - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(ch * h + y) * w + x] = pixel(ch, y0, x0) * (1.0 - fx) * (1.0 - fy) +
                                    pixel(ch, y0, x1) * fx * (1.0 - fy) +
                                    pixel(ch, y1, x0) * (1.0 - fx) * fy + pixel(ch, y1, x1) * fx * fy;
      }
    }
  }
  const std::size_t plane = h * w;
  if (policy.color_jitter > 0.0) {
    const double s = policy.color_jitter;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double contrast = rng.uniform(1.0 - s, 1.0 + s);
      const double brightness = rng.uniform(-s, s);
      for (std::size_t i = 0; i < plane; ++i) {
        double& v = out[ch * plane + i];
        v = (v - 0.5) * contrast + 0.5 + brightness;
      }
    }
  }
  if (policy.noise_std > 0.0) {
    for (auto& v : out.data) v += policy.noise_std * rng.normal();
  }
  for (auto& v : out.data) v = std::clamp(2.0 * v - 1.0, -3.0, 3.0);
  return out;
}

LabeledSubset select_classes(const Dataset& dataset, const std::vector<std::uint32_t>& classes) {
  LabeledSubset sub;
  sub.n_classes = classes.size();
  std::vector<std::int64_t> remap(dataset.n_classes, -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= dataset.n_classes) {
      throw ParameterError("select_classes: class " + std::to_string(classes[i]) + " out of range");
    }
    remap[classes[i]] = static_cast<std::int64_t>(i);
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto r = remap[dataset.samples[i].label];
    if (r < 0) continue;
    sub.indices.push_back(i);
    sub.labels.push_back(static_cast<std::size_t>(r));
  }
  return sub;
}

std::vector<BatchPlan> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ParameterError("make_batches: batch_size must be >= 1");
  if (n == 0) throw StateError("make_batches: dataset is empty");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<BatchPlan> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.push_back(BatchPlan{{perm.begin() + static_cast<std::ptrdiff_t>(start),
                             perm.begin() + static_cast<std::ptrdiff_t>(end)}});
  }
  return out;
}

Batch materialize_batch(const Dataset& dataset, const LabeledSubset& subset, const BatchPlan& plan,
                        const AugmentPolicy& policy, Rng& rng) {
  const std::size_t per = dataset.pixel_count();
  Batch b;
  b.images = Tensor({plan.positions.size(), dataset.channels, dataset.height, dataset.width});
  for (std::size_t i = 0; i < plan.positions.size(); ++i) {
    const std::size_t pos = plan.positions[i];
    const auto& sample = dataset.samples[subset.indices.at(pos)];
    Tensor t = augment(sample, dataset, policy, rng);
    std::copy(t.data.begin(), t.data.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    b.labels.push_back(subset.labels[pos]);
    b.source_ids.push_back(sample.source_id);
  }
  return b;
}

Tensor stack_plain(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  const std::size_t per = dataset.pixel_count();
  Tensor out({std::max<std::size_t>(indices.size(), 1), dataset.channels, dataset.height, dataset.width});
  Rng unused(0);
  const AugmentPolicy plain = AugmentPolicy::disabled();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    Tensor t = augment(dataset.samples.at(indices[i]), dataset, plain, unused);
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

}  // namespace fsens
