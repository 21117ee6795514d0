#include "fsens/models.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fsens/errors.hpp"
#include "fsens/keyvalue.hpp"
#include "fsens/ops.hpp"

namespace fsens {

namespace {

constexpr const char* kBackboneName = "conv3x3-relu-maxpool-conv3x3-relu-maxpool-gap-dropout-dense";

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::array<Shape, BackboneParams::kTensorCount> expected_shapes(const BackboneArch& a) {
  const std::size_t c1 = a.conv1_channels(), c2 = a.feature_dim();
  return {Shape{c1, a.in_channels, 3, 3}, Shape{c1}, Shape{c2, c1, 3, 3}, Shape{c2},
          Shape{c2, a.n_classes},         Shape{a.n_classes}};
}

}  // namespace

void BackboneArch::validate() const {
  if (in_channels != 1 && in_channels != 3) {
    throw ParameterError("backbone: in_channels must be 1 or 3, got " + std::to_string(in_channels));
  }
  if (n_classes < 2) throw ParameterError("backbone: n_classes must be >= 2, got " + std::to_string(n_classes));
  if (width < 1 || width > 16) throw ParameterError("backbone: width must be in [1, 16]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("backbone: dropout must be in [0, 1)");
}

std::array<Tensor*, BackboneParams::kTensorCount> BackboneParams::tensors() {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &head_w, &head_b};
}

std::array<const Tensor*, BackboneParams::kTensorCount> BackboneParams::tensors() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &head_w, &head_b};
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->numel();
  return n;
}

bool BackboneParams::all_finite() const {
  for (const auto* t : tensors())
    if (!t->all_finite()) return false;
  return true;
}

void BackboneParams::validate() const {
  arch.validate();
  const auto shapes = expected_shapes(arch);
  const auto ts = tensors();
  for (std::size_t i = 0; i < kTensorCount; ++i) {
    if (ts[i]->shape != shapes[i]) {
      throw DimensionError("backbone: tensor " + std::to_string(i) + " has shape " +
                           shape_string(ts[i]->shape) + ", expected " + shape_string(shapes[i]));
    }
  }
}

BackboneParams init_backbone(std::uint64_t seed, const BackboneArch& arch) {
  arch.validate();
  BackboneParams p;
  p.arch = arch;
  const auto shapes = expected_shapes(arch);
  auto ts = p.tensors();
  Rng rng = Rng::stream(seed, "init-backbone");
  for (std::size_t i = 0; i < BackboneParams::kTensorCount; ++i) {
    *ts[i] = Tensor(shapes[i]);
    if (i % 2 == 1) continue;  // biases
    const std::size_t fan_in = i == 4 ? shapes[i][0] : shapes[i][1] * 9;
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (auto& v : ts[i]->data) v = rng.uniform(-bound, bound);
  }
  return p;
}

BackboneParams init_backbone(std::uint64_t seed, std::size_t n_classes) {
  BackboneArch arch;
  arch.n_classes = n_classes;
  return init_backbone(seed, arch);
}

BackboneVars bind_params(Tape& tape, const BackboneParams& params, bool requires_grad) {
  BackboneVars v;
  v.arch = params.arch;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < BackboneParams::kTensorCount; ++i) v.params[i] = tape.leaf(*ts[i], requires_grad);
  return v;
}

ForwardVars forward(const BackboneVars& vars, Var images, Mode mode, Rng* rng) {
  const Shape s = images.shape();
  if (s.size() != 4 || s[1] != vars.arch.in_channels || s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw DimensionError("forward: expected [b x " + std::to_string(vars.arch.in_channels) +
                         " x h x w] with h, w divisible by 4, got " + shape_string(s));
  }
  const auto& p = vars.params;
  Var h = max_pool_2x2(relu(conv2d(images, p[0], p[1])));
  h = max_pool_2x2(relu(conv2d(h, p[2], p[3])));
  Var features = global_average_pool(h);
  Var head_in = features;
  if (mode == Mode::kTrain && vars.arch.dropout > 0.0) {
    if (rng == nullptr) throw ParameterError("forward: train mode with dropout needs an rng stream");
    head_in = dropout(features, vars.arch.dropout, *rng);
  }
  Var logits = add_row_bias(matmul(head_in, p[4]), p[5]);
  return {logits, features};
}

ForwardOutput forward(const BackboneParams& params, const Tensor& images, Mode mode, Rng* rng) {
  Tape tape;
  const BackboneVars vars = bind_params(tape, params, false);
  const ForwardVars out = forward(vars, tape.constant(images), mode, rng);
  return {out.logits.value(), out.features.value()};
}

Tensor extract_features(const BackboneParams& params, const Tensor& images, std::size_t chunk) {
  if (images.rank() != 4) throw DimensionError("extract_features: expected rank-4 images");
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / n;
  const std::size_t d = params.arch.feature_dim();
  Tensor out({n, d});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t b = std::min(chunk, n - start);
    Shape shape = images.shape;
    shape[0] = b;
    Tensor part(shape, std::vector<double>(images.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                           images.data.begin() + static_cast<std::ptrdiff_t>((start + b) * per)));
    Tensor f = forward(params, part, Mode::kEval).features;
    std::copy(f.data.begin(), f.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble

const BackboneArch& EnsembleParams::arch() const {
  if (members.empty()) throw StateError("ensemble: no members");
  return members.front().arch;
}

std::string EnsembleParams::arch_descriptor() const {
  const BackboneArch& a = arch();
  std::ostringstream os;
  os << "backbone=" << kBackboneName << '\n';
  os << "in_channels=" << a.in_channels << '\n';
  os << "n_classes=" << a.n_classes << '\n';
  os << "width=" << a.width << '\n';
  os << "dropout=" << format_double(a.dropout) << '\n';
  return os.str();
}

std::uint64_t EnsembleParams::arch_fingerprint() const { return fnv1a64(arch_descriptor()); }

void EnsembleParams::validate() const {
  if (members.empty()) throw ParameterError("ensemble: K must be >= 1");
  if (member_seeds.size() != members.size()) {
    throw ParameterError("ensemble: " + std::to_string(member_seeds.size()) + " seeds for " +
                         std::to_string(members.size()) + " members");
  }
  for (const auto& m : members) {
    if (!(m.arch == members.front().arch)) throw ParameterError("ensemble: members disagree on architecture");
    m.validate();
  }
}

EnsembleParams init_ensemble(const std::vector<std::uint64_t>& member_seeds, const BackboneArch& arch,
                             std::string strategy) {
  EnsembleParams e;
  e.member_seeds = member_seeds;
  e.strategy = std::move(strategy);
  for (auto s : member_seeds) e.members.push_back(init_backbone(s, arch));
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint: truncated at offset " + std::to_string(pos_) + " while reading " + what);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(seeds[i]);
  }
  return s;
}

}  // namespace

std::string encode_checkpoint(const EnsembleParams& ensemble) {
  ensemble.validate();
  std::string out = "FSEN";
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ensemble.size()));
  const std::string desc = ensemble.arch_descriptor() + "member_seeds=" + join_seeds(ensemble.member_seeds) +
                           "\nstrategy=" + ensemble.strategy + "\n";
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(desc.size()));
  out += desc;
  for (const auto& m : ensemble.members) {
    for (const auto* t : m.tensors()) {
      out.push_back(static_cast<char>(t->rank()));
      for (auto d : t->shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      for (double v : t->data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

EnsembleParams decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "FSEN") throw FormatError("checkpoint: bad magic at offset 0");
  const auto version = r.le<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  }
  const auto k = r.le<std::uint32_t>("member count");
  if (k == 0) throw FormatError("checkpoint: member count 0 at offset 6");
  const auto desc_len = r.le<std::uint32_t>("descriptor length");
  const std::string desc = r.take(desc_len, "descriptor");

  EnsembleParams e;
  BackboneArch arch;
  std::string backbone;
  for (const auto& [key, value] : parse_key_values(desc, "checkpoint descriptor")) {
    if (key == "backbone") {
      backbone = value;
    } else if (key == "in_channels") {
      arch.in_channels = parse_u64(key, value);
    } else if (key == "n_classes") {
      arch.n_classes = parse_u64(key, value);
    } else if (key == "width") {
      arch.width = parse_u64(key, value);
    } else if (key == "dropout") {
      arch.dropout = parse_double(key, value);
    } else if (key == "member_seeds") {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) e.member_seeds.push_back(parse_u64(key, item));
    } else if (key == "strategy") {
      e.strategy = value;
    } else {
      throw FormatError("checkpoint: unknown descriptor key '" + key + "'");
    }
  }
  if (backbone != kBackboneName) throw FormatError("checkpoint: unsupported backbone '" + backbone + "'");
  try {
    arch.validate();
  } catch (const ParameterError& err) {
    throw FormatError(std::string("checkpoint: ") + err.what());
  }
  const auto shapes = expected_shapes(arch);
  for (std::uint32_t m = 0; m < k; ++m) {
    BackboneParams p;
    p.arch = arch;
    auto ts = p.tensors();
    for (std::size_t i = 0; i < BackboneParams::kTensorCount; ++i) {
      const std::size_t at = r.pos();
      const auto rank = r.le<std::uint8_t>("tensor rank");
      Shape shape;
      for (std::size_t d = 0; d < rank; ++d) shape.push_back(r.le<std::uint32_t>("tensor dims"));
      if (shape != shapes[i]) {
        throw FormatError("checkpoint: member " + std::to_string(m) + " tensor " + std::to_string(i) +
                          " at offset " + std::to_string(at) + " has shape " + shape_string(shape) +
                          ", expected " + shape_string(shapes[i]));
      }
      std::vector<double> data(shape_numel(shape));
      for (auto& v : data) v = std::bit_cast<double>(r.le<std::uint64_t>("tensor payload"));
      *ts[i] = Tensor(shape, std::move(data));
    }
    e.members.push_back(std::move(p));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  if (e.member_seeds.size() != k) {
    throw FormatError("checkpoint: descriptor lists " + std::to_string(e.member_seeds.size()) +
                      " member seeds for " + std::to_string(k) + " members");
  }
  return e;
}

void save_checkpoint(const EnsembleParams& ensemble, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ensemble);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

EnsembleParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

std::string checkpoint_hash(const EnsembleParams& ensemble) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(encode_checkpoint(ensemble))));
  return buf;
}

}  // namespace fsens
