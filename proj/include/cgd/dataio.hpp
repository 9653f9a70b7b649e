#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cgd/errors.hpp"
#include "cgd/loss.hpp"
#include "cgd/tensor.hpp"

namespace cgd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255) <-> 3 x H x W tensors in [0, 1]

namespace detail {

class PpmHeaderReader {
 public:
  PpmHeaderReader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  void fail(const std::string& what) const {
    throw DataError(path_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) fail("expected integer");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      if (v > 1'000'000) fail("header value too large");
    }
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::string& bytes_;
  const std::string& path_;
};

}  // namespace detail

inline Tensor decode_ppm(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::PpmHeaderReader r(bytes, origin);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') r.fail("missing P6 magic");
  r.pos_ = 2;
  std::size_t w = r.read_uint();
  std::size_t h = r.read_uint();
  std::size_t maxval = r.read_uint();
  if (w == 0 || h == 0) r.fail("zero image extent");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos_]))) r.fail("missing separator after header");
  ++r.pos_;
  std::size_t need = w * h * 3;
  if (bytes.size() - r.pos_ < need) {
    r.pos_ = bytes.size();
    r.fail("truncated payload (" + std::to_string(need) + " bytes expected)");
  }
  std::vector<double> data(need);
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos_);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) data[(c * h + y) * w + x] = px[(y * w + x) * 3 + c] / 255.0;
  return Tensor({3, h, w}, std::move(data));
}

inline Tensor load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string encode_ppm(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw std::invalid_argument("encode_ppm expects 3 x H x W, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::size_t header = out.size();
  out.resize(header + w * h * 3);
  auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out[header + (y * w + x) * 3 + c] = static_cast<char>(to_byte(d[(c * h + y) * w + x]));
  return out;
}

inline void save_image(const std::string& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image " + path);
  auto bytes = encode_ppm(image);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Geometry and augmentation

/// Nearest-neighbour resize of a 3 x H x W image to 3 x height x width.
inline Tensor resize_nearest(const Tensor& image, std::size_t height, std::size_t width) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(c * height * width);
  auto in = image.data();
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * width));
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * height + y) * width + x] = in[(ch * h + sy) * w + sx];
    }
  }
  return Tensor({c, height, width}, std::move(out));
}

inline Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (top + size > h || left + size > w) throw std::invalid_argument("crop window outside image");
  std::vector<double> out(c * size * size);
  auto in = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((ch * h + top + y) * w + left), size,
                  out.begin() + static_cast<std::ptrdiff_t>((ch * size + y) * size));
  return Tensor({c, size, size}, std::move(out));
}

inline Tensor flip_horizontal(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.numel());
  auto in = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = in[(ch * h + y) * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

/// Resize margin used by training-time random crops.
inline constexpr std::size_t kCropMargin = 4;

/**
 * train: resize to size + 4, random size x size crop, horizontal flip with p = 0.5.
 * test: plain resize to size x size.
 */
template <typename Rng>
Tensor augment(const Tensor& image, Rng& rng, bool train_mode, std::size_t size) {
  if (!train_mode) return resize_nearest(image, size, size);
  Tensor big = resize_nearest(image, size + kCropMargin, size + kCropMargin);
  std::uniform_int_distribution<std::size_t> offset(0, kCropMargin);
  std::size_t top = offset(rng);
  std::size_t left = offset(rng);
  Tensor out = crop(big, top, left, size);
  std::bernoulli_distribution coin(0.5);
  return coin(rng) ? flip_horizontal(out) : out;
}

/// Stacks equally sized 3 x S x S images into an N x 3 x S x S batch.
inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  Shape shape{images.size()};
  for (auto e : images[0].shape()) shape.push_back(e);
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (const auto& im : images) {
    if (im.shape() != images[0].shape()) throw std::invalid_argument("stack_images: mixed image shapes");
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Manifest: UTF-8 CSV with header "path,label,split"; paths relative to the manifest

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct ManifestRow {
  std::string path;
  Label label = 0;
  Split split = Split::train;

  bool operator==(const ManifestRow&) const = default;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  fs::path base_dir;  // directory that row paths are relative to

  std::size_t num_classes() const {
    std::set<Label> labels;
    for (const auto& r : rows) labels.insert(r.label);
    return labels.size();
  }

  fs::path resolve(const ManifestRow& row) const { return base_dir / row.path; }
};

inline void validate_labels(const Manifest& m, const std::string& origin) {
  std::set<Label> labels;
  for (const auto& r : m.rows) labels.insert(r.label);
  Label expect = 0;
  for (auto l : labels) {
    if (l != expect++) throw DataError(origin + ": labels are not contiguous from 0");
  }
}

inline std::string manifest_to_csv(const Manifest& m) {
  std::ostringstream os;
  os << "path,label,split\n";
  for (const auto& r : m.rows) {
    if (r.path.find_first_of(",\"\n") != std::string::npos) throw DataError("manifest path contains a reserved character: " + r.path);
    os << r.path << ',' << r.label << ',' << to_string(r.split) << '\n';
  }
  return os.str();
}

inline Manifest parse_manifest_csv(const std::string& text, const fs::path& base_dir, const std::string& origin = "manifest") {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw DataError(origin + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != "path,label,split") throw DataError(origin + ": expected header 'path,label,split'");
  Manifest m;
  m.base_dir = base_dir;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto c1 = line.find(',');
    auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected three fields");
    }
    ManifestRow row;
    row.path = line.substr(0, c1);
    try {
      std::size_t used = 0;
      std::string field = line.substr(c1 + 1, c2 - c1 - 1);
      row.label = std::stoi(field, &used);
      if (used != field.size() || row.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": bad label");
    }
    row.split = parse_split(line.substr(c2 + 1));
    m.rows.push_back(std::move(row));
  }
  validate_labels(m, origin);
  return m;
}

inline void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write manifest " + path);
  os << manifest_to_csv(m);
}

/// Reads a manifest and checks that every listed image exists and decodes.
inline Manifest read_manifest(const std::string& path, bool check_images = true) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto m = parse_manifest_csv(text, fs::path(path).parent_path(), path);
  if (check_images) {
    for (const auto& r : m.rows) (void)load_image(m.resolve(r).string());
  }
  return m;
}

/// Decoded images of one split, in manifest order.
struct LabeledImages {
  std::vector<Tensor> images;
  std::vector<Label> labels;
  std::vector<std::size_t> ids;  // manifest row indices

  std::size_t size() const { return images.size(); }
};

inline LabeledImages load_split(const Manifest& m, Split split) {
  LabeledImages out;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (m.rows[i].split != split) continue;
    out.images.push_back(load_image(m.resolve(m.rows[i]).string()));
    out.labels.push_back(m.rows[i].label);
    out.ids.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic retrieval corpus

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t instances_per_class = 16;
  std::size_t image_size = 32;
  double intra_class_jitter = 0.2;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    if (instances_per_class < 4) throw ConfigError("synthetic data needs at least 4 instances per class");
    if (image_size < 4) throw ConfigError("synthetic image size too small");
    if (!(intra_class_jitter >= 0.0 && intra_class_jitter <= 1.0)) throw ConfigError("jitter must be in [0, 1]");
  }
};

namespace detail {

struct ClassPattern {
  double color_a[3], color_b[3];
  double freq_x, freq_y, phase;
};

inline constexpr std::size_t kPaletteSize = 4;

// Classes draw both colours from a small corpus-wide palette, so colour alone
// cannot separate them; orientation and frequency of the texture do.
inline ClassPattern make_class_pattern(std::uint64_t seed, std::size_t cls) {
  std::mt19937_64 palette_rng(seed * 1000003ULL + 99991ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double palette[kPaletteSize][3];
  for (auto& color : palette)
    for (auto& v : color) v = 0.2 + 0.6 * unit(palette_rng);

  std::mt19937_64 rng(seed * 1000003ULL + cls * 7919ULL + 17);
  std::uniform_int_distribution<std::size_t> pick(0, kPaletteSize - 1);
  std::size_t a = pick(rng), b = pick(rng);
  while (b == a) b = pick(rng);
  ClassPattern p{};
  for (int c = 0; c < 3; ++c) {
    p.color_a[c] = palette[a][c];
    p.color_b[c] = palette[b][c];
  }
  std::uniform_int_distribution<int> freq(-3, 3);
  do {
    p.freq_x = freq(rng);
    p.freq_y = freq(rng);
  } while (p.freq_x == 0 && p.freq_y == 0);
  p.phase = 2.0 * std::numbers::pi * unit(rng);
  return p;
}

}  // namespace detail

/**
 * One jittered instance of a class: a two-colour sinusoidal texture shifted by up
 * to jitter * size / 4 pixels, brightness-scaled by 1 +- jitter / 2 and overlaid with
 * Gaussian noise of std jitter / 4. With jitter 0 all instances are identical.
 */
inline Tensor synthesize_instance(const SyntheticSpec& spec, std::size_t cls, std::size_t instance) {
  auto pat = detail::make_class_pattern(spec.seed, cls);
  const std::size_t s = spec.image_size;
  const double j = spec.intra_class_jitter;
  std::mt19937_64 rng(spec.seed ^ (0xA5A5A5A5ULL + cls * 104729ULL + instance * 1299709ULL));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double shift_x = j * unit(rng) * static_cast<double>(s) / 2.0;
  const double shift_y = j * unit(rng) * static_cast<double>(s) / 2.0;
  const double brightness = 1.0 + j * unit(rng);
  std::vector<double> data(3 * s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      double u = (static_cast<double>(x) + shift_x) / static_cast<double>(s);
      double v = (static_cast<double>(y) + shift_y) / static_cast<double>(s);
      double t = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (pat.freq_x * u + pat.freq_y * v) + pat.phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double val = pat.color_a[c] + (pat.color_b[c] - pat.color_a[c]) * t;
        val = val * brightness + (j > 0.0 ? 0.5 * j * noise(rng) : 0.0);
        // quantise here so in-memory and on-disk corpora agree exactly
        data[(c * s + y) * s + x] = to_byte(val) / 255.0;
      }
    }
  return Tensor({3, s, s}, std::move(data));
}

/// Last 25% of every class's instances form the test split.
inline Split synthetic_split(const SyntheticSpec& spec, std::size_t instance) {
  std::size_t n_test = spec.instances_per_class / 4;
  return instance >= spec.instances_per_class - n_test ? Split::test : Split::train;
}

/// Writes class_XXX/img_YYY.ppm files and manifest.csv under out_dir.
inline Manifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  Manifest m;
  m.base_dir = out_dir;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    char dir[32];
    std::snprintf(dir, sizeof dir, "class_%03zu", c);
    fs::create_directories(out_dir / dir);
    for (std::size_t i = 0; i < spec.instances_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s/img_%03zu.ppm", dir, i);
      save_image((out_dir / name).string(), synthesize_instance(spec, c, i));
      m.rows.push_back({name, static_cast<Label>(c), synthetic_split(spec, i)});
    }
  }
  write_manifest((out_dir / "manifest.csv").string(), m);
  return m;
}

/// The same corpus without touching the filesystem.
inline std::pair<LabeledImages, LabeledImages> synthetic_in_memory(const SyntheticSpec& spec) {
  spec.validate();
  LabeledImages train, test;
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t i = 0; i < spec.instances_per_class; ++i, ++row) {
      auto& dst = synthetic_split(spec, i) == Split::train ? train : test;
      dst.images.push_back(synthesize_instance(spec, c, i));
      dst.labels.push_back(static_cast<Label>(c));
      dst.ids.push_back(row);
    }
  return {std::move(train), std::move(test)};
}

}  // namespace cgd
