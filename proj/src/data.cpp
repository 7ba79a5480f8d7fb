// SPDX-License-Identifier: Apache-2.0

#include "rtda/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "rtda/rng.hpp"

namespace rtda {

std::string_view domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain parse_domain(std::string_view text) {
  if (text == "source") return Domain::Source;
  if (text == "target") return Domain::Target;
  throw ConfigError("unknown domain '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Shift configuration

namespace {

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Rgb rgb{};
  switch (static_cast<int>(hp)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (auto& ch : rgb) ch += m;
  return rgb;
}

std::vector<Rgb> default_palette(int num_classes) {
  std::vector<Rgb> palette = {{0.45, 0.45, 0.45}, {0.80, 0.25, 0.20}, {0.25, 0.70, 0.30},
                              {0.25, 0.35, 0.80}, {0.80, 0.75, 0.25}};
  palette.resize(std::min<std::size_t>(palette.size(), static_cast<std::size_t>(num_classes)));
  for (int k = static_cast<int>(palette.size()); k < num_classes; ++k) {
    palette.push_back(hsv(0.13 + 0.618034 * k, 0.65, 0.85));
  }
  return palette;
}

}  // namespace

ShiftConfig ShiftConfig::defaults(int num_classes) {
  ShiftConfig cfg;
  cfg.mixing = {{{0.55, 0.30, 0.15}, {0.15, 0.55, 0.30}, {0.30, 0.15, 0.55}}};
  cfg.gamma = {0.8, 1.25, 1.0};
  cfg.noise_source = 0.05;
  cfg.noise_target = 0.10;
  cfg.palette = default_palette(num_classes);
  return cfg;
}

ShiftConfig ShiftConfig::identity(int num_classes, double noise) {
  ShiftConfig cfg;
  cfg.noise_source = noise;
  cfg.noise_target = noise;
  cfg.palette = default_palette(num_classes);
  return cfg;
}

void ShiftConfig::validate() const {
  for (const auto& row : mixing) {
    if (std::abs(row[0] + row[1] + row[2] - 1.0) > 1e-6) throw ConfigError("mixing matrix rows must sum to 1");
  }
  for (double g : gamma) {
    if (!(g > 0)) throw ConfigError("gamma must be positive");
  }
  if (noise_source < 0 || noise_target < 0) throw ConfigError("noise must be non-negative");
}

// ---------------------------------------------------------------------------
// Scene generation

namespace {

enum class ShapeKind { Rectangle, Disk, Band, Triangle };

ShapeKind kind_for_class(int cls) { return static_cast<ShapeKind>((cls - 1) % 4); }

void paint_shape(LabelMask& labels, int h, int w, std::uint8_t cls, ShapeKind kind, Rng& rng) {
  const int size = std::min(h, w);
  auto set = [&](int y, int x) { labels[static_cast<std::size_t>(y) * w + x] = cls; };
  switch (kind) {
    case ShapeKind::Rectangle: {
      const int rh = rng.range(std::max(2, size * 15 / 100), size * 45 / 100);
      const int rw = rng.range(std::max(2, size * 15 / 100), size * 45 / 100);
      const int y0 = rng.range(0, h - rh), x0 = rng.range(0, w - rw);
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) set(y, x);
      break;
    }
    case ShapeKind::Disk: {
      const double r = rng.uniform(0.08, 0.22) * size;
      const double cy = rng.uniform(r, h - r), cx = rng.uniform(r, w - r);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          if (dy * dy + dx * dx <= r * r) set(y, x);
        }
      break;
    }
    case ShapeKind::Band: {
      const int side = rng.range(size * 30 / 100, size * 55 / 100);
      const int y0 = rng.range(0, h - side), x0 = rng.range(0, w - side);
      const int half = rng.range(3, 6);
      const bool rising = rng.below(2) == 1;
      for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) {
          const int u = x - x0, v = rising ? side - 1 - (y - y0) : y - y0;
          if (std::abs(u - v) < half) set(y, x);
        }
      break;
    }
    case ShapeKind::Triangle: {
      const int side = rng.range(size * 25 / 100, size * 50 / 100);
      const int y0 = rng.range(0, h - side), x0 = rng.range(0, w - side);
      const double ax = x0 + side / 2.0, ay = y0, bx = x0, by = y0 + side, cx = x0 + side, cy = y0 + side;
      auto edge = [](double px, double py, double qx, double qy, double x, double y) {
        return (qx - px) * (y - py) - (qy - py) * (x - px);
      };
      for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          const double e0 = edge(ax, ay, bx, by, px, py);
          const double e1 = edge(bx, by, cx, cy, px, py);
          const double e2 = edge(cx, cy, ax, ay, px, py);
          const bool neg = e0 <= 0 && e1 <= 0 && e2 <= 0;
          const bool pos = e0 >= 0 && e1 >= 0 && e2 >= 0;
          if (neg || pos) set(y, x);
        }
      break;
    }
  }
}

LabelMask paint_geometry(std::uint64_t seed, int h, int w, int num_classes) {
  Rng rng(mix_seed(seed, 0));
  const int fg = num_classes - 1;
  const bool require_all = fg <= 8;
  const std::size_t min_pixels = std::max<std::size_t>(4, static_cast<std::size_t>(h) * w / 100);
  LabelMask labels({h, w});
  for (int attempt = 0; attempt < 64; ++attempt) {
    labels.fill(0);
    int n = rng.range(3, 8);
    if (require_all) n = std::max(n, fg);
    std::vector<int> classes;
    if (require_all) {
      for (int c = 1; c <= fg; ++c) classes.push_back(c);
    }
    while (static_cast<int>(classes.size()) < n) classes.push_back(rng.range(1, fg));
    rng.shuffle(classes.begin(), classes.end());
    for (int cls : classes) paint_shape(labels, h, w, static_cast<std::uint8_t>(cls), kind_for_class(cls), rng);
    if (!require_all) break;
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto v : labels.values()) ++counts[v];
    if (std::all_of(counts.begin(), counts.end(), [&](std::size_t c) { return c >= min_pixels; })) break;
  }
  return labels;
}

Rgb apply_shift(const Rgb& color, const ShiftConfig& cfg) {
  Rgb out{};
  for (int i = 0; i < 3; ++i) {
    double v = 0;
    for (int j = 0; j < 3; ++j) v += cfg.mixing[i][j] * color[j];
    out[i] = std::pow(std::clamp(v, 0.0, 1.0), cfg.gamma[i]);
  }
  return out;
}

}  // namespace

SceneSample generate_scene(std::uint64_t seed, Domain domain, const ShiftConfig& config, int height, int width,
                           int num_classes) {
  if (height < 16 || width < 16) throw ConfigError("scene size must be at least 16x16");
  if (num_classes < 2 || num_classes > 255) throw ConfigError("scene needs between 2 and 255 classes");
  config.validate();
  if (config.palette.size() < static_cast<std::size_t>(num_classes)) {
    throw ConfigError("palette has fewer colors than classes");
  }

  SceneSample sample;
  sample.seed = seed;
  sample.domain = domain;
  sample.labels = paint_geometry(seed, height, width, num_classes);

  std::vector<Rgb> colors(config.palette.begin(), config.palette.begin() + num_classes);
  if (domain == Domain::Target) {
    for (auto& c : colors) c = apply_shift(c, config);
  }
  const double sigma = domain == Domain::Source ? config.noise_source : config.noise_target;
  Rng noise(mix_seed(seed, domain == Domain::Source ? 1 : 2));
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  sample.image = Tensor<float>({3, height, width});
  for (std::size_t p = 0; p < plane; ++p) {
    const Rgb& c = colors[sample.labels[p]];
    for (int ch = 0; ch < 3; ++ch) {
      const double v = c[ch] + sigma * noise.normal();
      sample.image[ch * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Raster format

namespace {

constexpr char kMagic[4] = {'S', 'D', 'R', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> raster_header(int c, int h, int w, RasterDtype dtype) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(c));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(dtype));
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_raster(const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("image raster must be [C,H,W], got " + shape_str(image.shape()));
  auto out = raster_header(image.dim(0), image.dim(1), image.dim(2), RasterDtype::F32);
  out.reserve(out.size() + 4 * image.numel());
  for (float v : image.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  return out;
}

std::vector<std::uint8_t> encode_raster(const LabelMask& labels) {
  if (labels.rank() != 2) throw ShapeError("label raster must be [H,W], got " + shape_str(labels.shape()));
  auto out = raster_header(1, labels.dim(0), labels.dim(1), RasterDtype::U8);
  out.insert(out.end(), labels.values().begin(), labels.values().end());
  return out;
}

Raster decode_raster(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic");
  if (bytes.size() < kRasterHeaderBytes) throw FormatError("truncated payload");
  if (get_u32(bytes, 4) != 1) throw FormatError("unsupported version " + std::to_string(get_u32(bytes, 4)));
  Raster r;
  const std::uint32_t c = get_u32(bytes, 8), h = get_u32(bytes, 12), w = get_u32(bytes, 16);
  const std::uint32_t dtype = get_u32(bytes, 20);
  if (dtype != 1 && dtype != 2) throw FormatError("unknown dtype " + std::to_string(dtype));
  if (c == 0 || h == 0 || w == 0 || c > 4096 || h > 65536 || w > 65536) throw FormatError("implausible extents");
  r.channels = static_cast<int>(c);
  r.height = static_cast<int>(h);
  r.width = static_cast<int>(w);
  r.dtype = static_cast<RasterDtype>(dtype);
  const std::size_t count = static_cast<std::size_t>(c) * h * w;
  const std::size_t payload = count * (dtype == 1 ? 4 : 1);
  if (bytes.size() < kRasterHeaderBytes + payload) throw FormatError("truncated payload");
  if (bytes.size() > kRasterHeaderBytes + payload) throw FormatError("trailing bytes after payload");
  if (r.dtype == RasterDtype::F32) {
    r.f32.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = get_u32(bytes, kRasterHeaderBytes + 4 * i);
      std::memcpy(&r.f32[i], &bits, 4);
    }
  } else {
    r.u8.assign(bytes.begin() + kRasterHeaderBytes, bytes.end());
  }
  return r;
}

SampleFiles save_raster(const SceneSample& sample) { return {encode_raster(sample.image), encode_raster(sample.labels)}; }

SceneSample load_raster(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                        Domain domain, std::uint64_t seed) {
  Raster img = decode_raster(image_bytes);
  Raster lbl = decode_raster(label_bytes);
  if (img.dtype != RasterDtype::F32) throw FormatError("image raster must hold f32 values");
  if (lbl.dtype != RasterDtype::U8 || lbl.channels != 1) throw FormatError("label raster must hold one u8 channel");
  if (img.height != lbl.height || img.width != lbl.width) throw FormatError("image and label extents differ");
  SceneSample s;
  s.image = Tensor<float>({img.channels, img.height, img.width}, std::move(img.f32));
  s.labels = LabelMask({lbl.height, lbl.width}, std::move(lbl.u8));
  s.domain = domain;
  s.seed = seed;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Splits

DomainSplit::DomainSplit(std::vector<SceneSample> source, std::vector<SceneSample> target, int num_classes)
    : source_(std::move(source)), target_(std::move(target)), num_classes_(num_classes) {
  if (source_.empty()) throw ConfigError("empty dataset");
  if (source_.size() != target_.size()) throw ConfigError("source and target splits differ in size");
  const Shape& ref = source_.front().image.shape();
  for (const auto* list : {&source_, &target_}) {
    for (const auto& s : *list) {
      if (s.image.shape() != ref) throw ConfigError("scene extents differ within a split");
    }
  }
}

DomainSplit DomainSplit::generate(const ShiftConfig& config, std::string_view split, std::size_t count, int size,
                                  int num_classes) {
  if (count == 0) throw ConfigError("empty dataset");
  const bool train = split == "train";
  std::vector<SceneSample> source, target;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = train ? i : kValSeedBase + i;
    const std::uint64_t t = train ? kTargetSeedOffset + i : kValSeedBase + i;
    source.push_back(generate_scene(s, Domain::Source, config, size, size, num_classes));
    target.push_back(generate_scene(t, Domain::Target, config, size, size, num_classes));
  }
  return DomainSplit(std::move(source), std::move(target), num_classes);
}

namespace {

std::vector<SceneSample> load_domain_dir(const std::filesystem::path& dir, Domain domain) {
  if (!std::filesystem::is_directory(dir)) throw Error("missing directory " + dir.string());
  std::map<std::uint64_t, std::filesystem::path> images;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    constexpr std::string_view suffix = ".img.sdr";
    if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
    const std::string stem = name.substr(0, name.size() - suffix.size());
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
    images.emplace(std::stoull(stem), entry.path());
  }
  std::vector<SceneSample> out;
  for (const auto& [seed, path] : images) {
    const auto lbl_path = dir / (std::to_string(seed) + ".lbl.sdr");
    out.push_back(load_raster(read_file(path), read_file(lbl_path), domain, seed));
  }
  return out;
}

}  // namespace

DomainSplit DomainSplit::load(const std::filesystem::path& root, std::string_view split, int num_classes) {
  auto source = load_domain_dir(root / split / "source", Domain::Source);
  auto target = load_domain_dir(root / split / "target", Domain::Target);
  for (const auto* list : {&source, &target}) {
    for (const auto& s : *list) {
      for (auto v : s.labels.values()) {
        if (v != kIgnoreLabel && v >= num_classes) {
          throw ConfigError("label " + std::to_string(v) + " exceeds the dataset class count " +
                            std::to_string(num_classes));
        }
      }
    }
  }
  return DomainSplit(std::move(source), std::move(target), num_classes);
}

void DomainSplit::save(const std::filesystem::path& root, std::string_view split) const {
  for (const auto* list : {&source_, &target_}) {
    for (const auto& s : *list) {
      const auto dir = root / split / domain_name(s.domain);
      const auto files = save_raster(s);
      write_file(dir / (std::to_string(s.seed) + ".img.sdr"), files.image);
      write_file(dir / (std::to_string(s.seed) + ".lbl.sdr"), files.labels);
    }
  }
}

int DomainSplit::height() const { return source_.front().image.dim(1); }
int DomainSplit::width() const { return source_.front().image.dim(2); }

std::uint64_t DomainSplit::seed(Domain d, std::size_t i) const {
  return (d == Domain::Source ? source_ : target_).at(i).seed;
}

const Tensor<float>& DomainSplit::evaluation_image(Domain d, std::size_t i) const {
  return (d == Domain::Source ? source_ : target_).at(i).image;
}

const LabelMask& DomainSplit::evaluation_labels(Domain d, std::size_t i) const {
  return (d == Domain::Source ? source_ : target_).at(i).labels;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch,
                                           std::uint64_t stream) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(mix_seed(seed, epoch), stream + 1));
  rng.shuffle(order.begin(), order.end());
  return order;
}

BatchIterator::BatchIterator(const DomainSplit& split, int batch, std::uint64_t seed, std::uint64_t epoch)
    : split_(&split), batch_(static_cast<std::size_t>(batch)) {
  if (batch < 1) throw ConfigError("batch size must be at least 1");
  source_order_ = epoch_permutation(split.size(), seed, epoch, 0);
  target_order_ = epoch_permutation(split.size(), seed, epoch, 1);
}

std::size_t BatchIterator::num_batches() const noexcept { return (split_->size() + batch_ - 1) / batch_; }

std::optional<DomainBatch> BatchIterator::next() {
  if (cursor_ >= split_->size()) return std::nullopt;
  const std::size_t end = std::min(cursor_ + batch_, split_->size());
  std::span<const std::size_t> src(source_order_.data() + cursor_, end - cursor_);
  std::span<const std::size_t> tgt(target_order_.data() + cursor_, end - cursor_);
  cursor_ = end;
  return make_batch(*split_, src, tgt);
}

DomainBatch make_batch(const DomainSplit& split, std::span<const std::size_t> source_indices,
                       std::span<const std::size_t> target_indices) {
  if (source_indices.size() != target_indices.size() || source_indices.empty()) {
    throw ConfigError("source and target batches must be non-empty and of equal size");
  }
  const int b = static_cast<int>(source_indices.size());
  const int h = split.height(), w = split.width();
  const std::size_t img = 3 * static_cast<std::size_t>(h) * w;
  const std::size_t lbl = static_cast<std::size_t>(h) * w;
  DomainBatch batch;
  batch.source_images = Tensor<float>({b, 3, h, w});
  batch.target_images = Tensor<float>({b, 3, h, w});
  batch.source_labels = LabelMask({b, h, w});
  for (int i = 0; i < b; ++i) {
    const auto& si = split.source_image(source_indices[i]);
    const auto& sl = split.source_labels(source_indices[i]);
    const auto& ti = split.target_image(target_indices[i]);
    std::copy(si.data(), si.data() + img, batch.source_images.data() + i * img);
    std::copy(sl.data(), sl.data() + lbl, batch.source_labels.data() + i * lbl);
    std::copy(ti.data(), ti.data() + img, batch.target_images.data() + i * img);
  }
  batch.source_indices.assign(source_indices.begin(), source_indices.end());
  batch.target_indices.assign(target_indices.begin(), target_indices.end());
  return batch;
}

void write_dataset_meta(const std::filesystem::path& root, const DatasetMeta& meta) {
  const std::string text =
      "num_classes = " + std::to_string(meta.num_classes) + "\nsize = " + std::to_string(meta.size) + "\n";
  write_file(root / "meta.cfg", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DatasetMeta read_dataset_meta(const std::filesystem::path& root) {
  std::ifstream in(root / "meta.cfg");
  if (!in) throw ConfigError("missing " + (root / "meta.cfg").string());
  DatasetMeta meta;
  std::string key, eq;
  int value = 0;
  while (in >> key >> eq >> value) {
    if (eq != "=") throw ConfigError("malformed meta.cfg");
    if (key == "num_classes") meta.num_classes = value;
    else if (key == "size") meta.size = value;
    else throw ConfigError("unknown key '" + key + "' in meta.cfg");
  }
  if (!in.eof()) throw ConfigError("malformed meta.cfg");
  return meta;
}

}  // namespace rtda
