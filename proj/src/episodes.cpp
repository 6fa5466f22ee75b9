#include "cmf/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "cmf/image_io.hpp"
#include "cmf/rng.hpp"
#include "cmf/util.hpp"

namespace cmf {

namespace {

struct Seg {
  double x0, y0, x1, y1;
};

double point_segment_dist(double px, double py, const Seg& s) {
  const double dx = s.x1 - s.x0;
  const double dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - s.x0) * dx + (py - s.y0) * dy) / len2, 0.0, 1.0);
  const double cx = s.x0 + t * dx;
  const double cy = s.y0 + t * dy;
  return std::hypot(px - cx, py - cy);
}

void draw_segments(TensorF& img, int64_t n, const std::vector<Seg>& segs, double thickness,
                   float value) {
  const int64_t h = img.dim(2);
  const int64_t w = img.dim(3);
  const double r = thickness * 0.5;
  for (const Seg& s : segs) {
    const int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(s.x0, s.x1) - r - 1)));
    const int64_t x_hi = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(std::max(s.x0, s.x1) + r + 1)));
    const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(s.y0, s.y1) - r - 1)));
    const int64_t y_hi = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(std::max(s.y0, s.y1) + r + 1)));
    for (int64_t y = y_lo; y <= y_hi; ++y)
      for (int64_t x = x_lo; x <= x_hi; ++x)
        if (point_segment_dist(static_cast<double>(x), static_cast<double>(y), s) <= r)
          img.at4(n, 0, y, x) = value;
  }
}

bool inside_convex(double px, double py, const std::vector<double>& xs,
                   const std::vector<double>& ys) {
  const size_t k = xs.size();
  int sign = 0;
  for (size_t i = 0; i < k; ++i) {
    const size_t j = (i + 1) % k;
    const double cross = (xs[j] - xs[i]) * (py - ys[i]) - (ys[j] - ys[i]) * (px - xs[i]);
    if (cross > 1e-12) {
      if (sign < 0) return false;
      sign = 1;
    } else if (cross < -1e-12) {
      if (sign > 0) return false;
      sign = -1;
    }
  }
  return true;
}

void fill_background(TensorF& img, int64_t n, Rng& rng, double lo, double hi) {
  const int64_t h = img.dim(2);
  const int64_t w = img.dim(3);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      img.at4(n, 0, y, x) = static_cast<float>(rng.uniform(lo, hi));
}

// Bright jittered strokes from a class-specific archetype on a dark ground.
void render_glyph(TensorF& img, int64_t n, Rng& class_rng_proto, Rng& rng, int size) {
  const double s = size / 32.0;
  std::vector<Seg> arche;
  const int n_seg = 4 + class_rng_proto.uniform_int(3);
  for (int i = 0; i < n_seg; ++i) {
    Seg seg;
    seg.x0 = (4 + class_rng_proto.uniform_int(25)) * s;
    seg.y0 = (4 + class_rng_proto.uniform_int(25)) * s;
    seg.x1 = (4 + class_rng_proto.uniform_int(25)) * s;
    seg.y1 = (4 + class_rng_proto.uniform_int(25)) * s;
    arche.push_back(seg);
  }
  fill_background(img, n, rng, 0.02, 0.18);
  const double dx = rng.uniform(-2.0, 2.0) * s;
  const double dy = rng.uniform(-2.0, 2.0) * s;
  std::vector<Seg> segs;
  for (Seg seg : arche) {
    seg.x0 += dx + rng.uniform(-1.0, 1.0) * s;
    seg.y0 += dy + rng.uniform(-1.0, 1.0) * s;
    seg.x1 += dx + rng.uniform(-1.0, 1.0) * s;
    seg.y1 += dy + rng.uniform(-1.0, 1.0) * s;
    segs.push_back(seg);
  }
  const double thickness = (1.0 + rng.uniform()) * s;
  const float value = static_cast<float>(rng.uniform(0.55, 1.0));
  draw_segments(img, n, segs, thickness, value);
}

// Dark seven-segment digits on a bright ground; the luminance inversion of
// the stroke families.
void render_digit(TensorF& img, int64_t n, int cls, Rng& rng, int size) {
  static const int kSegTable[10][7] = {
      // a b c d e f g
      {1, 1, 1, 1, 1, 1, 0},  // 0
      {0, 1, 1, 0, 0, 0, 0},  // 1
      {1, 1, 0, 1, 1, 0, 1},  // 2
      {1, 1, 1, 1, 0, 0, 1},  // 3
      {0, 1, 1, 0, 0, 1, 1},  // 4
      {1, 0, 1, 1, 0, 1, 1},  // 5
      {1, 0, 1, 1, 1, 1, 1},  // 6
      {1, 1, 1, 0, 0, 0, 0},  // 7
      {1, 1, 1, 1, 1, 1, 1},  // 8
      {1, 1, 1, 1, 0, 1, 1},  // 9
  };
  const double s = size / 32.0;
  const double xl = 10 * s, xr = 22 * s;
  const double yt = 5 * s, ym = 16 * s, yb = 27 * s;
  const Seg geometry[7] = {
      {xl, yt, xr, yt},  // a
      {xr, yt, xr, ym},  // b
      {xr, ym, xr, yb},  // c
      {xl, yb, xr, yb},  // d
      {xl, ym, xl, yb},  // e
      {xl, yt, xl, ym},  // f
      {xl, ym, xr, ym},  // g
  };
  fill_background(img, n, rng, 0.55, 0.95);
  const double dx = rng.uniform(-2.0, 2.0) * s;
  const double dy = rng.uniform(-2.0, 2.0) * s;
  std::vector<Seg> segs;
  for (int i = 0; i < 7; ++i) {
    if (!kSegTable[cls % 10][i]) continue;
    Seg seg = geometry[i];
    seg.x0 += dx;
    seg.y0 += dy;
    seg.x1 += dx;
    seg.y1 += dy;
    segs.push_back(seg);
  }
  const double thickness = (1.5 + rng.uniform()) * s;
  const float value = static_cast<float>(rng.uniform(0.0, 0.25));
  draw_segments(img, n, segs, thickness, value);
}

// Dim low-contrast sinusoidal gratings; class fixes orientation and base
// frequency, the overall level drifts per image.
void render_texture(TensorF& img, int64_t n, int cls, int classes, Rng& rng, int size) {
  const double theta = cls * std::numbers::pi / std::max(classes, 1);
  const double freq = 3.0 + (cls % 3) + rng.uniform(-0.2, 0.2);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double base = rng.uniform(0.10, 0.26);
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / size;
      const double v = static_cast<double>(y) / size;
      double val = base + 0.10 * std::sin(2.0 * std::numbers::pi * freq * (u * ct + v * st) + phase);
      val += rng.uniform(-0.03, 0.03);
      img.at4(n, 0, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
}

// Filled regular polygons; class fixes vertex count and size bucket.
void render_shape(TensorF& img, int64_t n, int cls, Rng& rng, int size) {
  const double s = size / 32.0;
  const int sides = 3 + cls / 2;
  const double radius = ((cls % 2) ? 8.0 : 12.0) * s + rng.uniform(-1.0, 1.0) * s;
  const double cx = 16.0 * s + rng.uniform(-2.5, 2.5) * s;
  const double cy = 16.0 * s + rng.uniform(-2.5, 2.5) * s;
  const double rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> xs(sides), ys(sides);
  for (int i = 0; i < sides; ++i) {
    const double a = rot + 2.0 * std::numbers::pi * i / sides;
    xs[i] = cx + radius * std::cos(a);
    ys[i] = cy + radius * std::sin(a);
  }
  fill_background(img, n, rng, 0.02, 0.18);
  const float value = static_cast<float>(rng.uniform(0.45, 0.95));
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x)
      if (inside_convex(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, xs, ys))
        img.at4(n, 0, y, x) = value;
}

int split_of_index(int idx, int per_class) {
  const int n_train = per_class * 3 / 5;
  const int n_val = per_class / 5;
  if (idx < n_train) return static_cast<int>(Split::kTrain);
  if (idx < n_train + n_val) return static_cast<int>(Split::kVal);
  return static_cast<int>(Split::kTest);
}

}  // namespace

std::vector<int64_t> Dataset::indices_of(int cls, Split s) const {
  std::vector<int64_t> out;
  for (int64_t i = 0; i < count(); ++i)
    if (labels[i] == cls && split[i] == static_cast<int>(s)) out.push_back(i);
  return out;
}

Dataset synth_domain(const DomainSpec& spec) {
  if (spec.family != "glyphs" && spec.family != "textures" && spec.family != "shapes" &&
      spec.family != "digits")
    fail("unknown domain family '", spec.family, "'");
  if (spec.classes < 2) fail("domain '", spec.family, "' needs at least 2 classes, got ", spec.classes);
  if (spec.family == "digits" && spec.classes > 10)
    fail("digits family supports at most 10 classes, got ", spec.classes);
  if (spec.per_class < kMinPerClass)
    fail("domain '", spec.family, "' needs at least ", kMinPerClass, " images per class, got ",
         spec.per_class);
  if (spec.size < 8) fail("domain image size must be at least 8, got ", spec.size);

  Dataset ds;
  ds.id = spec.family;
  ds.classes = spec.classes;
  const int64_t total = static_cast<int64_t>(spec.classes) * spec.per_class;
  ds.images = TensorF::zeros({total, 1, spec.size, spec.size});
  ds.labels.resize(total);
  ds.split.resize(total);

  const uint64_t fam = hash_str(spec.family);
  int64_t n = 0;
  for (int cls = 0; cls < spec.classes; ++cls) {
    for (int idx = 0; idx < spec.per_class; ++idx, ++n) {
      ds.labels[n] = cls;
      ds.split[n] = split_of_index(idx, spec.per_class);
      Rng rng(mix_seed({spec.seed, fam, static_cast<uint64_t>(cls), static_cast<uint64_t>(idx)}));
      if (spec.family == "glyphs") {
        Rng proto(mix_seed({spec.seed, fam, static_cast<uint64_t>(cls), 0xa5c1ull}));
        render_glyph(ds.images, n, proto, rng, spec.size);
      } else if (spec.family == "digits") {
        render_digit(ds.images, n, cls, rng, spec.size);
      } else if (spec.family == "textures") {
        render_texture(ds.images, n, cls, spec.classes, rng, spec.size);
      } else {
        render_shape(ds.images, n, cls, rng, spec.size);
      }
    }
  }
  return ds;
}

std::vector<Dataset> make_desk_domains(const DataConfig& cfg) {
  std::vector<Dataset> out;
  for (const std::string& family : cfg.domains) {
    DomainSpec spec;
    spec.family = family;
    spec.classes = cfg.classes;
    spec.per_class = cfg.per_class;
    spec.size = cfg.size;
    spec.seed = cfg.seed;
    out.push_back(synth_domain(spec));
  }
  return out;
}

uint64_t dataset_checksum(const Dataset& ds) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix_bytes = [&h](const void* p, size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < bytes; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  mix_bytes(ds.id.data(), ds.id.size());
  mix_bytes(ds.images.data(), ds.images.size() * sizeof(float));
  mix_bytes(ds.labels.data(), ds.labels.size() * sizeof(int));
  mix_bytes(ds.split.data(), ds.split.size() * sizeof(int));
  return h;
}

Dataset load_dataset(const std::string& path, const std::string& format, int size) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.id = fs::path(path).filename().string();
  if (format == "class-folders") {
    if (!fs::is_directory(path)) fail("dataset root '", path, "' is not a directory");
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_directory()) class_dirs.push_back(e.path().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) fail("dataset root '", path, "' has no class folders");
    std::vector<TensorF> imgs;
    std::vector<int> labels;
    int cls = 0;
    for (const std::string& dir : class_dirs) {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      if (files.empty()) fail("class folder '", dir, "' contains no images");
      for (const std::string& f : files) {
        TensorF img = load_png(f);
        imgs.push_back(resize_bilinear(img, size, size));
        labels.push_back(cls);
      }
      ++cls;
    }
    ds.classes = cls;
    const int64_t total = static_cast<int64_t>(imgs.size());
    ds.images = TensorF::zeros({total, 1, size, size});
    for (int64_t i = 0; i < total; ++i)
      std::memcpy(ds.images.data() + i * size * size, imgs[i].data(),
                  sizeof(float) * size * size);
    ds.labels = labels;
  } else if (format == "idx") {
    TensorF raw = load_idx_images(path);
    const int64_t total = raw.dim(0);
    ds.images = TensorF::zeros({total, 1, size, size});
    for (int64_t i = 0; i < total; ++i) {
      TensorF one({1, raw.dim(2), raw.dim(3)});
      std::memcpy(one.data(), raw.data() + i * raw.dim(2) * raw.dim(3),
                  sizeof(float) * raw.dim(2) * raw.dim(3));
      TensorF resized = resize_bilinear(one, size, size);
      std::memcpy(ds.images.data() + i * size * size, resized.data(),
                  sizeof(float) * size * size);
    }
    std::string labels_path = path;
    auto replace = [&labels_path](const std::string& from, const std::string& to) {
      const size_t pos = labels_path.find(from);
      if (pos != std::string::npos) labels_path.replace(pos, from.size(), to);
    };
    replace("images", "labels");
    replace("idx3", "idx1");
    ds.labels.assign(total, 0);
    if (labels_path != path && fs::exists(labels_path)) {
      std::vector<int> labels = load_idx_labels(labels_path);
      if (static_cast<int64_t>(labels.size()) != total)
        fail("label file '", labels_path, "' has ", labels.size(), " entries for ", total,
             " images");
      ds.labels = labels;
    }
    ds.classes = 1 + *std::max_element(ds.labels.begin(), ds.labels.end());
  } else {
    fail("unknown dataset format '", format, "'");
  }

  const int64_t total = ds.count();
  ds.split.resize(total);
  std::vector<int> seen(ds.classes, 0);
  std::vector<int> per_class(ds.classes, 0);
  for (int64_t i = 0; i < total; ++i) ++per_class[ds.labels[i]];
  for (int64_t i = 0; i < total; ++i) {
    ds.split[i] = split_of_index(seen[ds.labels[i]], per_class[ds.labels[i]]);
    ++seen[ds.labels[i]];
  }
  return ds;
}

Episode sample_episode(const Dataset& ds, int way, int shot, int query, Split split,
                       uint64_t seed) {
  if (way < 2) fail("episode way must be at least 2, got ", way);
  if (shot < 1 || query < 1) fail("episode shot and query must be positive");
  const int need = shot + query;
  std::vector<int> eligible;
  for (int cls = 0; cls < ds.classes; ++cls)
    if (static_cast<int>(ds.indices_of(cls, split).size()) >= need) eligible.push_back(cls);
  if (static_cast<int>(eligible.size()) < way)
    fail("dataset '", ds.id, "' has ", eligible.size(), " classes with ", need,
         " images in the requested split, need ", way);

  Rng rng(seed);
  std::vector<int64_t> chosen = rng.sample_without_replacement(eligible.size(), way);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query = query;
  ep.source = ds.id;
  const int64_t c = ds.images.dim(1);
  const int64_t h = ds.images.dim(2);
  const int64_t w = ds.images.dim(3);
  const int64_t px = c * h * w;
  ep.support_images = TensorF::zeros({static_cast<int64_t>(way) * shot, c, h, w});
  ep.target_images = TensorF::zeros({static_cast<int64_t>(way) * query, c, h, w});
  int64_t si = 0, ti = 0;
  for (int k = 0; k < way; ++k) {
    const int cls = eligible[chosen[k]];
    std::vector<int64_t> pool = ds.indices_of(cls, split);
    std::vector<int64_t> picks = rng.sample_without_replacement(pool.size(), need);
    for (int j = 0; j < need; ++j) {
      const int64_t src = pool[picks[j]];
      if (j < shot) {
        std::memcpy(ep.support_images.data() + si * px, ds.images.data() + src * px,
                    sizeof(float) * px);
        ep.support_labels.push_back(k);
        ++si;
      } else {
        std::memcpy(ep.target_images.data() + ti * px, ds.images.data() + src * px,
                    sizeof(float) * px);
        ep.target_labels.push_back(k);
        ++ti;
      }
    }
  }
  return ep;
}

FixedSupport make_fixed_support(const Dataset& ds, int size_s, uint64_t seed,
                                const std::string& mode) {
  if (mode != "AZS-I" && mode != "AZS-II") fail("unknown fixed support mode '", mode, "'");
  if (size_s < 1) fail("fixed support size must be positive, got ", size_s);
  std::vector<int64_t> pool;
  for (int64_t i = 0; i < ds.count(); ++i)
    if (ds.split[i] == static_cast<int>(Split::kTest)) pool.push_back(i);
  if (static_cast<int>(pool.size()) < size_s)
    fail("dataset '", ds.id, "' test split has ", pool.size(), " images, need ", size_s);
  Rng rng(mix_seed({seed, hash_str(ds.id), hash_str(mode)}));
  std::vector<int64_t> picks = rng.sample_without_replacement(pool.size(), size_s);
  std::sort(picks.begin(), picks.end());

  FixedSupport fs;
  fs.mode = mode;
  fs.source = ds.id;
  fs.seed = seed;
  const int64_t c = ds.images.dim(1);
  const int64_t h = ds.images.dim(2);
  const int64_t w = ds.images.dim(3);
  const int64_t px = c * h * w;
  fs.images = TensorF::zeros({size_s, c, h, w});
  for (int i = 0; i < size_s; ++i)
    std::memcpy(fs.images.data() + i * px, ds.images.data() + pool[picks[i]] * px,
                sizeof(float) * px);
  return fs;
}

FixedSupport make_noise_support(const Shape& image_shape, int size_s, uint64_t seed) {
  if (image_shape.size() != 3) fail("noise support expects a [C,H,W] image shape");
  if (size_s < 1) fail("fixed support size must be positive, got ", size_s);
  FixedSupport fs;
  fs.mode = "random-matrix";
  fs.source = "noise";
  fs.seed = seed;
  Rng rng(mix_seed({seed, hash_str("random-matrix")}));
  fs.images = TensorF::uniform({size_s, image_shape[0], image_shape[1], image_shape[2]}, rng,
                               0.0f, 1.0f);
  return fs;
}

}  // namespace cmf
