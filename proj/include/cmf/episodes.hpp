#pragma once

#include <string>
#include <vector>

#include "cmf/config.hpp"
#include "cmf/tensor.hpp"

namespace cmf {

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

struct Dataset {
  std::string id;
  TensorF images;           // [M, C, H, W]
  std::vector<int> labels;  // class id per image
  std::vector<int> split;   // Split value per image
  int classes = 0;

  int64_t count() const { return images.dim(0); }
  std::vector<int64_t> indices_of(int cls, Split s) const;
};

struct Episode {
  TensorF support_images;
  std::vector<int> support_labels;  // remapped to 0..way-1
  TensorF target_images;
  std::vector<int> target_labels;
  int way = 0;
  int shot = 0;
  int query = 0;
  std::string source;
};

struct FixedSupport {
  TensorF images;      // [S, C, H, W]
  std::string mode;    // "AZS-I" | "AZS-II" | "random-matrix"
  std::string source;  // dataset id or "noise"
  uint64_t seed = 0;
};

struct DomainSpec {
  std::string family;  // glyphs | textures | shapes | digits
  int classes = 10;
  int per_class = 80;
  int size = 32;
  uint64_t seed = 0;
};

// Fewest images per class a synthesized domain may carry (the desk sampling
// minimum of shot 1 + query 10).
inline constexpr int kMinPerClass = 11;

// Procedurally renders one domain; the same spec and seed reproduce the
// dataset bit-for-bit. Split tags are assigned per class 60/20/20 in index
// order.
Dataset synth_domain(const DomainSpec& spec);

// The registered desk benchmark: one domain per family named in the config.
std::vector<Dataset> make_desk_domains(const DataConfig& cfg);

uint64_t dataset_checksum(const Dataset& ds);

// class-folders: <root>/<class>/<image>.png; idx: an MNIST-layout image file
// with an optional sibling label file ("images"->"labels", "idx3"->"idx1").
Dataset load_dataset(const std::string& path, const std::string& format, int size);

Episode sample_episode(const Dataset& ds, int way, int shot, int query, Split split,
                       uint64_t seed);

// Draws `size_s` images from the dataset's test split, class-agnostic.
FixedSupport make_fixed_support(const Dataset& ds, int size_s, uint64_t seed,
                                const std::string& mode);

// Uniform noise images of the given [C,H,W] shape.
FixedSupport make_noise_support(const Shape& image_shape, int size_s, uint64_t seed);

}  // namespace cmf
