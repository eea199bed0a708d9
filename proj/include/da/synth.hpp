#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "da/box.hpp"
#include "da/rng.hpp"
#include "da/tensor.hpp"

namespace da {

struct SceneSpec {
  int image_size = 32;  // multiple of 8
  int num_classes = 3;  // 0 square, 1 circle, 2 triangle
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 10.0;
  double max_size = 20.0;
};

/// Appearance shift applied at render time; never touches geometry, so the
/// box annotations of a (seed, index) pair are the same under any transform.
struct DomainTransform {
  double color_scale[3] = {1.0, 1.0, 1.0};
  double color_offset[3] = {0.0, 0.0, 0.0};
  double contrast = 1.0;     // applied about 0.5
  double noise_sigma = 0.0;  // iid Gaussian per pixel and channel
  bool striped_background = false;
  double background_level = 0.3;
  double stripe_period = 8.0;
  double stripe_amplitude = 0.15;
};

struct Annotation {
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct DetectionSample {
  Tensor image;  // (3,S,S), values in [0,1]
  std::vector<Box> boxes;
  std::vector<int> classes;
  int domain = 0;         // 0 source, 1 target
  bool annotated = true;  // false when the loader withholds annotations
};

/// Scene content for one sample. Depends only on (spec, seed, index), never
/// on the domain, so paired indices across domains share geometry exactly.
Annotation sample_geometry(const SceneSpec& spec, std::uint64_t seed,
                           std::uint64_t index);

/// Rasterizes the annotated scene and applies the domain transform. Object
/// colors come from a domain-independent stream; only the transform (and its
/// noise) distinguishes the domains.
Tensor render_sample(const SceneSpec& spec, const DomainTransform& t,
                     const Annotation& ann, std::uint64_t seed, std::uint64_t index,
                     int domain);

struct SplitInfo {
  std::string name;
  std::string file;  // path relative to the manifest directory
  int count = 0;
  int domain = 0;
  std::uint64_t index_offset = 0;
  bool train_annotations = true;  // false: withheld from training-mode loads
  std::uint32_t checksum = 0;     // CRC-32 of the binary file
  std::vector<Annotation> annotations;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  SceneSpec scene;
  DomainTransform source_transform, target_transform;
  std::vector<SplitInfo> splits;
  std::string dir;  // directory holding the files; set when read or written
};

/// Renders and writes all four splits (source/target x train/eval) plus the
/// manifest JSON. n_source must be positive; n_target may be zero for a
/// source-only dataset. Returns the manifest (with checksums filled in).
DatasetManifest generate_dataset(const SceneSpec& spec, const DomainTransform& src_t,
                                 const DomainTransform& tgt_t, int n_source,
                                 int n_target, int n_eval, std::uint64_t seed,
                                 const std::string& out_dir);

DatasetManifest read_manifest(const std::string& manifest_path);
void write_manifest(const DatasetManifest& m, const std::string& manifest_path);

enum class LoadMode { kTrain, kEval };

struct Dataset {
  DatasetManifest manifest;
  std::vector<DetectionSample> source_train, target_train, source_eval, target_eval;
};

/// Loads every split, verifying file checksums. In training mode the
/// target-train annotations are withheld (empty boxes, annotated=false);
/// the eval splits stay annotated in both modes.
Dataset load_dataset(const std::string& manifest_path, LoadMode mode);

/// Named source/target transform pairs for the CLI: "none", "default",
/// "strong". Throws ConfigError for unknown names.
void shift_preset(const std::string& name, DomainTransform& src, DomainTransform& tgt);

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n);

}  // namespace da
