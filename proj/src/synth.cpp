#include "da/synth.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace da {

namespace {

using nlohmann::json;

constexpr std::uint64_t kGeomStream = 0x47454f4dULL;
constexpr std::uint64_t kAppearStream = 0x41505052ULL;
constexpr std::uint64_t kNoiseStream = 0x4e4f4953ULL;

constexpr std::uint64_t kSourceTrainOffset = 0;
constexpr std::uint64_t kTargetTrainOffset = 100000;
constexpr std::uint64_t kSourceEvalOffset = 200000;
constexpr std::uint64_t kTargetEvalOffset = 300000;

void validate_spec(const SceneSpec& spec) {
  if (spec.image_size <= 0 || spec.image_size % 8 != 0) {
    throw ValueError("scene: image size must be a positive multiple of 8, got " +
                     std::to_string(spec.image_size));
  }
  if (spec.num_classes < 1 || spec.num_classes > 3) {
    throw ValueError("scene: the shape repertoire supports 1 to 3 classes, got " +
                     std::to_string(spec.num_classes));
  }
  if (spec.min_objects < 1 || spec.max_objects < spec.min_objects) {
    throw ValueError("scene: invalid object count range [" +
                     std::to_string(spec.min_objects) + "," +
                     std::to_string(spec.max_objects) + "]");
  }
  if (spec.min_size < 2.0 || spec.max_size < spec.min_size ||
      spec.max_size > spec.image_size) {
    throw ValueError("scene: invalid object size range [" +
                     std::to_string(spec.min_size) + "," + std::to_string(spec.max_size) +
                     "] for image size " + std::to_string(spec.image_size));
  }
}

bool in_triangle(double px, double py, double ax, double ay, double bx, double by,
                 double cx, double cy) {
  const double e1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
  const double e2 = (cx - bx) * (py - by) - (cy - by) * (px - bx);
  const double e3 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx);
  const bool non_neg = e1 >= 0 && e2 >= 0 && e3 >= 0;
  const bool non_pos = e1 <= 0 && e2 <= 0 && e3 <= 0;
  return non_neg || non_pos;
}

}  // namespace

Annotation sample_geometry(const SceneSpec& spec, std::uint64_t seed,
                           std::uint64_t index) {
  Rng rng = Rng::derive(seed, kGeomStream, index);
  const int S = spec.image_size;
  Annotation ann;
  const int count = static_cast<int>(
      rng.uniform_int(spec.min_objects, spec.max_objects));
  for (int i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
    const int sz = static_cast<int>(rng.uniform_int(
        static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size)));
    Box box{};
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int x1 = static_cast<int>(rng.uniform_int(0, S - sz));
      const int y1 = static_cast<int>(rng.uniform_int(0, S - sz));
      box = Box{static_cast<double>(x1), static_cast<double>(y1),
                static_cast<double>(x1 + sz), static_cast<double>(y1 + sz)};
      double worst = 0.0;
      for (const Box& other : ann.boxes) worst = std::max(worst, iou(box, other));
      if (worst < 0.3) break;  // last attempt is kept regardless
    }
    ann.boxes.push_back(box);
    ann.classes.push_back(cls);
  }
  return ann;
}

Tensor render_sample(const SceneSpec& spec, const DomainTransform& t,
                     const Annotation& ann, std::uint64_t seed, std::uint64_t index,
                     int domain) {
  const Index S = spec.image_size;
  Tensor img({3, S, S});

  for (Index y = 0; y < S; ++y) {
    for (Index x = 0; x < S; ++x) {
      double base = t.background_level;
      if (t.striped_background) {
        const double phase = std::fmod(static_cast<double>(x + y), t.stripe_period);
        base += phase < t.stripe_period * 0.5 ? t.stripe_amplitude : -t.stripe_amplitude;
      }
      for (Index c = 0; c < 3; ++c) img[(c * S + y) * S + x] = base;
    }
  }

  Rng appearance = Rng::derive(seed, kAppearStream, index);
  for (std::size_t i = 0; i < ann.boxes.size(); ++i) {
    const Box& b = ann.boxes[i];
    std::array<double, 3> color;
    for (double& c : color) c = appearance.uniform(0.55, 0.95);
    const int cls = ann.classes[i];
    const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
    const double r = 0.5 * b.width();
    for (Index y = static_cast<Index>(b.y1); y < static_cast<Index>(b.y2); ++y) {
      for (Index x = static_cast<Index>(b.x1); x < static_cast<Index>(b.x2); ++x) {
        const double px = x + 0.5, py = y + 0.5;
        bool inside = true;
        if (cls == 1) {
          inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
        } else if (cls == 2) {
          inside = in_triangle(px, py, cx, b.y1, b.x1, b.y2, b.x2, b.y2);
        }
        if (!inside) continue;
        for (Index c = 0; c < 3; ++c) img[(c * S + y) * S + x] = color[c];
      }
    }
  }

  Rng noise = Rng::derive(seed, kNoiseStream + static_cast<std::uint64_t>(domain), index);
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < S * S; ++i) {
      double v = img[c * S * S + i];
      v = (v - 0.5) * t.contrast + 0.5;
      v = v * t.color_scale[c] + t.color_offset[c];
      if (t.noise_sigma > 0.0) v += noise.normal(0.0, t.noise_sigma);
      img[c * S * S + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

namespace {

json transform_to_json(const DomainTransform& t) {
  return json{{"color_scale", {t.color_scale[0], t.color_scale[1], t.color_scale[2]}},
              {"color_offset", {t.color_offset[0], t.color_offset[1], t.color_offset[2]}},
              {"contrast", t.contrast},
              {"noise_sigma", t.noise_sigma},
              {"background", t.striped_background ? "striped" : "flat"},
              {"background_level", t.background_level},
              {"stripe_period", t.stripe_period},
              {"stripe_amplitude", t.stripe_amplitude}};
}

DomainTransform transform_from_json(const json& j) {
  DomainTransform t;
  for (int c = 0; c < 3; ++c) {
    t.color_scale[c] = j.at("color_scale").at(c).get<double>();
    t.color_offset[c] = j.at("color_offset").at(c).get<double>();
  }
  t.contrast = j.at("contrast").get<double>();
  t.noise_sigma = j.at("noise_sigma").get<double>();
  t.striped_background = j.at("background").get<std::string>() == "striped";
  t.background_level = j.at("background_level").get<double>();
  t.stripe_period = j.at("stripe_period").get<double>();
  t.stripe_amplitude = j.at("stripe_amplitude").get<double>();
  return t;
}

json annotation_to_json(const Annotation& a) {
  json boxes = json::array();
  for (const Box& b : a.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  return json{{"boxes", boxes}, {"classes", a.classes}};
}

Annotation annotation_from_json(const json& j) {
  Annotation a;
  for (const auto& b : j.at("boxes")) {
    a.boxes.push_back(Box{b.at(0).get<double>(), b.at(1).get<double>(),
                          b.at(2).get<double>(), b.at(3).get<double>()});
  }
  a.classes = j.at("classes").get<std::vector<int>>();
  return a;
}

std::string crc_to_hex(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

std::uint32_t crc_from_hex(const std::string& s) {
  return static_cast<std::uint32_t>(std::stoul(s, nullptr, 16));
}

void write_split_file(const std::string& path, const std::vector<Tensor>& images,
                      std::uint32_t& crc_out) {
  std::vector<unsigned char> bytes;
  bytes.reserve(images.size() * (images.empty() ? 0 : images[0].numel()) * 4);
  for (const Tensor& img : images) {
    for (Index i = 0; i < img.numel(); ++i) {
      const float f = static_cast<float>(img[i]);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      if constexpr (std::endian::native == std::endian::big) {
        u = ((u & 0xFF000000u) >> 24) | ((u & 0x00FF0000u) >> 8) |
            ((u & 0x0000FF00u) << 8) | ((u & 0x000000FFu) << 24);
      }
      bytes.push_back(static_cast<unsigned char>(u & 0xFFu));
      bytes.push_back(static_cast<unsigned char>((u >> 8) & 0xFFu));
      bytes.push_back(static_cast<unsigned char>((u >> 16) & 0xFFu));
      bytes.push_back(static_cast<unsigned char>((u >> 24) & 0xFFu));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
  crc_out = crc32_bytes(bytes.data(), bytes.size());
}

std::vector<Tensor> read_split_file(const std::string& path, int count, Index image_size,
                                    std::uint32_t expected_crc) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing dataset file " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  const std::size_t expected =
      static_cast<std::size_t>(count) * 3 * static_cast<std::size_t>(image_size) *
      static_cast<std::size_t>(image_size) * 4;
  if (bytes.size() != expected) {
    throw IoError("dataset file " + path + " holds " + std::to_string(bytes.size()) +
                  " bytes, expected " + std::to_string(expected));
  }
  const std::uint32_t actual = crc32_bytes(bytes.data(), bytes.size());
  if (actual != expected_crc) {
    throw IoError("checksum mismatch for " + path + ": manifest says " +
                  crc_to_hex(expected_crc) + ", file is " + crc_to_hex(actual));
  }
  std::vector<Tensor> images;
  images.reserve(static_cast<std::size_t>(count));
  std::size_t at = 0;
  for (int i = 0; i < count; ++i) {
    Tensor img({3, image_size, image_size});
    for (Index k = 0; k < img.numel(); ++k) {
      std::uint32_t u = static_cast<std::uint32_t>(bytes[at]) |
                        (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
                        (static_cast<std::uint32_t>(bytes[at + 2]) << 16) |
                        (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
      at += 4;
      float fl;
      std::memcpy(&fl, &u, 4);
      img[k] = static_cast<double>(fl);
    }
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace

DatasetManifest generate_dataset(const SceneSpec& spec, const DomainTransform& src_t,
                                 const DomainTransform& tgt_t, int n_source,
                                 int n_target, int n_eval, std::uint64_t seed,
                                 const std::string& out_dir) {
  validate_spec(spec);
  if (n_source <= 0) {
    throw ValueError("dataset needs at least one source training sample");
  }
  if (n_target < 0 || n_eval < 0) {
    throw ValueError("negative sample counts");
  }
  if (n_source >= 100000 || n_target >= 100000 || n_eval >= 100000) {
    throw ValueError("split sizes above 100000 are not supported");
  }
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  m.seed = seed;
  m.scene = spec;
  m.source_transform = src_t;
  m.target_transform = tgt_t;
  m.dir = out_dir;

  struct SplitPlan {
    const char* name;
    int count;
    int domain;
    std::uint64_t offset;
    bool train_annotations;
  };
  const SplitPlan plans[] = {
      {"source_train", n_source, 0, kSourceTrainOffset, true},
      {"target_train", n_target, 1, kTargetTrainOffset, false},
      {"source_eval", n_eval, 0, kSourceEvalOffset, true},
      {"target_eval", n_eval, 1, kTargetEvalOffset, true},
  };
  for (const SplitPlan& plan : plans) {
    SplitInfo info;
    info.name = plan.name;
    info.file = std::string(plan.name) + ".bin";
    info.count = plan.count;
    info.domain = plan.domain;
    info.index_offset = plan.offset;
    info.train_annotations = plan.train_annotations;
    const DomainTransform& t = plan.domain == 0 ? src_t : tgt_t;
    std::vector<Tensor> images;
    images.reserve(static_cast<std::size_t>(plan.count));
    for (int i = 0; i < plan.count; ++i) {
      const std::uint64_t index = plan.offset + static_cast<std::uint64_t>(i);
      Annotation ann = sample_geometry(spec, seed, index);
      images.push_back(render_sample(spec, t, ann, seed, index, plan.domain));
      info.annotations.push_back(std::move(ann));
    }
    write_split_file(out_dir + "/" + info.file, images, info.checksum);
    m.splits.push_back(std::move(info));
  }
  write_manifest(m, out_dir + "/manifest.json");
  return m;
}

void write_manifest(const DatasetManifest& m, const std::string& manifest_path) {
  json j;
  j["format_version"] = 1;
  j["seed"] = m.seed;
  j["scene"] = json{{"image_size", m.scene.image_size},
                    {"num_classes", m.scene.num_classes},
                    {"min_objects", m.scene.min_objects},
                    {"max_objects", m.scene.max_objects},
                    {"min_size", m.scene.min_size},
                    {"max_size", m.scene.max_size}};
  j["source_transform"] = transform_to_json(m.source_transform);
  j["target_transform"] = transform_to_json(m.target_transform);
  json splits = json::array();
  for (const SplitInfo& s : m.splits) {
    json annotations = json::array();
    for (const Annotation& a : s.annotations) annotations.push_back(annotation_to_json(a));
    splits.push_back(json{{"name", s.name},
                          {"file", s.file},
                          {"count", s.count},
                          {"domain", s.domain},
                          {"index_offset", s.index_offset},
                          {"train_annotations", s.train_annotations},
                          {"crc32", crc_to_hex(s.checksum)},
                          {"annotations", annotations}});
  }
  j["splits"] = splits;
  std::ofstream f(manifest_path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + manifest_path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw IoError("short write to " + manifest_path);
}

DatasetManifest read_manifest(const std::string& path_or_dir) {
  std::string manifest_path = path_or_dir;
  if (std::filesystem::is_directory(manifest_path)) {
    manifest_path = (std::filesystem::path(manifest_path) / "manifest.json").string();
  }
  std::ifstream f(manifest_path);
  if (!f) throw IoError("missing manifest " + manifest_path);
  json j;
  try {
    f >> j;
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const json& sc = j.at("scene");
    m.scene.image_size = sc.at("image_size").get<int>();
    m.scene.num_classes = sc.at("num_classes").get<int>();
    m.scene.min_objects = sc.at("min_objects").get<int>();
    m.scene.max_objects = sc.at("max_objects").get<int>();
    m.scene.min_size = sc.at("min_size").get<double>();
    m.scene.max_size = sc.at("max_size").get<double>();
    m.source_transform = transform_from_json(j.at("source_transform"));
    m.target_transform = transform_from_json(j.at("target_transform"));
    for (const auto& sj : j.at("splits")) {
      SplitInfo s;
      s.name = sj.at("name").get<std::string>();
      s.file = sj.at("file").get<std::string>();
      s.count = sj.at("count").get<int>();
      s.domain = sj.at("domain").get<int>();
      s.index_offset = sj.at("index_offset").get<std::uint64_t>();
      s.train_annotations = sj.at("train_annotations").get<bool>();
      s.checksum = crc_from_hex(sj.at("crc32").get<std::string>());
      for (const auto& aj : sj.at("annotations")) {
        s.annotations.push_back(annotation_from_json(aj));
      }
      m.splits.push_back(std::move(s));
    }
    m.dir = std::filesystem::path(manifest_path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";
    return m;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path + ": " + e.what());
  } catch (const std::ios_base::failure& e) {
    throw IoError("cannot read manifest " + manifest_path + ": " + e.what());
  }
}

Dataset load_dataset(const std::string& manifest_path, LoadMode mode) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  const Index S = ds.manifest.scene.image_size;
  for (const SplitInfo& s : ds.manifest.splits) {
    std::vector<Tensor> images =
        read_split_file(ds.manifest.dir + "/" + s.file, s.count, S, s.checksum);
    const bool withhold = mode == LoadMode::kTrain && !s.train_annotations;
    std::vector<DetectionSample> samples;
    samples.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      DetectionSample d;
      d.image = std::move(images[i]);
      d.domain = s.domain;
      if (withhold) {
        d.annotated = false;
      } else {
        d.annotated = true;
        d.boxes = s.annotations[i].boxes;
        d.classes = s.annotations[i].classes;
      }
      samples.push_back(std::move(d));
    }
    if (s.name == "source_train") {
      ds.source_train = std::move(samples);
    } else if (s.name == "target_train") {
      ds.target_train = std::move(samples);
    } else if (s.name == "source_eval") {
      ds.source_eval = std::move(samples);
    } else if (s.name == "target_eval") {
      ds.target_eval = std::move(samples);
    } else {
      throw IoError("manifest lists unknown split '" + s.name + "'");
    }
  }
  return ds;
}

void shift_preset(const std::string& name, DomainTransform& src, DomainTransform& tgt) {
  src = DomainTransform{};
  tgt = DomainTransform{};
  if (name == "none") return;
  if (name == "default") {
    tgt.striped_background = true;
    tgt.background_level = 0.5;
    tgt.stripe_period = 3.0;
    tgt.stripe_amplitude = 0.4;
    tgt.color_scale[0] = 0.35;
    tgt.color_scale[1] = 1.05;
    tgt.color_scale[2] = 1.7;
    tgt.color_offset[0] = 0.18;
    tgt.color_offset[2] = -0.18;
    tgt.contrast = 0.55;
    tgt.noise_sigma = 0.09;
    return;
  }
  if (name == "strong") {
    tgt.striped_background = true;
    tgt.background_level = 0.55;
    tgt.stripe_period = 2.0;
    tgt.stripe_amplitude = 0.5;
    tgt.color_scale[0] = 0.25;
    tgt.color_scale[1] = 1.1;
    tgt.color_scale[2] = 1.85;
    tgt.color_offset[0] = 0.25;
    tgt.color_offset[2] = -0.25;
    tgt.contrast = 0.45;
    tgt.noise_sigma = 0.12;
    return;
  }
  throw ConfigError("unknown shift preset '" + name + "' (try none, default, strong)");
}

}  // namespace da
