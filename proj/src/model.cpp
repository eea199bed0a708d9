#include "da/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace da {

namespace {

using nlohmann::json;

Rng model_rng(std::uint64_t seed) { return Rng::derive(seed, 0x4d4f44454cULL); }

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
  if (cfg.image_size <= 0 || cfg.image_size % 8 != 0) {
    throw ConfigError("model: image size must be a positive multiple of 8, got " +
                      std::to_string(cfg.image_size));
  }
  if (cfg.num_classes < 1) throw ConfigError("model: need at least one object class");
  Rng rng = model_rng(seed);
  backbone = Backbone("backbone", 3, cfg.c1, cfg.c2, cfg.c3, rng);
  head = PredictionHead("head", roi_feature_dim(), cfg.head_hidden, cfg.num_classes, rng);
  d_local = LocalDiscriminator("d_local", cfg.c1, rng);
  d_transition = TransitionDiscriminator("d_transition", cfg.c2, rng);
  d_global = GlobalDiscriminator("d_global", cfg.c3, rng);
  d_fg = InstanceDiscriminator("d_fg", roi_feature_dim(), rng);
  d_bg = InstanceDiscriminator("d_bg", roi_feature_dim(), rng);
  d_single = InstanceDiscriminator("d_single", roi_feature_dim(), rng);
}

std::vector<Parameter*> Model::params() {
  std::vector<Parameter*> ps;
  backbone.collect(ps);
  head.collect(ps);
  d_local.collect(ps);
  d_transition.collect(ps);
  d_global.collect(ps);
  d_fg.collect(ps);
  d_bg.collect(ps);
  d_single.collect(ps);
  return ps;
}

std::vector<Parameter*> Model::backbone_params() {
  std::vector<Parameter*> ps;
  backbone.collect(ps);
  return ps;
}

std::vector<Parameter*> Model::head_params() {
  std::vector<Parameter*> ps;
  head.collect(ps);
  return ps;
}

std::vector<Parameter*> Model::discriminator_params() {
  std::vector<Parameter*> ps;
  d_local.collect(ps);
  d_transition.collect(ps);
  d_global.collect(ps);
  d_fg.collect(ps);
  d_bg.collect(ps);
  d_single.collect(ps);
  return ps;
}

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size}, {"num_classes", c.num_classes},
              {"c1", c.c1},                 {"c2", c.c2},
              {"c3", c.c3},                 {"head_hidden", c.head_hidden},
              {"pooled", c.pooled}};
}

void append_le64(std::vector<unsigned char>& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<unsigned char>((u >> (8 * k)) & 0xFFu));
}

double read_le64(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(p[k]) << (8 * k);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& prefix) {
  const std::vector<Parameter*> ps = model.params();
  std::vector<unsigned char> bytes;
  json index;
  index["format_version"] = 1;
  index["config"] = config_to_json(model.config);
  json entries = json::array();
  Index offset = 0;
  for (const Parameter* p : ps) {
    entries.push_back(
        json{{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
    for (Index i = 0; i < p->value.numel(); ++i) append_le64(bytes, p->value[i]);
    offset += p->value.numel();
  }
  index["params"] = entries;
  index["total"] = offset;

  std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open " + prefix + ".bin for writing");
  bin.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw IoError("short write to " + prefix + ".bin");

  std::ofstream idx(prefix + ".json", std::ios::trunc);
  if (!idx) throw IoError("cannot open " + prefix + ".json for writing");
  idx << index.dump(2) << "\n";
  if (!idx) throw IoError("short write to " + prefix + ".json");
}

void load_checkpoint(Model& model, const std::string& prefix) {
  std::ifstream idx(prefix + ".json");
  if (!idx) throw IoError("missing checkpoint index " + prefix + ".json");
  json index;
  try {
    idx >> index;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint index " + prefix + ".json: " + e.what());
  }
  const json want = config_to_json(model.config);
  if (index.at("config") != want) {
    throw ConfigError("checkpoint " + prefix + " was written for a different model config");
  }

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("missing checkpoint data " + prefix + ".bin");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)),
                                   std::istreambuf_iterator<char>());

  const std::vector<Parameter*> ps = model.params();
  const json& entries = index.at("params");
  if (entries.size() != ps.size()) {
    throw IoError("checkpoint " + prefix + " indexes " + std::to_string(entries.size()) +
                  " parameters, model has " + std::to_string(ps.size()));
  }
  const Index total = index.at("total").get<Index>();
  if (bytes.size() != static_cast<std::size_t>(total) * 8) {
    throw IoError("checkpoint data " + prefix + ".bin holds " +
                  std::to_string(bytes.size()) + " bytes, index says " +
                  std::to_string(total * 8));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const json& e = entries[i];
    if (e.at("name").get<std::string>() != ps[i]->name) {
      throw IoError("checkpoint parameter " + std::to_string(i) + " is '" +
                    e.at("name").get<std::string>() + "', model expects '" +
                    ps[i]->name + "'");
    }
    const auto shape = e.at("shape").get<std::vector<Index>>();
    if (shape != ps[i]->value.shape()) {
      throw IoError("checkpoint parameter '" + ps[i]->name + "' has shape " +
                    shape_to_string(shape) + ", model expects " +
                    shape_to_string(ps[i]->value.shape()));
    }
    const Index offset = e.at("offset").get<Index>();
    for (Index k = 0; k < ps[i]->value.numel(); ++k) {
      ps[i]->value[k] = read_le64(bytes.data() + static_cast<std::size_t>(offset + k) * 8);
    }
  }
}

ModelConfig checkpoint_model_config(const std::string& prefix) {
  std::ifstream idx(prefix + ".json");
  if (!idx) throw IoError("missing checkpoint index " + prefix + ".json");
  json index;
  try {
    idx >> index;
    const json& c = index.at("config");
    ModelConfig cfg;
    cfg.image_size = c.at("image_size").get<int>();
    cfg.num_classes = c.at("num_classes").get<int>();
    cfg.c1 = c.at("c1").get<Index>();
    cfg.c2 = c.at("c2").get<Index>();
    cfg.c3 = c.at("c3").get<Index>();
    cfg.head_hidden = c.at("head_hidden").get<Index>();
    cfg.pooled = c.at("pooled").get<Index>();
    return cfg;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint index " + prefix + ".json: " + e.what());
  }
}

Tensor backbone_z3(Model& model, const Tensor& image) {
  TapeSession s(/*frozen=*/true);
  Var x = s.input(image.rank() == 3
                      ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                      : image);
  Backbone::Maps maps = model.backbone.forward(s, x);
  return maps.z3.value();
}

ScoredBoxes score_boxes(Model& model, const Tensor& z3, const std::vector<Box>& boxes) {
  ScoredBoxes out;
  out.boxes = boxes;
  if (boxes.empty()) {
    out.cls_probs = Tensor({0, static_cast<Index>(model.config.num_classes) + 1});
    out.box_deltas = Tensor({0, 4});
    return out;
  }
  TapeSession s(/*frozen=*/true);
  Var feat = s.input(z3);
  Var pooled = ops::roi_pool(feat, boxes, static_cast<int>(model.config.pooled),
                             static_cast<int>(model.config.pooled), model.feature_scale());
  Var flat = ops::reshape(pooled, {static_cast<Index>(boxes.size()), model.roi_feature_dim()});
  PredictionHead::Out pred = model.head.forward(s, flat);
  out.cls_probs = softmax_rows(pred.cls_logits.value());
  out.box_deltas = pred.box_deltas.value();
  return out;
}

std::vector<Detection> infer_image(Model& model, const Tensor& image,
                                   const InferConfig& cfg) {
  const Tensor z3 = backbone_z3(model, image);
  const std::vector<Box> candidates =
      dense_grid_boxes(model.config.image_size, cfg.grid_stride, cfg.grid_sizes);
  const ScoredBoxes scored = score_boxes(model, z3, candidates);
  const Index kp1 = scored.cls_probs.dim(1);
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < scored.boxes.size(); ++r) {
    int best = 0;
    double best_p = -1.0;
    for (Index k = 1; k < kp1; ++k) {
      const double p = scored.cls_probs[static_cast<Index>(r) * kp1 + k];
      if (p > best_p) {
        best_p = p;
        best = static_cast<int>(k);
      }
    }
    if (best_p <= cfg.score_threshold) continue;
    Box b = decode_offsets(scored.boxes[r],
                           scored.box_deltas.data() + static_cast<Index>(r) * 4);
    b = clamp_to_image(b, model.config.image_size);
    // valid() also rejects NaN coordinates from a diverged regressor; letting
    // one into the score sort would break its ordering.
    if (!b.valid()) continue;
    dets.push_back(Detection{b, best - 1, best_p});
  }
  return nms_per_class(std::move(dets), cfg.nms_iou);
}

}  // namespace da
