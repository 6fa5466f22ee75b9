#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cmf/checkpoint.hpp"
#include "cmf/config.hpp"
#include "cmf/graph.hpp"
#include "cmf/rng.hpp"
#include "cmf/tensor.hpp"

namespace cmf {

// Architecture description shared by every stage. Serialized into each
// checkpoint under "meta/config_json" and hashed to bind stored adaptations
// to the model they came from.
struct ModelConfig {
  int image_size = 32;
  int image_channels = 1;
  std::vector<int> backbone_channels{32, 32, 64, 64};
  int embedding_dim = 64;
  std::vector<int> encoder_channels{32, 32, 64};
  int prior_dim = 64;
  int head_hidden = 64;
  std::string variant = "cmf";
  std::string attention_gate = "none";

  bool is_cmf() const { return variant == "cmf"; }
  int blocks() const { return static_cast<int>(backbone_channels.size()); }
  int encoder_layers() const { return static_cast<int>(encoder_channels.size()); }

  static ModelConfig from_run(const RunConfig& run) {
    ModelConfig m;
    m.image_size = run.data.size;
    m.image_channels = run.data.channels;
    m.backbone_channels = run.backbone.channels;
    m.embedding_dim = run.backbone.embedding_dim;
    m.encoder_channels = run.encoder.channels;
    m.prior_dim = run.encoder.prior_dim;
    m.head_hidden = run.adaptation.head_hidden;
    m.variant = run.training.variant;
    m.attention_gate = run.encoder.attention_gate;
    m.validate();
    return m;
  }

  void validate() const {
    if (backbone_channels.empty() || encoder_channels.empty())
      fail_schema("model: empty channel list");
    if (embedding_dim != backbone_channels.back())
      fail_schema("model: embedding_dim ", embedding_dim,
                  " must equal the last backbone channel count ",
                  backbone_channels.back());
    if (prior_dim != encoder_channels.back())
      fail_schema("model: prior_dim ", prior_dim,
                  " must equal the last encoder channel count ",
                  encoder_channels.back());
    if (variant != "plain" && variant != "cmf")
      fail_schema("model: unknown variant '", variant, "'");
    if (is_cmf())
      for (int c : encoder_channels)
        if (c % 4 != 0)
          fail_schema("model: cmf attention needs channels divisible by 4, got ", c);
    int span = 1;
    for (size_t i = 0; i < backbone_channels.size(); ++i) span *= 2;
    if (image_size % span != 0 || image_size / span < 1)
      fail_schema("model: image size ", image_size, " not divisible by ", span,
                  " across ", blocks(), " backbone blocks");
    int espan = 1;
    for (size_t i = 0; i < encoder_channels.size(); ++i) espan *= 2;
    if (image_size % espan != 0)
      fail_schema("model: image size ", image_size, " not divisible by ", espan,
                  " across ", encoder_layers(), " encoder layers");
    if (head_hidden < 1) fail_schema("model: head_hidden must be positive");
  }

  Json to_json() const {
    Json j;
    j["image_size"] = image_size;
    j["image_channels"] = image_channels;
    j["backbone_channels"] = backbone_channels;
    j["embedding_dim"] = embedding_dim;
    j["encoder_channels"] = encoder_channels;
    j["prior_dim"] = prior_dim;
    j["head_hidden"] = head_hidden;
    j["variant"] = variant;
    j["attention_gate"] = attention_gate;
    return j;
  }

  static ModelConfig from_json(const Json& j) {
    ModelConfig m;
    m.image_size = j.at("image_size").get<int>();
    m.image_channels = j.at("image_channels").get<int>();
    m.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
    m.embedding_dim = j.at("embedding_dim").get<int>();
    m.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    m.prior_dim = j.at("prior_dim").get<int>();
    m.head_hidden = j.at("head_hidden").get<int>();
    m.variant = j.at("variant").get<std::string>();
    m.attention_gate = j.at("attention_gate").get<std::string>();
    m.validate();
    return m;
  }

  uint64_t signature() const { return hash_str(to_json().dump()); }
};

// The full weight set, keyed by checkpoint-namespace names. Which subsets
// act as trainable leaves is decided per graph by the caller.
template <class S>
struct Model {
  ModelConfig cfg;
  std::map<std::string, Tensor<S>> params;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    auto conv = [&](const std::string& name, int co, int ci, int k) {
      Rng rng(mix_seed({seed, hash_str(name)}));
      m.params[name] = Tensor<S>::kaiming({co, ci, k, k}, int64_t(ci) * k * k, rng);
    };
    auto dense_w = [&](const std::string& name, int out, int in) {
      Rng rng(mix_seed({seed, hash_str(name)}));
      m.params[name] = Tensor<S>::kaiming({out, in}, in, rng);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
      m.params[name] = Tensor<S>::zeros(std::move(shape));
    };

    int ci = cfg.image_channels;
    for (int b = 0; b < cfg.blocks(); ++b) {
      const int co = cfg.backbone_channels[static_cast<size_t>(b)];
      conv(cat("backbone/conv", b), co, ci, 3);
      zeros(cat("backbone/bias", b), {co});
      ci = co;
    }

    ci = cfg.image_channels;
    for (int l = 0; l < cfg.encoder_layers(); ++l) {
      const int co = cfg.encoder_channels[static_cast<size_t>(l)];
      conv(cat("encoder/conv", l), co, ci, 3);
      zeros(cat("encoder/bias", l), {co});
      if (cfg.is_cmf()) {
        dense_w(cat("encoder/attn", l, "/fc1_w"), co / 4, co);
        zeros(cat("encoder/attn", l, "/fc1_b"), {co / 4});
        dense_w(cat("encoder/attn", l, "/fc2_w"), co, co / 4);
        m.params[cat("encoder/attn", l, "/fc2_b")] = Tensor<S>::ones({co});
      }
      ci = co;
    }

    for (int b = 0; b < cfg.blocks(); ++b) {
      const int c = cfg.backbone_channels[static_cast<size_t>(b)];
      zeros(cat("adapt/block", b, "/scale_w"), {c, cfg.prior_dim});
      zeros(cat("adapt/block", b, "/scale_b"), {c});
      zeros(cat("adapt/block", b, "/shift_w"), {c, cfg.prior_dim});
      zeros(cat("adapt/block", b, "/shift_b"), {c});
    }

    dense_w("head/w/hidden_w", cfg.head_hidden, cfg.embedding_dim);
    zeros("head/w/hidden_b", {cfg.head_hidden});
    zeros("head/w/out_w", {cfg.embedding_dim, cfg.head_hidden});
    zeros("head/w/out_b", {cfg.embedding_dim});
    dense_w("head/b/hidden_w", cfg.head_hidden, cfg.embedding_dim);
    zeros("head/b/hidden_b", {cfg.head_hidden});
    zeros("head/b/out_w", {1, cfg.head_hidden});
    zeros("head/b/out_b", {1});
    return m;
  }

  const Tensor<S>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) fail("model: no parameter named '", name, "'");
    return it->second;
  }

  // Covers the architecture and every weight, so the same config retrained
  // with other data or seeds hashes differently.
  uint64_t signature() const {
    uint64_t h = cfg.signature();
    for (const auto& [name, t] : params)
      h = mix_seed({h, hash_str(name),
                    hash_bytes(t.data(), static_cast<size_t>(t.size()) * sizeof(S))});
    return h;
  }

  int64_t count_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, t] : params)
      if (name.rfind(prefix, 0) == 0) n += t.size();
    return n;
  }

  void save(Checkpoint& ck) const {
    for (const auto& [name, t] : params) ck.put(name, t);
    ck.put("meta/config_json", string_tensor<S>(cfg.to_json().dump()));
  }

  static ModelConfig config_from(const Checkpoint& ck) {
    if (!ck.has("meta/config_json")) fail("checkpoint carries no model config");
    return ModelConfig::from_json(Json::parse(tensor_string(ck.get<S>("meta/config_json"))));
  }

  static Model load(const Checkpoint& ck) {
    Model m;
    m.cfg = config_from(ck);
    if (!ck.keys_with_prefix("deploy/").empty())
      fail("checkpoint is a stripped deploy model; it cannot load into the "
           "training path");
    Model ref = init(m.cfg, 0);
    for (const auto& [name, t] : ref.params) {
      if (!ck.has(name)) fail("checkpoint is missing tensor '", name, "'");
      m.params[name] = ck.get<S>(name);
      if (m.params[name].shape() != t.shape())
        fail("checkpoint tensor '", name, "' has shape ",
             shape_str(m.params[name].shape()), ", model expects ",
             shape_str(t.shape()));
    }
    return m;
  }
};

// Adds model weights to a graph as leaves, each exactly once. Names whose
// prefix is listed in trainable_prefixes become trainable parameters; the
// rest enter as plain inputs.
template <class S>
class NetBuilder {
 public:
  NetBuilder(Graph<S>& graph, const Model<S>& model,
             std::set<std::string> trainable_prefixes)
      : g(graph), m(model), train_(std::move(trainable_prefixes)) {}

  Graph<S>& g;
  const Model<S>& m;

  Var weight(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const Tensor<S>& value = m.at(name);
    bool trainable = false;
    for (const auto& p : train_)
      if (name.rfind(p, 0) == 0) trainable = true;
    Var v = trainable ? g.parameter(name, value) : g.input(name, value);
    cache_[name] = v;
    return v;
  }

 private:
  std::set<std::string> train_;
  std::map<std::string, Var> cache_;
};

struct ParamReport {
  int64_t backbone = 0;
  int64_t encoder = 0;
  int64_t adaptation = 0;
  int64_t head = 0;
  int64_t total() const { return backbone + encoder + adaptation + head; }
  double strippable_fraction() const {
    const int64_t t = total();
    return t == 0 ? 0.0 : static_cast<double>(encoder + adaptation) / static_cast<double>(t);
  }
};

template <class S>
ParamReport param_report(const Model<S>& m) {
  ParamReport r;
  r.backbone = m.count_prefix("backbone/");
  r.encoder = m.count_prefix("encoder/");
  r.adaptation = m.count_prefix("adapt/");
  r.head = m.count_prefix("head/");
  return r;
}

}  // namespace cmf
