#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmf/analysis.hpp"
#include "cmf/training.hpp"

namespace cmf {

// Everything the stripped model keeps from the fixed support: the mean
// prior, the FiLM parameters derived from it, and the configuration hash
// binding them to the exact model they were computed with.
template <class S>
struct StoredAdaptation {
  Tensor<S> prior;
  FilmParams<S> film;
  std::string source;
  uint64_t config_hash = 0;
};

template <class S>
StoredAdaptation<S> precompute(const Model<S>& model, const FixedSupport& fixed) {
  if (fixed.images.size() == 0) fail("precompute: fixed support is empty");
  const Shape& s = fixed.images.shape();
  if (fixed.images.rank() != 4 || s[1] != model.cfg.image_channels ||
      s[2] != model.cfg.image_size || s[3] != model.cfg.image_size)
    fail("precompute: fixed support shape ", shape_str(s), " does not match model [",
         model.cfg.image_channels, ",", model.cfg.image_size, ",",
         model.cfg.image_size, "] images");
  StoredAdaptation<S> out;
  out.prior = encode_mean(model, fixed.images.template cast<S>());
  out.film = compute_film(model, out.prior);
  out.source = fixed.mode + ":" + fixed.source;
  out.config_hash = model.signature();
  return out;
}

// Backbone plus classifier generator plus one stored adaptation; the encoder
// and adaptation tensors are gone entirely.
template <class S>
struct DeployModel {
  Model<S> net;
  StoredAdaptation<S> stored;

  void save(Checkpoint& ck) const {
    net.save(ck);
    ck.put("deploy/prior", stored.prior);
    for (size_t b = 0; b < stored.film.scale.size(); ++b) {
      ck.put(cat("deploy/film/scale", b), stored.film.scale[b]);
      ck.put(cat("deploy/film/shift", b), stored.film.shift[b]);
    }
    ck.put("deploy/source", string_tensor<S>(stored.source));
    ck.put("deploy/config_hash", string_tensor<S>(cat(stored.config_hash)));
  }

  static DeployModel load(const Checkpoint& ck) {
    if (ck.keys_with_prefix("deploy/").empty())
      fail("checkpoint is a full training model, not a stripped deploy model");
    DeployModel dm;
    dm.net.cfg = Model<S>::config_from(ck);
    const Model<S> ref = Model<S>::init(dm.net.cfg, 0);
    for (const auto& [name, t] : ref.params) {
      const bool kept = name.rfind("backbone/", 0) == 0 || name.rfind("head/", 0) == 0;
      if (!kept) {
        if (ck.has(name)) fail("deploy checkpoint still contains '", name, "'");
        continue;
      }
      if (!ck.has(name)) fail("deploy checkpoint is missing tensor '", name, "'");
      dm.net.params[name] = ck.get<S>(name);
      if (dm.net.params[name].shape() != t.shape())
        fail("deploy checkpoint tensor '", name, "' has shape ",
             shape_str(dm.net.params[name].shape()), ", model expects ",
             shape_str(t.shape()));
    }
    dm.stored.prior = ck.get<S>("deploy/prior");
    for (int b = 0; b < dm.net.cfg.blocks(); ++b) {
      dm.stored.film.scale.push_back(ck.get<S>(cat("deploy/film/scale", b)));
      dm.stored.film.shift.push_back(ck.get<S>(cat("deploy/film/shift", b)));
    }
    dm.stored.film.check_against(dm.net.cfg);
    dm.stored.source = tensor_string(ck.get<S>("deploy/source"));
    dm.stored.config_hash = std::stoull(tensor_string(ck.get<S>("deploy/config_hash")));
    return dm;
  }

  bool operator==(const DeployModel& other) const {
    if (net.cfg.to_json() != other.net.cfg.to_json()) return false;
    auto eq = [](const auto& a, const auto& b) {
      return a.shape() == b.shape() &&
             std::equal(a.data(), a.data() + a.size(), b.data());
    };
    if (net.params.size() != other.net.params.size()) return false;
    for (const auto& [name, t] : net.params) {
      auto it = other.net.params.find(name);
      if (it == other.net.params.end() || !eq(t, it->second)) return false;
    }
    if (!eq(stored.prior, other.stored.prior)) return false;
    for (size_t b = 0; b < stored.film.scale.size(); ++b)
      if (!eq(stored.film.scale[b], other.stored.film.scale[b]) ||
          !eq(stored.film.shift[b], other.stored.film.shift[b]))
        return false;
    return stored.source == other.stored.source &&
           stored.config_hash == other.stored.config_hash;
  }
};

template <class S>
DeployModel<S> strip(const Model<S>& model, const StoredAdaptation<S>& stored) {
  if (stored.config_hash != model.signature())
    fail("strip: stored adaptation was computed for a different model");
  stored.film.check_against(model.cfg);
  DeployModel<S> dm;
  dm.net.cfg = model.cfg;
  for (const auto& [name, t] : model.params)
    if (name.rfind("backbone/", 0) == 0 || name.rfind("head/", 0) == 0)
      dm.net.params[name] = t;
  dm.stored = stored;
  return dm;
}

template <class S>
DeployModel<S> strip(const DeployModel<S>& dm, const StoredAdaptation<S>& stored) {
  if (stored.config_hash != dm.stored.config_hash)
    fail("strip: stored adaptation was computed for a different model");
  return dm;
}

// Inference against the stored adaptation. The classifier head still comes
// from the episode's own support, exactly as in the full pipeline.
template <class S>
EpisodeEval<S> eval_episode(const DeployModel<S>& dm, const Episode& ep) {
  return eval_episode(dm.net, ep, &dm.stored.film);
}

template <class S>
ParamReport param_report(const DeployModel<S>& dm) {
  return param_report(dm.net);
}

// Both sides run the fixed support they were given; differences therefore
// surface both in the FiLMed embeddings and in the heads built from them.
template <class S>
double equivalence_check(const Model<S>& full, const DeployModel<S>& dm,
                         const std::vector<Episode>& episodes,
                         const FixedSupport& fixed) {
  const FilmParams<S> film =
      film_for_support(full, fixed.images.template cast<S>());
  double max_diff = 0.0;
  for (const Episode& ep : episodes) {
    const EpisodeEval<S> a = eval_episode(full, ep, &film);
    const EpisodeEval<S> b = eval_episode(dm, ep);
    if (a.logits.shape() != b.logits.shape())
      fail("equivalence_check: logit shapes disagree");
    for (int64_t i = 0; i < a.logits.size(); ++i) {
      const double d = std::abs(static_cast<double>(a.logits[i]) -
                                static_cast<double>(b.logits[i]));
      if (d > max_diff) max_diff = d;
    }
  }
  return max_diff;
}

// Stage clock for the stripped model: the encoder and adaptation stages do
// not exist, so their times are structural zeros.
template <class S>
TimingReport timing_report(const DeployModel<S>& dm, const TensorF& targets) {
  using Clock = std::chrono::steady_clock;
  TimingReport r;
  const Tensor<S> tgt = targets.template cast<S>();
  const auto t0 = Clock::now();
  const Tensor<S> emb = backbone_forward(dm.net, tgt, dm.stored.film);
  const auto t1 = Clock::now();
  (void)emb;
  r.backbone_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return r;
}

}  // namespace cmf
