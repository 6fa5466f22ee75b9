#pragma once

#include <optional>

#include "cmf/model.hpp"

namespace cmf {

struct FilmSite {
  Var scale;
  Var shift;
};

// FiLM parameter values outside any graph, one scale/shift pair per block.
template <class S>
struct FilmParams {
  std::vector<Tensor<S>> scale;
  std::vector<Tensor<S>> shift;

  static FilmParams identity(const ModelConfig& cfg) {
    FilmParams f;
    for (int c : cfg.backbone_channels) {
      f.scale.push_back(Tensor<S>::ones({c}));
      f.shift.push_back(Tensor<S>::zeros({c}));
    }
    return f;
  }

  void check_against(const ModelConfig& cfg) const {
    if (static_cast<int>(scale.size()) != cfg.blocks() ||
        static_cast<int>(shift.size()) != cfg.blocks())
      fail("film: ", scale.size(), " scale / ", shift.size(),
           " shift vectors for ", cfg.blocks(), " blocks");
    for (int b = 0; b < cfg.blocks(); ++b) {
      const int c = cfg.backbone_channels[static_cast<size_t>(b)];
      if (scale[static_cast<size_t>(b)].shape() != Shape{c} ||
          shift[static_cast<size_t>(b)].shape() != Shape{c})
        fail("film: block ", b, " vectors must have length ", c);
    }
  }
};

// The trunk: per block conv3x3 (pad 1), bias, the FiLM site, relu, 2x2 max
// pool; then a global max pool to the embedding. Passing no film skips the
// FiLM sites, which equals identity modulation exactly.
template <class S>
Var backbone_embed(NetBuilder<S>& nb, Var images,
                   const std::vector<FilmSite>* film = nullptr) {
  Graph<S>& g = nb.g;
  if (film && static_cast<int>(film->size()) != nb.m.cfg.blocks())
    fail("backbone: ", film->size(), " film sites for ", nb.m.cfg.blocks(), " blocks");
  Var x = images;
  for (int b = 0; b < nb.m.cfg.blocks(); ++b) {
    Var z = g.conv2d(x, nb.weight(cat("backbone/conv", b)), 1, 1);
    Var zb = g.channel_shift(z, nb.weight(cat("backbone/bias", b)));
    if (film) {
      const FilmSite& site = (*film)[static_cast<size_t>(b)];
      zb = g.channel_shift(g.channel_scale(zb, site.scale), site.shift);
    }
    x = g.max_pool2(g.relu(zb));
  }
  return g.global_max_pool(x);
}

// Non-graph convenience wrapper: images -> [N, D_e] embeddings.
template <class S>
Tensor<S> backbone_forward(const Model<S>& model, const Tensor<S>& images,
                           const FilmParams<S>& film) {
  film.check_against(model.cfg);
  Graph<S> g;
  NetBuilder<S> nb(g, model, {});
  Var x = g.input("images", images);
  std::vector<FilmSite> sites;
  for (int b = 0; b < model.cfg.blocks(); ++b)
    sites.push_back({g.constant(film.scale[static_cast<size_t>(b)]),
                     g.constant(film.shift[static_cast<size_t>(b)])});
  return g.value(backbone_embed(nb, x, &sites));
}

}  // namespace cmf
