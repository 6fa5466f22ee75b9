#pragma once

#include "cmf/model.hpp"

namespace cmf {

// Per-sample attention over one feature map: global spatial max pool, a
// squeeze dense layer to C/4, relu, an excite dense layer back to C. No
// output nonlinearity unless the model's attention_gate says sigmoid.
template <class S>
Var attention_vector(NetBuilder<S>& nb, Var feature_map, int layer) {
  Graph<S>& g = nb.g;
  Var pooled = g.global_max_pool(feature_map);
  Var squeezed = g.relu(g.dense(pooled, nb.weight(cat("encoder/attn", layer, "/fc1_w")),
                                nb.weight(cat("encoder/attn", layer, "/fc1_b"))));
  Var sf = g.dense(squeezed, nb.weight(cat("encoder/attn", layer, "/fc2_w")),
                   nb.weight(cat("encoder/attn", layer, "/fc2_b")));
  if (nb.m.cfg.attention_gate == "sigmoid") sf = g.sigmoid(sf);
  return sf;
}

// Mean over the sample axis: [N,C] -> [C].
template <class S>
Tensor<S> fuse_salient(const Tensor<S>& sf) {
  if (sf.rank() != 2) fail("fuse_salient: expects [N,C], got ", shape_str(sf.shape()));
  if (sf.dim(0) < 1) fail("fuse_salient: empty support set");
  Graph<S> g;
  return g.value(g.set_mean(g.input("sf", sf)));
}

// Convolution whose output channel c is scaled by fused[c].
template <class S>
Tensor<S> cmf_layer(const Tensor<S>& input, const Tensor<S>& kernels,
                    const Tensor<S>& fused, int stride = 1, int pad = 0) {
  if (fused.rank() != 1 || fused.dim(0) != kernels.dim(0))
    fail("cmf_layer: fused length ", shape_str(fused.shape()),
         " must match kernel output channels ", kernels.dim(0));
  Graph<S> g;
  Var x = g.input("x", input);
  Var k = g.input("k", kernels);
  Var f = g.input("f", fused);
  return g.value(g.channel_scale(g.conv2d(x, k, stride, pad), f));
}

// The full set-encoder graph: a conv stack over the support samples ending
// in a global pool and a mean over the set axis. The cmf variant rescales
// every layer's output channels by the fused attention vector.
template <class S>
Var encoder_prior(NetBuilder<S>& nb, Var images) {
  Graph<S>& g = nb.g;
  Var x = images;
  for (int l = 0; l < nb.m.cfg.encoder_layers(); ++l) {
    Var z = g.conv2d(x, nb.weight(cat("encoder/conv", l)), 1, 1);
    Var zb = g.channel_shift(z, nb.weight(cat("encoder/bias", l)));
    if (nb.m.cfg.is_cmf()) {
      Var sf = attention_vector(nb, zb, l);
      Var fused = g.set_mean(sf);
      zb = g.channel_scale(zb, fused);
    }
    x = g.max_pool2(g.relu(zb));
  }
  Var feat = g.global_max_pool(x);
  return g.set_mean(feat);
}

// Non-graph convenience wrapper: support images -> mean prior [D_r].
template <class S>
Tensor<S> encode_mean(const Model<S>& model, const Tensor<S>& support) {
  if (support.rank() != 4) fail("encode_mean: expects [S,C,H,W], got ", shape_str(support.shape()));
  if (support.dim(0) < 1) fail("encode_mean: empty support set");
  Graph<S> g;
  NetBuilder<S> nb(g, model, {});
  Var images = g.input("images", support);
  return g.value(encoder_prior(nb, images));
}

}  // namespace cmf
