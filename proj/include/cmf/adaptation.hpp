#pragma once

#include "cmf/backbone.hpp"
#include "cmf/encoder.hpp"
#include "cmf/model.hpp"

namespace cmf {

// Maps the mean prior to per-block FiLM parameters through the adaptation
// dense layers. The scale path is parameterized as 1 + dense(prior) so the
// zero-initialized network starts at identity modulation.
template <class S>
std::vector<FilmSite> film_from_prior(NetBuilder<S>& nb, Var prior) {
  Graph<S>& g = nb.g;
  if (g.value(prior).size() != nb.m.cfg.prior_dim)
    fail("film_from_prior: prior length ", g.value(prior).size(), ", expected ",
         nb.m.cfg.prior_dim);
  Var row = g.reshape(prior, {1, nb.m.cfg.prior_dim});
  std::vector<FilmSite> sites;
  for (int b = 0; b < nb.m.cfg.blocks(); ++b) {
    const int c = nb.m.cfg.backbone_channels[static_cast<size_t>(b)];
    Var s = g.dense(row, nb.weight(cat("adapt/block", b, "/scale_w")),
                    nb.weight(cat("adapt/block", b, "/scale_b")));
    Var t = g.dense(row, nb.weight(cat("adapt/block", b, "/shift_w")),
                    nb.weight(cat("adapt/block", b, "/shift_b")));
    sites.push_back({g.reshape(g.add_const(s, 1.0), {c}), g.reshape(t, {c})});
  }
  return sites;
}

// Non-graph wrapper matching the FilmParams value type.
template <class S>
FilmParams<S> compute_film(const Model<S>& model, const Tensor<S>& prior) {
  if (prior.shape() != Shape{model.cfg.prior_dim})
    fail("compute_film: prior shape ", shape_str(prior.shape()), ", expected [",
         model.cfg.prior_dim, "]");
  Graph<S> g;
  NetBuilder<S> nb(g, model, {});
  auto sites = film_from_prior(nb, g.input("prior", prior));
  FilmParams<S> out;
  for (const FilmSite& site : sites) {
    out.scale.push_back(g.value(site.scale));
    out.shift.push_back(g.value(site.shift));
  }
  return out;
}

// Support-conditioned linear head. Per-class prototypes are pushed through
// the residual generator psi: W = proto + out(relu(hidden(proto))), and the
// bias path produces one scalar per class the same way.
template <class S>
std::pair<Var, Var> build_head_vars(NetBuilder<S>& nb, Var support_emb,
                                    const std::vector<int>& labels, int way) {
  Graph<S>& g = nb.g;
  Var protos = g.class_mean(support_emb, labels, way);
  Var hw = g.relu(g.dense(protos, nb.weight("head/w/hidden_w"), nb.weight("head/w/hidden_b")));
  Var dw = g.dense(hw, nb.weight("head/w/out_w"), nb.weight("head/w/out_b"));
  Var w = g.add(protos, dw);
  Var hb = g.relu(g.dense(protos, nb.weight("head/b/hidden_w"), nb.weight("head/b/hidden_b")));
  Var b = g.reshape(g.dense(hb, nb.weight("head/b/out_w"), nb.weight("head/b/out_b")), {way});
  return {w, b};
}

// ClassifierHead as a value: W [way x D_e], b [way], plus the class order
// the rows follow.
template <class S>
struct HeadParams {
  Tensor<S> w;
  Tensor<S> b;
  std::vector<int> class_order;
};

// Embeddings are L2-normalized before prototypes and logits.
template <class S>
HeadParams<S> build_classifier(const Model<S>& model, const Tensor<S>& support_emb,
                               const std::vector<int>& labels, int way) {
  if (support_emb.rank() != 2 || support_emb.dim(1) != model.cfg.embedding_dim)
    fail("build_classifier: embeddings ", shape_str(support_emb.shape()),
         ", expected [S,", model.cfg.embedding_dim, "]");
  Graph<S> g;
  NetBuilder<S> nb(g, model, {});
  Var emb = g.l2_normalize_rows(g.input("emb", support_emb));
  auto [w, b] = build_head_vars(nb, emb, labels, way);
  HeadParams<S> head;
  head.w = g.value(w);
  head.b = g.value(b);
  head.class_order.resize(static_cast<size_t>(way));
  for (int c = 0; c < way; ++c) head.class_order[static_cast<size_t>(c)] = c;
  return head;
}

// logits = normalized-embeddings . W^T + b; argmax ties break toward the
// lowest class index.
template <class S>
Tensor<S> predict(const Model<S>& model, const Tensor<S>& target_images,
                  const FilmParams<S>& film, const HeadParams<S>& head) {
  Tensor<S> emb = backbone_forward(model, target_images, film);
  Graph<S> g;
  Var logits = g.dense(g.l2_normalize_rows(g.input("emb", emb)),
                       g.input("w", head.w), g.input("b", head.b));
  return g.value(logits);
}

template <class S>
int argmax_row(const Tensor<S>& logits, int64_t row) {
  const int64_t c = logits.dim(1);
  int best = 0;
  for (int64_t j = 1; j < c; ++j)
    if (logits.at2(row, j) > logits.at2(row, best)) best = static_cast<int>(j);
  return best;
}

}  // namespace cmf
