#include <doctest.h>

#include "cmf/adaptation.hpp"
#include "cmf/backbone.hpp"
#include "cmf/encoder.hpp"
#include "cmf/model.hpp"

#include <filesystem>

#include "oracles.hpp"

using namespace cmf;

namespace {

ModelConfig desk_config(const std::string& variant) {
  ModelConfig cfg;
  cfg.variant = variant;
  return cfg;
}

// One-block toy model small enough for hand probing.
ModelConfig tiny_config(const std::string& variant) {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.backbone_channels = {4};
  cfg.embedding_dim = 4;
  cfg.encoder_channels = {4};
  cfg.prior_dim = 4;
  cfg.head_hidden = 4;
  cfg.variant = variant;
  return cfg;
}

TensorF noise_images(int64_t n, int64_t c, int64_t hw, uint64_t seed) {
  Rng rng(seed);
  return TensorF::uniform({n, c, hw, hw}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig bad_embed = desk_config("cmf");
  bad_embed.embedding_dim = 32;
  CHECK_THROWS_AS(bad_embed.validate(), SchemaError);

  ModelConfig bad_attn = desk_config("cmf");
  bad_attn.encoder_channels = {30, 32, 64};
  bad_attn.prior_dim = 64;
  CHECK_THROWS_AS(bad_attn.validate(), SchemaError);

  ModelConfig plain = desk_config("plain");
  plain.encoder_channels = {30, 32, 64};
  plain.prior_dim = 64;
  plain.validate();

  ModelConfig bad_size = desk_config("cmf");
  bad_size.image_size = 24;
  CHECK_THROWS_AS(bad_size.validate(), SchemaError);

  ModelConfig bad_variant = desk_config("cmf");
  bad_variant.variant = "fancy";
  CHECK_THROWS_AS(bad_variant.validate(), SchemaError);
}

TEST_CASE("parameter counts match hand-computed sums") {
  auto cmf_model = Model<float>::init(desk_config("cmf"), 1);
  ParamReport r = param_report(cmf_model);
  CHECK(r.backbone == 64992);
  CHECK(r.encoder == 31296);
  CHECK(r.adaptation == 24960);
  CHECK(r.head == 12545);
  CHECK(r.total() == 133793);
  CHECK(r.strippable_fraction() > 0.30);

  auto plain_model = Model<float>::init(desk_config("plain"), 1);
  ParamReport p = param_report(plain_model);
  CHECK(p.encoder == 28064);
  CHECK(p.backbone == r.backbone);
  CHECK(p.adaptation == r.adaptation);
  CHECK(p.head == r.head);
  CHECK(p.strippable_fraction() > 0.30);
}

TEST_CASE("init determinism and config round trip") {
  auto a = Model<float>::init(desk_config("cmf"), 42);
  auto b = Model<float>::init(desk_config("cmf"), 42);
  for (const auto& [name, t] : a.params) CHECK(bit_equal(t, b.params.at(name)));
  auto c = Model<float>::init(desk_config("cmf"), 43);
  CHECK_FALSE(bit_equal(a.params.at("backbone/conv0"), c.params.at("backbone/conv0")));

  const std::string path =
      (std::filesystem::temp_directory_path() / "model_rt.bin").string();
  Checkpoint ck;
  a.save(ck);
  ck.save(path);
  auto back = Model<float>::load(Checkpoint::load(path));
  CHECK(back.cfg.to_json() == a.cfg.to_json());
  for (const auto& [name, t] : a.params) CHECK(bit_equal(t, back.params.at(name)));
  std::remove(path.c_str());

  Checkpoint incomplete;
  a.save(incomplete);
  incomplete.erase_prefix("head/");
  CHECK_THROWS_AS(Model<float>::load(incomplete), Error);
}

TEST_CASE("attention vector agrees with hand-computed dense evaluation") {
  ModelConfig cfg = tiny_config("cmf");
  cfg.backbone_channels = {8};
  cfg.embedding_dim = 8;
  cfg.encoder_channels = {8};
  cfg.prior_dim = 8;
  auto m = Model<float>::init(cfg, 3);

  TensorF fm = TensorF::zeros({3, 8, 2, 2});
  Rng rng(4);
  for (int64_t n = 0; n < 3; ++n)
    for (int64_t c = 0; c < 8; ++c) {
      const float v = static_cast<float>(rng.uniform(0.1, 1.0));
      for (int64_t p = 0; p < 4; ++p) fm[n * 32 + c * 4 + p] = v;
    }

  Graph<float> g;
  NetBuilder<float> nb(g, m, {});
  Var sf = attention_vector(nb, g.input("fm", fm), 0);
  CHECK(g.value(sf).shape() == Shape{3, 8});

  const auto& fc1w = m.at("encoder/attn0/fc1_w");
  const auto& fc1b = m.at("encoder/attn0/fc1_b");
  const auto& fc2w = m.at("encoder/attn0/fc2_w");
  const auto& fc2b = m.at("encoder/attn0/fc2_b");
  for (int64_t n = 0; n < 3; ++n) {
    std::vector<float> pooled(8), hidden(2);
    for (int64_t c = 0; c < 8; ++c) pooled[static_cast<size_t>(c)] = fm[n * 32 + c * 4];
    for (int64_t h = 0; h < 2; ++h) {
      double acc = fc1b[h];
      for (int64_t c = 0; c < 8; ++c) acc += fc1w.at2(h, c) * pooled[static_cast<size_t>(c)];
      hidden[static_cast<size_t>(h)] = std::max(0.0f, static_cast<float>(acc));
    }
    for (int64_t c = 0; c < 8; ++c) {
      double acc = fc2b[c];
      for (int64_t h = 0; h < 2; ++h) acc += fc2w.at2(c, h) * hidden[static_cast<size_t>(h)];
      CHECK(g.value(sf).at2(n, c) == doctest::Approx(acc).epsilon(1e-6));
    }
  }

  TensorF twin = TensorF::zeros({2, 8, 2, 2});
  std::copy(fm.data(), fm.data() + 32, twin.data());
  std::copy(fm.data(), fm.data() + 32, twin.data() + 32);
  Graph<float> g2;
  NetBuilder<float> nb2(g2, m, {});
  Var sf2 = attention_vector(nb2, g2.input("fm", twin), 0);
  for (int64_t c = 0; c < 8; ++c)
    CHECK(g2.value(sf2).at2(0, c) == g2.value(sf2).at2(1, c));
}

TEST_CASE("fuse_salient") {
  TensorF sf({2, 2}, {1, 2, 3, 4});
  TensorF fused = fuse_salient(sf);
  CHECK(fused[0] == doctest::Approx(2.0));
  CHECK(fused[1] == doctest::Approx(3.0));

  TensorF one({1, 3}, {5, 6, 7});
  CHECK(max_abs_diff(fuse_salient(one), one.reshaped({3})) == 0.0);

  Rng rng(5);
  TensorF many = TensorF::uniform({6, 4}, rng, -1, 1);
  TensorF perm = TensorF::zeros({6, 4});
  std::vector<int64_t> order{3, 1, 5, 0, 4, 2};
  for (int64_t i = 0; i < 6; ++i)
    std::copy(many.data() + order[static_cast<size_t>(i)] * 4,
              many.data() + (order[static_cast<size_t>(i)] + 1) * 4, perm.data() + i * 4);
  CHECK(max_abs_diff(fuse_salient(many), fuse_salient(perm)) < 1e-6);
}

TEST_CASE("cmf_layer identity, zero, and the factorization identity") {
  Rng rng(6);
  TensorF x = TensorF::uniform({2, 3, 5, 5}, rng, -1, 1);
  TensorF k = TensorF::uniform({4, 3, 3, 3}, rng, -1, 1);

  TensorF plain = cmf_layer(x, k, TensorF::ones({4}), 1, 1);
  Graph<float> g;
  TensorF conv = g.value(g.conv2d(g.input("x", x), g.input("k", k), 1, 1));
  CHECK(max_abs_diff(plain, conv) == 0.0);

  TensorF zeroed = cmf_layer(x, k, TensorF::zeros({4}), 1, 1);
  CHECK(zeroed.vec().cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(cmf_layer(x, k, TensorF::ones({5}), 1, 1), Error);

  // scaling the kernels first vs scaling the conv outputs
  for (int trial = 0; trial < 100; ++trial) {
    Rng trng(static_cast<uint64_t>(100 + trial));
    const int64_t n = 1 + trng.uniform_int(3), ci = 1 + trng.uniform_int(4);
    const int64_t co = 1 + trng.uniform_int(6), hw = 3 + trng.uniform_int(6);
    const int64_t ks = 1 + 2 * trng.uniform_int(2);
    TensorF xs = TensorF::uniform({n, ci, hw, hw}, trng, -1, 1);
    TensorF kt = TensorF::uniform({co, ci, ks, ks}, trng, -1, 1);
    TensorF fused = TensorF::uniform({co}, trng, -2, 2);
    TensorF scale_after = cmf_layer(xs, kt, fused, 1, static_cast<int>(ks / 2));
    TensorF kscaled = kt;
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t j = 0; j < ci * ks * ks; ++j) kscaled[oc * ci * ks * ks + j] *= fused[oc];
    Graph<float> gg;
    TensorF scale_first = gg.value(gg.conv2d(gg.input("x", xs), gg.input("k", kscaled),
                                             1, static_cast<int>(ks / 2)));
    const double magnitude =
        std::max({1.0, static_cast<double>(scale_after.vec().cwiseAbs().maxCoeff()),
                  static_cast<double>(scale_first.vec().cwiseAbs().maxCoeff())});
    CHECK(max_abs_diff(scale_after, scale_first) < 1e-6 * magnitude);
  }

  for (int trial = 0; trial < 20; ++trial) {
    Rng trng(static_cast<uint64_t>(500 + trial));
    TensorD xs = TensorD::uniform({2, 3, 6, 6}, trng, -1, 1);
    TensorD kt = TensorD::uniform({4, 3, 3, 3}, trng, -1, 1);
    TensorD fused = TensorD::uniform({4}, trng, -2, 2);
    TensorD scale_after = cmf_layer(xs, kt, fused, 1, 1);
    TensorD kscaled = kt;
    for (int64_t oc = 0; oc < 4; ++oc)
      for (int64_t j = 0; j < 27; ++j) kscaled[oc * 27 + j] *= fused[oc];
    Graph<double> gg;
    TensorD scale_first =
        gg.value(gg.conv2d(gg.input("x", xs), gg.input("k", kscaled), 1, 1));
    CHECK(max_abs_diff(scale_after, scale_first) < 1e-12);
  }
}

TEST_CASE("encode_mean: single sample, permutation, per-sample oracle") {
  auto plain = Model<float>::init(desk_config("plain"), 7);
  TensorF support = noise_images(5, 1, 32, 8);

  TensorF prior = encode_mean(plain, support);
  CHECK(prior.shape() == Shape{64});

  // plain variant equals the per-sample forward loop + mean
  TensorD acc = TensorD::zeros({64});
  for (int64_t s = 0; s < 5; ++s) {
    TensorF one = TensorF::zeros({1, 1, 32, 32});
    std::copy(support.data() + s * 1024, support.data() + (s + 1) * 1024, one.data());
    TensorF e = encode_mean(plain, one);
    for (int64_t j = 0; j < 64; ++j) acc[j] += static_cast<double>(e[j]);
  }
  for (int64_t j = 0; j < 64; ++j)
    CHECK(prior[j] == doctest::Approx(acc[j] / 5.0).epsilon(1e-5));

  // single sample: prior equals that sample's pooled embedding
  TensorF one = TensorF::zeros({1, 1, 32, 32});
  std::copy(support.data(), support.data() + 1024, one.data());
  TensorF single = encode_mean(plain, one);
  CHECK(single.shape() == Shape{64});

  auto check_permutation = [&](const Model<float>& m) {
    TensorF perm = TensorF::zeros({5, 1, 32, 32});
    std::vector<int64_t> order{4, 2, 0, 3, 1};
    for (int64_t i = 0; i < 5; ++i)
      std::copy(support.data() + order[static_cast<size_t>(i)] * 1024,
                support.data() + (order[static_cast<size_t>(i)] + 1) * 1024,
                perm.data() + i * 1024);
    CHECK(max_abs_diff(encode_mean(m, support), encode_mean(m, perm)) < 1e-6);
  };
  check_permutation(plain);
  auto cmf_model = Model<float>::init(desk_config("cmf"), 7);
  check_permutation(cmf_model);

  // random-matrix admissibility
  TensorF noise = noise_images(10, 1, 32, 9);
  TensorF noise_prior = encode_mean(cmf_model, noise);
  CHECK(noise_prior.all_finite());

  CHECK_THROWS_AS(encode_mean(plain, TensorF::zeros({4, 32, 32})), Error);
}

TEST_CASE("cmf and plain encoders differ only by attention wiring") {
  // force the fused vector to all-ones through the attention zero weights
  ModelConfig cfg = desk_config("cmf");
  auto m = Model<float>::init(cfg, 11);
  for (int l = 0; l < 3; ++l) {
    m.params[cat("encoder/attn", l, "/fc1_w")].vec().setZero();
    m.params[cat("encoder/attn", l, "/fc1_b")].vec().setZero();
    m.params[cat("encoder/attn", l, "/fc2_w")].vec().setZero();
    m.params[cat("encoder/attn", l, "/fc2_b")].vec().setOnes();
  }
  Model<float> plain;
  ModelConfig pcfg = desk_config("plain");
  plain = Model<float>::init(pcfg, 11);
  for (int l = 0; l < 3; ++l) {
    plain.params[cat("encoder/conv", l)] = m.params[cat("encoder/conv", l)];
    plain.params[cat("encoder/bias", l)] = m.params[cat("encoder/bias", l)];
  }
  TensorF support = noise_images(4, 1, 32, 12);
  CHECK(max_abs_diff(encode_mean(m, support), encode_mean(plain, support)) < 1e-6);
}

TEST_CASE("backbone film sites") {
  auto m = Model<float>::init(desk_config("cmf"), 13);
  TensorF images = noise_images(3, 1, 32, 14);

  // identity film equals the film-free forward pass
  auto identity = FilmParams<float>::identity(m.cfg);
  TensorF with_film = backbone_forward(m, images, identity);
  Graph<float> g;
  NetBuilder<float> nb(g, m, {});
  TensorF bare = g.value(backbone_embed(nb, g.input("images", images), nullptr));
  CHECK(max_abs_diff(with_film, bare) < 1e-6);
  CHECK(with_film.shape() == Shape{3, 64});

  // zero scale and shift at the final block kills the embedding
  auto film = FilmParams<float>::identity(m.cfg);
  film.scale[3].vec().setZero();
  TensorF dead = backbone_forward(m, images, film);
  CHECK(dead.vec().cwiseAbs().maxCoeff() == 0.0);

  // film vector length mismatch
  auto bad = FilmParams<float>::identity(m.cfg);
  bad.scale[1] = TensorF::ones({16});
  CHECK_THROWS_AS(backbone_forward(m, images, bad), Error);
}

TEST_CASE("doubling film scale doubles the block output exactly") {
  auto m = Model<float>::init(tiny_config("plain"), 15);
  TensorF images = noise_images(2, 1, 8, 16);
  auto film = FilmParams<float>::identity(m.cfg);
  Rng rng(17);
  film.scale[0] = TensorF::uniform({4}, rng, 0.2, 1.0);
  TensorF emb = backbone_forward(m, images, film);
  film.scale[0].vec() *= 2.0f;
  TensorF emb2 = backbone_forward(m, images, film);
  TensorF doubled = emb;
  doubled.vec() *= 2.0f;
  CHECK(max_abs_diff(emb2, doubled) == 0.0);
}

TEST_CASE("film_from_prior identity at zero init and linearity in the prior") {
  auto m = Model<float>::init(desk_config("cmf"), 18);
  Rng rng(19);
  TensorF prior = TensorF::uniform({64}, rng, -1, 1);
  auto film = compute_film(m, prior);
  for (int b = 0; b < 4; ++b) {
    CHECK(max_abs_diff(film.scale[static_cast<size_t>(b)],
                       TensorF::ones(film.scale[static_cast<size_t>(b)].shape())) == 0.0);
    CHECK(film.shift[static_cast<size_t>(b)].vec().cwiseAbs().maxCoeff() == 0.0);
  }

  // fixed nonzero gamma: output difference is the linear image of the prior difference
  Rng wrng(20);
  m.params["adapt/block2/scale_w"] = TensorF::uniform({64, 64}, wrng, -0.5, 0.5);
  m.params["adapt/block2/scale_b"] = TensorF::uniform({64}, wrng, -0.5, 0.5);
  TensorF delta = TensorF::uniform({64}, wrng, -1, 1);
  TensorF prior2 = prior;
  prior2.vec() += delta.vec();
  auto f1 = compute_film(m, prior);
  auto f2 = compute_film(m, prior2);
  const auto& w = m.params["adapt/block2/scale_w"];
  for (int64_t c = 0; c < 64; ++c) {
    double lin = 0.0;
    for (int64_t j = 0; j < 64; ++j) lin += w.at2(c, j) * delta[j];
    CHECK(f2.scale[2][c] - f1.scale[2][c] == doctest::Approx(lin).epsilon(1e-4));
  }

  auto f3 = compute_film(m, prior);
  for (int b = 0; b < 4; ++b) {
    CHECK(bit_equal(f1.scale[static_cast<size_t>(b)], f3.scale[static_cast<size_t>(b)]));
    CHECK(bit_equal(f1.shift[static_cast<size_t>(b)], f3.shift[static_cast<size_t>(b)]));
  }

  CHECK_THROWS_AS(compute_film(m, TensorF::zeros({32})), Error);
}

TEST_CASE("build_classifier prototypes under the identity-initialized head") {
  auto m = Model<float>::init(desk_config("cmf"), 21);
  Rng rng(22);
  TensorF emb = TensorF::uniform({3, 64}, rng, -1, 1);
  std::vector<int> labels{0, 1, 2};
  auto head = build_classifier(m, emb, labels, 3);
  CHECK(head.w.shape() == Shape{3, 64});
  CHECK(head.b.vec().cwiseAbs().maxCoeff() == 0.0);
  // rows equal the L2-normalized embeddings
  for (int64_t r = 0; r < 3; ++r) {
    double sq = 0.0;
    for (int64_t j = 0; j < 64; ++j) sq += static_cast<double>(emb.at2(r, j)) * emb.at2(r, j);
    const double norm = std::sqrt(sq + 1e-12);
    for (int64_t j = 0; j < 64; ++j)
      CHECK(head.w.at2(r, j) == doctest::Approx(emb.at2(r, j) / norm).epsilon(1e-5));
  }

  // two samples per class: rows are the per-class means of normalized embeddings
  TensorF emb2 = TensorF::uniform({4, 64}, rng, -1, 1);
  std::vector<int> labels2{0, 1, 0, 1};
  auto head2 = build_classifier(m, emb2, labels2, 2);
  for (int cls = 0; cls < 2; ++cls)
    for (int64_t j = 0; j < 64; ++j) {
      double acc = 0.0;
      for (int64_t r = 0; r < 4; ++r) {
        if (labels2[static_cast<size_t>(r)] != cls) continue;
        double sq = 0.0;
        for (int64_t q = 0; q < 64; ++q)
          sq += static_cast<double>(emb2.at2(r, q)) * emb2.at2(r, q);
        acc += emb2.at2(r, j) / std::sqrt(sq + 1e-12);
      }
      CHECK(head2.w.at2(cls, j) == doctest::Approx(acc / 2.0).epsilon(1e-5));
    }

  // 2:1 duplication weights the prototype toward the duplicated sample
  TensorF emb3 = TensorF::zeros({3, 64});
  emb3.at2(0, 0) = 1.0f;
  emb3.at2(1, 0) = 1.0f;
  emb3.at2(2, 1) = 1.0f;
  auto head3 = build_classifier(m, emb3, {0, 0, 0}, 1);
  CHECK(head3.w.at2(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-5));
  CHECK(head3.w.at2(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-5));

  CHECK_THROWS_AS(build_classifier(m, emb, std::vector<int>{0, 1, 1}, 3), Error);
}

TEST_CASE("predict: degenerate head, relabeling symmetry, self-match") {
  auto m = Model<float>::init(desk_config("cmf"), 23);
  TensorF targets = noise_images(4, 1, 32, 24);
  auto film = FilmParams<float>::identity(m.cfg);

  HeadParams<float> zero_head;
  zero_head.w = TensorF::zeros({5, 64});
  zero_head.b = TensorF::zeros({5});
  zero_head.class_order = {0, 1, 2, 3, 4};
  TensorF logits = predict(m, targets, film, zero_head);
  CHECK(logits.vec().cwiseAbs().maxCoeff() == 0.0);
  for (int64_t r = 0; r < 4; ++r) CHECK(argmax_row(logits, r) == 0);

  // column permutation under class relabeling
  TensorF sup = noise_images(3, 1, 32, 25);
  Graph<float> g;
  NetBuilder<float> nb(g, m, {});
  TensorF sup_emb = backbone_forward(m, sup, film);
  auto head_a = build_classifier(m, sup_emb, {0, 1, 2}, 3);
  // relabeled: sample order unchanged, class ids cycled 0->1->2->0
  auto head_b = build_classifier(m, sup_emb, {1, 2, 0}, 3);
  TensorF la = predict(m, targets, film, head_a);
  TensorF lb = predict(m, targets, film, head_b);
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 3; ++c)
      CHECK(la.at2(r, c) == doctest::Approx(lb.at2(r, (c + 1) % 3)).epsilon(1e-6));

  // one-shot self-match: a target equal to its own support sample wins
  TensorF tgt = TensorF::zeros({3, 1, 32, 32});
  std::copy(sup.data(), sup.data() + 3 * 1024, tgt.data());
  TensorF self_logits = predict(m, tgt, film, head_a);
  for (int64_t r = 0; r < 3; ++r) CHECK(argmax_row(self_logits, r) == static_cast<int>(r));
}
