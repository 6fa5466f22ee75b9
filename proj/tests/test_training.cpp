#include <doctest.h>

#include <filesystem>

#include "cmf/training.hpp"
#include "oracles.hpp"

using namespace cmf;

namespace {

ModelConfig tiny_cfg(const std::string& variant = "cmf") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.image_channels = 1;
  cfg.backbone_channels = {4, 8};
  cfg.embedding_dim = 8;
  cfg.encoder_channels = {4};
  cfg.prior_dim = 4;
  cfg.head_hidden = 8;
  cfg.variant = variant;
  cfg.validate();
  return cfg;
}

std::vector<Dataset> tiny_domains() {
  std::vector<Dataset> out;
  for (const char* fam : {"glyphs", "shapes"}) {
    DomainSpec spec;
    spec.family = fam;
    spec.classes = 3;
    spec.per_class = 12;
    spec.size = 8;
    spec.seed = 5;
    out.push_back(synth_domain(spec));
  }
  return out;
}

RunConfig tiny_run() {
  RunConfig rc = parse_config(resolve_config(Json::object()));
  rc.training.episodes_total = 8;
  rc.training.batch_size = 4;
  rc.training.validate_every = 4;
  rc.training.val_episodes = 2;
  rc.training.pretrain_epochs = 2;
  rc.training.seed = 7;
  rc.protocol.way = 2;
  rc.protocol.shot = 1;
  rc.protocol.query = 1;
  rc.protocol.eval_tasks = 4;
  rc.protocol.fixed_support_size = 3;
  rc.protocol.seed = 99;
  return rc;
}

template <class S>
Episode random_episode(int way, int shot, int query, int size, uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query = query;
  ep.source = "random";
  ep.support_images =
      TensorF::uniform({static_cast<int64_t>(way) * shot, 1, size, size}, rng);
  ep.target_images =
      TensorF::uniform({static_cast<int64_t>(way) * query, 1, size, size}, rng);
  for (int k = 0; k < way; ++k)
    for (int j = 0; j < shot; ++j) ep.support_labels.push_back(k);
  for (int k = 0; k < way; ++k)
    for (int j = 0; j < query; ++j) ep.target_labels.push_back(k);
  return ep;
}

}  // namespace

TEST_CASE("episode loss graph agrees with the inference path") {
  for (const char* variant : {"plain", "cmf"}) {
    CAPTURE(variant);
    Model<float> model = Model<float>::init(tiny_cfg(variant), 31);
    const Episode ep = random_episode<float>(2, 2, 3, 8, 401);
    const TensorF support = ep.support_images;
    const TensorF target = ep.target_images;

    Graph<float> g;
    NetBuilder<float> nb(g, model, {"encoder/", "adapt/", "head/"});
    const EpisodeVars v = build_episode_loss(nb, support, ep.support_labels, target,
                                             ep.target_labels, support, ep.way);
    CHECK(g.value(v.logits).shape() == Shape{6, 2});
    CHECK(g.value(v.loss).shape() == Shape{1});
    CHECK(std::isfinite(g.value(v.loss)[0]));

    const EpisodeEval<float> r = eval_episode(model, ep);
    CHECK(max_abs_diff(r.logits, g.value(v.logits)) < 1e-6f);
    CHECK(r.loss == doctest::Approx(g.value(v.loss)[0]).epsilon(1e-5));
  }
}

TEST_CASE("episode loss gradients pass finite differences") {
  for (const char* variant : {"plain", "cmf"}) {
    CAPTURE(variant);
    Model<double> model = Model<double>::init(tiny_cfg(variant), 17);
    const Episode ep = random_episode<double>(2, 2, 2, 8, 907);
    const Tensor<double> support = ep.support_images.cast<double>();
    const Tensor<double> target = ep.target_images.cast<double>();

    Graph<double> g;
    NetBuilder<double> nb(g, model, {"backbone/", "encoder/", "adapt/", "head/"});
    const EpisodeVars v = build_episode_loss(nb, support, ep.support_labels, target,
                                             ep.target_labels, support, ep.way);
    const oracle::FdResult fd = oracle::fd_check(g, v.loss, 48);
    CAPTURE(fd.worst);
    CHECK(fd.max_rel < 1e-4);
  }
}

TEST_CASE("select_model needs a strict majority of wins") {
  CHECK(select_model({0.6, 0.6, 0.6, 0.1}, {0.5, 0.5, 0.5, 0.5}));
  CHECK(!select_model({0.6, 0.6, 0.4, 0.4}, {0.5, 0.5, 0.5, 0.5}));
  CHECK(!select_model({0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5}));
  CHECK(!select_model({0.9, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5}));
  CHECK(select_model({0.9}, {0.5}));
  CHECK(!select_model({0.5}, {0.5}));
  CHECK_THROWS_AS(select_model({0.5, 0.5}, {0.5}), Error);
  CHECK_THROWS_AS(select_model({}, {}), Error);
}

TEST_CASE("pretrain updates only the trunk, deterministically") {
  const std::vector<Dataset> domains = tiny_domains();
  const RunConfig rc = tiny_run();
  Model<float> a = Model<float>::init(tiny_cfg(), 3);
  const Model<float> before = a;
  pretrain_backbone(a, domains, rc);

  bool backbone_changed = false;
  for (const auto& [name, value] : a.params) {
    if (name.rfind("backbone/", 0) == 0) {
      if (!bit_equal(value, before.params.at(name))) backbone_changed = true;
    } else {
      CHECK(bit_equal(value, before.params.at(name)));
    }
    CHECK(name.rfind("pretrain/", 0) != 0);
  }
  CHECK(backbone_changed);

  Model<float> b = Model<float>::init(tiny_cfg(), 3);
  pretrain_backbone(b, domains, rc);
  for (const auto& [name, value] : a.params) CHECK(bit_equal(value, b.params.at(name)));
}

TEST_CASE("train freezes the trunk and reproduces the run log") {
  const std::vector<Dataset> domains = tiny_domains();
  const RunConfig rc = tiny_run();
  Model<float> a = Model<float>::init(tiny_cfg(), 3);
  const Model<float> before = a;
  const RunLog log_a = train(a, domains, rc);

  CHECK(log_a.train_rows.size() == 8);
  CHECK(log_a.val_rows.size() == 4);
  for (size_t i = 0; i < log_a.train_rows.size(); ++i) {
    CHECK(log_a.train_rows[i].episode == static_cast<int64_t>(i + 1));
    CHECK(log_a.train_rows[i].accuracy >= 0.0);
    CHECK(log_a.train_rows[i].accuracy <= 1.0);
    CHECK(std::isfinite(log_a.train_rows[i].loss));
  }
  CHECK(log_a.val_rows[0].episode == 4);
  CHECK(log_a.val_rows[2].episode == 8);

  bool adapted_changed = false;
  for (const auto& [name, value] : a.params) {
    if (name.rfind("backbone/", 0) == 0)
      CHECK(bit_equal(value, before.params.at(name)));
    else if (!bit_equal(value, before.params.at(name)))
      adapted_changed = true;
  }
  CHECK(adapted_changed);

  Model<float> b = Model<float>::init(tiny_cfg(), 3);
  const RunLog log_b = train(b, domains, rc);
  CHECK(log_a == log_b);
  for (const auto& [name, value] : a.params) CHECK(bit_equal(value, b.params.at(name)));

  RunConfig other = rc;
  other.training.seed = 8;
  Model<float> c = Model<float>::init(tiny_cfg(), 3);
  const RunLog log_c = train(c, domains, other);
  CHECK(!(log_a == log_c));
}

TEST_CASE("train with zero episodes is a no-op") {
  const std::vector<Dataset> domains = tiny_domains();
  RunConfig rc = tiny_run();
  rc.training.episodes_total = 0;
  Model<float> m = Model<float>::init(tiny_cfg(), 3);
  const Model<float> before = m;
  const RunLog log = train(m, domains, rc);
  CHECK(log.train_rows.empty());
  CHECK(log.val_rows.empty());
  for (const auto& [name, value] : m.params) CHECK(bit_equal(value, before.params.at(name)));
}

TEST_CASE("runlog csv round trips deterministically") {
  RunLog log;
  log.train_rows.push_back({1, "glyphs", 0.5, 1.25});
  log.train_rows.push_back({2, "shapes", 0.75, 0.875});
  log.val_rows.push_back({2, "glyphs", 0.625, 1.0});
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "cmf_runlog_test").string();
  save_runlog(log, dir);
  const std::string text = read_text_file(dir + "/runlog.csv");
  CHECK(text == "episode,dataset,accuracy,loss\n1,glyphs,0.5,1.25\n2,shapes,0.75,0.875\n");
  const std::string val = read_text_file(dir + "/validation.csv");
  CHECK(val == "episode,dataset,accuracy,loss\n2,glyphs,0.625,1\n");
  fs::remove_all(dir);
}

TEST_CASE("identity adaptation makes every prior source equivalent") {
  const std::vector<Dataset> domains = tiny_domains();
  RunConfig rc = tiny_run();
  Model<float> m = Model<float>::init(tiny_cfg(), 3);

  rc.protocol.name = "oneshot";
  const std::vector<EvalRow> self_rows = evaluate(m, domains, rc);
  rc.protocol.name = "azs2";
  rc.protocol.source = "glyphs";
  const std::vector<EvalRow> azs2_rows = evaluate(m, domains, rc);
  rc.protocol.name = "random-matrix";
  const std::vector<EvalRow> noise_rows = evaluate(m, domains, rc);

  REQUIRE(self_rows.size() == 2);
  for (size_t d = 0; d < self_rows.size(); ++d) {
    CHECK(self_rows[d].accuracy == azs2_rows[d].accuracy);
    CHECK(self_rows[d].accuracy == noise_rows[d].accuracy);
    CHECK(azs2_rows[d].source == "glyphs");
  }
  CHECK(noise_rows[0].source == "noise");
  CHECK(self_rows[0].source == "self");
}

TEST_CASE("evaluate validates its protocol and source") {
  const std::vector<Dataset> domains = tiny_domains();
  RunConfig rc = tiny_run();
  Model<float> m = Model<float>::init(tiny_cfg(), 3);
  rc.protocol.name = "azs2";
  rc.protocol.source = "";
  CHECK_THROWS_AS(evaluate(m, domains, rc), Error);
  rc.protocol.source = "unknown";
  CHECK_THROWS_AS(evaluate(m, domains, rc), Error);
  rc.protocol.name = "azs1";
  const std::vector<EvalRow> rows = evaluate(m, domains, rc);
  CHECK(rows[0].source == "glyphs");
  CHECK(rows[1].source == "shapes");
  for (const EvalRow& r : rows) {
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
    CHECK(r.ci95 >= 0.0);
  }
}

TEST_CASE("azs2 sweep fills the source by test matrix") {
  const std::vector<Dataset> domains = tiny_domains();
  RunConfig rc = tiny_run();
  Model<float> m = Model<float>::init(tiny_cfg(), 3);
  const SweepResult sweep = azs2_sweep(m, domains, rc);
  CHECK(sweep.sources == std::vector<std::string>{"glyphs", "shapes"});
  CHECK(sweep.tests == std::vector<std::string>{"glyphs", "shapes"});
  REQUIRE(sweep.acc.size() == 2);
  REQUIRE(sweep.acc[0].size() == 2);
  const std::vector<double> ranges = sweep.test_ranges();
  CHECK(ranges.size() == 2);
  for (double r : ranges) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
  const SweepResult again = azs2_sweep(m, domains, rc);
  CHECK(sweep.acc == again.acc);
}

TEST_CASE("copy_prefix moves one namespace between models") {
  Model<float> a = Model<float>::init(tiny_cfg(), 1);
  Model<float> b = Model<float>::init(tiny_cfg(), 2);
  copy_prefix(a, b, "backbone/");
  for (const auto& [name, value] : b.params)
    if (name.rfind("backbone/", 0) == 0) CHECK(bit_equal(value, a.params.at(name)));
  CHECK(!bit_equal(b.params.at("encoder/conv0"), a.params.at("encoder/conv0")));
  CHECK(!bit_equal(b.params.at("head/w/hidden_w"), a.params.at("head/w/hidden_w")));
  CHECK_THROWS_AS(copy_prefix(a, b, "mystery/"), Error);
}
