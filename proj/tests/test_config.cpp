#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cmf/config.hpp"
#include "cmf/io.hpp"

using namespace cmf;

TEST_CASE("defaults resolve and parse to the desk run") {
  const Json resolved = resolve_config(Json::object());
  const RunConfig rc = parse_config(resolved);
  CHECK(rc.data.domains == std::vector<std::string>{"glyphs", "textures", "shapes", "digits"});
  CHECK(rc.data.classes == 10);
  CHECK(rc.data.per_class == 80);
  CHECK(rc.data.size == 32);
  CHECK(rc.backbone.channels == std::vector<int>{32, 32, 64, 64});
  CHECK(rc.encoder.prior_dim == 64);
  CHECK(rc.training.episodes_total == 5000);
  CHECK(rc.training.variant == "cmf");
  CHECK(rc.protocol.name == "oneshot");
  CHECK(rc.protocol.way == 5);
  CHECK(rc.output.dir == "runs");
  CHECK(resolve_config(resolved) == resolved);
}

TEST_CASE("user fragments merge over defaults without touching the rest") {
  Json user = {{"training", {{"lr", 0.01}, {"variant", "plain"}}},
               {"data", {{"classes", 5}}}};
  const Json resolved = resolve_config(user);
  CHECK(resolved["training"]["lr"] == 0.01);
  CHECK(resolved["training"]["variant"] == "plain");
  CHECK(resolved["training"]["batch_size"] == 16);
  CHECK(resolved["data"]["classes"] == 5);
  CHECK(resolved["data"]["per_class"] == 80);
}

TEST_CASE("unknown config keys are named by their dotted path") {
  CHECK_THROWS_WITH_AS(resolve_config({{"bogus", 1}}),
                       doctest::Contains("'bogus'"), SchemaError);
  CHECK_THROWS_WITH_AS(resolve_config({{"training", {{"bogus", 1}}}}),
                       doctest::Contains("'training.bogus'"), SchemaError);
  CHECK_THROWS_WITH_AS(resolve_config(Json::array({1, 2})),
                       doctest::Contains("root"), SchemaError);
}

TEST_CASE("type mismatches are named by their dotted path") {
  CHECK_THROWS_WITH_AS(resolve_config({{"training", {{"lr", "fast"}}}}),
                       doctest::Contains("'training.lr'"), SchemaError);
  CHECK_THROWS_WITH_AS(resolve_config({{"training", 3}}),
                       doctest::Contains("'training'"), SchemaError);
  CHECK_THROWS_WITH_AS(resolve_config({{"backbone", {{"channels", Json::array({"a"})}}}}),
                       doctest::Contains("'backbone.channels'"), SchemaError);
  CHECK_THROWS_WITH_AS(resolve_config({{"data", {{"classes", 2.5}}}}),
                       doctest::Contains("'data.classes'"), SchemaError);
}

TEST_CASE("overrides parse values and walk dotted paths") {
  Json c = resolve_config(Json::object());
  apply_override(c, "training.lr=0.001");
  CHECK(c["training"]["lr"] == 0.001);
  apply_override(c, "training.variant=plain");
  CHECK(c["training"]["variant"] == "plain");
  apply_override(c, "backbone.channels=[8,16]");
  CHECK(c["backbone"]["channels"] == Json::array({8, 16}));
  apply_override(c, "data.seed=18446744073709551615");
  CHECK(c["data"]["seed"].get<uint64_t>() == 18446744073709551615ull);
  apply_override(c, "protocol.source=digits");
  CHECK(parse_config(c).protocol.source == "digits");
}

TEST_CASE("bad overrides are rejected with the offending path") {
  Json c = resolve_config(Json::object());
  CHECK_THROWS_WITH_AS(apply_override(c, "training.bogus=1"),
                       doctest::Contains("'training.bogus'"), SchemaError);
  CHECK_THROWS_WITH_AS(apply_override(c, "bogus.lr=1"),
                       doctest::Contains("'bogus'"), SchemaError);
  CHECK_THROWS_WITH_AS(apply_override(c, "training=3"),
                       doctest::Contains("section"), SchemaError);
  CHECK_THROWS_WITH_AS(apply_override(c, "training.lr=fast"),
                       doctest::Contains("'training.lr'"), SchemaError);
  CHECK_THROWS_AS(apply_override(c, "no_equals"), SchemaError);
  CHECK_THROWS_AS(apply_override(c, "=5"), SchemaError);
}

TEST_CASE("parse rejects out-of-range values naming the key") {
  auto reject = [](const Json& user, const char* path) {
    CHECK_THROWS_WITH_AS(parse_config(resolve_config(user)),
                         doctest::Contains(path), SchemaError);
  };
  reject({{"data", {{"classes", 0}}}}, "'data.classes'");
  reject({{"data", {{"channels", 2}}}}, "'data.channels'");
  reject({{"data", {{"domains", Json::array()}}}}, "'data.domains'");
  reject({{"backbone", {{"channels", Json::array()}}}}, "'backbone.channels'");
  reject({{"backbone", {{"channels", Json::array({4, -4})}}}}, "'backbone.channels'");
  reject({{"encoder", {{"attention_gate", "tanh"}}}}, "'encoder.attention_gate'");
  reject({{"training", {{"lr", 0.0}}}}, "'training.lr'");
  reject({{"training", {{"episodes_total", -1}}}}, "'training.episodes_total'");
  reject({{"training", {{"variant", "film"}}}}, "'training.variant'");
  reject({{"protocol", {{"name", "azs3"}}}}, "'protocol.name'");
  reject({{"protocol", {{"way", 0}}}}, "'protocol.way'");
  reject({{"output", {{"dir", ""}}}}, "'output.dir'");
}

TEST_CASE("config files load or fail by cause") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cmf_config_test";
  fs::create_directories(dir);
  const std::string good = (dir / "good.json").string();
  const std::string bad = (dir / "bad.json").string();
  write_text_file(good, "{\"training\": {\"seed\": 3}}\n");
  write_text_file(bad, "{not json\n");

  CHECK(load_config_file(good)["training"]["seed"] == 3);
  CHECK_THROWS_AS(load_config_file((dir / "absent.json").string()), MissingArtifact);
  CHECK_THROWS_AS(load_config_file(bad), SchemaError);
  fs::remove_all(dir);
}

TEST_CASE("config hash tracks content") {
  const Json a = resolve_config(Json::object());
  Json b = a;
  CHECK(config_hash(a) == config_hash(b));
  apply_override(b, "training.seed=8");
  CHECK(config_hash(a) != config_hash(b));
}
