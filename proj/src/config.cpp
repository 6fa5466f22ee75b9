#include "cmf/config.hpp"

#include <fstream>

#include "cmf/rng.hpp"
#include "cmf/util.hpp"

namespace cmf {

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

const char* type_label(const Json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number_float()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool same_kind(const Json& def, const Json& v) {
  if (def.is_object()) return v.is_object();
  if (def.is_array()) return v.is_array();
  if (def.is_string()) return v.is_string();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_integer() || def.is_number_unsigned())
    return v.is_number_integer() || v.is_number_unsigned();
  return false;
}

void merge_checked(Json& dst, const Json& src, const std::string& prefix) {
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string path = join_path(prefix, it.key());
    if (!dst.contains(it.key())) fail_schema("unknown config key '", path, "'");
    Json& slot = dst[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object())
        fail_schema("config key '", path, "' must be an object, got ",
                    type_label(it.value()));
      merge_checked(slot, it.value(), path);
      continue;
    }
    if (!same_kind(slot, it.value()))
      fail_schema("config key '", path, "' must be ", type_label(slot), ", got ",
                  type_label(it.value()));
    if (slot.is_array()) {
      const Json& elem = slot.empty() ? Json("") : slot.front();
      for (const Json& e : it.value())
        if (!same_kind(elem, e))
          fail_schema("config key '", path, "' elements must be ", type_label(elem),
                      ", got ", type_label(e));
    }
    slot = it.value();
  }
}

int require_positive(const Json& section, const char* sec, const char* key) {
  const int64_t v = section.at(key).get<int64_t>();
  if (v <= 0) fail_schema("config key '", sec, ".", key, "' must be positive, got ", v);
  if (v > (int64_t(1) << 31)) fail_schema("config key '", sec, ".", key, "' too large");
  return static_cast<int>(v);
}

double require_positive_real(const Json& section, const char* sec, const char* key) {
  const double v = section.at(key).get<double>();
  if (!(v > 0.0)) fail_schema("config key '", sec, ".", key, "' must be > 0, got ", v);
  return v;
}

}  // namespace

Json default_config() {
  Json c;
  c["data"] = {{"domains", Json::array({"glyphs", "textures", "shapes", "digits"})},
               {"classes", 10},
               {"per_class", 80},
               {"size", 32},
               {"channels", 1},
               {"seed", 1234}};
  c["backbone"] = {{"channels", Json::array({32, 32, 64, 64})}, {"embedding_dim", 64}};
  c["encoder"] = {{"channels", Json::array({32, 32, 64})},
                  {"prior_dim", 64},
                  {"attention_gate", "none"}};
  c["adaptation"] = {{"head_hidden", 64}};
  c["training"] = {{"episodes_total", 5000},
                   {"lr", 0.0005},
                   {"batch_size", 16},
                   {"validate_every", 200},
                   {"val_episodes", 50},
                   {"pretrain_epochs", 10},
                   {"pretrain_lr", 0.001},
                   {"seed", 7},
                   {"variant", "cmf"}};
  c["protocol"] = {{"name", "oneshot"}, {"source", ""},      {"eval_tasks", 100},
                   {"way", 5},          {"shot", 1},         {"query", 10},
                   {"fixed_support_size", 10},               {"seed", 99}};
  c["output"] = {{"dir", "runs"}};
  return c;
}

Json resolve_config(const Json& user) {
  if (!user.is_object()) fail_schema("config root must be an object");
  Json resolved = default_config();
  merge_checked(resolved, user, "");
  return resolved;
}

void apply_override(Json& config, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail_schema("override '", assignment, "' is not of the form key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* slot = &config;
  std::string walked;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos
                                                   ? std::string::npos
                                                   : dot - start);
    walked = join_path(walked, key);
    if (!slot->is_object() || !slot->contains(key))
      fail_schema("unknown config key '", walked, "'");
    slot = &(*slot)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (slot->is_object())
    fail_schema("config key '", path, "' is a section, not a value");
  Json probe = Json::object();
  probe[path.substr(path.rfind('.') + 1)] = value;
  Json target = Json::object();
  target[path.substr(path.rfind('.') + 1)] = *slot;
  merge_checked(target, probe, path.substr(0, path.rfind('.')));
  *slot = target[path.substr(path.rfind('.') + 1)];
}

RunConfig parse_config(const Json& resolved) {
  RunConfig cfg;
  cfg.resolved = resolved;
  const Json& d = resolved.at("data");
  cfg.data.domains = d.at("domains").get<std::vector<std::string>>();
  if (cfg.data.domains.empty()) fail_schema("config key 'data.domains' must be non-empty");
  cfg.data.classes = require_positive(d, "data", "classes");
  cfg.data.per_class = require_positive(d, "data", "per_class");
  cfg.data.size = require_positive(d, "data", "size");
  cfg.data.channels = require_positive(d, "data", "channels");
  if (cfg.data.channels != 1 && cfg.data.channels != 3)
    fail_schema("config key 'data.channels' must be 1 or 3, got ", cfg.data.channels);
  cfg.data.seed = d.at("seed").get<uint64_t>();

  const Json& b = resolved.at("backbone");
  cfg.backbone.channels = b.at("channels").get<std::vector<int>>();
  if (cfg.backbone.channels.empty())
    fail_schema("config key 'backbone.channels' must be non-empty");
  for (int c : cfg.backbone.channels)
    if (c <= 0) fail_schema("config key 'backbone.channels' entries must be positive");
  cfg.backbone.embedding_dim = require_positive(b, "backbone", "embedding_dim");

  const Json& e = resolved.at("encoder");
  cfg.encoder.channels = e.at("channels").get<std::vector<int>>();
  if (cfg.encoder.channels.empty())
    fail_schema("config key 'encoder.channels' must be non-empty");
  for (int c : cfg.encoder.channels)
    if (c <= 0) fail_schema("config key 'encoder.channels' entries must be positive");
  cfg.encoder.prior_dim = require_positive(e, "encoder", "prior_dim");
  cfg.encoder.attention_gate = e.at("attention_gate").get<std::string>();
  if (cfg.encoder.attention_gate != "none" && cfg.encoder.attention_gate != "sigmoid")
    fail_schema("config key 'encoder.attention_gate' must be 'none' or 'sigmoid', got '",
                cfg.encoder.attention_gate, "'");

  cfg.adaptation.head_hidden =
      require_positive(resolved.at("adaptation"), "adaptation", "head_hidden");

  const Json& t = resolved.at("training");
  const int64_t episodes = t.at("episodes_total").get<int64_t>();
  if (episodes < 0)
    fail_schema("config key 'training.episodes_total' must be >= 0, got ", episodes);
  cfg.training.episodes_total = episodes;
  cfg.training.lr = require_positive_real(t, "training", "lr");
  cfg.training.batch_size = require_positive(t, "training", "batch_size");
  cfg.training.validate_every = require_positive(t, "training", "validate_every");
  cfg.training.val_episodes = require_positive(t, "training", "val_episodes");
  const int64_t pe = t.at("pretrain_epochs").get<int64_t>();
  if (pe < 0) fail_schema("config key 'training.pretrain_epochs' must be >= 0, got ", pe);
  cfg.training.pretrain_epochs = static_cast<int>(pe);
  cfg.training.pretrain_lr = require_positive_real(t, "training", "pretrain_lr");
  cfg.training.seed = t.at("seed").get<uint64_t>();
  cfg.training.variant = t.at("variant").get<std::string>();
  if (cfg.training.variant != "plain" && cfg.training.variant != "cmf")
    fail_schema("config key 'training.variant' must be 'plain' or 'cmf', got '",
                cfg.training.variant, "'");

  const Json& p = resolved.at("protocol");
  cfg.protocol.name = p.at("name").get<std::string>();
  const bool known_protocol =
      cfg.protocol.name == "oneshot" || cfg.protocol.name == "azs1" ||
      cfg.protocol.name == "azs2" || cfg.protocol.name == "azs2-sweep" ||
      cfg.protocol.name == "random-matrix";
  if (!known_protocol)
    fail_schema("config key 'protocol.name' must be one of oneshot, azs1, azs2, "
                "azs2-sweep, random-matrix; got '", cfg.protocol.name, "'");
  cfg.protocol.source = p.at("source").get<std::string>();
  cfg.protocol.eval_tasks = require_positive(p, "protocol", "eval_tasks");
  cfg.protocol.way = require_positive(p, "protocol", "way");
  cfg.protocol.shot = require_positive(p, "protocol", "shot");
  cfg.protocol.query = require_positive(p, "protocol", "query");
  cfg.protocol.fixed_support_size = require_positive(p, "protocol", "fixed_support_size");
  cfg.protocol.seed = p.at("seed").get<uint64_t>();

  cfg.output.dir = resolved.at("output").at("dir").get<std::string>();
  if (cfg.output.dir.empty()) fail_schema("config key 'output.dir' must be non-empty");
  return cfg;
}

Json load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact(cat("config file '", path, "' not found"));
  Json doc = Json::parse(f, nullptr, false);
  if (doc.is_discarded()) fail_schema("config file '", path, "' is not valid JSON");
  return doc;
}

uint64_t config_hash(const Json& resolved) { return hash_str(resolved.dump()); }

}  // namespace cmf
