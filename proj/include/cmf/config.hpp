#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cmf {

using Json = nlohmann::ordered_json;

// Typed view of the resolved run config. Section and field names mirror the
// JSON document one-to-one.
struct DataConfig {
  std::vector<std::string> domains;
  int classes = 10;
  int per_class = 80;
  int size = 32;
  int channels = 1;
  uint64_t seed = 1234;
};

struct BackboneSection {
  std::vector<int> channels;
  int embedding_dim = 64;
};

struct EncoderSection {
  std::vector<int> channels;
  int prior_dim = 64;
  std::string attention_gate = "none";
};

struct AdaptationSection {
  int head_hidden = 64;
};

struct TrainingSection {
  int64_t episodes_total = 5000;
  double lr = 0.0005;
  int batch_size = 16;
  int validate_every = 200;
  int val_episodes = 50;
  int pretrain_epochs = 10;
  double pretrain_lr = 0.001;
  uint64_t seed = 7;
  std::string variant = "cmf";
};

struct ProtocolSection {
  std::string name = "oneshot";
  std::string source = "";
  int eval_tasks = 100;
  int way = 5;
  int shot = 1;
  int query = 10;
  int fixed_support_size = 10;
  uint64_t seed = 99;
};

struct OutputSection {
  std::string dir = "runs";
};

struct RunConfig {
  DataConfig data;
  BackboneSection backbone;
  EncoderSection encoder;
  AdaptationSection adaptation;
  TrainingSection training;
  ProtocolSection protocol;
  OutputSection output;
  Json resolved;
};

Json default_config();

// Merges a user document over the defaults. Unknown keys, wrong types, and
// out-of-range values raise SchemaError naming the dotted field path.
Json resolve_config(const Json& user);

// Applies one `--set a.b.c=value` override in place; the path must already
// exist in the document. The value text is parsed as JSON when possible and
// treated as a string otherwise.
void apply_override(Json& config, const std::string& assignment);

RunConfig parse_config(const Json& resolved);

Json load_config_file(const std::string& path);

uint64_t config_hash(const Json& resolved);

}  // namespace cmf
