#include "cmf/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cmf/analysis.hpp"
#include "cmf/deploy.hpp"
#include "cmf/io.hpp"

namespace cmf {

namespace {

namespace fs = std::filesystem;

struct CliArgs {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string protocol;
  std::string source;
  bool source_set = false;
  std::string variant;
};

void check_threads_env() {
  const char* v = std::getenv("CMF_THREADS");
  if (!v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*v == '\0' || *end != '\0' || n <= 0)
    fail_schema("environment variable CMF_THREADS must be a positive integer, got '",
                v, "'");
}

std::string hex16(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string iso_utc(std::time_t t) {
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json build_resolved(const CliArgs& a) {
  Json user = a.config_path.empty() ? Json::object() : load_config_file(a.config_path);
  Json resolved = resolve_config(user);
  for (const std::string& s : a.sets) apply_override(resolved, s);
  if (a.seed_set) resolved["training"]["seed"] = a.seed;
  if (!a.protocol.empty()) resolved["protocol"]["name"] = a.protocol;
  if (a.source_set) resolved["protocol"]["source"] = a.source;
  if (!a.variant.empty()) resolved["training"]["variant"] = a.variant;
  if (!a.out.empty()) resolved["output"]["dir"] = a.out;
  return resolved;
}

std::string pretrain_path(const RunConfig& rc) {
  return (fs::path(rc.output.dir) / "pretrain.ckpt").string();
}

std::string model_path(const RunConfig& rc) {
  return (fs::path(rc.output.dir) / ("model-" + rc.training.variant + ".ckpt")).string();
}

std::string deploy_path(const RunConfig& rc) {
  return (fs::path(rc.output.dir) / ("deploy-" + rc.training.variant + ".ckpt")).string();
}

Model<float> load_model(const RunConfig& rc) {
  const std::string path = model_path(rc);
  if (!fs::exists(path))
    throw MissingArtifact(cat("checkpoint '", path, "' not found; run train first"));
  Model<float> m = Model<float>::load(Checkpoint::load(path));
  if (m.cfg.to_json() != ModelConfig::from_run(rc).to_json())
    fail("checkpoint '", path, "' was trained with a different model configuration");
  return m;
}

void write_param_csv(const std::string& path,
                     const std::vector<std::pair<std::string, ParamReport>>& reports) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [model, rep] : reports) {
    rows.push_back({model, "backbone", fmt_num(rep.backbone)});
    rows.push_back({model, "encoder", fmt_num(rep.encoder)});
    rows.push_back({model, "adaptation", fmt_num(rep.adaptation)});
    rows.push_back({model, "head", fmt_num(rep.head)});
    rows.push_back({model, "total", fmt_num(rep.total())});
    rows.push_back({model, "strippable_fraction", fmt_num(rep.strippable_fraction())});
  }
  write_csv(path, {"model", "subnetwork", "value"}, rows);
}

// One run directory per command and resolved config; every timestamp stays
// in run_meta.json so the CSVs can be byte-compared across runs.
struct RunContext {
  RunConfig rc;
  Json resolved;
  std::string dir;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  std::time_t started = std::time(nullptr);

  RunContext(const std::string& command, const Json& doc)
      : rc(parse_config(doc)), resolved(doc) {
    dir = (fs::path(rc.output.dir) / (command + "-" + hex16(config_hash(doc)))).string();
    fs::create_directories(dir);
    write_text_file(dir + "/config.resolved.json", resolved.dump(2) + "\n");
  }

  std::string file(const std::string& name) const { return dir + "/" + name; }

  void finish(const std::string& command) const {
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    Json meta;
    meta["command"] = command;
    meta["config_hash"] = hex16(config_hash(resolved));
    meta["started_at"] = iso_utc(started);
    meta["elapsed_ms"] = ms;
    write_text_file(file("run_meta.json"), meta.dump(2) + "\n");
    std::cout << "run directory: " << dir << "\n";
  }
};

int cmd_pretrain(const Json& resolved) {
  RunContext ctx("pretrain", resolved);
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  Model<float> m =
      Model<float>::init(ModelConfig::from_run(ctx.rc), ctx.rc.training.seed);
  pretrain_backbone(m, datasets, ctx.rc);
  Checkpoint ck;
  m.save(ck);
  ck.save(pretrain_path(ctx.rc));
  write_param_csv(ctx.file("params.csv"), {{"full", param_report(m)}});
  std::cout << "pretrained backbone over " << ctx.rc.training.pretrain_epochs
            << " epochs -> " << pretrain_path(ctx.rc) << "\n";
  ctx.finish("pretrain");
  return 0;
}

int cmd_train(const Json& resolved) {
  RunContext ctx("train", resolved);
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  Model<float> m =
      Model<float>::init(ModelConfig::from_run(ctx.rc), ctx.rc.training.seed);
  if (fs::exists(pretrain_path(ctx.rc))) {
    const Model<float> pre =
        Model<float>::load(Checkpoint::load(pretrain_path(ctx.rc)));
    copy_prefix(pre, m, "backbone/");
    std::cout << "loaded pretrained backbone from " << pretrain_path(ctx.rc) << "\n";
  } else {
    pretrain_backbone(m, datasets, ctx.rc);
    Checkpoint pck;
    m.save(pck);
    pck.save(pretrain_path(ctx.rc));
    std::cout << "pretrained backbone inline -> " << pretrain_path(ctx.rc) << "\n";
  }
  const RunLog log = train(m, datasets, ctx.rc);
  Checkpoint ck;
  m.save(ck);
  ck.save(model_path(ctx.rc));
  save_runlog(log, ctx.dir);
  write_param_csv(ctx.file("params.csv"), {{"full", param_report(m)}});
  std::cout << "trained " << ctx.rc.training.variant << " variant over "
            << ctx.rc.training.episodes_total << " episodes -> "
            << model_path(ctx.rc) << "\n";
  ctx.finish("train");
  return 0;
}

int cmd_eval(const Json& resolved) {
  RunContext ctx("eval", resolved);
  const Model<float> m = load_model(ctx.rc);
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  if (ctx.rc.protocol.name == "azs2-sweep") {
    const SweepResult sweep = azs2_sweep(m, datasets, ctx.rc);
    std::vector<std::string> header = {"source"};
    header.insert(header.end(), sweep.tests.begin(), sweep.tests.end());
    std::vector<std::vector<std::string>> rows;
    for (size_t s = 0; s < sweep.sources.size(); ++s) {
      std::vector<std::string> row = {sweep.sources[s]};
      for (double a : sweep.acc[s]) row.push_back(fmt_num(a));
      rows.push_back(std::move(row));
    }
    std::vector<std::string> range_row = {"range"};
    for (double r : sweep.test_ranges()) range_row.push_back(fmt_num(r));
    rows.push_back(std::move(range_row));
    write_csv(ctx.file("matrix.csv"), header, rows);
    std::cout << "swept " << sweep.sources.size() << " sources x "
              << sweep.tests.size() << " test domains -> "
              << ctx.file("matrix.csv") << "\n";
  } else {
    const std::vector<EvalRow> rows = evaluate(m, datasets, ctx.rc);
    std::vector<std::vector<std::string>> csv;
    for (const EvalRow& r : rows) {
      csv.push_back({r.dataset, r.source, fmt_num(r.accuracy), fmt_num(r.ci95),
                     fmt_num(r.mean_loss)});
      std::cout << r.dataset << " [" << r.source << "] accuracy " << fmt_num(r.accuracy)
                << " +- " << fmt_num(r.ci95) << "\n";
    }
    write_csv(ctx.file("metrics.csv"),
              {"dataset", "source", "accuracy", "ci95", "mean_loss"}, csv);
  }
  ctx.finish("eval");
  return 0;
}

FixedSupport deploy_support(const RunConfig& rc, const std::vector<Dataset>& datasets) {
  const ProtocolSection& pc = rc.protocol;
  if (pc.name == "random-matrix") {
    const Dataset& any = datasets.front();
    return make_noise_support({any.images.dim(1), any.images.dim(2), any.images.dim(3)},
                              pc.fixed_support_size, pc.seed);
  }
  if (pc.name == "azs2") {
    if (pc.source.empty())
      fail_schema("config key 'protocol.source' must name a domain for azs2 precompute");
    return make_fixed_support(dataset_by_id(datasets, pc.source), pc.fixed_support_size,
                              pc.seed, "AZS-II");
  }
  fail_schema("config key 'protocol.name' must be azs2 or random-matrix for "
              "precompute, got '", pc.name, "'");
}

int cmd_precompute(const Json& resolved) {
  RunContext ctx("precompute", resolved);
  const Model<float> m = load_model(ctx.rc);
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  const FixedSupport fixed = deploy_support(ctx.rc, datasets);
  const StoredAdaptation<float> stored = precompute(m, fixed);
  const DeployModel<float> dm = strip(m, stored);
  Checkpoint ck;
  dm.save(ck);
  ck.save(deploy_path(ctx.rc));
  write_param_csv(ctx.file("params.csv"),
                  {{"full", param_report(m)}, {"stripped", param_report(dm)}});
  std::cout << "stored adaptation from " << stored.source << " -> "
            << deploy_path(ctx.rc) << "\n";
  std::cout << "strippable fraction "
            << fmt_num(param_report(m).strippable_fraction()) << "\n";
  ctx.finish("precompute");
  return 0;
}

int cmd_report(const Json& resolved) {
  RunContext ctx("report", resolved);
  const Model<float> m = load_model(ctx.rc);
  if (!fs::exists(deploy_path(ctx.rc)))
    throw MissingArtifact(cat("deploy checkpoint '", deploy_path(ctx.rc),
                              "' not found; run precompute first"));
  const DeployModel<float> dm =
      DeployModel<float>::load(Checkpoint::load(deploy_path(ctx.rc)));
  if (dm.stored.config_hash != m.signature())
    fail("deploy checkpoint '", deploy_path(ctx.rc),
         "' does not match the current model; rerun precompute");
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  const FixedSupport fixed = deploy_support(ctx.rc, datasets);

  const ProtocolSection& pc = ctx.rc.protocol;
  std::vector<Episode> episodes;
  for (int t = 0; t < pc.eval_tasks; ++t) {
    const Dataset& ds = datasets[static_cast<size_t>(t) % datasets.size()];
    const uint64_t es = mix_seed({pc.seed, hash_str(ds.id), hash_str("report"),
                                  static_cast<uint64_t>(t)});
    episodes.push_back(sample_episode(ds, pc.way, pc.shot, pc.query, Split::kTest, es));
  }
  const double diff = equivalence_check(m, dm, episodes, fixed);

  TimingReport full;
  TimingReport stripped;
  for (const Episode& ep : episodes) {
    const TimingReport f = timing_report(m, ep.support_images, ep.target_images);
    full.encoder_ms += f.encoder_ms;
    full.adaptation_ms += f.adaptation_ms;
    full.backbone_ms += f.backbone_ms;
    stripped.backbone_ms += timing_report(dm, ep.target_images).backbone_ms;
  }
  const double n = static_cast<double>(episodes.size());
  write_csv(ctx.file("timing.csv"), {"model", "stage", "total_ms", "mean_ms"},
            {{"full", "encoder", fmt_num(full.encoder_ms), fmt_num(full.encoder_ms / n)},
             {"full", "adaptation", fmt_num(full.adaptation_ms),
              fmt_num(full.adaptation_ms / n)},
             {"full", "backbone", fmt_num(full.backbone_ms), fmt_num(full.backbone_ms / n)},
             {"full", "total", fmt_num(full.total()), fmt_num(full.total() / n)},
             {"stripped", "encoder", "0", "0"},
             {"stripped", "adaptation", "0", "0"},
             {"stripped", "backbone", fmt_num(stripped.backbone_ms),
              fmt_num(stripped.backbone_ms / n)},
             {"stripped", "total", fmt_num(stripped.total()),
              fmt_num(stripped.total() / n)}});
  write_param_csv(ctx.file("params.csv"),
                  {{"full", param_report(m)}, {"stripped", param_report(dm)}});
  write_csv(ctx.file("metrics.csv"), {"metric", "value"},
            {{"episodes", fmt_num(static_cast<int64_t>(episodes.size()))},
             {"max_logit_diff", fmt_num(diff)},
             {"strippable_fraction", fmt_num(param_report(m).strippable_fraction())}});
  std::cout << "max logit difference over " << episodes.size() << " episodes: "
            << fmt_num(diff) << "\n";
  ctx.finish("report");
  return 0;
}

int cmd_analyze(const Json& resolved) {
  RunContext ctx("analyze", resolved);
  const Model<float> m = load_model(ctx.rc);
  const std::vector<Dataset> datasets = make_desk_domains(ctx.rc.data);
  const ProtocolSection& pc = ctx.rc.protocol;

  std::vector<std::vector<std::string>> cluster_rows;
  std::vector<std::vector<std::string>> prior_rows;
  for (const Dataset& ds : datasets) {
    const FixedSupport fs =
        make_fixed_support(ds, pc.fixed_support_size, pc.seed, "AZS-I");
    const FilmParams<float> film = film_for_support(m, fs.images.cast<float>());
    std::vector<int> labels;
    const TensorD emb = domain_embeddings(m, ds, film, Split::kTest, &labels);
    const MahalanobisStats stats = mahalanobis_stats(emb, labels);
    cluster_rows.push_back({ds.id, fmt_num(stats.inner), fmt_num(stats.inter),
                            fmt_num(static_cast<int64_t>(stats.dims))});
    export_plot(ctx.file("plot_embed_" + ds.id), pca_project(emb, 2).projected, labels);

    const std::vector<TensorF> supports =
        draw_supports(ds, pc.eval_tasks, pc.fixed_support_size,
                      mix_seed({pc.seed, hash_str(ds.id)}));
    const StabilityResult st = prior_stability(m, supports);
    prior_rows.push_back({ds.id, fmt_num(static_cast<int64_t>(supports.size())),
                          fmt_num(st.dispersion.coord_std_norm),
                          fmt_num(st.dispersion.mean_pairwise)});
    export_plot(ctx.file("plot_prior_" + ds.id), pca_project(st.priors, 2).projected,
                std::vector<int>(supports.size(), 0));
  }
  write_csv(ctx.file("metrics.csv"), {"dataset", "inner", "inter", "dims"}, cluster_rows);
  write_csv(ctx.file("priors.csv"),
            {"dataset", "draws", "coord_std_norm", "mean_pairwise"}, prior_rows);

  const std::vector<FluctRow> fluct = fluctuation_table(m, datasets, pc, 4, 10, pc.seed);
  std::vector<std::string> fluct_header = {"dataset", "task"};
  for (int k = 0; k < 4; ++k) fluct_header.push_back(cat("acc", k));
  fluct_header.push_back("spread");
  std::vector<std::vector<std::string>> fluct_rows;
  for (const FluctRow& row : fluct) {
    std::vector<std::string> r = {row.dataset, fmt_num(static_cast<int64_t>(row.task))};
    for (double a : row.accs) r.push_back(fmt_num(a));
    r.push_back(fmt_num(row.spread()));
    fluct_rows.push_back(std::move(r));
  }
  write_csv(ctx.file("fluctuation.csv"), fluct_header, fluct_rows);
  std::cout << "analyzed " << datasets.size() << " domains -> " << ctx.dir << "\n";
  ctx.finish("analyze");
  return 0;
}

void write_error_record(const std::string& dir, const std::string& command,
                        const std::string& kind, const std::string& message, int code) {
  try {
    Json err;
    err["command"] = command;
    err["error"] = kind;
    err["message"] = message;
    err["exit"] = code;
    write_text_file((fs::path(dir) / "error.json").string(), err.dump(2) + "\n");
  } catch (...) {
  }
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CliArgs a;
  CLI::App app{"desk-scale few-shot adaptation engine"};
  app.require_subcommand(1);
  app.add_option("--config", a.config_path, "JSON config file");
  app.add_option("--set", a.sets, "config override key.path=value")->expected(1)->take_all();
  auto* seed_opt = app.add_option("--seed", a.seed, "training seed");
  app.add_option("--out", a.out, "output directory");
  app.add_option("--protocol", a.protocol, "evaluation protocol")
      ->check(CLI::IsMember({"oneshot", "azs1", "azs2", "azs2-sweep", "random-matrix"}));
  auto* source_opt = app.add_option("--source", a.source, "fixed-support source domain");
  app.add_option("--variant", a.variant, "model variant")
      ->check(CLI::IsMember({"plain", "cmf"}));
  const std::pair<const char*, const char*> commands[] = {
      {"pretrain", "train the backbone as a plain classifier over all domains"},
      {"train", "episodic training of the adaptation networks"},
      {"eval", "score a trained model under an evaluation protocol"},
      {"analyze", "cluster separability, prior stability, and task fluctuation"},
      {"precompute", "store one adaptation and strip the conditioning networks"},
      {"report", "verify the deployed model against the full one"}};
  for (const auto& [name, help] : commands)
    app.add_subcommand(name, help)->fallthrough();

  std::string err_dir = "runs";
  try {
    std::vector<const char*> argv = {"cmf"};
    for (const std::string& s : args) argv.push_back(s.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e);
      if (code != 0)
        write_error_record(a.out.empty() ? err_dir : a.out, a.command, "UsageError",
                           e.what(), code);
      return code;
    }
    a.seed_set = seed_opt->count() > 0;
    a.source_set = source_opt->count() > 0;
    a.command = app.get_subcommands().front()->get_name();
    if (!a.out.empty()) err_dir = a.out;

    check_threads_env();
    const Json resolved = build_resolved(a);
    err_dir = resolved["output"]["dir"].get<std::string>();
    if (a.command == "pretrain") return cmd_pretrain(resolved);
    if (a.command == "train") return cmd_train(resolved);
    if (a.command == "eval") return cmd_eval(resolved);
    if (a.command == "analyze") return cmd_analyze(resolved);
    if (a.command == "precompute") return cmd_precompute(resolved);
    return cmd_report(resolved);
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error_record(err_dir, a.command, "SchemaError", e.what(), 3);
    return 3;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error_record(err_dir, a.command, "MissingArtifact", e.what(), 2);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error_record(err_dir, a.command, "Error", e.what(), 1);
    return 1;
  }
}

}  // namespace cmf
