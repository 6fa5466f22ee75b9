#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cmf/adam.hpp"
#include "cmf/adaptation.hpp"
#include "cmf/backbone.hpp"
#include "cmf/encoder.hpp"
#include "cmf/episodes.hpp"
#include "cmf/io.hpp"
#include "cmf/model.hpp"

namespace cmf {

struct EpisodeVars {
  Var loss;
  Var logits;
  Var prior;
};

// Assembles the full episodic objective on one graph: prior from the prior
// images, FiLM from the prior, filmed embeddings for support and target,
// support-conditioned head, cross-entropy on the target set.
template <class S>
EpisodeVars build_episode_loss(NetBuilder<S>& nb, const Tensor<S>& support_images,
                               const std::vector<int>& support_labels,
                               const Tensor<S>& target_images,
                               const std::vector<int>& target_labels,
                               const Tensor<S>& prior_images, int way) {
  Graph<S>& g = nb.g;
  Var prior = encoder_prior(nb, g.input("prior_images", prior_images));
  std::vector<FilmSite> film = film_from_prior(nb, prior);
  Var s_emb = g.l2_normalize_rows(
      backbone_embed(nb, g.input("support_images", support_images), &film));
  Var t_emb = g.l2_normalize_rows(
      backbone_embed(nb, g.input("target_images", target_images), &film));
  auto [w, b] = build_head_vars(nb, s_emb, support_labels, way);
  Var logits = g.dense(t_emb, w, b);
  Var loss = g.softmax_cross_entropy(logits, target_labels);
  g.mark_output("loss", loss);
  g.mark_output("logits", logits);
  g.mark_output("prior", prior);
  return {loss, logits, prior};
}

template <class S>
double accuracy_of(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.dim(0) != static_cast<int64_t>(labels.size()))
    fail("accuracy_of: ", logits.dim(0), " rows, ", labels.size(), " labels");
  int64_t hits = 0;
  for (int64_t r = 0; r < logits.dim(0); ++r)
    if (argmax_row(logits, r) == labels[r]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(logits.dim(0));
}

template <class S>
FilmParams<S> film_for_support(const Model<S>& model, const Tensor<S>& support_images) {
  return compute_film(model, encode_mean(model, support_images));
}

template <class S>
struct EpisodeEval {
  double loss = 0.0;
  double accuracy = 0.0;
  Tensor<S> logits;
};

// Inference path for one task. A null film means the prior comes from the
// task's own support; the classifier head always does.
template <class S>
EpisodeEval<S> eval_episode(const Model<S>& model, const Episode& ep,
                            const FilmParams<S>* fixed_film = nullptr) {
  const Tensor<S> support = ep.support_images.template cast<S>();
  const Tensor<S> target = ep.target_images.template cast<S>();
  const FilmParams<S> film =
      fixed_film ? *fixed_film : film_for_support(model, support);
  const Tensor<S> s_emb = backbone_forward(model, support, film);
  const HeadParams<S> head = build_classifier(model, s_emb, ep.support_labels, ep.way);
  EpisodeEval<S> out;
  out.logits = predict(model, target, film, head);
  out.accuracy = accuracy_of(out.logits, ep.target_labels);
  Graph<S> g;
  Var nll = g.softmax_cross_entropy(g.input("logits", out.logits), ep.target_labels);
  out.loss = static_cast<double>(g.value(nll)[0]);
  return out;
}

// Candidate replaces the incumbent only when it wins on strictly more than
// half of the datasets; ties are not wins.
inline bool select_model(const std::vector<double>& candidate,
                         const std::vector<double>& incumbent) {
  if (candidate.empty() || candidate.size() != incumbent.size())
    fail("select_model: accuracy lists of sizes ", candidate.size(), " and ",
         incumbent.size(), " are not comparable");
  int wins = 0;
  for (size_t i = 0; i < candidate.size(); ++i)
    if (candidate[i] > incumbent[i]) ++wins;
  return 2 * wins > static_cast<int>(candidate.size());
}

struct LogRow {
  int64_t episode = 0;
  std::string dataset;
  double accuracy = 0.0;
  double loss = 0.0;
  bool operator==(const LogRow&) const = default;
};

struct RunLog {
  std::vector<LogRow> train_rows;
  std::vector<LogRow> val_rows;
  bool operator==(const RunLog&) const = default;
};

inline std::vector<std::vector<std::string>> log_rows_csv(const std::vector<LogRow>& rows) {
  std::vector<std::vector<std::string>> out;
  for (const LogRow& r : rows)
    out.push_back({fmt_num(r.episode), r.dataset, fmt_num(r.accuracy), fmt_num(r.loss)});
  return out;
}

inline void save_runlog(const RunLog& log, const std::string& dir) {
  const std::vector<std::string> header = {"episode", "dataset", "accuracy", "loss"};
  write_csv(dir + "/runlog.csv", header, log_rows_csv(log.train_rows));
  write_csv(dir + "/validation.csv", header, log_rows_csv(log.val_rows));
}

template <class S>
void copy_prefix(const Model<S>& src, Model<S>& dst, const std::string& prefix) {
  int copied = 0;
  for (const auto& [name, value] : src.params) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = dst.params.find(name);
    if (it == dst.params.end()) fail("copy_prefix: destination lacks '", name, "'");
    if (!it->second.same_shape(value))
      fail("copy_prefix: shape mismatch on '", name, "'");
    it->second = value;
    ++copied;
  }
  if (copied == 0) fail("copy_prefix: no parameters under '", prefix, "'");
}

template <class S>
void adam_update(Adam<S>& adam, Model<S>& model, const std::set<std::string>& prefixes,
                 const std::map<std::string, Tensor<S>>& grads) {
  std::map<std::string, Tensor<S>> sub;
  for (const auto& [name, value] : model.params)
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) sub.emplace(name, value);
  adam.step(sub, grads);
  for (auto& [name, value] : sub) model.params.at(name) = std::move(value);
}

// Supervised warm start for the trunk: all train-split images of all domains
// under one global label space, a throwaway linear head, no FiLM sites.
template <class S>
void pretrain_backbone(Model<S>& model, const std::vector<Dataset>& datasets,
                       const RunConfig& cfg) {
  if (cfg.training.pretrain_epochs == 0) return;
  struct Item {
    const Dataset* ds;
    int64_t idx;
    int label;
  };
  std::vector<Item> items;
  int offset = 0;
  for (const Dataset& ds : datasets) {
    for (int64_t i = 0; i < ds.count(); ++i)
      if (ds.split[i] == static_cast<int>(Split::kTrain))
        items.push_back({&ds, i, offset + ds.labels[i]});
    offset += ds.classes;
  }
  if (items.empty()) fail("pretrain: no training images in any dataset");

  Rng head_rng(mix_seed({cfg.training.seed, hash_str("pretrain_head")}));
  Tensor<S> head_w = Tensor<S>::kaiming({offset, model.cfg.embedding_dim},
                                        model.cfg.embedding_dim, head_rng);
  Tensor<S> head_b = Tensor<S>::zeros({offset});
  Adam<S> adam(cfg.training.pretrain_lr);
  const int batch = 32;
  const int64_t c = model.cfg.image_channels;
  const int64_t hw = model.cfg.image_size;
  const int64_t px = c * hw * hw;

  for (int epoch = 0; epoch < cfg.training.pretrain_epochs; ++epoch) {
    Rng order_rng(mix_seed({cfg.training.seed, hash_str("pretrain"),
                            static_cast<uint64_t>(epoch)}));
    order_rng.shuffle(items);
    for (size_t start = 0; start < items.size(); start += batch) {
      const int64_t n = std::min<size_t>(batch, items.size() - start);
      Tensor<S> images = Tensor<S>::zeros({n, c, hw, hw});
      std::vector<int> labels;
      for (int64_t j = 0; j < n; ++j) {
        const Item& it = items[start + j];
        const float* src = it.ds->images.data() + it.idx * px;
        for (int64_t p = 0; p < px; ++p) images.data()[j * px + p] = static_cast<S>(src[p]);
        labels.push_back(it.label);
      }
      Graph<S> g;
      NetBuilder<S> nb(g, model, {"backbone/"});
      Var emb = backbone_embed(nb, g.input("images", images), nullptr);
      Var logits = g.dense(emb, g.parameter("pretrain/head_w", head_w),
                           g.parameter("pretrain/head_b", head_b));
      Var loss = g.softmax_cross_entropy(logits, labels);
      auto grads = g.backward(loss);

      std::map<std::string, Tensor<S>> sub;
      for (const auto& [name, value] : model.params)
        if (name.rfind("backbone/", 0) == 0) sub.emplace(name, value);
      sub.emplace("pretrain/head_w", head_w);
      sub.emplace("pretrain/head_b", head_b);
      adam.step(sub, grads);
      for (auto& [name, value] : sub) {
        if (name == "pretrain/head_w")
          head_w = std::move(value);
        else if (name == "pretrain/head_b")
          head_b = std::move(value);
        else
          model.params.at(name) = std::move(value);
      }
    }
  }
}

// Episodic training over the frozen trunk. Gradients accumulate over
// batch_size episodes in episode order before each optimizer step;
// validation runs on fixed-seed episodes and the incumbent parameters are
// kept under the majority-wins rule.
template <class S>
RunLog train(Model<S>& model, const std::vector<Dataset>& datasets, const RunConfig& cfg) {
  if (datasets.empty()) fail("train: no datasets");
  const TrainingSection& tc = cfg.training;
  const ProtocolSection& pc = cfg.protocol;
  const std::set<std::string> trainable = {"encoder/", "adapt/", "head/"};

  RunLog log;
  Adam<S> adam(tc.lr);
  std::map<std::string, Tensor<S>> acc;
  int in_batch = 0;
  std::vector<double> best_val;
  std::map<std::string, Tensor<S>> best_params;
  bool have_best = false;

  auto apply_step = [&]() {
    if (in_batch == 0) return;
    for (auto& [name, g] : acc) g.vec() *= S(1.0 / in_batch);
    adam_update(adam, model, trainable, acc);
    acc.clear();
    in_batch = 0;
  };

  auto validate = [&](int64_t at_episode) {
    std::vector<double> accs;
    for (size_t d = 0; d < datasets.size(); ++d) {
      double acc_sum = 0.0, loss_sum = 0.0;
      for (int j = 0; j < tc.val_episodes; ++j) {
        const uint64_t s = mix_seed({tc.seed, hash_str("val"), static_cast<uint64_t>(d),
                                     static_cast<uint64_t>(j)});
        const Episode ep = sample_episode(datasets[d], pc.way, pc.shot, pc.query,
                                          Split::kVal, s);
        const EpisodeEval<S> r = eval_episode(model, ep);
        acc_sum += r.accuracy;
        loss_sum += r.loss;
      }
      accs.push_back(acc_sum / tc.val_episodes);
      log.val_rows.push_back({at_episode, datasets[d].id, accs.back(),
                              loss_sum / tc.val_episodes});
    }
    if (!have_best || select_model(accs, best_val)) {
      best_val = accs;
      best_params = model.params;
      have_best = true;
    }
  };

  for (int64_t i = 1; i <= tc.episodes_total; ++i) {
    const uint64_t ep_seed = mix_seed({tc.seed, hash_str("episode"), static_cast<uint64_t>(i)});
    Rng pick(ep_seed);
    const auto d = static_cast<size_t>(pick.uniform_int(static_cast<int64_t>(datasets.size())));
    const Episode ep = sample_episode(datasets[d], pc.way, pc.shot, pc.query, Split::kTrain,
                                      mix_seed({ep_seed, hash_str("sample")}));
    const Tensor<S> support = ep.support_images.template cast<S>();
    const Tensor<S> target = ep.target_images.template cast<S>();

    Graph<S> g;
    NetBuilder<S> nb(g, model, trainable);
    const EpisodeVars v = build_episode_loss(nb, support, ep.support_labels, target,
                                             ep.target_labels, support, ep.way);
    auto grads = g.backward(v.loss);
    for (auto& [name, gt] : grads) {
      auto it = acc.find(name);
      if (it == acc.end())
        acc.emplace(name, std::move(gt));
      else
        it->second.vec() += gt.vec();
    }
    ++in_batch;
    log.train_rows.push_back({i, ep.source, accuracy_of(g.value(v.logits), ep.target_labels),
                              static_cast<double>(g.value(v.loss)[0])});
    if (in_batch == tc.batch_size) apply_step();
    if (tc.validate_every > 0 && i % tc.validate_every == 0) validate(i);
  }
  apply_step();
  if (have_best) model.params = std::move(best_params);
  return log;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

inline double ci95_of(const std::vector<double>& xs) {
  const size_t n = xs.size();
  if (n < 2) return 0.0;
  const double m = mean_of(xs);
  double var = 0.0;
  for (double x : xs) var += (x - m) * (x - m);
  var /= static_cast<double>(n - 1);
  return 1.96 * std::sqrt(var / static_cast<double>(n));
}

struct EvalRow {
  std::string dataset;
  std::string source;
  double accuracy = 0.0;
  double ci95 = 0.0;
  double mean_loss = 0.0;
};

inline const Dataset& dataset_by_id(const std::vector<Dataset>& datasets,
                                    const std::string& id) {
  for (const Dataset& ds : datasets)
    if (ds.id == id) return ds;
  fail("no dataset named '", id, "'");
}

// Task seeds depend only on the protocol seed, dataset, and task index, so
// every protocol scores the identical task list.
template <class S>
std::vector<double> protocol_task_accs(const Model<S>& model, const Dataset& ds,
                                       const ProtocolSection& pc,
                                       const FilmParams<S>* fixed_film,
                                       double* mean_loss = nullptr) {
  std::vector<double> accs;
  double loss_sum = 0.0;
  for (int t = 0; t < pc.eval_tasks; ++t) {
    const uint64_t s = mix_seed({pc.seed, hash_str(ds.id), hash_str("task"),
                                 static_cast<uint64_t>(t)});
    const Episode ep = sample_episode(ds, pc.way, pc.shot, pc.query, Split::kTest, s);
    const EpisodeEval<S> r = eval_episode(model, ep, fixed_film);
    accs.push_back(r.accuracy);
    loss_sum += r.loss;
  }
  if (mean_loss) *mean_loss = loss_sum / std::max(1, pc.eval_tasks);
  return accs;
}

template <class S>
std::vector<EvalRow> evaluate(const Model<S>& model, const std::vector<Dataset>& datasets,
                              const RunConfig& cfg) {
  const ProtocolSection& pc = cfg.protocol;
  std::optional<FilmParams<S>> shared_film;
  std::string shared_source;
  if (pc.name == "azs2") {
    if (pc.source.empty()) fail("azs2 protocol needs protocol.source");
    const Dataset& src = dataset_by_id(datasets, pc.source);
    const FixedSupport fs = make_fixed_support(src, pc.fixed_support_size, pc.seed, "AZS-II");
    shared_film = film_for_support(model, fs.images.template cast<S>());
    shared_source = src.id;
  } else if (pc.name == "random-matrix") {
    const Dataset& any = datasets.at(0);
    const FixedSupport fs = make_noise_support(
        {any.images.dim(1), any.images.dim(2), any.images.dim(3)}, pc.fixed_support_size,
        pc.seed);
    shared_film = film_for_support(model, fs.images.template cast<S>());
    shared_source = "noise";
  } else if (pc.name != "oneshot" && pc.name != "azs1") {
    fail("evaluate: unknown protocol '", pc.name, "'");
  }

  std::vector<EvalRow> rows;
  for (const Dataset& ds : datasets) {
    std::optional<FilmParams<S>> film = shared_film;
    std::string source = shared_source;
    if (pc.name == "azs1") {
      const FixedSupport fs = make_fixed_support(ds, pc.fixed_support_size, pc.seed, "AZS-I");
      film = film_for_support(model, fs.images.template cast<S>());
      source = ds.id;
    } else if (pc.name == "oneshot") {
      source = "self";
    }
    double mean_loss = 0.0;
    const std::vector<double> accs =
        protocol_task_accs(model, ds, pc, film ? &*film : nullptr, &mean_loss);
    rows.push_back({ds.id, source, mean_of(accs), ci95_of(accs), mean_loss});
  }
  return rows;
}

struct SweepResult {
  std::vector<std::string> sources;
  std::vector<std::string> tests;
  std::vector<std::vector<double>> acc;  // [source][test]

  // Per test dataset: spread of accuracy across prior sources.
  std::vector<double> test_ranges() const {
    std::vector<double> out(tests.size(), 0.0);
    for (size_t t = 0; t < tests.size(); ++t) {
      double lo = acc[0][t], hi = acc[0][t];
      for (size_t s = 1; s < sources.size(); ++s) {
        lo = std::min(lo, acc[s][t]);
        hi = std::max(hi, acc[s][t]);
      }
      out[t] = hi - lo;
    }
    return out;
  }
};

template <class S>
SweepResult azs2_sweep(const Model<S>& model, const std::vector<Dataset>& datasets,
                       const RunConfig& cfg) {
  const ProtocolSection& pc = cfg.protocol;
  SweepResult sweep;
  for (const Dataset& ds : datasets) sweep.tests.push_back(ds.id);
  for (const Dataset& src : datasets) {
    sweep.sources.push_back(src.id);
    const FixedSupport fs = make_fixed_support(src, pc.fixed_support_size, pc.seed, "AZS-II");
    const FilmParams<S> film = film_for_support(model, fs.images.template cast<S>());
    std::vector<double> row;
    for (const Dataset& ds : datasets)
      row.push_back(mean_of(protocol_task_accs(model, ds, pc, &film)));
    sweep.acc.push_back(std::move(row));
  }
  return sweep;
}

}  // namespace cmf
