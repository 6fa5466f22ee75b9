#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "cmf/adaptation.hpp"
#include "cmf/backbone.hpp"
#include "cmf/encoder.hpp"
#include "cmf/episodes.hpp"
#include "cmf/model.hpp"
#include "cmf/training.hpp"

namespace cmf {

struct PcaResult {
  TensorD projected;   // [M, out_dims]
  TensorD components;  // [out_dims, D], orthonormal rows
  TensorD mean;        // [D]
  std::vector<double> eigenvalues;  // descending
};

// Principal components of mean-centered data. Each component's sign is fixed
// so its largest-magnitude coordinate is positive (lowest index on ties).
PcaResult pca_project(const TensorD& data, int out_dims);

struct MahalanobisStats {
  double inner = 0.0;  // mean distance over same-class pairs
  double inter = 0.0;  // mean distance over class-centroid pairs
  int dims = 0;
};

// Distances in pca space, dims = min(64, M-1, D), under the ridged global
// covariance metric.
MahalanobisStats mahalanobis_stats(const TensorD& features, const std::vector<int>& labels);

struct Dispersion {
  double coord_std_norm = 0.0;
  double mean_pairwise = 0.0;
};

Dispersion dispersion_of(const TensorD& rows);

struct PlotOutput {
  std::string csv_path;
  std::string svg_path;
  std::string note;
};

// Always writes points as csv; 2-d points also get an svg scatter.
PlotOutput export_plot(const std::string& base, const TensorD& points,
                       const std::vector<int>& labels);

std::pair<TensorD, std::vector<int>> load_points_csv(const std::string& path);

std::vector<TensorF> draw_supports(const Dataset& ds, int draws, int size_s, uint64_t seed);
std::vector<TensorF> draw_noise_supports(const Shape& image_shape, int draws, int size_s,
                                         uint64_t seed);

struct StabilityResult {
  TensorD priors;  // [draws, prior_dim]
  Dispersion dispersion;
};

template <class S>
StabilityResult prior_stability(const Model<S>& model, const std::vector<TensorF>& supports) {
  if (supports.size() < 2)
    fail("prior_stability: needs at least 2 support draws, got ", supports.size());
  const int64_t draws = static_cast<int64_t>(supports.size());
  StabilityResult out;
  out.priors = TensorD::zeros({draws, model.cfg.prior_dim});
  for (int64_t i = 0; i < draws; ++i) {
    const Tensor<S> prior = encode_mean(model, supports[static_cast<size_t>(i)].template cast<S>());
    for (int64_t j = 0; j < model.cfg.prior_dim; ++j)
      out.priors.at2(i, j) = static_cast<double>(prior[j]);
  }
  out.dispersion = dispersion_of(out.priors);
  return out;
}

struct FluctRow {
  std::string dataset;
  int task = 0;
  std::vector<double> accs;  // one per support draw

  double spread() const {
    double lo = accs.at(0), hi = accs.at(0);
    for (double a : accs) {
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
    return hi - lo;
  }
};

// Per domain: supports_per_task fixed supports feed the FiLM prior while each
// task keeps its own classifier support; one row per task.
template <class S>
std::vector<FluctRow> fluctuation_table(const Model<S>& model,
                                        const std::vector<Dataset>& datasets,
                                        const ProtocolSection& pc, int supports_per_task,
                                        int tasks_per_domain, uint64_t seed) {
  if (supports_per_task < 2)
    fail("fluctuation_table: needs at least 2 supports per task, got ", supports_per_task);
  if (tasks_per_domain < 1) fail("fluctuation_table: needs at least 1 task per domain");
  std::vector<FluctRow> rows;
  for (const Dataset& ds : datasets) {
    const std::vector<TensorF> supports =
        draw_supports(ds, supports_per_task, pc.fixed_support_size,
                      mix_seed({seed, hash_str(ds.id), hash_str("fluct_support")}));
    std::vector<FilmParams<S>> films;
    for (const TensorF& sup : supports)
      films.push_back(film_for_support(model, sup.template cast<S>()));
    for (int t = 0; t < tasks_per_domain; ++t) {
      const uint64_t es = mix_seed({seed, hash_str(ds.id), hash_str("fluct_task"),
                                    static_cast<uint64_t>(t)});
      const Episode ep = sample_episode(ds, pc.way, pc.shot, pc.query, Split::kTest, es);
      FluctRow row;
      row.dataset = ds.id;
      row.task = t;
      for (const FilmParams<S>& film : films)
        row.accs.push_back(eval_episode(model, ep, &film).accuracy);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// Embeddings of one split of a dataset under a fixed film, with class labels.
template <class S>
TensorD domain_embeddings(const Model<S>& model, const Dataset& ds, const FilmParams<S>& film,
                          Split split, std::vector<int>* labels_out) {
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < ds.count(); ++i)
    if (ds.split[i] == static_cast<int>(split)) idx.push_back(i);
  if (idx.empty()) fail("domain_embeddings: dataset '", ds.id, "' has no images in the split");
  const int64_t px = ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
  TensorF batch = TensorF::zeros({static_cast<int64_t>(idx.size()), ds.images.dim(1),
                                  ds.images.dim(2), ds.images.dim(3)});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(ds.images.data() + idx[i] * px, px, batch.data() + static_cast<int64_t>(i) * px);
  const Tensor<S> emb = backbone_forward(model, batch.template cast<S>(), film);
  TensorD out = TensorD::zeros(emb.shape());
  for (int64_t i = 0; i < emb.size(); ++i) out[i] = static_cast<double>(emb[i]);
  if (labels_out) {
    labels_out->clear();
    for (int64_t i : idx) labels_out->push_back(ds.labels[i]);
  }
  return out;
}

struct TimingReport {
  double encoder_ms = 0.0;
  double adaptation_ms = 0.0;
  double backbone_ms = 0.0;
  double total() const { return encoder_ms + adaptation_ms + backbone_ms; }
};

template <class S>
TimingReport timing_report(const Model<S>& model, const TensorF& support,
                           const TensorF& targets) {
  using Clock = std::chrono::steady_clock;
  TimingReport r;
  const Tensor<S> sup = support.template cast<S>();
  const Tensor<S> tgt = targets.template cast<S>();
  const auto t0 = Clock::now();
  const Tensor<S> prior = encode_mean(model, sup);
  const auto t1 = Clock::now();
  const FilmParams<S> film = compute_film(model, prior);
  const auto t2 = Clock::now();
  const Tensor<S> emb = backbone_forward(model, tgt, film);
  const auto t3 = Clock::now();
  (void)emb;
  r.encoder_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  r.adaptation_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  r.backbone_ms = std::chrono::duration<double, std::milli>(t3 - t2).count();
  return r;
}

}  // namespace cmf
