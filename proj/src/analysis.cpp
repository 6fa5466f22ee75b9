#include "cmf/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "cmf/io.hpp"

namespace cmf {

namespace {

std::string fmt_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PcaResult pca_project(const TensorD& data, int out_dims) {
  if (data.rank() != 2) fail("pca_project: expects [M,D] data, got ", shape_str(data.shape()));
  const int64_t m = data.dim(0);
  const int64_t d = data.dim(1);
  if (out_dims < 1) fail("pca_project: out_dims must be at least 1, got ", out_dims);
  if (out_dims > d) fail("pca_project: cannot take ", out_dims, " components from ", d,
                         " columns");
  if (m <= out_dims)
    fail("pca_project: needs more than ", out_dims, " rows, got ", m);

  PcaResult r;
  r.mean = TensorD::zeros({d});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) r.mean[j] += data.at2(i, j);
  for (int64_t j = 0; j < d; ++j) r.mean[j] /= static_cast<double>(m);

  Eigen::MatrixXd centered(m, d);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) centered(i, j) = data.at2(i, j) - r.mean[j];

  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(m - 1);
  if (cov.trace() <= 0.0)
    fail("pca_project: data has zero variance in every direction");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) fail("pca_project: eigendecomposition failed");

  r.components = TensorD::zeros({out_dims, d});
  r.eigenvalues.resize(static_cast<size_t>(out_dims));
  for (int k = 0; k < out_dims; ++k) {
    const int64_t src = d - 1 - k;  // ascending order in the solver
    Eigen::VectorXd v = es.eigenvectors().col(src);
    int64_t pivot = 0;
    for (int64_t j = 1; j < d; ++j)
      if (std::abs(v(j)) > std::abs(v(pivot))) pivot = j;
    if (v(pivot) < 0.0) v = -v;
    for (int64_t j = 0; j < d; ++j) r.components.at2(k, j) = v(j);
    r.eigenvalues[static_cast<size_t>(k)] = es.eigenvalues()(src);
  }

  r.projected = TensorD::zeros({m, out_dims});
  for (int64_t i = 0; i < m; ++i)
    for (int k = 0; k < out_dims; ++k) {
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) s += centered(i, j) * r.components.at2(k, j);
      r.projected.at2(i, k) = s;
    }
  return r;
}

MahalanobisStats mahalanobisStats_impl(const TensorD& proj, const std::vector<int>& labels) {
  const int64_t m = proj.dim(0);
  const int64_t d = proj.dim(1);

  Eigen::MatrixXd x(m, d);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) x(i, j) = proj.at2(i, j);
  Eigen::VectorXd mu = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(m - 1);
  const double ridge = 1e-6 * cov.trace() / static_cast<double>(d);
  cov += ridge * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd inv = cov.ldlt().solve(Eigen::MatrixXd::Identity(d, d));

  auto dist = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const Eigen::VectorXd diff = a - b;
    return std::sqrt(diff.dot(inv * diff));
  };

  MahalanobisStats stats;
  stats.dims = static_cast<int>(d);
  double inner_sum = 0.0;
  int64_t inner_n = 0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = i + 1; j < m; ++j)
      if (labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
        inner_sum += dist(x.row(i), x.row(j));
        ++inner_n;
      }
  if (inner_n == 0) fail("mahalanobis_stats: no same-class pairs");
  stats.inner = inner_sum / static_cast<double>(inner_n);

  const int n_cls = 1 + *std::max_element(labels.begin(), labels.end());
  std::vector<Eigen::VectorXd> centroids;
  for (int c = 0; c < n_cls; ++c) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    int64_t n = 0;
    for (int64_t i = 0; i < m; ++i)
      if (labels[static_cast<size_t>(i)] == c) {
        sum += x.row(i).transpose();
        ++n;
      }
    if (n > 0) centroids.push_back(sum / static_cast<double>(n));
  }
  if (centroids.size() < 2) fail("mahalanobis_stats: needs at least 2 classes");
  double inter_sum = 0.0;
  int64_t inter_n = 0;
  for (size_t a = 0; a < centroids.size(); ++a)
    for (size_t b = a + 1; b < centroids.size(); ++b) {
      inter_sum += dist(centroids[a], centroids[b]);
      ++inter_n;
    }
  stats.inter = inter_sum / static_cast<double>(inter_n);
  return stats;
}

MahalanobisStats mahalanobis_stats(const TensorD& features, const std::vector<int>& labels) {
  if (features.rank() != 2)
    fail("mahalanobis_stats: expects [M,D] features, got ", shape_str(features.shape()));
  const int64_t m = features.dim(0);
  if (m != static_cast<int64_t>(labels.size()))
    fail("mahalanobis_stats: ", m, " rows, ", labels.size(), " labels");
  if (m < 3) fail("mahalanobis_stats: needs at least 3 rows, got ", m);
  const int dims = static_cast<int>(std::min<int64_t>({64, m - 1, features.dim(1)}));
  const PcaResult pca = pca_project(features, dims);
  return mahalanobisStats_impl(pca.projected, labels);
}

Dispersion dispersion_of(const TensorD& rows) {
  if (rows.rank() != 2) fail("dispersion_of: expects [N,D] rows, got ", shape_str(rows.shape()));
  const int64_t n = rows.dim(0);
  const int64_t d = rows.dim(1);
  if (n < 2) fail("dispersion_of: needs at least 2 rows, got ", n);

  Dispersion out;
  double var_sum = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (int64_t i = 0; i < n; ++i) mu += rows.at2(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double e = rows.at2(i, j) - mu;
      var += e * e;
    }
    var_sum += var / static_cast<double>(n - 1);
  }
  out.coord_std_norm = std::sqrt(var_sum);

  double pair_sum = 0.0;
  int64_t pairs = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        const double e = rows.at2(i, k) - rows.at2(j, k);
        d2 += e * e;
      }
      pair_sum += std::sqrt(d2);
      ++pairs;
    }
  out.mean_pairwise = pair_sum / static_cast<double>(pairs);
  return out;
}

PlotOutput export_plot(const std::string& base, const TensorD& points,
                       const std::vector<int>& labels) {
  if (points.rank() != 2)
    fail("export_plot: expects [M,dims] points, got ", shape_str(points.shape()));
  const int64_t m = points.dim(0);
  const int64_t dims = points.dim(1);
  if (m < 1) fail("export_plot: no points");
  std::vector<int> lab = labels;
  if (lab.empty()) lab.assign(static_cast<size_t>(m), 0);
  if (static_cast<int64_t>(lab.size()) != m)
    fail("export_plot: ", m, " points, ", lab.size(), " labels");

  PlotOutput out;
  out.csv_path = base + ".csv";
  std::vector<std::string> header;
  for (int64_t j = 0; j < dims; ++j) header.push_back(cat("x", j));
  header.push_back("label");
  std::vector<std::vector<std::string>> rows;
  for (int64_t i = 0; i < m; ++i) {
    std::vector<std::string> row;
    for (int64_t j = 0; j < dims; ++j) row.push_back(fmt_exact(points.at2(i, j)));
    row.push_back(std::to_string(lab[static_cast<size_t>(i)]));
    rows.push_back(std::move(row));
  }
  write_csv(out.csv_path, header, rows);

  if (dims != 2) {
    out.note = cat(dims, "-d points exported as csv only");
    return out;
  }

  double lo[2], hi[2];
  for (int a = 0; a < 2; ++a) {
    lo[a] = points.at2(0, a);
    hi[a] = points.at2(0, a);
    for (int64_t i = 1; i < m; ++i) {
      lo[a] = std::min(lo[a], points.at2(i, a));
      hi[a] = std::max(hi[a], points.at2(i, a));
    }
    if (hi[a] - lo[a] < 1e-12) {
      lo[a] -= 1.0;
      hi[a] += 1.0;
    }
  }
  const double size = 480.0, margin = 32.0;
  const double span = size - 2.0 * margin;
  static const char* kPalette[10] = {"#4269d0", "#efb118", "#ff725c", "#6cc5b0",
                                     "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5",
                                     "#9c6b4e", "#9498a0"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\" "
         "viewBox=\"0 0 480 480\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"480\" height=\"480\" fill=\"white\" "
         "stroke=\"#888\"/>\n";
  for (int64_t i = 0; i < m; ++i) {
    const double px = margin + span * (points.at2(i, 0) - lo[0]) / (hi[0] - lo[0]);
    const double py = size - margin - span * (points.at2(i, 1) - lo[1]) / (hi[1] - lo[1]);
    const int c = ((lab[static_cast<size_t>(i)] % 10) + 10) % 10;
    svg << "<circle cx=\"" << fmt_num(px) << "\" cy=\"" << fmt_num(py)
        << "\" r=\"4\" fill=\"" << kPalette[c] << "\" fill-opacity=\"0.75\"/>\n";
  }
  svg << "</svg>\n";
  out.svg_path = base + ".svg";
  write_text_file(out.svg_path, svg.str());
  return out;
}

std::pair<TensorD, std::vector<int>> load_points_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail("points csv '", path, "' is empty");
  int64_t dims = static_cast<int64_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    for (int64_t j = 0; j < dims; ++j) {
      if (!std::getline(row, field, ',')) fail("points csv '", path, "' has a short row");
      values.push_back(std::stod(field));
    }
    if (!std::getline(row, field, ',')) fail("points csv '", path, "' has a short row");
    labels.push_back(std::stoi(field));
  }
  const int64_t m = static_cast<int64_t>(labels.size());
  if (m == 0) fail("points csv '", path, "' has no rows");
  TensorD points({m, dims}, std::move(values));
  return {std::move(points), std::move(labels)};
}

std::vector<TensorF> draw_supports(const Dataset& ds, int draws, int size_s, uint64_t seed) {
  if (draws < 1) fail("draw_supports: needs at least 1 draw");
  std::vector<int64_t> pool;
  for (int64_t i = 0; i < ds.count(); ++i)
    if (ds.split[i] == static_cast<int>(Split::kTest)) pool.push_back(i);
  if (static_cast<int>(pool.size()) < size_s)
    fail("draw_supports: dataset '", ds.id, "' test split has ", pool.size(),
         " images, need ", size_s);
  const int64_t px = ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
  std::vector<TensorF> out;
  for (int k = 0; k < draws; ++k) {
    Rng rng(mix_seed({seed, hash_str("stability"), static_cast<uint64_t>(k)}));
    const std::vector<int64_t> picks =
        rng.sample_without_replacement(static_cast<int64_t>(pool.size()), size_s);
    TensorF sup = TensorF::zeros({size_s, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    for (int i = 0; i < size_s; ++i)
      std::copy_n(ds.images.data() + pool[static_cast<size_t>(picks[i])] * px, px,
                  sup.data() + i * px);
    out.push_back(std::move(sup));
  }
  return out;
}

std::vector<TensorF> draw_noise_supports(const Shape& image_shape, int draws, int size_s,
                                         uint64_t seed) {
  if (draws < 1) fail("draw_noise_supports: needs at least 1 draw");
  std::vector<TensorF> out;
  for (int k = 0; k < draws; ++k)
    out.push_back(make_noise_support(image_shape, size_s,
                                     mix_seed({seed, static_cast<uint64_t>(k)}))
                      .images);
  return out;
}

}  // namespace cmf
