#include "gap/evalmetrics.hpp"

#include <algorithm>

namespace gap {

namespace {

void require_pairs(const TokenBatch& gen, const TokenBatch& gt) {
  if (gen.empty() || gen.size() != gt.size()) throw Error(ErrorKind::ShapeMismatch, "batch sizes differ or empty");
  for (size_t i = 0; i < gen.size(); ++i)
    if (gen[i].rows() != gt[i].rows() || gen[i].cols() != gt[i].cols())
      throw Error(ErrorKind::ShapeMismatch, "token shapes differ at sample " + std::to_string(i));
}

size_t total_tokens(const TokenBatch& b) {
  size_t n = 0;
  for (const auto& m : b) n += static_cast<size_t>(m.rows());
  return n;
}

Eigen::MatrixXd to_double(const Mat<float>& m) { return m.cast<double>(); }

}  // namespace

const char* to_string(Component c) {
  switch (c) {
    case Component::Patch: return "patch";
    case Component::Cls: return "cls";
    case Component::Reg: return "reg";
  }
  return "?";
}

TokenBatch component_tokens(const std::vector<TargetEmbedding>& batch, Component c) {
  TokenBatch out;
  out.reserve(batch.size());
  for (const auto& e : batch) {
    switch (c) {
      case Component::Patch: out.push_back(to_double(e.patches)); break;
      case Component::Cls: out.push_back(to_double(e.cls)); break;
      case Component::Reg: out.push_back(to_double(e.registers)); break;
    }
  }
  return out;
}

double cosine_metric(const TokenBatch& gen, const TokenBatch& gt) {
  require_pairs(gen, gt);
  double sum = 0;
  for (size_t i = 0; i < gen.size(); ++i)
    for (Eigen::Index j = 0; j < gen[i].rows(); ++j) {
      const double denom = std::max(gen[i].row(j).norm() * gt[i].row(j).norm(), kMetricEps);
      sum += gen[i].row(j).dot(gt[i].row(j)) / denom;
    }
  const size_t n = total_tokens(gen);
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double mse_metric(const TokenBatch& gen, const TokenBatch& gt) {
  require_pairs(gen, gt);
  double sum = 0;
  size_t n = 0;
  for (size_t i = 0; i < gen.size(); ++i) {
    sum += (gen[i] - gt[i]).squaredNorm();
    n += static_cast<size_t>(gen[i].size());
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double norm_ratio(const TokenBatch& gen, const TokenBatch& gt) {
  require_pairs(gen, gt);
  double sum = 0;
  for (size_t i = 0; i < gen.size(); ++i)
    for (Eigen::Index j = 0; j < gen[i].rows(); ++j) sum += gen[i].row(j).norm() / (gt[i].row(j).norm() + kMetricEps);
  const size_t n = total_tokens(gen);
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

AlignmentReport alignment_report(const std::vector<TargetEmbedding>& gen, const std::vector<TargetEmbedding>& gt) {
  if (gen.size() != gt.size() || gen.empty()) throw Error(ErrorKind::ShapeMismatch, "batch sizes differ or empty");
  AlignmentReport r;
  r.count = static_cast<int>(gen.size());
  auto fill = [&](Component c, ComponentMetrics& m) {
    const TokenBatch a = component_tokens(gen, c);
    const TokenBatch b = component_tokens(gt, c);
    m.cosine = cosine_metric(a, b);
    m.mse = mse_metric(a, b);
    m.norm_ratio = norm_ratio(a, b);
  };
  fill(Component::Patch, r.patch);
  fill(Component::Cls, r.cls);
  fill(Component::Reg, r.reg);
  return r;
}

const char* to_string(RetrievalMode m) { return m == RetrievalMode::Cls ? "cls" : "pooled_patch"; }

RetrievalMode parse_retrieval_mode(const std::string& s) {
  if (s == "cls") return RetrievalMode::Cls;
  if (s == "pooled_patch") return RetrievalMode::PooledPatch;
  throw Error(ErrorKind::InvalidArgument, "unknown retrieval mode '" + s + "'");
}

RetrievalReport retrieval(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& database,
                          const std::vector<int>& gt_ids, const std::vector<int>& ks) {
  if (database.rows() == 0) throw Error(ErrorKind::EmptyDatabase, "retrieval database is empty");
  if (queries.rows() == 0) throw Error(ErrorKind::InvalidArgument, "no queries");
  if (static_cast<Eigen::Index>(gt_ids.size()) != queries.rows())
    throw Error(ErrorKind::MissingGroundTruth, "need one ground-truth id per query");
  if (queries.cols() != database.cols()) throw Error(ErrorKind::ShapeMismatch, "query and database widths differ");
  if (ks.empty()) throw Error(ErrorKind::InvalidArgument, "no cutoffs");
  for (int k : ks)
    if (k < 1 || k > database.rows()) throw Error(ErrorKind::RangeError, "cutoff k exceeds database size");

  auto normalize = [](const Eigen::MatrixXd& m) {
    Eigen::VectorXd n = m.rowwise().norm().cwiseMax(kMetricEps);
    return Eigen::MatrixXd(m.array().colwise() / n.array());
  };
  const Eigen::MatrixXd sims = normalize(queries) * normalize(database).transpose();

  RetrievalReport r;
  r.queries = static_cast<int>(queries.rows());
  std::map<int, int> hits;
  for (int k : ks) hits[k] = 0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const int gt = gt_ids[q];
    if (gt < 0 || gt >= database.rows())
      throw Error(ErrorKind::MissingGroundTruth, "ground-truth id outside database");
    const double target = sims(q, gt);
    Eigen::Index rank = 0;
    for (Eigen::Index j = 0; j < database.rows(); ++j)
      if (sims(q, j) > target || (sims(q, j) == target && j < gt)) ++rank;
    for (int k : ks)
      if (rank < k) ++hits[k];
  }
  for (int k : ks) r.recall[k] = 100.0 * hits[k] / static_cast<double>(queries.rows());
  return r;
}

Eigen::MatrixXd retrieval_vectors(const std::vector<TargetEmbedding>& batch, RetrievalMode mode) {
  if (batch.empty()) return {};
  const auto d = batch.front().patches.cols();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(batch.size()), d);
  for (size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].patches.cols() != d) throw Error(ErrorKind::ShapeMismatch, "mixed feature widths");
    out.row(static_cast<Eigen::Index>(i)) = mode == RetrievalMode::Cls
                                                 ? batch[i].cls.row(0).cast<double>().eval()
                                                 : batch[i].patches.cast<double>().colwise().mean().eval();
  }
  return out;
}

RetrievalReport retrieval(const std::vector<TargetEmbedding>& queries, const std::vector<TargetEmbedding>& database,
                          const std::vector<int>& gt_ids, RetrievalMode mode, const std::vector<int>& ks) {
  if (database.empty()) throw Error(ErrorKind::EmptyDatabase, "retrieval database is empty");
  RetrievalReport r = retrieval(retrieval_vectors(queries, mode), retrieval_vectors(database, mode), gt_ids, ks);
  r.mode = mode;
  return r;
}

namespace {

void require_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw Error(ErrorKind::DegenerateInput, "need at least 2 samples per set");
  if (a.cols() < 1 || a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "feature widths differ");
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd c = x.rowwise() - mean;
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

// Symmetric PSD square root with eigenvalues clamped at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (s + s.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require_features(a, b);
  const Eigen::RowVectorXd mu_a = a.colwise().mean();
  const Eigen::RowVectorXd mu_b = b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a, mu_a);
  const Eigen::MatrixXd sb = covariance(b, mu_b);
  // tr((Sa Sb)^1/2) = sum of sqrt eigenvalues of Sa^1/2 Sb Sa^1/2, which is
  // symmetric PSD and similar to Sa Sb.
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  const Eigen::MatrixXd m = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(fd, 0.0);
}

double kernel_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require_features(a, b);
  const double d = static_cast<double>(a.cols());
  auto kernel = [d](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    return Eigen::MatrixXd(((x * y.transpose()).array() / d + 1.0).cube());
  };
  const Eigen::MatrixXd kaa = kernel(a, a);
  const Eigen::MatrixXd kbb = kernel(b, b);
  const Eigen::MatrixXd kab = kernel(a, b);
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  const double within_a = (kaa.sum() - kaa.trace()) / (m * (m - 1));
  const double within_b = (kbb.sum() - kbb.trace()) / (n * (n - 1));
  double cross;
  if (a.rows() == b.rows()) {
    // Equal sizes: U-statistic pairing, i != j in the cross term as well.
    cross = (kab.sum() - kab.trace()) / (m * (m - 1));
  } else {
    cross = kab.mean();
  }
  return 100.0 * (within_a + within_b - 2.0 * cross);
}

}  // namespace gap
