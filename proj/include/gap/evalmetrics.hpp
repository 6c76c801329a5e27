#pragma once

#include <map>
#include <string>
#include <vector>

#include "gap/embedspace.hpp"

namespace gap {

// One [N, D] token matrix per sample.
using TokenBatch = std::vector<Eigen::MatrixXd>;

enum class Component { Patch, Cls, Reg };
const char* to_string(Component c);

TokenBatch component_tokens(const std::vector<TargetEmbedding>& batch, Component c);

inline constexpr double kMetricEps = 1e-8;

// Mean over samples and tokens of x_hat.x / max(|x_hat| |x|, eps).
double cosine_metric(const TokenBatch& gen, const TokenBatch& gt);
// Mean over samples, tokens and features of squared differences.
double mse_metric(const TokenBatch& gen, const TokenBatch& gt);
// Mean over samples and tokens of |x_hat| / (|x| + eps).
double norm_ratio(const TokenBatch& gen, const TokenBatch& gt);

struct ComponentMetrics {
  double cosine = 0;
  double mse = 0;
  double norm_ratio = 0;
};

struct AlignmentReport {
  ComponentMetrics patch, cls, reg;
  int count = 0;
};

AlignmentReport alignment_report(const std::vector<TargetEmbedding>& gen, const std::vector<TargetEmbedding>& gt);

enum class RetrievalMode { Cls, PooledPatch };
const char* to_string(RetrievalMode m);
RetrievalMode parse_retrieval_mode(const std::string& s);

struct RetrievalReport {
  RetrievalMode mode = RetrievalMode::Cls;
  std::map<int, double> recall;  // k -> percent
  int queries = 0;
  double at(int k) const { return recall.at(k); }
};

// Ranks database rows (one vector per row) by cosine similarity to each query
// row, descending, ties broken by lower database index. gt_ids[q] is the
// database row matching query q.
RetrievalReport retrieval(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& database,
                          const std::vector<int>& gt_ids, const std::vector<int>& ks = {1, 5, 10});

// Query/database vectors: CLS, or the grid mean of the patch vectors.
Eigen::MatrixXd retrieval_vectors(const std::vector<TargetEmbedding>& batch, RetrievalMode mode);

RetrievalReport retrieval(const std::vector<TargetEmbedding>& queries, const std::vector<TargetEmbedding>& database,
                          const std::vector<int>& gt_ids, RetrievalMode mode, const std::vector<int>& ks = {1, 5, 10});

// Frechet distance between Gaussians fitted to the rows of a and b.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Unbiased squared MMD with k(x, y) = (x.y / d + 1)^3, times 100.
double kernel_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace gap
