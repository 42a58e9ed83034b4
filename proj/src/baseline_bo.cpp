#include "tlgrpo/baseline_bo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "tlgrpo/rng.hpp"

namespace tlgrpo::bo {

GPModel::GPModel(std::vector<std::vector<double>> points, std::vector<double> values, const KernelConfig& kernel)
    : cfg_(kernel), points_(std::move(points)), values_(std::move(values)) {
  if (points_.empty()) throw std::invalid_argument("GP needs at least one observation");
  if (points_.size() != values_.size()) throw std::invalid_argument("GP points and values differ in count");
  const auto n = static_cast<Eigen::Index>(points_.size());
  prior_mean_ = std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(n);

  Eigen::MatrixXd gram(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) gram(i, j) = gram(j, i) = this->kernel(points_[static_cast<std::size_t>(i)], points_[static_cast<std::size_t>(j)]);

  Eigen::VectorXd residual(n);
  for (Eigen::Index i = 0; i < n; ++i) residual(i) = values_[static_cast<std::size_t>(i)] - prior_mean_;

  for (jitter_ = cfg_.noise; jitter_ <= cfg_.max_jitter * (1.0 + 1e-9); jitter_ *= 10.0) {
    Eigen::MatrixXd k = gram;
    k.diagonal().array() += jitter_;
    llt_.compute(k);
    if (llt_.info() == Eigen::Success && (llt_.matrixL().toDenseMatrix().diagonal().array() > 0.0).all()) {
      alpha_ = llt_.solve(residual);
      return;
    }
  }
  throw SingularKernel("kernel matrix not positive definite after maximum jitter");
}

double GPModel::kernel(const std::vector<double>& a, const std::vector<double>& b) const {
  double sq = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = (a[k] - b[k]) / cfg_.lengthscale;
    sq += d * d;
  }
  return cfg_.signal_variance * std::exp(-0.5 * sq);
}

Eigen::VectorXd GPModel::cross(const std::vector<double>& x) const {
  Eigen::VectorXd k(static_cast<Eigen::Index>(points_.size()));
  for (std::size_t i = 0; i < points_.size(); ++i) k(static_cast<Eigen::Index>(i)) = kernel(points_[i], x);
  return k;
}

double GPModel::mean(const std::vector<double>& x) const { return prior_mean_ + cross(x).dot(alpha_); }

double GPModel::variance(const std::vector<double>& x) const {
  const Eigen::VectorXd k = cross(x);
  const Eigen::VectorXd v = llt_.matrixL().solve(k);
  return std::max(0.0, cfg_.signal_variance - v.squaredNorm());
}

GPModel fit_gp(std::vector<std::vector<double>> points, std::vector<double> values, const KernelConfig& kernel) {
  return GPModel(std::move(points), std::move(values), kernel);
}

double expected_improvement(double mean, double stddev, double best, double xi) {
  const double improvement = mean - best - xi;
  if (!(stddev > 1e-12)) return std::max(0.0, improvement);
  const double z = improvement / stddev;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(0.0, improvement * cdf + stddev * pdf);
}

double expected_improvement(const GPModel& model, const std::vector<double>& x, double best, double xi) {
  return expected_improvement(model.mean(x), std::sqrt(model.variance(x)), best, xi);
}

std::vector<double> to_unit(const env::TaskDefinition& task, const std::vector<double>& params) {
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out[i] = std::clamp((params[i] - task.lower[i]) / (task.upper[i] - task.lower[i]), 0.0, 1.0);
  return out;
}

std::vector<double> from_unit(const env::TaskDefinition& task, const std::vector<double>& unit) {
  std::vector<double> out(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i)
    out[i] = std::clamp(task.lower[i] + unit[i] * (task.upper[i] - task.lower[i]), task.lower[i], task.upper[i]);
  return out;
}

namespace {

void record(SearchResult& out, std::vector<double> params, env::StepResult step) {
  if (out.history.empty() || step.reward > out.best_reward) {
    out.best_reward = step.reward;
    out.best_params = params;
  }
  out.history.push_back({std::move(params), step.reward});
  out.observations.push_back(std::move(step.observation));
}

}  // namespace

SearchResult run_bo(const env::QueryInstance& query, const env::TaskDefinition& task, int budget,
                    const AcquisitionConfig& cfg, const env::Simulator& simulator) {
  if (budget < 1) throw std::invalid_argument("BO budget must be >= 1");
  if (cfg.candidate_pool < 1) throw std::invalid_argument("candidate pool must be >= 1");
  SearchResult out;
  record(out, query.initial_params, env::observe_initial(query, task, score::RewardMode::Eval, simulator));
  Rng rng(derive_seed(cfg.seed, {fnv1a64(query.query_id)}));
  const std::size_t d = task.dim();

  for (int round = 0; round < budget; ++round) {
    std::vector<std::vector<double>> points;
    std::vector<double> values;
    for (const auto& e : out.history) {
      points.push_back(to_unit(task, e.params));
      values.push_back(e.reward);
    }
    const GPModel model = fit_gp(points, values, cfg.kernel);
    std::vector<double> best_x;
    double best_ei = -1.0;
    std::vector<double> x(d);
    for (std::size_t c = 0; c < cfg.candidate_pool; ++c) {
      for (auto& v : x) v = rng.uniform();
      const double ei = expected_improvement(model, x, out.best_reward, cfg.xi);
      if (ei > best_ei) {
        best_ei = ei;
        best_x = x;
      }
    }
    auto params = from_unit(task, best_x);
    auto step = env::step(query, task, params, round, score::RewardMode::Eval, simulator);
    record(out, std::move(params), std::move(step));
  }
  return out;
}

SearchResult run_random(const env::QueryInstance& query, const env::TaskDefinition& task, int budget,
                        std::uint64_t seed, const env::Simulator& simulator) {
  if (budget < 1) throw std::invalid_argument("random search budget must be >= 1");
  SearchResult out;
  record(out, query.initial_params, env::observe_initial(query, task, score::RewardMode::Eval, simulator));
  Rng rng(derive_seed(seed, {fnv1a64(query.query_id), 0x52414e44ULL}));
  for (int round = 0; round < budget; ++round) {
    std::vector<double> params(task.dim());
    for (std::size_t i = 0; i < task.dim(); ++i) params[i] = rng.uniform(task.lower[i], task.upper[i]);
    auto result = env::step(query, task, params, round, score::RewardMode::Eval, simulator);
    record(out, std::move(params), std::move(result));
  }
  return out;
}

}  // namespace tlgrpo::bo
