#pragma once

// Black-box baselines under the tool-call budget: Gaussian-process Bayesian
// optimization with expected improvement, and uniform random search.

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tlgrpo/surrogate_env.hpp"

namespace tlgrpo::bo {

class SingularKernel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KernelConfig {
  double lengthscale = 0.2;  // per dimension, in unit-box coordinates
  double signal_variance = 1.0;
  double noise = 1e-6;
  double max_jitter = 1e-2;
};

/// Zero-mean-residual GP with a squared-exponential kernel. The prior mean is
/// the average of the observed values.
class GPModel {
 public:
  /// Fits on points in the unit box. Throws SingularKernel if the Gram matrix
  /// stays indefinite after escalating jitter up to max_jitter.
  GPModel(std::vector<std::vector<double>> points, std::vector<double> values, const KernelConfig& kernel = {});

  double mean(const std::vector<double>& x) const;
  /// Posterior variance of the latent function, clamped at zero.
  double variance(const std::vector<double>& x) const;

  std::size_t size() const { return values_.size(); }
  double jitter() const { return jitter_; }

 private:
  double kernel(const std::vector<double>& a, const std::vector<double>& b) const;
  Eigen::VectorXd cross(const std::vector<double>& x) const;

  KernelConfig cfg_;
  std::vector<std::vector<double>> points_;
  std::vector<double> values_;
  double prior_mean_ = 0.0;
  double jitter_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
};

GPModel fit_gp(std::vector<std::vector<double>> points, std::vector<double> values, const KernelConfig& kernel = {});

/// Closed-form EI for maximization with exploration offset xi.
double expected_improvement(double mean, double stddev, double best, double xi);
double expected_improvement(const GPModel& model, const std::vector<double>& x, double best, double xi);

struct AcquisitionConfig {
  std::size_t candidate_pool = 2048;
  double xi = 0.01;
  std::uint64_t seed = 0;
  KernelConfig kernel{};
};

struct Evaluation {
  std::vector<double> params;
  double reward = 0.0;
};

struct SearchResult {
  std::vector<double> best_params;
  double best_reward = 0.0;
  /// history[0] is the query's initial design; the rest are budget evaluations.
  std::vector<Evaluation> history;
  std::vector<env::Observation> observations;
};

SearchResult run_bo(const env::QueryInstance& query, const env::TaskDefinition& task, int budget,
                    const AcquisitionConfig& cfg = {}, const env::Simulator& simulator = env::local_simulator());

/// Uniform sampling in the box with the same budget.
SearchResult run_random(const env::QueryInstance& query, const env::TaskDefinition& task, int budget,
                        std::uint64_t seed, const env::Simulator& simulator = env::local_simulator());

/// Normalizes a design into the unit box and back.
std::vector<double> to_unit(const env::TaskDefinition& task, const std::vector<double>& params);
std::vector<double> from_unit(const env::TaskDefinition& task, const std::vector<double>& unit);

}  // namespace tlgrpo::bo
