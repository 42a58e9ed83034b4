#include "tlgrpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tlgrpo::policy {

namespace {

double to_signed_unit(double u) { return std::clamp(2.0 * u - 1.0, -1.0, 1.0); }

void softmax_row(const PolicyParameters& params, std::span<const double> phi, double inv_temp, double* out) {
  double logits[kNumChoices];
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < kNumChoices; ++c) {
    const double* w = params.weights.data() + c * feature::kDim;
    double z = 0.0;
    for (std::size_t f = 0; f < feature::kDim; ++f) z += w[f] * phi[f];
    logits[c] = z * inv_temp;
    max_logit = std::max(max_logit, logits[c]);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < kNumChoices; ++c) {
    out[c] = std::exp(logits[c] - max_logit);
    total += out[c];
  }
  for (std::size_t c = 0; c < kNumChoices; ++c) out[c] /= total;
}

// log softmax for a single chosen entry, computed stably.
double log_softmax_at(const PolicyParameters& params, std::span<const double> phi, double inv_temp, int choice) {
  double logits[kNumChoices];
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < kNumChoices; ++c) {
    const double* w = params.weights.data() + c * feature::kDim;
    double z = 0.0;
    for (std::size_t f = 0; f < feature::kDim; ++f) z += w[f] * phi[f];
    logits[c] = z * inv_temp;
    max_logit = std::max(max_logit, logits[c]);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < kNumChoices; ++c) total += std::exp(logits[c] - max_logit);
  return logits[choice] - max_logit - std::log(total);
}

double checked_inverse_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InvalidConfig("temperature must be positive");
  return 1.0 / temperature;
}

void check_choices(const HistoryFeatures& features, std::span<const int> choices) {
  if (choices.size() != features.num_params) throw std::invalid_argument("action has wrong number of components");
  for (const int m : choices)
    if (m < 0 || m >= static_cast<int>(kNumChoices)) throw std::invalid_argument("action choice out of range");
}

}  // namespace

std::uint64_t feature_schema_hash() {
  std::string schema = "bias;lin_pos;log_pos;score[" + std::to_string(kMaxObjectiveSlots) +
                       "];latest_reward;best_reward;turn_frac;prev_mult[" + std::to_string(kNumChoices) + "]|mult=";
  for (const double m : kMultipliers) schema += std::to_string(m) + ",";
  return fnv1a64(schema);
}

HistoryFeatures featurize(const History& history, const env::QueryInstance& query, const env::TaskDefinition& task,
                          const FeatureOptions& options) {
  if (history.empty()) throw std::invalid_argument("history must contain at least the initial design");
  const HistoryEntry& latest = history.back();
  const std::size_t d = task.dim();
  if (latest.params.size() != d) throw std::invalid_argument("history design has wrong dimension");

  const bool multi_turn = options.protocol == Protocol::MultiTurn;
  const double turns_taken = static_cast<double>(history.size() - 1);
  double best = 0.0;
  for (const auto& e : history) best = std::max(best, e.reward);

  double scores[kMaxObjectiveSlots] = {};
  if (latest.observation.valid && latest.observation.metrics) {
    const auto p = score::objective_scores(*latest.observation.metrics, query.specs);
    for (std::size_t j = 0; j < std::min(p.size(), kMaxObjectiveSlots); ++j) scores[j] = p[j];
  }

  HistoryFeatures out;
  out.num_params = d;
  out.values.assign(d * feature::kDim, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double* phi = out.values.data() + i * feature::kDim;
    const double lo = task.lower[i];
    const double hi = task.upper[i];
    const double w = latest.params[i];
    phi[feature::kBias] = 1.0;
    phi[feature::kLinearPosition] = to_signed_unit((w - lo) / (hi - lo));
    phi[feature::kLogPosition] = to_signed_unit(std::log(w / lo) / std::log(hi / lo));
    for (std::size_t j = 0; j < kMaxObjectiveSlots; ++j) phi[feature::kScores + j] = scores[j];
    phi[feature::kLatestReward] = std::clamp(latest.reward, -1.0, 1.0);
    // With only the initial entry the best result is the latest one, so both protocols agree.
    if (multi_turn || options.st_iter_best_so_far || history.size() == 1) phi[feature::kBestReward] = std::clamp(best, -1.0, 1.0);
    if (multi_turn) {
      phi[feature::kTurnFraction] = std::clamp(turns_taken / static_cast<double>(query.max_turns), 0.0, 1.0);
      if (latest.choices) phi[feature::kPrevMultiplier + static_cast<std::size_t>((*latest.choices)[i])] = 1.0;
    }
  }
  return out;
}

ActionDistribution action_distribution(const PolicyParameters& params, const HistoryFeatures& features,
                                       double temperature) {
  const double inv_temp = checked_inverse_temperature(temperature);
  ActionDistribution dist;
  dist.num_params = features.num_params;
  dist.probs.resize(features.num_params * kNumChoices);
  for (std::size_t i = 0; i < features.num_params; ++i)
    softmax_row(params, features.row(i), inv_temp, dist.probs.data() + i * kNumChoices);
  return dist;
}

SampledChoices sample_choices(const ActionDistribution& dist, Rng& rng, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidConfig("top_p must be in (0, 1]");
  SampledChoices out;
  out.choices.resize(dist.num_params);
  std::array<int, kNumChoices> order;
  for (std::size_t i = 0; i < dist.num_params; ++i) {
    const auto p = dist.row(i);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
    // Smallest probability-sorted prefix whose mass reaches top_p.
    std::size_t keep = 0;
    double mass = 0.0;
    while (keep < kNumChoices) {
      mass += p[order[keep]];
      ++keep;
      if (mass >= top_p * (1.0 - 1e-12)) break;
    }
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    int chosen = order[keep - 1];
    for (std::size_t r = 0; r < keep; ++r) {
      acc += p[order[r]];
      if (u < acc) {
        chosen = order[r];
        break;
      }
    }
    out.choices[i] = chosen;
    out.log_prob += std::log(p[chosen] / mass);
  }
  return out;
}

std::vector<double> realize(std::span<const int> choices, std::span<const double> current,
                            const env::TaskDefinition& task) {
  if (choices.size() != task.dim() || current.size() != task.dim())
    throw std::invalid_argument("action and design dimensions differ from the task");
  std::vector<double> out(task.dim());
  for (std::size_t i = 0; i < task.dim(); ++i)
    out[i] = std::clamp(current[i] * kMultipliers[static_cast<std::size_t>(choices[i])], task.lower[i], task.upper[i]);
  return out;
}

std::vector<double> component_log_probs(const PolicyParameters& params, const HistoryFeatures& features,
                                        std::span<const int> choices, double temperature) {
  const double inv_temp = checked_inverse_temperature(temperature);
  check_choices(features, choices);
  std::vector<double> out(features.num_params);
  for (std::size_t i = 0; i < features.num_params; ++i)
    out[i] = log_softmax_at(params, features.row(i), inv_temp, choices[i]);
  return out;
}

double log_prob(const PolicyParameters& params, const HistoryFeatures& features, std::span<const int> choices,
                double temperature) {
  const auto parts = component_log_probs(params, features, choices, temperature);
  return std::accumulate(parts.begin(), parts.end(), 0.0);
}

void accumulate_grad_log_prob(const PolicyParameters& params, const HistoryFeatures& features,
                              std::span<const int> choices, double temperature, std::span<const double> scale,
                              std::span<double> out) {
  const double inv_temp = checked_inverse_temperature(temperature);
  check_choices(features, choices);
  if (scale.size() != features.num_params) throw std::invalid_argument("gradient scale has wrong length");
  if (out.size() != params.weights.size()) throw std::invalid_argument("gradient buffer has wrong shape");
  double probs[kNumChoices];
  for (std::size_t i = 0; i < features.num_params; ++i) {
    if (scale[i] == 0.0) continue;
    const auto phi = features.row(i);
    softmax_row(params, phi, inv_temp, probs);
    for (std::size_t c = 0; c < kNumChoices; ++c) {
      const double indicator = static_cast<int>(c) == choices[i] ? 1.0 : 0.0;
      const double coeff = scale[i] * (indicator - probs[c]) * inv_temp;
      double* g = out.data() + c * feature::kDim;
      for (std::size_t f = 0; f < feature::kDim; ++f) g[f] += coeff * phi[f];
    }
  }
}

std::vector<double> grad_log_prob(const PolicyParameters& params, const HistoryFeatures& features,
                                  std::span<const int> choices, double temperature) {
  std::vector<double> out(params.weights.size(), 0.0);
  const std::vector<double> ones(features.num_params, 1.0);
  accumulate_grad_log_prob(params, features, choices, temperature, ones, out);
  return out;
}

void apply_update(PolicyParameters& params, std::span<const double> gradient, OptimizerState& opt) {
  const std::size_t n = params.weights.size();
  if (gradient.size() != n || opt.first_moment.size() != n || opt.second_moment.size() != n)
    throw std::invalid_argument("optimizer shape mismatch");
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double bias1 = 1.0 - std::pow(opt.beta1, t);
  const double bias2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t k = 0; k < n; ++k) {
    const double g = gradient[k];
    opt.first_moment[k] = opt.beta1 * opt.first_moment[k] + (1.0 - opt.beta1) * g;
    opt.second_moment[k] = opt.beta2 * opt.second_moment[k] + (1.0 - opt.beta2) * g * g;
    const double m_hat = opt.first_moment[k] / bias1;
    const double v_hat = opt.second_moment[k] / bias2;
    params.weights[k] += opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
  }
  ++params.version;
}

}  // namespace tlgrpo::policy
