#pragma once

// Factored softmax policy over multiplicative parameter adjustments.
//
// Every sizing parameter i has its own feature vector phi_i(h) built from the
// interaction history; one shared weight matrix W (K x F) scores the K
// multipliers as logits W phi_i / temperature. Components are sampled
// independently, so log pi(a | h) is the sum of per-component log-probs.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlgrpo/rng.hpp"
#include "tlgrpo/surrogate_env.hpp"

namespace tlgrpo::policy {

inline constexpr std::array<double, 5> kMultipliers{0.5, 0.8, 1.0, 1.25, 2.0};
inline constexpr std::size_t kNumChoices = kMultipliers.size();
inline constexpr std::size_t kMaxObjectiveSlots = 8;

/// Feature layout, shared by every parameter of every task.
namespace feature {
inline constexpr std::size_t kBias = 0;
inline constexpr std::size_t kLinearPosition = 1;
inline constexpr std::size_t kLogPosition = 2;
inline constexpr std::size_t kScores = 3;
inline constexpr std::size_t kLatestReward = kScores + kMaxObjectiveSlots;
inline constexpr std::size_t kBestReward = kLatestReward + 1;
inline constexpr std::size_t kTurnFraction = kBestReward + 1;
inline constexpr std::size_t kPrevMultiplier = kTurnFraction + 1;
inline constexpr std::size_t kDim = kPrevMultiplier + kNumChoices;
}  // namespace feature

/// Hash of the feature layout and action set; checkpoints carry it.
std::uint64_t feature_schema_hash();

class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FactoredAction {
  std::vector<int> choices;    // multiplier index per parameter
  std::vector<double> params;  // realized design, clamped into bounds
};

/// One step of an interaction history. The first entry of a history is the
/// query's initial design and carries no action.
struct HistoryEntry {
  std::vector<double> params;
  env::Observation observation;
  double reward = 0.0;
  std::optional<std::vector<int>> choices;
};

using History = std::vector<HistoryEntry>;

enum class Protocol {
  /// Condition on the full interaction history.
  MultiTurn,
  /// Condition on the original query and the latest simulation result only.
  SingleTurnIterative,
};

struct FeatureOptions {
  Protocol protocol = Protocol::MultiTurn;
  /// Expose the best-so-far reward under SingleTurnIterative.
  bool st_iter_best_so_far = false;
};

struct HistoryFeatures {
  std::size_t num_params = 0;
  std::vector<double> values;  // num_params x feature::kDim, row-major

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * feature::kDim, feature::kDim};
  }
};

HistoryFeatures featurize(const History& history, const env::QueryInstance& query, const env::TaskDefinition& task,
                          const FeatureOptions& options = {});

struct PolicyParameters {
  std::vector<double> weights = std::vector<double>(kNumChoices * feature::kDim, 0.0);  // K x F row-major
  std::uint64_t version = 0;

  double weight(std::size_t choice, std::size_t f) const { return weights[choice * feature::kDim + f]; }
};

struct ActionDistribution {
  std::size_t num_params = 0;
  std::vector<double> probs;  // num_params x K

  std::span<const double> row(std::size_t i) const { return {probs.data() + i * kNumChoices, kNumChoices}; }
};

ActionDistribution action_distribution(const PolicyParameters& params, const HistoryFeatures& features,
                                       double temperature);

struct SampledChoices {
  std::vector<int> choices;
  /// Log-probability under the nucleus-renormalized distribution actually sampled.
  double log_prob = 0.0;
};

/// Per-component nucleus (top-p) sampling.
SampledChoices sample_choices(const ActionDistribution& dist, Rng& rng, double top_p);

/// Applies multipliers to the current design and clamps into the task box.
std::vector<double> realize(std::span<const int> choices, std::span<const double> current,
                            const env::TaskDefinition& task);

/// Per-component log-probabilities under the full softmax.
std::vector<double> component_log_probs(const PolicyParameters& params, const HistoryFeatures& features,
                                        std::span<const int> choices, double temperature);

/// log pi(a | h) under the full (untruncated) softmax.
double log_prob(const PolicyParameters& params, const HistoryFeatures& features, std::span<const int> choices,
                double temperature);

/// d log pi / dW, same layout as PolicyParameters::weights.
std::vector<double> grad_log_prob(const PolicyParameters& params, const HistoryFeatures& features,
                                  std::span<const int> choices, double temperature);

/// out += sum_i scale[i] * d log pi_i / dW. `scale` has one entry per component.
void accumulate_grad_log_prob(const PolicyParameters& params, const HistoryFeatures& features,
                              std::span<const int> choices, double temperature, std::span<const double> scale,
                              std::span<double> out);

/// Adam state. lr defaults to 1e-2 for this model size.
struct OptimizerState {
  std::vector<double> first_moment = std::vector<double>(kNumChoices * feature::kDim, 0.0);
  std::vector<double> second_moment = std::vector<double>(kNumChoices * feature::kDim, 0.0);
  std::uint64_t step = 0;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam step that ascends `gradient`.
void apply_update(PolicyParameters& params, std::span<const double> gradient, OptimizerState& opt);

}  // namespace tlgrpo::policy
