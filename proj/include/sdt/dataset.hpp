#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sdt/rng.hpp"

namespace sdt {

inline constexpr int kNumActions = 4;              // left, right, up, down
inline constexpr int kDummyAction = kNumActions;   // embedding row marking "no previous action"
inline constexpr std::size_t kMaxSteps = 100;      // episode truncation horizon

/// One episode: states[t] is the position at which actions[t] was taken.
struct Trajectory {
  std::vector<std::array<double, 2>> states;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> returns_to_go;

  std::size_t length() const { return actions.size(); }
};

/// A trajectory plus the identity of the maze it came from. Imported data
/// uses width == height == 0 and the record index as seed.
struct TrajectoryRecord {
  std::uint64_t seed = 0;
  int width = 0;
  int height = 0;
  Trajectory trajectory;
};

/// Suffix sums of the reward sequence.
inline std::vector<double> returns_to_go(std::span<const double> rewards) {
  if (rewards.empty()) throw std::invalid_argument("returns_to_go: empty reward list");
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

inline void validate_trajectory(const Trajectory& traj) {
  const std::size_t n = traj.states.size();
  if (traj.actions.size() != n || traj.rewards.size() != n || traj.returns_to_go.size() != n) {
    throw std::invalid_argument("trajectory: field lengths disagree");
  }
  if (n == 0) throw std::invalid_argument("trajectory: empty");
  if (n > kMaxSteps) throw std::invalid_argument("trajectory: longer than " +
                                                 std::to_string(kMaxSteps) + " steps");
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    acc += traj.rewards[i];
    if (std::abs(acc - traj.returns_to_go[i]) > 1e-9) {
      throw std::invalid_argument("trajectory: returns_to_go inconsistent with rewards at step " +
                                  std::to_string(i));
    }
  }
  for (int a : traj.actions) {
    if (a < 0 || a >= kNumActions) throw std::invalid_argument("trajectory: action out of range");
  }
}

/// Per-dimension standardization statistics, fit on the training split only.
struct NormStats {
  std::array<double, 2> mu{0.0, 0.0};
  std::array<double, 2> sigma{1.0, 1.0};
  double epsilon = 1e-8;

  std::array<double, 2> apply(const std::array<double, 2>& s) const {
    return {(s[0] - mu[0]) / sigma[0], (s[1] - mu[1]) / sigma[1]};
  }

  std::array<double, 2> invert(const std::array<double, 2>& s) const {
    return {s[0] * sigma[0] + mu[0], s[1] * sigma[1] + mu[1]};
  }

  bool operator==(const NormStats&) const = default;
};

/// Population mean and standard deviation per dimension; epsilon is added to
/// sigma so constant dimensions normalize to zero instead of dividing by
/// zero.
inline NormStats fit_normalizer(std::span<const std::array<double, 2>> states,
                                double epsilon = 1e-8) {
  if (states.size() < 2) throw std::invalid_argument("fit_normalizer: need at least 2 states");
  NormStats stats;
  stats.epsilon = epsilon;
  const double n = static_cast<double>(states.size());
  for (int d = 0; d < 2; ++d) {
    double mean = 0.0;
    for (const auto& s : states) mean += s[d];
    mean /= n;
    double var = 0.0;
    for (const auto& s : states) var += (s[d] - mean) * (s[d] - mean);
    var /= n;
    stats.mu[d] = mean;
    stats.sigma[d] = std::sqrt(var) + epsilon;
  }
  return stats;
}

/// Maps a 2-D velocity onto the four cardinal actions by axis dominance then
/// sign. Ties go to the x axis; an all-zero velocity maps to "right" and is
/// flagged through zero_warning.
inline int discretize_velocity(double vx, double vy, bool* zero_warning = nullptr) {
  if (vx == 0.0 && vy == 0.0) {
    if (zero_warning) *zero_warning = true;
    return 1;  // right
  }
  if (zero_warning) *zero_warning = false;
  if (std::abs(vx) >= std::abs(vy)) {
    return vx > 0.0 ? 1 : 0;  // right : left
  }
  return vy > 0.0 ? 3 : 2;  // down : up
}

/// Model input: padded, normalized, batched token sequences.
template <typename T>
struct TokenBatch {
  std::size_t batch = 0;   // B
  std::size_t steps = 0;   // S
  std::vector<T> states;              // B*S*2, normalized
  std::vector<int> prev_actions;      // B*S, in [0, kDummyAction]
  std::vector<T> rtg;                 // B*S
  std::vector<int> timesteps;         // B*S
  std::vector<int> targets;           // B*S
  std::vector<std::uint8_t> mask;     // B*S, true = real position
};

template <typename T>
void validate_batch(const TokenBatch<T>& b) {
  const std::size_t n = b.batch * b.steps;
  if (b.steps == 0 || b.batch == 0) throw std::invalid_argument("token batch: empty");
  if (b.steps > kMaxSteps) throw std::invalid_argument("token batch: S exceeds max steps");
  if (b.states.size() != 2 * n || b.prev_actions.size() != n || b.rtg.size() != n ||
      b.timesteps.size() != n || b.targets.size() != n || b.mask.size() != n) {
    throw std::invalid_argument("token batch: field sizes disagree");
  }
  for (std::size_t r = 0; r < b.batch; ++r) {
    if (b.prev_actions[r * b.steps] != kDummyAction) {
      throw std::invalid_argument("token batch: sequence " + std::to_string(r) +
                                  " missing dummy start action");
    }
    if (!b.mask[r * b.steps]) {
      throw std::invalid_argument("token batch: sequence " + std::to_string(r) + " fully padded");
    }
    for (std::size_t t = 0; t < b.steps; ++t) {
      const std::size_t i = r * b.steps + t;
      if (b.prev_actions[i] < 0 || b.prev_actions[i] > kDummyAction) {
        throw std::invalid_argument("token batch: prev action out of range");
      }
      if (b.mask[i]) {
        if (b.targets[i] < 0 || b.targets[i] >= kNumActions) {
          throw std::invalid_argument("token batch: target out of range");
        }
        if (t > 0 && b.mask[i - 1] && b.prev_actions[i] != b.targets[i - 1]) {
          throw std::invalid_argument("token batch: prev action disagrees with previous target");
        }
      }
    }
  }
}

/// Pads or truncates each trajectory to exactly `steps` positions and packs
/// consecutive groups of `batch_size` into TokenBatches. When rng is given
/// the trajectory order is shuffled (one epoch's draw); otherwise order is
/// preserved. The final batch may be smaller.
template <typename T>
std::vector<TokenBatch<T>> make_batches(const std::vector<const Trajectory*>& trajectories,
                                        std::size_t steps, std::size_t batch_size,
                                        const NormStats& stats, Rng* rng = nullptr) {
  if (trajectories.empty()) throw std::invalid_argument("make_batches: no trajectories");
  if (steps == 0 || steps > kMaxSteps) {
    throw std::invalid_argument("make_batches: steps must be in [1," + std::to_string(kMaxSteps) +
                                "]");
  }
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be positive");

  std::vector<std::size_t> order(trajectories.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (rng) rng->shuffle(order.begin(), order.end());

  std::vector<TokenBatch<T>> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t b = std::min(batch_size, order.size() - begin);
    TokenBatch<T> tb;
    tb.batch = b;
    tb.steps = steps;
    tb.states.assign(b * steps * 2, T(0));
    tb.prev_actions.assign(b * steps, kDummyAction);
    tb.rtg.assign(b * steps, T(0));
    tb.timesteps.assign(b * steps, 0);
    tb.targets.assign(b * steps, 0);
    tb.mask.assign(b * steps, 0);
    for (std::size_t r = 0; r < b; ++r) {
      const Trajectory& traj = *trajectories[order[begin + r]];
      const std::size_t len = std::min(traj.length(), steps);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = r * steps + t;
        const auto norm = stats.apply(traj.states[t]);
        tb.states[i * 2 + 0] = static_cast<T>(norm[0]);
        tb.states[i * 2 + 1] = static_cast<T>(norm[1]);
        tb.prev_actions[i] = t == 0 ? kDummyAction : traj.actions[t - 1];
        tb.rtg[i] = static_cast<T>(traj.returns_to_go[t]);
        tb.timesteps[i] = static_cast<int>(t);
        tb.targets[i] = traj.actions[t];
        tb.mask[i] = 1;
      }
    }
    batches.push_back(std::move(tb));
  }
  return batches;
}

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Deterministic 3-way partition grouped by maze seed so one layout can never
/// straddle two splits.
inline SplitIndices split_dataset(const std::vector<TrajectoryRecord>& records,
                                  std::array<double, 3> fractions, std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: fractions must sum to 1");
  }
  if (records.empty()) throw std::invalid_argument("split_dataset: no records");

  // unique seeds in first-appearance order
  std::vector<std::uint64_t> seeds;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& r : records) {
    if (seen.insert(r.seed).second) seeds.push_back(r.seed);
  }
  Rng rng(seed);
  rng.shuffle(seeds.begin(), seeds.end());

  const std::size_t n = seeds.size();
  const auto n_train = static_cast<std::size_t>(fractions[0] * static_cast<double>(n) + 1e-9);
  const auto n_val = static_cast<std::size_t>(fractions[1] * static_cast<double>(n) + 1e-9);

  enum : int { kTrain, kVal, kTest };
  std::unordered_map<std::uint64_t, int> assignment;
  assignment.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    assignment[seeds[i]] = i < n_train ? kTrain : (i < n_train + n_val ? kVal : kTest);
  }

  SplitIndices split;
  for (std::size_t i = 0; i < records.size(); ++i) {
    switch (assignment.at(records[i].seed)) {
      case kTrain: split.train.push_back(i); break;
      case kVal: split.val.push_back(i); break;
      default: split.test.push_back(i); break;
    }
  }
  return split;
}

inline std::vector<const Trajectory*> gather_split(const std::vector<TrajectoryRecord>& records,
                                                   const std::vector<std::size_t>& indices) {
  std::vector<const Trajectory*> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(&records.at(i).trajectory);
  return out;
}

}  // namespace sdt
