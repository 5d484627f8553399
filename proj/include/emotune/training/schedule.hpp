#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace emotune {

enum class Phase { pretrain, finetune };
enum class Decay { cosine, constant };

inline std::string_view to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }
inline std::string_view to_string(Decay d) { return d == Decay::cosine ? "cosine" : "constant"; }

inline Phase parse_phase(std::string_view s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + std::string(s) + "'");
}

inline Decay parse_decay(std::string_view s) {
  if (s == "cosine") return Decay::cosine;
  if (s == "constant") return Decay::constant;
  throw std::invalid_argument("unknown decay '" + std::string(s) + "'");
}

/// Warmup may be given in steps, in epochs, or both (they add).
struct Schedule {
  Phase phase = Phase::pretrain;
  double base_lr = 2e-4;
  double warmup_steps = 0.0;
  double warmup_epochs = 0.0;
  Decay decay = Decay::cosine;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  /// When nonzero, the planned step count; otherwise epochs × steps_per_epoch.
  std::size_t max_steps = 0;

  void validate() const {
    if (!(base_lr >= 0.0)) throw std::invalid_argument("base_lr must be nonnegative");
    if (!(warmup_steps >= 0.0 && warmup_epochs >= 0.0)) throw std::invalid_argument("warmup must be nonnegative");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (epochs == 0 && max_steps == 0) throw std::invalid_argument("schedule plans no steps");
  }

  double warmup_length(std::size_t steps_per_epoch) const {
    return warmup_steps + warmup_epochs * static_cast<double>(steps_per_epoch);
  }

  std::size_t planned_steps(std::size_t steps_per_epoch) const {
    return max_steps ? max_steps : epochs * steps_per_epoch;
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

/// The step-2000-warmup cosine pretraining schedule.
inline Schedule pretrain_schedule() { return {Phase::pretrain, 2e-4, 2000.0, 0.0, Decay::cosine, 32, 1, 0}; }

/// Half-epoch warmup, then constant, five epochs.
inline Schedule finetune_schedule() { return {Phase::finetune, 1e-5, 0.0, 0.5, Decay::constant, 32, 5, 0}; }

/// Linear warmup from 0 to base_lr, then cosine decay reaching 0 at the last
/// planned step, or constant.
inline double lr_at(const Schedule& s, std::size_t step, std::size_t steps_per_epoch) {
  const double k = static_cast<double>(step);
  const double warm = s.warmup_length(steps_per_epoch);
  if (k < warm) return s.base_lr * k / warm;
  if (s.decay == Decay::constant) return s.base_lr;
  const double total = static_cast<double>(s.planned_steps(steps_per_epoch));
  if (total <= warm) return 0.0;
  const double progress = std::min(1.0, (k - warm) / (total - warm));
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace emotune
