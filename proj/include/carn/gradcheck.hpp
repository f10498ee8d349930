#ifndef CARN_GRADCHECK_HPP
#define CARN_GRADCHECK_HPP

// Analytic versus central-difference gradients on tiny random instances.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace carn {

enum class GradComponent { Naming, Encoder, CoAttention, Full };

std::string component_name(GradComponent c);
/// Accepts "naming", "encoder", "coattention" (or "co-attention") and "full".
GradComponent parse_component(const std::string& text);
std::vector<GradComponent> all_components();

struct GradCheckOptions {
  std::vector<GradComponent> components = all_components();
  int configurations = 10;
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Entries compared per tensor and configuration; larger tensors are
  /// sampled, favouring entries with a nonzero analytic gradient.
  int max_entries = 64;
  std::uint64_t seed = 0;
  /// Adds `perturbation` to one sampled analytic entry of every group whose
  /// name equals this string, to confirm the check notices.
  std::optional<std::string> perturb_group;
  double perturbation = 1e-2;
};

/// One row per (component, parameter tensor). The error is
/// max|a - n| / max(max|a|, max|n|, 1e-6) over the compared entries of all
/// configurations.
struct GroupResult {
  std::string component;
  std::string group;
  double max_rel_error = 0;
  long entries = 0;
  /// Entries whose one-sided differences disagreed (a ReLU or hard-min kink
  /// within one step) and were redone with smaller steps.
  long refined = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  double tolerance = 0;
  int configurations = 0;
  double seconds = 0;

  bool passed() const;
  double max_error(GradComponent c) const;
};

GradCheckReport grad_check(const GradCheckOptions& options = {});

}  // namespace carn

#endif  // CARN_GRADCHECK_HPP
