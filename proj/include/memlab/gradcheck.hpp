#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "memlab/autodiff.hpp"

namespace memlab::ad {

struct GradcheckEntry {
  std::string primitive;
  std::size_t n_checked = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;
  bool passed() const;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Shapes are drawn from [1, max_dim] per seed unless dims is set.
  std::size_t max_dim = 8;
  /// Explicit (n, k, m) dimensions; matmul uses [n x k] * [k x m].
  std::optional<std::array<std::size_t, 3>> dims;
  /// Installed on every tape built by the check (negative-control fixtures).
  std::optional<std::pair<Op, Tape::BackwardOverride>> backward_override;
};

/// The primitives covered by gradcheck_all, in report order.
std::vector<Op> differentiable_primitives();

/// Analytic vector-Jacobian products against central finite differences
/// for one primitive on seeded random inputs.
GradcheckEntry gradcheck(Op op, std::uint64_t seed, const GradcheckOptions& options = {});

GradcheckReport gradcheck_all(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace memlab::ad
