#pragma once

// Gradient-check suite shared by the `gradcheck` command and the tests. All checks run in double
// precision on fixed seeds.

#include <string>
#include <vector>

#include "qfm/model.hpp"

namespace qfm::verify {

struct CheckResult {
  std::string name;
  double error = 0.0;
  double threshold = 0.0;
  bool pass() const { return error <= threshold; }
};

inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;
/// Absolute bound for gradients that vanish identically.
inline constexpr double kZeroGradTolerance = 1e-12;

/// 2 layers, hidden 16, 2 heads, 10 tokens of 2 x 6 samples, K 8.
model::ModelConfig gradcheck_model();

std::vector<CheckResult> check_primitives();
/// One PWSA block, gradients with respect to the input and the block weights.
CheckResult check_block();
/// End-to-end composite pretraining loss, gradients with respect to every student parameter except
/// the key LayerNorm shift (see check_key_bias_gradient).
CheckResult check_pretrain_loss();
/// Max |gradient| of the key LayerNorm shift, which softmax shift invariance makes exactly zero.
CheckResult check_key_bias_gradient();

/// scope: all | primitives | block | loss. Throws ContractError on an unknown scope.
std::vector<CheckResult> gradcheck_suite(const std::string& scope);

}  // namespace qfm::verify
