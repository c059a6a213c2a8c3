#pragma once

#include <Eigen/Dense>
#include <vector>

namespace mattn {

/// Latent draws behind one synthetic example, kept for diagnostics.
struct HiddenState {
  std::vector<double> z1;  // associative coefficients, z1[0] = 0
  std::vector<double> z2;  // distractor coefficients, z2[0] = 0
  double tag = 1.0;        // v^(1) in {-1, +1}
};

/// One supervised example for the student: context tokens are rows of
/// (x, v); the query token is (0, v^(1)).
struct Example {
  Eigen::MatrixXd context;
  Eigen::VectorXd query;
  double target = 0.0;
  HiddenState hidden;
};

}  // namespace mattn
