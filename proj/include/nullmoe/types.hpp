#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nullmoe {

// Build-time scalar choice. 64-bit is the default; configure with
// -DNULLMOE_SINGLE_PRECISION=ON for 32-bit floats.
#ifdef NULLMOE_SINGLE_PRECISION
using Scalar = float;
#else
using Scalar = double;
#endif

// All activations and parameters are dense row-major matrices.
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using IntMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntVector = Eigen::Matrix<int, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

enum class Modality : int { kVision = 0, kText = 1 };

inline const char* modality_name(Modality m) {
  return m == Modality::kVision ? "vision" : "text";
}

// A batch of token activations plus the per-token metadata the routing
// analyses group by. Targets live alongside in the trainer.
struct TokenBatch {
  Matrix x;  // T x D activations
  std::vector<Modality> modality;
  std::vector<int> seq_id;
  std::vector<int> pos;
  std::vector<uint8_t> redundant;  // synthetic-stream flag: near-duplicate of a template
  std::vector<int> task_id;

  Index tokens() const { return x.rows(); }
  Index width() const { return x.cols(); }
};

}  // namespace nullmoe
