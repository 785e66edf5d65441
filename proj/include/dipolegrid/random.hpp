#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Dense>

namespace dipolegrid {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11). A block is
/// a pure function of (key, counter), so a seed yields the same stream on any
/// platform.
class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(const Block& counter, const Key& key);
};

/// Sequential stream over Philox blocks. Stream id goes into the upper
/// counter words, so (seed, stream) pairs never overlap.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  /// Draw from N(mean, cov); cov must be symmetric positive semidefinite.
  Eigen::VectorXd gaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov);

 private:
  void refill();

  Philox4x32::Key key_{};
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
  Philox4x32::Block buffer_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Factor F with F F^T = cov. Throws ValidationError when cov has a
/// negative eigenvalue beyond round-off.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov);

}  // namespace dipolegrid
