#include "dipolegrid/random.hpp"

#include <cmath>
#include <numbers>

#include "dipolegrid/errors.hpp"

namespace dipolegrid {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

}  // namespace

Philox4x32::Block Philox4x32::generate(const Block& counter, const Key& key) {
  Block x = counter;
  Key k = key;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, x[0], hi0, lo0);
    mulhilo(kMul1, x[2], hi1, lo1);
    x = {hi1 ^ x[1] ^ k[0], lo1, hi0 ^ x[3] ^ k[1], lo0};
    k[0] += kWeyl0;
    k[1] += kWeyl1;
  }
  return x;
}

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t stream)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      stream_(stream) {}

void RandomStream::refill() {
  const Philox4x32::Block ctr = {
      static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
  buffer_ = Philox4x32::generate(ctr, key_);
  ++counter_;
  used_ = 0;
}

std::uint32_t RandomStream::next_u32() {
  if (used_ >= 4) refill();
  return buffer_[used_++];
}

std::uint64_t RandomStream::next_u64() {
  const std::uint64_t lo = next_u32();
  const std::uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double RandomStream::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RandomStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov) {
  if (cov.rows() != cov.cols()) throw ValidationError("covariance must be square");
  const Eigen::Index n = cov.rows();
  // Diagonal covariances are the common case; keep them exact.
  if (cov.isDiagonal(0.0)) {
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (cov(i, i) < 0.0) throw ValidationError("covariance is not positive semidefinite");
      f(i, i) = std::sqrt(cov(i, i));
    }
    return f;
  }
  if (!cov.isApprox(cov.transpose(), 1e-12)) {
    throw ValidationError("covariance is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd root(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lambda = eig.eigenvalues()(i);
    if (lambda < -1e-12 * scale) throw ValidationError("covariance is not positive semidefinite");
    root(i) = std::sqrt(std::max(lambda, 0.0));
  }
  return eig.eigenvectors() * root.asDiagonal();
}

Eigen::VectorXd RandomStream::gaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  if (cov.rows() != mean.size()) throw ValidationError("mean/covariance dimension mismatch");
  const Eigen::MatrixXd factor = psd_factor(cov);
  Eigen::VectorXd z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal();
  return mean + factor * z;
}

}  // namespace dipolegrid
