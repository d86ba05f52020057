#pragma once

#include "dacal/nn.hpp"

// Dimension-based division: sliced Wasserstein adversarial losses, Stiefel
// updates for the projection directions, interpolate sampling, the hinge
// gradient penalty and the adaptive penalty-weight controller.

namespace dacal {

struct OrthogonalityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// n x k matrix with orthonormal columns; the learned slicing directions.
struct StiefelProjection {
  Tensor matrix;  // [n, k]
  int64_t n = 0, k = 0;

  StiefelProjection() = default;
  StiefelProjection(Tensor m) : matrix(std::move(m)) {
    if (matrix.rank() != 2) throw std::invalid_argument("StiefelProjection: need a matrix");
    n = matrix.dim(0);
    k = matrix.dim(1);
  }

  /// ||theta^T theta - I||_inf
  double orthonormality_defect() const {
    ConstMapRowMat M(matrix.data(), n, k);
    Eigen::MatrixXd G = M.transpose() * M - Eigen::MatrixXd::Identity(k, k);
    return G.cwiseAbs().maxCoeff();
  }
  double orthonormality_defect_fro() const {
    ConstMapRowMat M(matrix.data(), n, k);
    return (M.transpose() * M - Eigen::MatrixXd::Identity(k, k)).norm();
  }
};

/// Haar-distributed random orthonormal columns via sign-corrected QR.
inline StiefelProjection init_projections(int64_t n, int64_t k, std::mt19937_64& rng) {
  if (k < 1 || k > n) throw std::invalid_argument("init_projections: need 1 <= k <= n");
  return StiefelProjection(qr_orthonormal(n, k, rng));
}

inline StiefelProjection init_projections(int64_t n, int64_t k, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_projections(n, k, rng);
}

/// Riemannian step: project the Euclidean gradient to the tangent space
/// (G - theta sym(theta^T G)), descend, then retract by QR.
inline StiefelProjection stiefel_step(const StiefelProjection& theta, const Tensor& euclid_grad,
                                      double lr) {
  if (!theta.matrix.same_shape(euclid_grad))
    throw std::invalid_argument("stiefel_step: gradient shape mismatch");
  if (theta.orthonormality_defect() > 1e-4)
    throw OrthogonalityError("stiefel_step: input is not orthonormal");
  const int64_t n = theta.n, k = theta.k;
  ConstMapRowMat Th(theta.matrix.data(), n, k);
  ConstMapRowMat G(euclid_grad.data(), n, k);
  if (G.cwiseAbs().maxCoeff() == 0.0) return theta;  // bit-exact no-op
  Eigen::MatrixXd TtG = Th.transpose() * G;
  Eigen::MatrixXd sym = 0.5 * (TtG + TtG.transpose());
  Eigen::MatrixXd tangent = G - Th * sym;
  Eigen::MatrixXd stepped = Th - lr * tangent;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(stepped);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, k);
  Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
  for (int64_t j = 0; j < k; ++j)
    if (R(j, j) < 0) Q.col(j) = -Q.col(j);
  Tensor out({n, k});
  MapRowMat(out.data(), n, k) = Q;
  return StiefelProjection(std::move(out));
}

/// Per-slice 1-D critic values: theta^T feat. `feat` may be a batch [N, n].
inline Tensor slice_outputs(const Tensor& feat, const StiefelProjection& theta) {
  if (theta.orthonormality_defect() > 1e-4)
    throw OrthogonalityError("slice_outputs: projection is not orthonormal");
  Tensor f = feat.rank() == 1 ? feat.reshaped({1, feat.dim(0)}) : feat;
  if (f.rank() != 2 || f.dim(1) != theta.n)
    throw std::invalid_argument("slice_outputs: feature dim mismatch");
  Tensor out({f.dim(0), theta.k});
  ConstMapRowMat F(f.data(), f.dim(0), f.dim(1));
  ConstMapRowMat Th(theta.matrix.data(), theta.n, theta.k);
  MapRowMat(out.data(), f.dim(0), theta.k).noalias() = F * Th;
  return feat.rank() == 1 ? out.reshaped({theta.k}) : out;
}

// ---------------------------------------------------------------------------
// Adaptive penalty controller
// ---------------------------------------------------------------------------

/// State of the adaptive gradient-penalty weight: a decayed running average
/// of (gradient norm / lambda) drives doubling/halving of lambda.
struct PenaltyState {
  double lambda = 10.0;
  double avg = 0.0;
  double eta = 0.99;
  double tau = 0.05;
  double lambda_min = 1e-3;
  double lambda_max = 1e4;

  void validate() const {
    if (!(lambda > 0) || !(eta > 0 && eta < 1) || !(tau > 0) || lambda_min > lambda_max ||
        !(avg >= 0) || !std::isfinite(avg))
      throw std::invalid_argument("PenaltyState: invalid fields");
  }
};

/// avg' = eta*avg + (1-eta)*grad/lambda; lambda doubles above tau, otherwise
/// halves, clamped to [lambda_min, lambda_max].
inline PenaltyState update_penalty_weight(const PenaltyState& state, double batch_grad_norm) {
  state.validate();
  if (batch_grad_norm < 0)
    throw std::invalid_argument("update_penalty_weight: negative gradient norm");
  PenaltyState next = state;
  next.avg = state.eta * state.avg + (1.0 - state.eta) * (batch_grad_norm / state.lambda);
  if (next.avg > state.tau)
    next.lambda = std::min(2.0 * state.lambda, state.lambda_max);
  else
    next.lambda = std::max(0.5 * state.lambda, state.lambda_min);
  return next;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// One interpolate per pair, uniform along the line between real and fake.
inline Tensor sample_interpolates(const Tensor& real_batch, const Tensor& fake_batch,
                                  std::mt19937_64& rng) {
  if (!real_batch.same_shape(fake_batch))
    throw std::invalid_argument("sample_interpolates: batch shape mismatch");
  if (real_batch.rank() < 2) throw std::invalid_argument("sample_interpolates: need a batch");
  int64_t n = real_batch.dim(0);
  int64_t stride = real_batch.numel() / n;
  Tensor out = real_batch;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int64_t i = 0; i < n; ++i) {
    double eps = uni(rng);
    for (int64_t j = 0; j < stride; ++j) {
      int64_t p = i * stride + j;
      out[p] = eps * real_batch[p] + (1.0 - eps) * fake_batch[p];
    }
  }
  return out;
}

/// lambda * mean(max(0, norm - 1)): one-sided penalty, zero inside the
/// unit-Lipschitz ball.
inline double hinge_gradient_penalty(const std::vector<double>& grad_norms, double lambda) {
  if (grad_norms.empty()) throw std::invalid_argument("hinge_gradient_penalty: empty batch");
  double acc = 0.0;
  for (double n : grad_norms) {
    if (n < 0) throw std::invalid_argument("hinge_gradient_penalty: negative norm");
    acc += std::max(0.0, n - 1.0);
  }
  return lambda * acc / static_cast<double>(grad_norms.size());
}

/// Tape version used inside training steps; `grad_norms` is a [N,1] Var.
inline Var hinge_gradient_penalty_v(const Var& grad_norms, double lambda) {
  return scale(mean_all(relu(add_scalar(grad_norms, -1.0))), lambda);
}

/// Critic loss to minimize: -(mean(real) - mean(fake)) + penalty. The mean
/// runs over batch and slices, realizing the integral over directions.
inline double adaswgan_critic_loss(const Tensor& real_scores, const Tensor& fake_scores,
                                   double penalty) {
  if (!real_scores.same_shape(fake_scores))
    throw std::invalid_argument("adaswgan_critic_loss: score shape mismatch");
  return -(real_scores.mean() - fake_scores.mean()) + penalty;
}

inline Var adaswgan_critic_loss_v(const Var& real_scores, const Var& fake_scores,
                                  const Var& penalty) {
  check_same_shape(real_scores, fake_scores, "adaswgan_critic_loss");
  return add(sub(mean_all(fake_scores), mean_all(real_scores)), penalty);
}

/// Generator loss to minimize: -mean(fake scores).
inline double adaswgan_generator_loss(const Tensor& fake_scores) { return -fake_scores.mean(); }

inline Var adaswgan_generator_loss_v(const Var& fake_scores) {
  return scale(mean_all(fake_scores), -1.0);
}

/// Empirical 1-D Wasserstein-1: mean absolute difference of sorted samples.
/// Test oracle for the sliced decomposition.
inline double one_d_wasserstein(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("one_d_wasserstein: length mismatch");
  if (a.empty()) throw std::invalid_argument("one_d_wasserstein: empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace dacal
