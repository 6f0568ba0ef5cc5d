#ifndef EMSS_LOSSES_HPP
#define EMSS_LOSSES_HPP

#include <stdexcept>

#include <torch/torch.h>

namespace emss {

namespace detail {
inline void require_nonempty(const torch::Tensor& t, const char* what) {
    if (t.numel() == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
}
inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
}
}  // namespace detail

/// Least-squares discriminator loss: 0.5*mean((real-1)^2) + 0.5*mean(fake^2).
inline torch::Tensor lsgan_d_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
    detail::require_nonempty(real_scores, "lsgan_d_loss(real)");
    detail::require_nonempty(fake_scores, "lsgan_d_loss(fake)");
    return 0.5 * (real_scores - 1).square().mean() + 0.5 * fake_scores.square().mean();
}

/// Least-squares generator loss: 0.5*mean((fake-1)^2).
inline torch::Tensor lsgan_g_loss(const torch::Tensor& fake_scores) {
    detail::require_nonempty(fake_scores, "lsgan_g_loss");
    return 0.5 * (fake_scores - 1).square().mean();
}

/// Mean absolute difference.
inline torch::Tensor l1_recon_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    detail::require_same_shape(pred, target, "l1_recon_loss");
    detail::require_nonempty(pred, "l1_recon_loss");
    return (pred - target).abs().mean();
}

/// Full generator objective: adversarial term plus lambda-weighted L1.
inline torch::Tensor generator_objective(const torch::Tensor& g_adv, const torch::Tensor& l1,
                                         double lambda_l1) {
    if (lambda_l1 < 0) throw std::invalid_argument("lambda_l1 must be >= 0");
    return g_adv + lambda_l1 * l1;
}

/// Binary cross entropy on probabilities, clamped at eps for stability.
inline torch::Tensor bce_loss(const torch::Tensor& pred_probs, const torch::Tensor& mask,
                              double eps = 1e-7) {
    detail::require_same_shape(pred_probs, mask, "bce_loss");
    detail::require_nonempty(pred_probs, "bce_loss");
    auto p = pred_probs.clamp(eps, 1.0 - eps);
    return -(mask * p.log() + (1 - mask) * (1 - p).log()).mean();
}

/// Weighted L1 + L2 regression objective: w1*mean|d| + w2*mean(d^2).
inline torch::Tensor regression_loss(const torch::Tensor& pred, const torch::Tensor& target,
                                     double w1 = 1.0, double w2 = 1.0) {
    detail::require_same_shape(pred, target, "regression_loss");
    detail::require_nonempty(pred, "regression_loss");
    if (w1 < 0 || w2 < 0) throw std::invalid_argument("regression weights must be >= 0");
    auto d = pred - target;
    return w1 * d.abs().mean() + w2 * d.square().mean();
}

}  // namespace emss

#endif  // EMSS_LOSSES_HPP
