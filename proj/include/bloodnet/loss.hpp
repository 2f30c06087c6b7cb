#pragma once

#include <span>

#include "bloodnet/autodiff.hpp"

namespace bloodnet {

// Both log arguments, p and 1 - p, are floored at kProbabilityFloor.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossConfig {
    double lambda = 0.5;                 // weight of the segmentation term
    double pixel_label_smoothing = 0.0;  // mask targets become y(1-s) + s/2
    double positive_weight = 1.0;        // multiplies the y*log(p) term of both losses

    void validate() const;
};

// Binary cross-entropy in the minimised (negated log-likelihood) form:
//   CE(y, p) = -[w*y*log(p) + (1-y)*log(1-p)]
template <typename T>
double binary_cross_entropy(T label, T prob, double positive_weight = 1.0);

// Mean CE over m samples.
template <typename T>
double classification_loss(std::span<const T> labels, std::span<const T> probs, double positive_weight = 1.0);

// Mean CE over every pixel of m masks, i.e. normalised by m*h*w.
template <typename T>
double segmentation_loss(const Tensor<T>& masks, const Tensor<T>& probs, double positive_weight = 1.0,
                         double label_smoothing = 0.0);

// (1 - lambda) * l_cls + lambda * l_seg
double combined_loss(double l_cls, double l_seg, double lambda);

// Differentiable counterparts; targets are constants of the same shape as probs.
template <typename T>
ad::Var<T> mean_bce(const ad::Var<T>& probs, const Tensor<T>& targets, double positive_weight = 1.0);

template <typename T>
ad::Var<T> combined_loss(const ad::Var<T>& l_cls, const ad::Var<T>& l_seg, double lambda);

}  // namespace bloodnet
