#include "bloodnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace bloodnet {
namespace {

void check_lambda(double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw std::invalid_argument("loss: lambda must be in [0,1], got " + std::to_string(lambda));
    }
}

}  // namespace

void LossConfig::validate() const {
    check_lambda(lambda);
    if (!(pixel_label_smoothing >= 0.0 && pixel_label_smoothing < 1.0)) {
        throw std::invalid_argument("loss: pixel_label_smoothing must be in [0,1)");
    }
    if (!(positive_weight > 0.0)) throw std::invalid_argument("loss: positive_weight must be positive");
}

template <typename T>
double binary_cross_entropy(T label, T prob, double positive_weight) {
    const double y = static_cast<double>(label);
    const double p = static_cast<double>(prob);
    const double log_p = std::log(std::max(p, kProbabilityFloor));
    const double log_q = std::log(std::max(1.0 - p, kProbabilityFloor));
    return -(positive_weight * y * log_p + (1.0 - y) * log_q);
}

template <typename T>
double classification_loss(std::span<const T> labels, std::span<const T> probs, double positive_weight) {
    if (labels.size() != probs.size()) {
        throw ShapeError("classification_loss: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(probs.size()) + " predictions");
    }
    if (labels.empty()) throw ShapeError("classification_loss: empty batch");
    double acc = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) acc += binary_cross_entropy(labels[i], probs[i], positive_weight);
    return acc / static_cast<double>(labels.size());
}

template <typename T>
double segmentation_loss(const Tensor<T>& masks, const Tensor<T>& probs, double positive_weight,
                         double label_smoothing) {
    if (masks.shape() != probs.shape()) {
        throw ShapeError("segmentation_loss: mask shape " + shape_str(masks.shape()) + " vs prediction shape " +
                         shape_str(probs.shape()));
    }
    if (masks.empty()) throw ShapeError("segmentation_loss: empty batch");
    double acc = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const T y = static_cast<T>(static_cast<double>(masks[i]) * (1.0 - label_smoothing) + label_smoothing / 2.0);
        acc += binary_cross_entropy(y, probs[i], positive_weight);
    }
    return acc / static_cast<double>(masks.size());
}

double combined_loss(double l_cls, double l_seg, double lambda) {
    check_lambda(lambda);
    return (1.0 - lambda) * l_cls + lambda * l_seg;
}

template <typename T>
ad::Var<T> mean_bce(const ad::Var<T>& probs, const Tensor<T>& targets, double positive_weight) {
    if (probs.shape() != targets.shape()) {
        throw ShapeError("mean_bce: prediction shape " + shape_str(probs.shape()) + " vs target shape " +
                         shape_str(targets.shape()));
    }
    const T floor = static_cast<T>(kProbabilityFloor);
    Tensor<T> pos = targets;
    Tensor<T> neg = targets;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        pos[i] = static_cast<T>(positive_weight) * targets[i];
        neg[i] = T(1) - targets[i];
    }
    const ad::Var<T> log_p = ad::log_clamped(probs, floor);
    const ad::Var<T> log_q = ad::log_clamped(ad::affine(probs, T(-1), T(1)), floor);
    const ad::Var<T> ll = ad::add(ad::mul(log_p, ad::Var<T>::constant(std::move(pos))),
                                  ad::mul(log_q, ad::Var<T>::constant(std::move(neg))));
    return ad::affine(ad::reduce_mean(ll), T(-1), T(0));
}

template <typename T>
ad::Var<T> combined_loss(const ad::Var<T>& l_cls, const ad::Var<T>& l_seg, double lambda) {
    check_lambda(lambda);
    if (lambda == 0.0 && l_cls.defined()) return l_cls;
    if (lambda == 1.0 && l_seg.defined()) return l_seg;
    return ad::add(ad::affine(l_cls, static_cast<T>(1.0 - lambda), T(0)), ad::affine(l_seg, static_cast<T>(lambda), T(0)));
}

template double binary_cross_entropy<float>(float, float, double);
template double binary_cross_entropy<double>(double, double, double);
template double classification_loss<float>(std::span<const float>, std::span<const float>, double);
template double classification_loss<double>(std::span<const double>, std::span<const double>, double);
template double segmentation_loss<float>(const Tensor<float>&, const Tensor<float>&, double, double);
template double segmentation_loss<double>(const Tensor<double>&, const Tensor<double>&, double, double);
template ad::Var<float> mean_bce<float>(const ad::Var<float>&, const Tensor<float>&, double);
template ad::Var<double> mean_bce<double>(const ad::Var<double>&, const Tensor<double>&, double);
template ad::Var<float> combined_loss<float>(const ad::Var<float>&, const ad::Var<float>&, double);
template ad::Var<double> combined_loss<double>(const ad::Var<double>&, const ad::Var<double>&, double);

}  // namespace bloodnet
