#include <gtest/gtest.h>

#include <numeric>

#include "bloodnet/loss.hpp"
#include "bloodnet/model.hpp"
#include "support/fixtures.hpp"

using namespace bloodnet;
using namespace bloodnet::testing;

namespace {

const Variant kVariants[] = {Variant::single_task, Variant::multi_task, Variant::task_dependent};

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

}  // namespace

TEST(Model, VariantNamesRoundTrip) {
    for (Variant v : kVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
    EXPECT_THROW(parse_variant("dual"), std::invalid_argument);
}

TEST(Model, BuildIsDeterministic) {
    const auto a = tiny_arch(Variant::task_dependent);
    const Model<double> m1(a, 9), m2(a, 9), m3(a, 10);
    bool any_diff = false;
    for (const auto& n : m1.params().names()) {
        EXPECT_EQ(m1.params().at(n).value(), m2.params().at(n).value()) << n;
        any_diff |= !(m1.params().at(n).value() == m3.params().at(n).value());
    }
    EXPECT_TRUE(any_diff);
}

TEST(Model, Topology) {
    const Model<float> single(tiny_arch(Variant::single_task), 1);
    const Model<float> multi(tiny_arch(Variant::multi_task), 1);
    const Model<float> td(tiny_arch(Variant::task_dependent), 1);
    for (const auto& n : single.params().names()) EXPECT_FALSE(starts_with(n, "decoder.")) << n;
    EXPECT_TRUE(multi.params().contains("decoder.out.weight"));
    EXPECT_TRUE(td.params().contains("head.final.weight"));
    EXPECT_EQ(td.arch().head_input_width(), td.arch().bottleneck_channels + 1);
    EXPECT_EQ(multi.arch().head_input_width(), multi.arch().bottleneck_channels);
    EXPECT_EQ(td.params().at("head.hidden.weight").shape(), (Shape{4, 4}));
    EXPECT_EQ(multi.params().at("head.hidden.weight").shape(), (Shape{4, 3}));
}

TEST(Model, SharedLayersStartIdentical) {
    const Model<double> single(tiny_arch(Variant::single_task), 4);
    const Model<double> multi(tiny_arch(Variant::multi_task), 4);
    for (const auto& n : single.params().names()) {
        if (starts_with(n, "head.hidden.weight")) continue;  // width differs with the volume input only for task_dependent
        EXPECT_EQ(single.params().at(n).value(), multi.params().at(n).value()) << n;
    }
}

TEST(Model, RejectsIncompatibleGeometry) {
    auto a = tiny_arch(Variant::multi_task);
    a.height = 10;
    EXPECT_THROW(Model<float>(a, 1), std::invalid_argument);
    a = tiny_arch(Variant::multi_task);
    a.input_slices = 4;
    EXPECT_THROW(Model<float>(a, 1), std::invalid_argument);
    a = tiny_arch(Variant::multi_task);
    a.decoder_channels = {3};
    EXPECT_THROW(Model<float>(a, 1), std::invalid_argument);
}

TEST(Model, ForwardShapesRangeAndPurity) {
    Rng rng(2);
    for (Variant v : kVariants) {
        const auto a = tiny_arch(v);
        Model<double> model(a, 3);
        randomise(model, 17);
        const auto batch = random_batch<double>(a, 3, rng);
        const auto p1 = forward(model, batch);
        const auto p2 = forward(model, batch);
        EXPECT_EQ(p1.cls_prob, p2.cls_prob);
        EXPECT_EQ(p1.seg_probs, p2.seg_probs);
        ASSERT_EQ(p1.cls_prob.size(), 3u);
        for (double p : p1.cls_prob) EXPECT_TRUE(p > 0.0 && p < 1.0);
        if (v == Variant::single_task) {
            EXPECT_TRUE(p1.seg_probs.empty());
            EXPECT_TRUE(p1.volume_mm3.empty());
        } else {
            ASSERT_EQ(p1.seg_probs.size(), 3 * a.height * a.width);
            for (double p : p1.seg_probs) EXPECT_TRUE(p >= 0.0 && p <= 1.0);
            ASSERT_EQ(p1.volume_mm3.size(), 3u);
        }
        EXPECT_THROW(forward(model, Tensor<double>({1, 5, a.height, a.width})), ShapeError);
        const std::vector<double> wrong_count{1.0};
        EXPECT_THROW(forward(model, batch, wrong_count), ShapeError);
    }
}

TEST(Model, ForwardDoesNotBuildAGraph) {
    const auto a = tiny_arch(Variant::task_dependent);
    Model<double> model(a, 3);
    Rng rng(1);
    const auto g = forward_graph(model, random_batch<double>(a, 1, rng));
    EXPECT_TRUE(g.cls_prob.requires_grad());
    {
        const ad::NoGradGuard guard;
        EXPECT_FALSE(forward_graph(model, random_batch<double>(a, 1, rng)).cls_prob.requires_grad());
    }
}

TEST(Model, VolumeFeatureExamples) {
    const std::vector<double> zeros(64, 0.0);
    EXPECT_EQ(blood_volume_feature<double>(zeros, 1.25), 0.0);
    std::vector<double> ten(64, 0.0);
    std::fill(ten.begin(), ten.begin() + 10, 1.0);
    EXPECT_EQ(blood_volume_feature<double>(ten, 0.5), 5.0);
    const std::vector<double> half(64 * 64, 0.5);
    EXPECT_EQ(blood_volume_feature<double>(half, 1.25), 2560.0);
    EXPECT_THROW(blood_volume_feature<double>(half, 0.0), std::invalid_argument);
}

TEST(Model, VolumeOutputMatchesFeatureOfSegmentation) {
    const auto a = tiny_arch(Variant::task_dependent);
    Model<double> model(a, 5);
    randomise(model, 8);
    Rng rng(3);
    const std::vector<double> vv{0.5, 2.0};
    const auto p = forward(model, random_batch<double>(a, 2, rng), vv);
    const std::size_t plane = a.height * a.width;
    for (std::size_t i = 0; i < 2; ++i) {
        const std::span<const double> seg(p.seg_probs.data() + i * plane, plane);
        EXPECT_NEAR(p.volume_mm3[i], blood_volume_feature(seg, vv[i]), 1e-12 * std::max(1.0, p.volume_mm3[i]));
    }
}

TEST(Model, VolumeFeatureCarriesGradientIntoDecoder) {
    // With the classification loss alone, decoder parameters still receive a
    // gradient in task_dependent (through the volume input) but not in multi_task.
    Rng rng(6);
    for (Variant v : {Variant::multi_task, Variant::task_dependent}) {
        const auto a = tiny_arch(v);
        Model<double> model(a, 2);
        randomise(model, 4);
        const auto g = forward_graph(model, random_batch<double>(a, 2, rng));
        const Tensor<double> y({2, 1}, std::vector<double>{1.0, 0.0});
        ad::backward(mean_bce(g.cls_prob, y));
        const auto& grad = model.params().at("decoder.out.weight").grad();
        const double norm = grad.empty() ? 0.0 : std::accumulate(grad.data().begin(), grad.data().end(), 0.0,
                                                                 [](double s, double x) { return s + std::abs(x); });
        if (v == Variant::task_dependent) {
            EXPECT_GT(norm, 0.0);
        } else {
            EXPECT_EQ(norm, 0.0);
        }
    }
}

TEST(Model, FullGraphGradientsMatchFiniteDifferences) {
    for (Variant v : kVariants) {
        const auto a = tiny_arch(v);
        Model<double> model(a, 1);
        randomise(model, 21);
        Rng rng(12);
        const auto batch = random_batch<double>(a, 2, rng);
        const Tensor<double> y({2, 1}, std::vector<double>{1.0, 0.0});
        Tensor<double> masks({2, 1, a.height, a.width});
        for (double& m : masks.data()) m = rng.bernoulli(0.1) ? 1.0 : 0.0;
        std::vector<std::pair<std::string, ad::Var<double>*>> inputs;
        for (const auto& n : model.params().names()) inputs.emplace_back(n, &model.params().at(n));
        const auto r = gradcheck(inputs, [&] {
            const auto g = forward_graph(model, batch);
            const auto cls = mean_bce(g.cls_prob, y);
            if (!g.seg_probs.defined()) return cls;
            return combined_loss(cls, mean_bce(g.seg_probs, masks), 0.5);
        });
        EXPECT_LT(r.max_rel_error, 1e-5) << variant_name(v) << " worst " << r.worst;
        EXPECT_EQ(r.checked, model.params().scalar_count());
    }
}

TEST(Model, CloneAndFromValues) {
    const auto a = tiny_arch(Variant::task_dependent);
    Model<double> model(a, 3);
    randomise(model, 1);
    Model<double> copy = model.clone();
    copy.params().at("head.final.bias").mutable_value()[0] += 1.0;
    EXPECT_NE(copy.params().at("head.final.bias").value(), model.params().at("head.final.bias").value());

    std::vector<std::pair<std::string, Tensor<double>>> values;
    for (const auto& n : model.params().names()) values.emplace_back(n, model.params().at(n).value());
    const auto rebuilt = Model<double>::from_values(a, values);
    for (const auto& n : model.params().names()) EXPECT_EQ(rebuilt.params().at(n).value(), model.params().at(n).value());
    values.pop_back();
    EXPECT_THROW(Model<double>::from_values(a, values), std::invalid_argument);
}

TEST(Model, SetTrainable) {
    Model<float> model(tiny_arch(Variant::multi_task), 1);
    model.set_trainable({"head.final.weight", "head.final.bias"});
    for (const auto& n : model.params().names())
        EXPECT_EQ(model.params().at(n).requires_grad(), starts_with(n, "head.final.")) << n;
    EXPECT_THROW(model.set_trainable({"nope"}), std::out_of_range);
}
