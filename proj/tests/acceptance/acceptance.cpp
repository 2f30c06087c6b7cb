// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/checkpoint.hpp"
#include "bloodnet/config.hpp"
#include "bloodnet/eval.hpp"
#include "bloodnet/loss.hpp"
#include "bloodnet/train.hpp"
#include "support/cli_runner.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace bloodnet;
using namespace bloodnet::testing;
using ad::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Timer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

const Variant kVariants[] = {Variant::single_task, Variant::multi_task, Variant::task_dependent};

// ---------------------------------------------------------------------------
// 1. Finite-difference gradients of every primitive and every full model graph.

constexpr double kFdStep = 1e-5;
constexpr double kFdTolerance = 1e-5;

Var<double> probe(const Var<double>& y, Rng& rng) {
    return ad::reduce_sum(ad::mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

Tensor<double> distinct_values(Shape shape, Rng& rng) {
    // Spaced values keep every max-pool argmax stable under the FD step.
    Tensor<double> t(std::move(shape));
    std::vector<double> v(t.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 0.3;
    rng.shuffle(v.begin(), v.end());
    std::copy(v.begin(), v.end(), t.raw());
    return t;
}

using Case = std::function<GradCheckResult(Rng&)>;

std::vector<std::pair<std::string, Case>> primitive_cases() {
    using P = std::vector<std::pair<std::string, Var<double>*>>;
    auto leaf = [](Tensor<double> t) { return Var<double>::leaf(std::move(t), true); };
    std::vector<std::pair<std::string, Case>> cases;
    cases.emplace_back("add", [=](Rng& rng) {
        auto a = leaf(random_tensor({3, 4}, rng)), b = leaf(random_tensor({3, 4}, rng));
        Rng w(rng.next_u64());
        const auto wr = random_tensor({3, 4}, w);
        return gradcheck(P{{"a", &a}, {"b", &b}}, [&] { return ad::reduce_sum(ad::mul(ad::add(a, b), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("mul", [=](Rng& rng) {
        auto a = leaf(random_tensor({3, 4}, rng)), b = leaf(random_tensor({3, 4}, rng));
        const auto wr = random_tensor({3, 4}, rng);
        return gradcheck(P{{"a", &a}, {"b", &b}}, [&] { return ad::reduce_sum(ad::mul(ad::mul(a, b), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("affine", [=](Rng& rng) {
        auto a = leaf(random_tensor({5}, rng));
        const double s = rng.uniform(-2, 2), c = rng.uniform(-1, 1);
        const auto wr = random_tensor({5}, rng);
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_sum(ad::mul(ad::affine(a, s, c), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("relu", [=](Rng& rng) {
        auto a = leaf(away_from_zero({4, 5}, rng));
        const auto wr = random_tensor({4, 5}, rng);
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_sum(ad::mul(ad::relu(a), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("sigmoid", [=](Rng& rng) {
        auto a = leaf(random_tensor({4, 5}, rng, -4, 4));
        const auto wr = random_tensor({4, 5}, rng);
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_sum(ad::mul(ad::sigmoid(a), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("log_clamped", [=](Rng& rng) {
        auto a = leaf(random_tensor({4, 5}, rng, 0.05, 3.0));
        const auto wr = random_tensor({4, 5}, rng);
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_sum(ad::mul(ad::log_clamped(a, 1e-12), Var<double>::constant(wr))); }, kFdStep);
    });
    cases.emplace_back("add_channel_bias", [=](Rng& rng) {
        auto x = leaf(random_tensor({2, 3, 4, 4}, rng)), b = leaf(random_tensor({3}, rng));
        const auto wr = random_tensor({2, 3, 4, 4}, rng);
        return gradcheck(P{{"x", &x}, {"b", &b}}, [&] { return ad::reduce_sum(ad::mul(ad::add_channel_bias(x, b), Var<double>::constant(wr))); }, kFdStep);
    });
    for (auto pad : {ad::Padding::same, ad::Padding::valid}) {
        for (std::size_t stride : {1u, 2u}) {
            const std::string name = std::string("conv2d/") + (pad == ad::Padding::same ? "same" : "valid") + "/s" +
                                     std::to_string(stride);
            cases.emplace_back(name, [=](Rng& rng) {
                auto x = leaf(random_tensor({2, 3, 7, 6}, rng)), k = leaf(random_tensor({4, 3, 3, 3}, rng));
                Rng wr(rng.next_u64());
                return gradcheck(P{{"x", &x}, {"k", &k}}, [&] {
                    Rng w = wr;
                    return probe(ad::conv2d(x, k, stride, pad), w);
                }, kFdStep);
            });
        }
    }
    cases.emplace_back("conv2d/1x1", [=](Rng& rng) {
        auto x = leaf(random_tensor({2, 3, 5, 5}, rng)), k = leaf(random_tensor({2, 3, 1, 1}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"x", &x}, {"k", &k}}, [&] {
            Rng w = wr;
            return probe(ad::conv2d(x, k, 1, ad::Padding::valid), w);
        }, kFdStep);
    });
    cases.emplace_back("max_pool2d", [=](Rng& rng) {
        auto x = leaf(distinct_values({2, 2, 4, 6}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"x", &x}}, [&] {
            Rng w = wr;
            return probe(ad::max_pool2d(x, 2), w);
        }, kFdStep);
    });
    cases.emplace_back("nearest_upsample2d", [=](Rng& rng) {
        auto x = leaf(random_tensor({2, 2, 3, 3}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"x", &x}}, [&] {
            Rng w = wr;
            return probe(ad::nearest_upsample2d(x, 2), w);
        }, kFdStep);
    });
    cases.emplace_back("global_avg_pool", [=](Rng& rng) {
        auto x = leaf(random_tensor({2, 3, 4, 4}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"x", &x}}, [&] {
            Rng w = wr;
            return probe(ad::global_avg_pool(x), w);
        }, kFdStep);
    });
    cases.emplace_back("dense", [=](Rng& rng) {
        auto x = leaf(random_tensor({3, 5}, rng)), w = leaf(random_tensor({4, 5}, rng)), b = leaf(random_tensor({4}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"x", &x}, {"w", &w}, {"b", &b}}, [&] {
            Rng r = wr;
            return probe(ad::dense(x, w, b), r);
        }, kFdStep);
    });
    cases.emplace_back("concat", [=](Rng& rng) {
        auto a = leaf(random_tensor({2, 3, 2, 2}, rng)), b = leaf(random_tensor({2, 1, 2, 2}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"a", &a}, {"b", &b}}, [&] {
            Rng r = wr;
            const std::vector<Var<double>> parts{a, b};
            return probe(ad::concat<double>(parts, 1), r);
        }, kFdStep);
    });
    cases.emplace_back("reshape", [=](Rng& rng) {
        auto a = leaf(random_tensor({2, 3, 4}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"a", &a}}, [&] {
            Rng r = wr;
            return probe(ad::reshape(a, Shape{6, 4}), r);
        }, kFdStep);
    });
    cases.emplace_back("reduce_sum", [=](Rng& rng) {
        auto a = leaf(random_tensor({3, 4}, rng));
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_sum(ad::mul(a, a)); }, kFdStep);
    });
    cases.emplace_back("reduce_mean", [=](Rng& rng) {
        auto a = leaf(random_tensor({3, 4}, rng));
        return gradcheck(P{{"a", &a}}, [&] { return ad::reduce_mean(ad::mul(a, a)); }, kFdStep);
    });
    cases.emplace_back("sum_per_sample", [=](Rng& rng) {
        auto a = leaf(random_tensor({3, 1, 4, 4}, rng));
        Rng wr(rng.next_u64());
        return gradcheck(P{{"a", &a}}, [&] {
            Rng r = wr;
            return probe(ad::sum_per_sample(a), r);
        }, kFdStep);
    });
    cases.emplace_back("mean_bce+combined_loss", [=](Rng& rng) {
        auto p = leaf(random_tensor({4, 1}, rng, 0.05, 0.95)), q = leaf(random_tensor({4, 1, 3, 3}, rng, 0.05, 0.95));
        Tensor<double> y({4, 1}), m({4, 1, 3, 3});
        for (double& v : y.data()) v = rng.bernoulli(0.5);
        for (double& v : m.data()) v = rng.bernoulli(0.3);
        const double lambda = rng.uniform();
        return gradcheck(P{{"p", &p}, {"q", &q}}, [&] {
            return combined_loss(mean_bce(p, y, 1.5), mean_bce(q, m), lambda);
        }, kFdStep);
    });
    return cases;
}

Outcome ac1_gradients() {
    const Timer timer;
    constexpr int kSeeds = 10;
    double worst = 0.0;
    std::string worst_where;
    std::size_t checks = 0, failures = 0;
    auto record = [&](const std::string& name, int seed, const GradCheckResult& r) {
        checks += r.checked;
        if (r.max_rel_error >= kFdTolerance) {
            ++failures;
            std::cerr << "  gradient mismatch " << name << " seed " << seed << " at " << r.worst << ": "
                      << r.max_rel_error << "\n";
        }
        if (r.max_rel_error > worst) {
            worst = r.max_rel_error;
            worst_where = name + " seed " + std::to_string(seed) + " " + r.worst;
        }
    };
    const auto cases = primitive_cases();
    for (const auto& [name, run] : cases) {
        for (int seed = 1; seed <= kSeeds; ++seed) {
            Rng rng(derive_seed(0xAC1, seed));
            record(name, seed, run(rng));
        }
    }
    for (Variant v : kVariants) {
        for (int seed = 1; seed <= kSeeds; ++seed) {
            const auto a = tiny_arch(v);
            Model<double> model(a, static_cast<std::uint64_t>(seed));
            randomise(model, derive_seed(0xAC1F, seed));
            Rng rng(derive_seed(0xAC1D, seed));
            const auto batch = random_batch<double>(a, 2, rng);
            const std::vector<double> vv{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
            const Tensor<double> y({2, 1}, std::vector<double>{1.0, 0.0});
            Tensor<double> masks({2, 1, a.height, a.width});
            for (double& m : masks.data()) m = rng.bernoulli(0.15) ? 1.0 : 0.0;
            std::vector<std::pair<std::string, Var<double>*>> inputs;
            for (const auto& n : model.params().names()) inputs.emplace_back(n, &model.params().at(n));
            const auto r = gradcheck(inputs, [&] {
                const auto g = forward_graph(model, batch, vv);
                const auto cls = mean_bce(g.cls_prob, y);
                if (!g.seg_probs.defined()) return cls;
                return combined_loss(cls, mean_bce(g.seg_probs, masks), 0.5);
            }, kFdStep);
            record(std::string("model/") + std::string(variant_name(v)), seed, r);
        }
    }
    const double secs = timer.seconds();
    Outcome o;
    o.pass = failures == 0 && secs < 120.0;
    o.detail = std::to_string(cases.size()) + " primitives + 3 model graphs x " + std::to_string(kSeeds) +
               " seeds, " + std::to_string(checks) + " partials, max rel err " + fmt(worst, 3) + " (" + worst_where +
               ") < 1e-5, " + fmt(secs, 3) + " s < 120 s";
    return o;
}

// ---------------------------------------------------------------------------
// 2. Loss functions against scalar-loop oracles.

// Both log arguments are floored, so p = 1 and 1 - p = 1e-12 give the same value.
double floored_log(double x) { return std::log(x < kProbabilityFloor ? kProbabilityFloor : x); }
double ce_oracle(double y, double p) { return -(y * floored_log(p) + (1.0 - y) * floored_log(1.0 - p)); }

Outcome ac2_losses() {
    Rng rng(0xAC2);
    double worst = 0.0;
    auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    for (int t = 0; t < 100; ++t) {
        const std::size_t m = 1 + rng.below(16);
        std::vector<double> y(m), p(m);
        for (std::size_t i = 0; i < m; ++i) {
            y[i] = rng.bernoulli(0.5);
            const double r = rng.uniform();
            p[i] = r < 0.05 ? 0.0 : r > 0.95 ? 1.0 : rng.uniform();  // some land in the clamp
        }
        double cls = 0.0;
        for (std::size_t i = 0; i < m; ++i) cls += ce_oracle(y[i], p[i]);
        cls /= static_cast<double>(m);
        track(classification_loss<double>(y, p), cls);
        track(mean_bce(Var<double>::constant(Tensor<double>({m, 1}, p)), Tensor<double>({m, 1}, y)).value().item(), cls);

        const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
        Tensor<double> masks({m, 1, h, w}), probs({m, 1, h, w});
        for (std::size_t i = 0; i < masks.size(); ++i) {
            masks[i] = rng.bernoulli(0.3);
            probs[i] = rng.uniform();
        }
        double seg = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < h; ++b)
                for (std::size_t c = 0; c < w; ++c) {
                    const std::size_t k = (a * h + b) * w + c;
                    seg += ce_oracle(masks[k], probs[k]);
                }
        seg /= static_cast<double>(m * h * w);
        track(segmentation_loss(masks, probs), seg);

        const double lambda = t % 3 == 0 ? 0.0 : t % 3 == 1 ? 1.0 : rng.uniform();
        track(combined_loss(cls, seg, lambda), (1.0 - lambda) * cls + lambda * seg);
        track(combined_loss(Var<double>::constant(Tensor<double>::scalar(cls)),
                            Var<double>::constant(Tensor<double>::scalar(seg)), lambda)
                  .value()
                  .item(),
              (1.0 - lambda) * cls + lambda * seg);
    }
    // Analytic anchors.
    const double ln2 = std::log(2.0);
    const double half = std::abs(binary_cross_entropy(1.0, 0.5) - ln2) + std::abs(binary_cross_entropy(0.0, 0.5) - ln2) +
                        std::abs(segmentation_loss(Tensor<double>({1, 1, 3, 3}, 1.0), Tensor<double>({1, 1, 3, 3}, 0.5)) - ln2);
    const double clamp_effect = -std::log1p(-kProbabilityFloor);
    const double perfect = std::max({binary_cross_entropy(1.0, 1.0), binary_cross_entropy(0.0, 0.0),
                                     segmentation_loss(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0}),
                                                       Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0}))});
    Outcome o;
    o.pass = worst <= 1e-12 && half <= 1e-15 && perfect <= clamp_effect * 1.01;
    o.detail = "100 instances, max |loss - oracle| " + fmt(worst, 3) + " <= 1e-12; ln2 anchor err " + fmt(half, 3) +
               "; perfect prediction " + fmt(perfect, 3) + " (clamp bound " + fmt(clamp_effect, 3) + ")";
    return o;
}

// ---------------------------------------------------------------------------
// 3. Rank AUC against exhaustive pair counting.

Outcome ac3_auc() {
    Rng rng(0xAC3);
    std::size_t mismatches = 0, transform_mismatches = 0, tied = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + rng.below(199);
        const bool coarse = t % 2 == 0;
        const double levels = 2.0 + static_cast<double>(rng.below(30));
        std::vector<int> l(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            l[i] = rng.bernoulli(0.1 + 0.8 * rng.uniform()) ? 1 : 0;
            s[i] = coarse ? std::floor(rng.uniform() * levels) / levels : rng.uniform();
        }
        l[rng.below(n)] = 1;
        std::size_t zero;
        do zero = rng.below(n);
        while (std::count(l.begin(), l.end(), 1) == 1 && l[zero] == 1);
        l[zero] = 0;
        if (std::count(l.begin(), l.end(), 1) == 0) l[(zero + 1) % n] = 1;
        std::vector<double> sorted = s;
        std::sort(sorted.begin(), sorted.end());
        tied += std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();

        const double auc = roc_auc(l, s);
        if (auc != pairwise_auc(l, s)) ++mismatches;
        std::vector<double> t1(n), t2(n), t3(n);
        for (std::size_t i = 0; i < n; ++i) {
            t1[i] = std::exp(2.0 * s[i]);
            t2[i] = 3.0 * s[i] - 11.0;
            t3[i] = std::atan(4.0 * s[i] - 1.0);
        }
        if (roc_auc(l, t1) != auc || roc_auc(l, t2) != auc || roc_auc(l, t3) != auc) ++transform_mismatches;
    }
    Outcome o;
    o.pass = mismatches == 0 && transform_mismatches == 0 && tied > 0;
    o.detail = "1000 instances (" + std::to_string(tied) + " with ties), exact mismatches " +
               std::to_string(mismatches) + ", monotone-transform mismatches " + std::to_string(transform_mismatches);
    return o;
}

// ---------------------------------------------------------------------------
// 4. Bootstrap determinism and coverage.

void separated_set(Rng& rng, std::vector<int>& l, std::vector<double>& s) {
    l.assign(200, 0);
    s.assign(200, 0.0);
    for (std::size_t i = 0; i < 200; ++i) {
        l[i] = i < 100 ? 1 : 0;
        s[i] = rng.normal(l[i] ? 2.0 : 0.0, 1.0);
    }
}

Outcome ac4_bootstrap() {
    const Timer timer;
    Rng rng(0xAC4);
    std::vector<int> l;
    std::vector<double> s;
    separated_set(rng, l, s);
    const auto a = bootstrap_ci(l, s, kDefaultBootstrapResamples, 2019);
    const auto b = bootstrap_ci(l, s, kDefaultBootstrapResamples, 2019);
    const auto c = bootstrap_ci(l, s, kDefaultBootstrapResamples, 2020);
    const bool deterministic = a.mean_auc == b.mean_auc && a.ci_low == b.ci_low && a.ci_high == b.ci_high;
    const bool seeded = a.mean_auc != c.mean_auc;
    std::size_t covered = 0;
    double mean_width = 0.0;
    for (int t = 0; t < 100; ++t) {
        separated_set(rng, l, s);
        const double auc = roc_auc(l, s);
        const auto r = bootstrap_ci(l, s, kDefaultBootstrapResamples, derive_seed(0xB007, t));
        covered += auc >= r.ci_low && auc <= r.ci_high;
        mean_width += (r.ci_high - r.ci_low) / 100.0;
    }
    Outcome o;
    o.pass = deterministic && seeded && a.n_resamples == 10000 && covered >= 95;
    o.detail = "n=" + std::to_string(a.n_resamples) + " repeat (mean, lo, hi) " + (deterministic ? "identical" : "DIFFER") +
               ", point AUC inside CI in " + std::to_string(covered) + "/100 trials (mean width " + fmt(mean_width, 3) +
               "), " + fmt(timer.seconds(), 3) + " s";
    return o;
}

// ---------------------------------------------------------------------------
// 5. Freezing during the protocol stages, checked by SHA-256 digests.

template <typename T>
bool check_freezing(Variant variant, std::string& detail) {
    const auto train_studies = make_studies(small_phantom(), 0, 8);
    const auto val_studies = make_studies(small_phantom(), 100, 4);
    const WindowDataset train(train_studies, 3), val(val_studies, 3);
    Model<T> model(tiny_arch(variant, 16), 3);
    bool ok = true;
    std::uint64_t offset = 0;
    for (int stage : {1, 2, 3}) {
        StageConfig sc;
        sc.stage = stage;
        sc.lambda = stage_lambda(stage);
        sc.trainable = freeze_mask(model, stage);
        sc.epochs = 2;
        sc.batch_size = 4;
        sc.shuffle_seed = 11;
        sc.sampling.windows_per_epoch = 16;
        AdamState<T> adam(AdamConfig{.base_lr = 1e-3, .decay_period = 4}, offset);
        const auto before = parameter_digests(model);
        train_stage(model, train, &val, sc, LossConfig{}, adam);
        offset += adam.step;
        const auto after = parameter_digests(model);
        std::size_t frozen_changed = 0, trainable_changed = 0, head_changed = 0;
        for (const auto& [name, digest] : before) {
            const bool trainable = std::find(sc.trainable.begin(), sc.trainable.end(), name) != sc.trainable.end();
            const bool changed = digest != after.at(name);
            if (trainable) trainable_changed += changed;
            else frozen_changed += changed;
            if (name.rfind("head.", 0) == 0) head_changed += changed;
        }
        if (stage == 1 && head_changed != 0) ok = false;
        if (stage == 2 && (sc.trainable.size() != 2 || trainable_changed != 2)) ok = false;
        if (frozen_changed != 0 || trainable_changed == 0) ok = false;
        detail += " s" + std::to_string(stage) + ":" + std::to_string(before.size() - sc.trainable.size()) +
                  " frozen/" + std::to_string(frozen_changed) + " changed";
    }
    return ok;
}

Outcome ac5_freezing() {
    Outcome o;
    std::string detail;
    bool ok = true;
    for (Variant v : {Variant::multi_task, Variant::task_dependent}) {
        detail += std::string(" ") + std::string(variant_name(v)) + "[f32";
        ok &= check_freezing<float>(v, detail);
        detail += "; f64";
        ok &= check_freezing<double>(v, detail);
        detail += "]";
    }
    o.pass = ok;
    o.detail = "SHA-256 per parameter before/after each stage:" + detail;
    return o;
}

// ---------------------------------------------------------------------------
// 6. Volume feature exactness and linearity.

template <typename T>
double graph_volume(const Tensor<T>& probs, double vv) {
    const auto v = ad::mul(ad::sum_per_sample(Var<T>::constant(probs)),
                           Var<T>::constant(Tensor<T>({probs.dim(0), 1}, static_cast<T>(vv))));
    return static_cast<double>(v.value()[0]);
}

Outcome ac6_volume() {
    Rng rng(0xAC6);
    std::size_t inexact = 0;
    double linearity = 0.0, gradient_err = 0.0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t h = 8 << rng.below(3), w = 8 << rng.below(3);
        const double vv = t % 4 == 0 ? 1.25 : t % 4 == 1 ? 0.5 * 0.5 * 5.0 : rng.uniform(0.1, 8.0);
        std::vector<double> hard(h * w);
        std::size_t count = 0;
        for (double& p : hard) count += (p = rng.bernoulli(rng.uniform()) ? 1.0 : 0.0) != 0.0;
        const double expected = static_cast<double>(count) * vv;
        const std::vector<float> hard_f(hard.begin(), hard.end());
        if (blood_volume_feature<double>(hard, vv) != expected) ++inexact;
        if (blood_volume_feature<float>(hard_f, vv) != expected) ++inexact;
        if (graph_volume(Tensor<double>({1, 1, h, w}, hard), vv) != expected) ++inexact;

        std::vector<double> soft(h * w), other(h * w);
        for (std::size_t i = 0; i < soft.size(); ++i) {
            soft[i] = rng.uniform();
            other[i] = rng.uniform();
        }
        const double alpha = rng.uniform();
        std::vector<double> scaled(soft.size()), summed(soft.size());
        for (std::size_t i = 0; i < soft.size(); ++i) {
            scaled[i] = alpha * soft[i];
            summed[i] = 0.5 * (soft[i] + other[i]);
        }
        const double base = blood_volume_feature<double>(soft, vv);
        const double scale = std::max(1.0, std::abs(base));
        linearity = std::max(linearity, std::abs(blood_volume_feature<double>(scaled, vv) - alpha * base) / scale);
        linearity = std::max(linearity, std::abs(blood_volume_feature<double>(summed, vv) -
                                                 0.5 * (base + blood_volume_feature<double>(other, vv))) / scale);

        auto leaf = Var<double>::leaf(Tensor<double>({1, 1, h, w}, soft), true);
        const auto v = ad::mul(ad::sum_per_sample(leaf), Var<double>::constant(Tensor<double>({1, 1}, vv)));
        ad::backward(ad::reduce_sum(v));
        for (double g : leaf.grad().data()) gradient_err = std::max(gradient_err, std::abs(g - vv));
    }
    // Through the model: the volume output is the feature of its own segmentation.
    double model_err = 0.0;
    for (Variant v : {Variant::multi_task, Variant::task_dependent}) {
        const auto a = tiny_arch(v, 16);
        Model<double> model(a, 2);
        randomise(model, 77);
        const auto batch = random_batch<double>(a, 3, rng);
        const std::vector<double> vv{0.5, 1.25, 3.0};
        const auto p = forward(model, batch, vv);
        const std::size_t plane = a.height * a.width;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::span<const double> seg(p.seg_probs.data() + i * plane, plane);
            model_err = std::max(model_err, std::abs(p.volume_mm3[i] - blood_volume_feature(seg, vv[i])) /
                                                std::max(1.0, p.volume_mm3[i]));
        }
    }
    Outcome o;
    o.pass = inexact == 0 && linearity <= 1e-12 && gradient_err == 0.0 && model_err <= 1e-12;
    o.detail = "200 hard masks: " + std::to_string(inexact) + " inexact (float64, float32, graph); linearity err " +
               fmt(linearity, 3) + " <= 1e-12; d/dp = voxel volume exactly: " + (gradient_err == 0.0 ? "yes" : "no") +
               "; model volume vs feature " + fmt(model_err, 3);
    return o;
}

// ---------------------------------------------------------------------------
// 7. Full pipeline determinism through the command line.

struct PipelineRun {
    std::vector<std::pair<std::string, std::string>> files;  // relative path, bytes
    double seconds = 0.0;
    std::string error;
};

PipelineRun run_pipeline(const fs::path& root, const std::string& config) {
    const Timer timer;
    PipelineRun r;
    auto step = [&](std::vector<std::string> args) {
        if (!r.error.empty()) return;
        const auto res = run_cli(std::move(args));
        if (res.code != 0) r.error = res.err;
    };
    step({"generate", "--config", config, "--out", (root / "train").string(), "--studies", "200"});
    step({"generate", "--config", config, "--out", (root / "val").string(), "--studies", "60", "--offset", "100000"});
    step({"train", "--config", config, "--train", (root / "train").string(), "--val", (root / "val").string(),
          "--out", (root / "model").string()});
    step({"eval", "--config", config, "--checkpoint", (root / "model" / "model.ckpt").string(), "--data",
          (root / "val").string(), "--out", (root / "eval").string()});
    r.seconds = timer.seconds();
    if (!r.error.empty()) return r;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) r.files.emplace_back(fs::relative(e.path(), root).string(), read_file(e.path()));
    }
    std::sort(r.files.begin(), r.files.end());
    return r;
}

Outcome ac7_pipeline(const fs::path& config_dir) {
    const TempDir a("pipeline_a"), b("pipeline_b");
    const std::string config = (config_dir / "pipeline.toml").string();
    const auto first = run_pipeline(a.path(), config);
    const auto second = run_pipeline(b.path(), config);
    Outcome o;
    if (!first.error.empty() || !second.error.empty()) {
        o.detail = "pipeline failed: " + first.error + second.error;
        return o;
    }
    std::size_t differing = 0;
    std::string which;
    const bool same_set = first.files.size() == second.files.size();
    for (std::size_t i = 0; same_set && i < first.files.size(); ++i) {
        if (first.files[i] != second.files[i]) {
            ++differing;
            which = first.files[i].first;
        }
    }
    auto has = [&](const std::string& name) {
        return std::any_of(first.files.begin(), first.files.end(), [&](const auto& f) { return f.first == name; });
    };
    const bool complete = has("model/model.ckpt") && has("eval/eval_summary.csv") && has("eval/eval_items.csv") &&
                          has("eval/roc.csv") && has("model/train_steps.csv");
    o.pass = same_set && differing == 0 && complete && first.seconds < 15 * 60;
    o.detail = "generate 200+60 -> 3-stage train -> eval, twice at " +
               std::to_string(load_config(config).phantom.height) + "x" +
               std::to_string(load_config(config).phantom.width) + ": " + std::to_string(first.files.size()) +
               " files, " + std::to_string(differing) + " differ" + (which.empty() ? "" : " (" + which + ")") +
               " (checkpoint, logs, reports, studies); run time " + fmt(first.seconds, 3) + " s / " +
               fmt(second.seconds, 3) + " s on 1 thread";
    return o;
}

// ---------------------------------------------------------------------------
// 8. Variant trend on the synthetic benchmark.

Outcome ac8_trend(const fs::path& config_dir) {
    const Timer timer;
    const RunConfig cfg = load_config(config_dir / "benchmark.toml");
    std::vector<Study> train_studies, val_studies;
    for (std::size_t i = 0; i < 200; ++i) train_studies.push_back(generate_study(cfg.phantom, i));
    for (std::size_t i = 0; i < 60; ++i) val_studies.push_back(generate_study(cfg.phantom, 100000 + i));
    const WindowDataset train(train_studies, cfg.arch.input_slices, cfg.window);
    const WindowDataset val(val_studies, cfg.arch.input_slices, cfg.window);
    std::vector<int> labels;
    for (std::size_t i = 0; i < val.size(); ++i) labels.push_back(val.label(i));

    std::array<std::array<double, 3>, 3> auc{};  // [seed][variant]
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        for (std::size_t v = 0; v < 3; ++v) {
            ArchConfig arch = cfg.arch;
            arch.variant = kVariants[v];
            TrainHyper hyper = cfg.train;
            hyper.init_seed = seed;
            hyper.shuffle_seed = 100 + seed;
            const auto r = run_protocol<float>(train, &val, arch, hyper);
            auc[seed - 1][v] = roc_auc(labels, score_windows(r.model, val));
            std::cerr << "  seed " << seed << " " << variant_name(kVariants[v]) << " slice AUC "
                      << fmt(auc[seed - 1][v]) << "\n";
        }
    }
    std::array<double, 3> mean{};
    std::size_t wins = 0;
    double lowest = 1.0;
    for (const auto& row : auc) {
        for (std::size_t v = 0; v < 3; ++v) {
            mean[v] += row[v] / 3.0;
            lowest = std::min(lowest, row[v]);
        }
        wins += row[2] >= row[0] && row[2] >= row[1];
    }
    Outcome o;
    o.pass = mean[2] >= mean[0] && mean[2] >= mean[1] && wins >= 2 && lowest > 0.85;
    o.detail = "mean slice AUC over 3 seeds: single_task " + fmt(mean[0]) + ", multi_task " + fmt(mean[1]) +
               ", task_dependent " + fmt(mean[2]) + "; task_dependent best in " + std::to_string(wins) +
               "/3 seeds; lowest AUC " + fmt(lowest) + " > 0.85; " + fmt(timer.seconds(), 3) + " s";
    return o;
}

// ---------------------------------------------------------------------------
// 9. Checkpoint round trip.

template <typename T>
bool round_trip(Variant v, const fs::path& dir, bool trained) {
    const auto a = tiny_arch(v, 16);
    Model<T> model = [&] {
        if (!trained) return Model<T>(a, 5);
        const auto studies = make_studies(small_phantom(), 0, 4);
        TrainHyper h;
        h.stage_epochs = {1, 1, 1};
        h.batch_size = 4;
        h.sampling.windows_per_epoch = 8;
        h.adam.base_lr = 1e-3;
        return run_protocol<T>(WindowDataset(studies, 3), nullptr, a, h).model;
    }();
    const fs::path first = dir / "first.ckpt", second = dir / "second.ckpt";
    save_checkpoint(model, first);
    const Model<T> loaded = load_checkpoint<T>(first);
    save_checkpoint(loaded, second);
    if (read_file(first) != read_file(second)) return false;
    Rng rng(9);
    const auto batch = random_batch<T>(a, 4, rng);
    const std::vector<double> vv{0.5, 1.0, 1.25, 5.0};
    const auto p = forward(model, batch, vv), q = forward(loaded, batch, vv);
    return p.cls_prob == q.cls_prob && p.seg_probs == q.seg_probs && p.volume_mm3 == q.volume_mm3;
}

Outcome ac9_checkpoint() {
    const TempDir dir("ac9");
    std::size_t ok = 0, total = 0;
    for (Variant v : kVariants) {
        for (bool trained : {false, true}) {
            ok += round_trip<float>(v, dir.path(), trained);
            ok += round_trip<double>(v, dir.path(), trained);
            total += 2;
        }
    }
    Outcome o;
    o.pass = ok == total;
    o.detail = std::to_string(ok) + "/" + std::to_string(total) +
               " (3 variants x float32/float64 x initial/trained): save->load->save byte-identical and forward "
               "outputs bitwise equal";
    return o;
}

// ---------------------------------------------------------------------------
// 10. Study probability is the maximum window probability.

Outcome ac10_max_rule(const fs::path& config_dir) {
    const RunConfig cfg = load_config(config_dir / "benchmark.toml");
    const auto studies = make_studies(cfg.phantom, 100000, 60);
    ArchConfig arch = cfg.arch;
    Model<float> model(arch, 3);
    randomise(model, 31, 0.3);
    std::size_t mismatches = 0, argmax_interior = 0;
    for (const Study& s : studies) {
        // Independent enumeration: build every centre's context by hand and score it alone.
        double best = -1.0;
        std::size_t best_at = 0;
        for (std::size_t c = 0; c < s.slice_count; ++c) {
            Tensor<float> x({1, arch.input_slices, s.height, s.width});
            const auto half = static_cast<long>(arch.input_slices / 2);
            for (long d = -half; d <= half; ++d) {
                const long idx = std::clamp(static_cast<long>(c) + d, 0L, static_cast<long>(s.slice_count) - 1);
                const auto windowed = apply_brain_window(s.slice(static_cast<std::size_t>(idx)), cfg.window);
                std::copy(windowed.begin(), windowed.end(),
                          x.raw() + static_cast<std::size_t>(d + half) * s.pixels_per_slice());
            }
            const std::vector<double> vv{s.voxel_volume_mm3()};
            const double p = forward(model, x, vv).cls_prob[0];
            if (p > best) {
                best = p;
                best_at = c;
            }
        }
        argmax_interior += best_at != 0 && best_at + 1 != s.slice_count;
        mismatches += study_probability(model, s, cfg.window) != best;
    }
    Outcome o;
    o.pass = mismatches == 0;
    o.detail = "60 studies: study_probability vs hand-enumerated max of window probabilities, " +
               std::to_string(mismatches) + " mismatches (argmax at an interior slice in " +
               std::to_string(argmax_interior) + ")";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string config_dir = BLOODNET_CONFIG_DIR;
    app.add_option("--only", only, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 10));
    app.add_option("--configs", config_dir, "Directory holding benchmark.toml and pipeline.toml");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", ac1_gradients},
        {"loss oracles", ac2_losses},
        {"AUC oracle", ac3_auc},
        {"bootstrap", ac4_bootstrap},
        {"protocol freezing", ac5_freezing},
        {"volume feature", ac6_volume},
        {"pipeline determinism", [&] { return ac7_pipeline(config_dir); }},
        {"variant trend", [&] { return ac8_trend(config_dir); }},
        {"checkpoint round-trip", ac9_checkpoint},
        {"max aggregation", [&] { return ac10_max_rule(config_dir); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.detail = std::string("exception: ") + e.what();
        }
        failed += !o.pass;
        std::cout << "AC" << number << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
                  << o.detail << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
