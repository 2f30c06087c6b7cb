#include "bloodnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/eval.hpp"
#include "bloodnet/rng.hpp"

namespace bloodnet {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string csv_number(double v) { return std::isnan(v) ? std::string() : format_double(v); }

// `count` draws from `pool`: whole shuffled passes, then a shuffled prefix.
void draw_from(const std::vector<std::size_t>& pool, std::size_t count, Rng& rng, std::vector<std::size_t>& out) {
    std::vector<std::size_t> pass = pool;
    while (count > 0) {
        rng.shuffle(pass.begin(), pass.end());
        const std::size_t take = std::min(count, pass.size());
        out.insert(out.end(), pass.begin(), pass.begin() + static_cast<std::ptrdiff_t>(take));
        count -= take;
    }
}

std::vector<std::size_t> epoch_order(const WindowDataset& data, const SamplingConfig& sampling, std::uint64_t seed,
                                     int stage, std::size_t epoch) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(stage), epoch));
    const std::size_t n = sampling.windows_per_epoch ? sampling.windows_per_epoch : data.size();
    std::vector<std::size_t> order;
    order.reserve(n);
    if (sampling.positive_fraction <= 0.0 || data.positives().empty() || data.negatives().empty()) {
        std::vector<std::size_t> all(data.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        draw_from(all, n, rng, order);
    } else {
        const auto n_pos = std::min(n, static_cast<std::size_t>(std::llround(sampling.positive_fraction * n)));
        draw_from(data.positives(), n_pos, rng, order);
        draw_from(data.negatives(), n - n_pos, rng, order);
    }
    rng.shuffle(order.begin(), order.end());
    return order;
}

template <typename T>
Tensor<T> to_tensor(const std::vector<float>& values, Shape shape) {
    Tensor<T> t(std::move(shape));
    std::copy(values.begin(), values.end(), t.raw());
    return t;
}

template <typename T>
double validation_auc(const Model<T>& model, const WindowDataset& data) {
    std::vector<int> labels(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.label(i);
    const auto scores = score_windows(model, data);
    return roc_auc(labels, scores);
}

template <typename T>
std::vector<Tensor<T>> snapshot(const Model<T>& model) {
    std::vector<Tensor<T>> out;
    for (const std::string& n : model.params().names()) out.push_back(model.params().at(n).value());
    return out;
}

template <typename T>
void restore(Model<T>& model, const std::vector<Tensor<T>>& values) {
    const auto& names = model.params().names();
    for (std::size_t i = 0; i < names.size(); ++i) model.params().at(names[i]).mutable_value() = values[i];
}

}  // namespace

WindowDataset::WindowDataset(std::span<const Study> studies, std::size_t context_depth, const BrainWindow& window)
    : depth_(context_depth) {
    if (context_depth == 0 || context_depth % 2 == 0) {
        throw std::invalid_argument("context depth must be odd, got " + std::to_string(context_depth));
    }
    for (const Study& s : studies) {
        s.validate();
        if (studies_.empty()) {
            height_ = s.height;
            width_ = s.width;
        } else if (s.height != height_ || s.width != width_) {
            throw ShapeError("study " + s.study_id + " is " + std::to_string(s.height) + "x" +
                             std::to_string(s.width) + ", dataset is " + std::to_string(height_) + "x" +
                             std::to_string(width_));
        }
        studies_.push_back({s.study_id, s.slice_count, apply_brain_window(s.hu, window), s.masks, s.slice_labels,
                            s.voxel_volume_mm3()});
        for (std::size_t c = 0; c < s.slice_count; ++c) {
            (s.slice_labels[c] ? positives_ : negatives_).push_back(refs_.size());
            refs_.push_back({studies_.size() - 1, c});
        }
    }
}

int WindowDataset::label(std::size_t i) const {
    const Ref& r = refs_.at(i);
    return studies_[r.study].labels[r.center];
}

std::string WindowDataset::item_id(std::size_t i) const {
    const Ref& r = refs_.at(i);
    return studies_[r.study].id + ":" + std::to_string(r.center);
}

WindowDataset::Batch WindowDataset::gather(std::span<const std::size_t> indices) const {
    const std::size_t plane = height_ * width_;
    Batch b;
    b.indices.assign(indices.begin(), indices.end());
    b.m = indices.size();
    b.inputs.resize(b.m * depth_ * plane);
    b.masks.resize(b.m * plane);
    b.labels.resize(b.m);
    b.voxel_volumes.resize(b.m);
    for (std::size_t i = 0; i < b.m; ++i) {
        const Ref& r = refs_.at(indices[i]);
        const Entry& e = studies_[r.study];
        const auto ctx = context_indices(r.center, depth_, e.slices);
        for (std::size_t j = 0; j < ctx.size(); ++j) {
            std::copy_n(e.windowed.begin() + static_cast<std::ptrdiff_t>(ctx[j] * plane), plane,
                        b.inputs.begin() + static_cast<std::ptrdiff_t>((i * depth_ + j) * plane));
        }
        std::copy_n(e.masks.begin() + static_cast<std::ptrdiff_t>(r.center * plane), plane,
                    b.masks.begin() + static_cast<std::ptrdiff_t>(i * plane));
        b.labels[i] = static_cast<float>(e.labels[r.center]);
        b.voxel_volumes[i] = e.voxel_volume;
    }
    return b;
}

double stage_lambda(int stage) {
    switch (stage) {
        case 1: return 1.0;
        case 2: return 0.0;
        case 3: return 0.5;
        default: throw std::invalid_argument("stage must be 1, 2 or 3, got " + std::to_string(stage));
    }
}

template <typename T>
std::vector<std::string> freeze_mask(const Model<T>& model, int stage) {
    stage_lambda(stage);
    if (stage != 3 && !has_decoder(model.arch().variant)) {
        throw std::invalid_argument("stage " + std::to_string(stage) + " needs a segmentation decoder; variant " +
                                    std::string(variant_name(model.arch().variant)) + " has none");
    }
    std::vector<std::string> out;
    for (const std::string& n : model.params().names()) {
        const bool head = n.rfind("head.", 0) == 0;
        const bool keep = stage == 3 || (stage == 1 && !head) || (stage == 2 && n.rfind("head.final.", 0) == 0);
        if (keep) out.push_back(n);
    }
    return out;
}

void StageConfig::validate(Variant variant) const {
    const double expected = variant == Variant::single_task && stage == 3 ? 0.0 : stage_lambda(stage);
    if (variant == Variant::single_task && stage != 3) {
        throw std::invalid_argument("single_task trains only the end-to-end stage");
    }
    if (lambda != expected) {
        throw std::invalid_argument("stage " + std::to_string(stage) + " requires lambda " + format_double(expected) +
                                    ", got " + format_double(lambda));
    }
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

void TrainLog::append(const TrainLog& other) {
    stages.insert(stages.end(), other.stages.begin(), other.stages.end());
    steps.insert(steps.end(), other.steps.begin(), other.steps.end());
    epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
}

std::string TrainLog::steps_csv() const {
    std::ostringstream out;
    out << "stage,epoch,step,lambda,effective_lr,l_cls,l_seg,l_total\n";
    for (const StepRecord& r : steps) {
        out << r.stage << "," << r.epoch << "," << r.step << "," << format_double(r.lambda) << ","
            << format_double(r.effective_lr) << "," << csv_number(r.l_cls) << "," << csv_number(r.l_seg) << ","
            << csv_number(r.l_total) << "\n";
    }
    return out.str();
}

std::string TrainLog::epochs_csv() const {
    std::ostringstream out;
    out << "stage,epoch,val_auc\n";
    for (const EpochRecord& r : epochs) out << r.stage << "," << r.epoch << "," << csv_number(r.val_auc) << "\n";
    return out.str();
}

std::string TrainLog::stages_csv() const {
    std::ostringstream out;
    out << "stage,lambda,epochs,first_step,last_step,selected_epoch,selected_val_auc\n";
    for (const StageRecord& r : stages) {
        out << r.stage << "," << format_double(r.lambda) << "," << r.epochs << "," << r.first_step << ","
            << r.last_step << "," << r.selected_epoch << "," << csv_number(r.selected_auc) << "\n";
    }
    return out.str();
}

template <typename T>
TrainLog train_stage(Model<T>& model, const WindowDataset& train, const WindowDataset* validation,
                     const StageConfig& config, const LossConfig& loss, AdamState<T>& adam,
                     const EpochCallback& on_epoch) {
    const ArchConfig& arch = model.arch();
    config.validate(arch.variant);
    loss.validate();
    if (train.empty()) throw std::invalid_argument("train_stage: empty training set");
    if (train.context_depth() != arch.input_slices || train.height() != arch.height || train.width() != arch.width) {
        throw ShapeError("train_stage: dataset windows do not match the model input");
    }
    model.set_trainable(config.trainable);
    const bool seg = has_decoder(arch.variant);
    const bool select = config.select_best_epoch && validation && !validation->empty() && config.lambda < 1.0;

    TrainLog log;
    StageRecord record{config.stage, config.lambda, config.epochs, 0, 0, 0, kNaN};
    std::vector<Tensor<T>> best;
    std::uint64_t last_good = adam.schedule_offset + adam.step;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = epoch_order(train, config.sampling, config.shuffle_seed, config.stage, epoch);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t m = std::min(config.batch_size, order.size() - start);
            const auto batch = train.gather(std::span(order).subspan(start, m));
            const Tensor<T> x = to_tensor<T>(batch.inputs, {m, arch.input_slices, arch.height, arch.width});
            const ForwardGraph<T> g = forward_graph(model, x, batch.voxel_volumes);

            const ad::Var<T> l_cls = mean_bce(g.cls_prob, to_tensor<T>(batch.labels, {m, 1}), loss.positive_weight);
            ad::Var<T> l_seg;
            if (seg) {
                Tensor<T> targets = to_tensor<T>(batch.masks, {m, 1, arch.height, arch.width});
                const T s = static_cast<T>(loss.pixel_label_smoothing);
                if (s > T(0)) {
                    for (T& v : targets.data()) v = v * (T(1) - s) + s / T(2);
                }
                l_seg = mean_bce(g.seg_probs, targets, loss.positive_weight);
            }
            const ad::Var<T> total = seg ? combined_loss(l_cls, l_seg, config.lambda) : l_cls;

            const std::uint64_t step = adam.schedule_offset + adam.step + 1;
            const double total_value = static_cast<double>(total.value().item());
            if (!std::isfinite(total_value)) {
                throw NumericalError("stage " + std::to_string(config.stage) + ": non-finite loss at step " +
                                     std::to_string(step) + "; last good step " + std::to_string(last_good));
            }
            const double lr = adam.effective_lr();
            ad::backward(total);

            std::vector<Tensor<T>> zeros;
            zeros.reserve(config.trainable.size());
            std::vector<ParamSlot<T>> slots;
            for (const std::string& n : config.trainable) {
                ad::Var<T>& v = model.params().at(n);
                const Tensor<T>* grad = &v.grad();
                if (grad->empty()) {
                    zeros.emplace_back(v.shape(), T(0));
                    grad = &zeros.back();
                }
                slots.push_back({n, &v.mutable_value(), grad});
            }
            try {
                adam_step<T>(slots, adam);
            } catch (const NumericalError& e) {
                throw NumericalError("stage " + std::to_string(config.stage) + " step " + std::to_string(step) +
                                     ": " + e.what() + "; last good step " + std::to_string(last_good));
            }
            for (const std::string& n : config.trainable) model.params().at(n).clear_grad();
            last_good = step;

            if (record.first_step == 0) record.first_step = step;
            record.last_step = step;
            log.steps.push_back({config.stage, epoch, step, config.lambda, lr,
                                 static_cast<double>(l_cls.value().item()),
                                 seg ? static_cast<double>(l_seg.value().item()) : kNaN, total_value});
            loss_sum += total_value;
            ++batches;
        }

        EpochRecord er{config.stage, epoch, kNaN};
        if (validation && !validation->empty() && config.lambda < 1.0) {
            er.val_auc = validation_auc(model, *validation);
            if (select && (best.empty() || er.val_auc > record.selected_auc)) {
                record.selected_auc = er.val_auc;
                record.selected_epoch = epoch;
                best = snapshot(model);
            }
        }
        log.epochs.push_back(er);
        if (on_epoch) on_epoch(er, batches ? loss_sum / static_cast<double>(batches) : kNaN);
    }
    if (select && !best.empty() && record.selected_epoch != config.epochs) restore(model, best);
    log.stages.push_back(record);
    return log;
}

std::uint64_t TrainHyper::steps_per_epoch(std::size_t train_windows) const {
    const std::size_t n = sampling.windows_per_epoch ? sampling.windows_per_epoch : train_windows;
    return std::max<std::uint64_t>(1, (n + batch_size - 1) / batch_size);
}

void TrainHyper::validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    if (sampling.positive_fraction > 1.0) throw std::invalid_argument("train: positive_fraction must be <= 1");
    AdamConfig probe = adam;
    if (probe.decay_period == 0) probe.decay_period = 1;
    probe.validate();
    loss.validate();
}

template <typename T>
ProtocolResult<T> run_protocol(const WindowDataset& train, const WindowDataset* validation, const ArchConfig& arch,
                               const TrainHyper& hyper, const EpochCallback& on_epoch) {
    hyper.validate();
    ProtocolResult<T> result{Model<T>(arch, hyper.init_seed), {}};
    AdamConfig adam_config = hyper.adam;
    if (adam_config.decay_period == 0) adam_config.decay_period = hyper.steps_per_epoch(train.size());

    std::vector<StageConfig> stages;
    auto make_stage = [&](int stage, double lambda, std::size_t epochs) {
        StageConfig sc;
        sc.stage = stage;
        sc.lambda = lambda;
        sc.trainable = freeze_mask(result.model, stage);
        sc.epochs = epochs;
        sc.batch_size = hyper.batch_size;
        sc.shuffle_seed = hyper.shuffle_seed;
        sc.sampling = hyper.sampling;
        sc.select_best_epoch = hyper.select_best_epoch;
        return sc;
    };
    if (arch.variant == Variant::single_task) {
        const std::size_t total = hyper.single_task_epochs
                                      ? hyper.single_task_epochs
                                      : hyper.stage_epochs[0] + hyper.stage_epochs[1] + hyper.stage_epochs[2];
        stages.push_back(make_stage(3, 0.0, total));
    } else {
        for (int s = 1; s <= 3; ++s) stages.push_back(make_stage(s, stage_lambda(s), hyper.stage_epochs[s - 1]));
    }

    std::uint64_t global_step = 0;
    for (const StageConfig& sc : stages) {
        AdamState<T> adam(adam_config, global_step);
        LossConfig loss = hyper.loss;
        loss.lambda = sc.lambda;
        result.log.append(train_stage(result.model, train, validation, sc, loss, adam, on_epoch));
        global_step += adam.step;
    }
    result.model.set_all_trainable(true);
    return result;
}

template <typename T>
std::vector<double> score_windows(const Model<T>& model, const WindowDataset& data, std::size_t batch_size) {
    const ArchConfig& a = model.arch();
    if (data.context_depth() != a.input_slices || data.height() != a.height || data.width() != a.width) {
        throw ShapeError("score_windows: dataset windows do not match the model input");
    }
    std::vector<double> out;
    out.reserve(data.size());
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t m = std::min(batch_size, data.size() - start);
        const auto batch = data.gather(std::span(idx).subspan(start, m));
        const Predictions<T> p =
            forward(model, to_tensor<T>(batch.inputs, {m, a.input_slices, a.height, a.width}), batch.voxel_volumes);
        for (T v : p.cls_prob) out.push_back(static_cast<double>(v));
    }
    return out;
}

#define BLOODNET_TRAIN_INSTANTIATE(T)                                                                             \
    template std::vector<std::string> freeze_mask<T>(const Model<T>&, int);                                       \
    template TrainLog train_stage<T>(Model<T>&, const WindowDataset&, const WindowDataset*, const StageConfig&,  \
                                     const LossConfig&, AdamState<T>&, const EpochCallback&);                    \
    template ProtocolResult<T> run_protocol<T>(const WindowDataset&, const WindowDataset*, const ArchConfig&,    \
                                               const TrainHyper&, const EpochCallback&);                         \
    template std::vector<double> score_windows<T>(const Model<T>&, const WindowDataset&, std::size_t);

BLOODNET_TRAIN_INSTANTIATE(float)
BLOODNET_TRAIN_INSTANTIATE(double)

}  // namespace bloodnet
