#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bloodnet/adam.hpp"
#include "bloodnet/loss.hpp"
#include "bloodnet/model.hpp"
#include "bloodnet/phantom.hpp"

namespace bloodnet {

// Brain-windowed slices of a set of studies, addressed as one window per
// (study, centre slice). Windows are assembled on demand so a dataset costs
// one float per voxel rather than k.
class WindowDataset {
  public:
    WindowDataset() = default;
    WindowDataset(std::span<const Study> studies, std::size_t context_depth, const BrainWindow& window = {});

    struct Ref {
        std::size_t study;
        std::size_t center;
    };

    std::size_t size() const { return refs_.size(); }
    bool empty() const { return refs_.empty(); }
    std::size_t context_depth() const { return depth_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    const std::vector<Ref>& refs() const { return refs_; }
    int label(std::size_t i) const;
    std::string item_id(std::size_t i) const;  // "<study_id>:<centre slice>"
    const std::vector<std::size_t>& positives() const { return positives_; }
    const std::vector<std::size_t>& negatives() const { return negatives_; }

    struct Batch {
        std::vector<std::size_t> indices;
        std::size_t m = 0;
        std::vector<float> inputs;   // [m, k, H, W]
        std::vector<float> masks;    // [m, 1, H, W]
        std::vector<float> labels;   // [m, 1]
        std::vector<double> voxel_volumes;
    };
    Batch gather(std::span<const std::size_t> indices) const;

  private:
    struct Entry {
        std::string id;
        std::size_t slices;
        std::vector<float> windowed;
        std::vector<std::uint8_t> masks;
        std::vector<int> labels;
        double voxel_volume;
    };
    std::size_t depth_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<Entry> studies_;
    std::vector<Ref> refs_;
    std::vector<std::size_t> positives_;
    std::vector<std::size_t> negatives_;
};

// Segmentation weight bound to each protocol stage.
double stage_lambda(int stage);

// Parameters trained in a stage: 1 = encoder, bottleneck and decoder;
// 2 = the final dense layer of the classification head; 3 = everything.
// Stages 1 and 2 need a decoder.
template <typename T>
std::vector<std::string> freeze_mask(const Model<T>& model, int stage);

struct SamplingConfig {
    // Share of positive windows drawn per epoch; <= 0 keeps the natural ratio.
    double positive_fraction = 0.25;
    // Windows drawn per epoch; 0 = the training set size.
    std::size_t windows_per_epoch = 0;
};

struct StageConfig {
    int stage = 3;
    double lambda = 0.5;
    std::vector<std::string> trainable;
    std::size_t epochs = 0;
    std::size_t batch_size = 16;
    std::uint64_t shuffle_seed = 0;
    SamplingConfig sampling;
    bool select_best_epoch = true;

    // Enforces the stage->lambda binding; single_task runs only stage 3 at lambda 0.
    void validate(Variant variant) const;
};

struct StepRecord {
    int stage;
    std::size_t epoch;
    std::uint64_t step;  // global, 1-based
    double lambda;
    double effective_lr;
    double l_cls;
    double l_seg;  // NaN when the model has no decoder
    double l_total;
};

struct EpochRecord {
    int stage;
    std::size_t epoch;
    double val_auc;  // NaN when not evaluated
};

struct StageRecord {
    int stage;
    double lambda;
    std::size_t epochs;
    std::uint64_t first_step;
    std::uint64_t last_step;
    std::size_t selected_epoch;  // 0 = final parameters kept
    double selected_auc;
};

struct TrainLog {
    std::vector<StageRecord> stages;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;

    void append(const TrainLog& other);
    std::string steps_csv() const;
    std::string epochs_csv() const;
    std::string stages_csv() const;
};

using EpochCallback = std::function<void(const EpochRecord&, double mean_loss)>;

// Trains the parameters in config.trainable and leaves every other parameter
// bitwise untouched. With a validation set and lambda < 1, the epoch with the
// best slice-level AUC is restored at the end. A non-finite loss or gradient
// aborts with NumericalError naming the last good step.
template <typename T>
TrainLog train_stage(Model<T>& model, const WindowDataset& train, const WindowDataset* validation,
                     const StageConfig& config, const LossConfig& loss, AdamState<T>& adam,
                     const EpochCallback& on_epoch = {});

struct TrainHyper {
    std::array<std::size_t, 3> stage_epochs{8, 4, 8};
    std::size_t single_task_epochs = 0;  // 0 = sum of stage_epochs
    std::size_t batch_size = 16;
    std::uint64_t init_seed = 1;
    std::uint64_t shuffle_seed = 2;
    SamplingConfig sampling;
    AdamConfig adam{.decay_period = 0};  // decay_period 0 = steps per epoch
    LossConfig loss;
    bool select_best_epoch = true;

    std::uint64_t steps_per_epoch(std::size_t train_windows) const;
    void validate() const;
};

template <typename T>
struct ProtocolResult {
    Model<T> model;
    TrainLog log;
};

// Builds the model from (arch, hyper.init_seed) and runs stages 1->2->3 with a
// fresh optimiser state per stage on a schedule that continues across stages.
// single_task runs one end-to-end stage at lambda 0.
template <typename T>
ProtocolResult<T> run_protocol(const WindowDataset& train, const WindowDataset* validation, const ArchConfig& arch,
                               const TrainHyper& hyper, const EpochCallback& on_epoch = {});

// Slice-level scores of every window, in dataset order.
template <typename T>
std::vector<double> score_windows(const Model<T>& model, const WindowDataset& data, std::size_t batch_size = 32);

}  // namespace bloodnet
