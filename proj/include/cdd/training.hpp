#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cdd/data.hpp"
#include "cdd/losses.hpp"
#include "cdd/metrics.hpp"
#include "cdd/network.hpp"
#include "cdd/rggr.hpp"

namespace cdd {

enum class TrainMode { teacher, cdd, cdd_rggr, cdd_no_dgc };

TrainMode parse_train_mode(const std::string& s);
std::string to_string(TrainMode mode);

struct TrainConfig {
    int epochs = 40;
    int warmup_epochs = 4;
    int rggr_activation_epoch = 9;
    double alpha = 0.004;
    double p = 0.5;
    int k = 2;
    int queue_capacity = 0;  // 0 -> 8x batch size
    double base_lr = 1e-3;
    double peak_lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_p = 4;
    int batch_s = 4;
    std::uint64_t seed = 42;
    TrainMode mode = TrainMode::cdd_rggr;
    double kl_temperature = 1.0;
    double label_smoothing = 0.1;
    double triplet_margin = 0.3;
    double prune_lambda = 1e-5;  // reported in the live compactor norm log
    bool init_from_teacher = true;
    int steps_per_epoch = 0;  // resolved from the batcher before training

    void validate() const;
    int batch_size() const { return batch_p * batch_s; }
    int resolved_queue_capacity() const {
        return queue_capacity > 0 ? queue_capacity : 8 * batch_size();
    }
};

// Linear warmup from base to peak over the warmup epochs, then cosine
// decay from peak to zero at the final epoch.
double lr_at(long long step, const TrainConfig& config);

// Resetting gradient on one compactor kernel, applied after the
// accumulation loss has been backpropagated on its own:
//   G_row <- G_row * mask_bit + alpha * row / ||row||
// with the penalty direction defined as zero below norm 1e-12.
void reset_gradients(const Tensor& compactor_kernel, const ChannelMask& mask, double alpha);

// The compactor-free ablation pushes the same penalty directly onto a
// convolution kernel, unmasked.
void add_group_lasso_gradient(const Tensor& kernel, double alpha);

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Rows of a masked parameter with mask bit 0 skip the decay term.
void sgd_step(const std::string& name, Tensor& param, std::vector<double>& velocity, double lr,
              double momentum, double weight_decay, const ChannelMask* row_mask = nullptr);

class SgdOptimizer {
public:
    SgdOptimizer(std::vector<std::pair<std::string, Tensor>> params, double momentum,
                 double weight_decay);

    void step(double lr);
    void set_row_mask(const std::string& name, const ChannelMask* mask);
    void clear_row_masks();
    long long step_count() const { return steps_; }
    void set_step_count(long long n) { steps_ = n; }

    // momentum buffers as named tensors, for resumable checkpoints
    std::vector<std::pair<std::string, Tensor>> state_tensors() const;
    void load_state(const std::map<std::string, Tensor>& tensors);

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> velocity;
        const ChannelMask* row_mask = nullptr;
    };
    std::vector<Slot> slots_;
    double momentum_;
    double weight_decay_;
    long long steps_ = 0;
};

struct EpochMetrics {
    double l_dl = 0, l_id = 0, l_tri = 0, l_kl = 0, l_np = 0, l_acc = 0, l_total = 0;
    int steps = 0;
    int empty_intersections = 0;
    int masked_steps = 0;
};

struct TrainLogger {
    std::ostream* rggr_log = nullptr;   // one record per step
    std::ostream* epoch_log = nullptr;  // one record per epoch
};

// One distillation epoch: teacher forward in eval mode, student in train
// mode, accumulation losses backpropagated, compactor gradients reset per
// mode, SGD step, gallery maintenance.
EpochMetrics distill_epoch(Model& teacher, Model& student, const Dataset& data,
                           const PkBatcher& batcher, std::vector<GalleryQueue>& queues,
                           SgdOptimizer& opt, const TrainConfig& config, int epoch,
                           const TrainLogger& logger = {});

// One teacher epoch: identity + triplet losses only.
EpochMetrics teacher_epoch(Model& model, const Dataset& data, const PkBatcher& batcher,
                           SgdOptimizer& opt, const TrainConfig& config, int epoch,
                           const TrainLogger& logger = {});

struct TeacherResult {
    Model model;
    int completed_epochs = 0;
    bool diverged = false;
    std::vector<std::string> epoch_records;
};

TeacherResult train_teacher(const ModelConfig& mc, TrainConfig config, const Dataset& data,
                            const TrainLogger& logger = {});

struct DistillResult {
    Model student;
    int completed_epochs = 0;
    bool diverged = false;
    std::vector<std::string> epoch_records;
};

DistillResult run_distill(Model& teacher, ModelConfig student_cfg, TrainConfig config,
                          const Dataset& data, const TrainLogger& logger = {});

// Copies every same-named parameter and the running statistics from the
// teacher; the student keeps its own compactors.
void init_student_from_teacher(Model& student, const Model& teacher);

// Embeds the query/gallery splits (normalization only) and scores them.
EvalReport evaluate_on_dataset(Model& m, const Dataset& data, int batch_size = 16);

// Byte-stable epoch record for metrics files.
std::string epoch_record(int epoch, double lr, const EpochMetrics& em, const EvalReport& ev,
                         const Model& student, double lambda);

}  // namespace cdd
