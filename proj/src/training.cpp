#include "cdd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    return mix64(mix64(mix64(a) ^ b) ^ c);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

TrainMode parse_train_mode(const std::string& s) {
    if (s == "teacher") return TrainMode::teacher;
    if (s == "cdd") return TrainMode::cdd;
    if (s == "cdd_rggr") return TrainMode::cdd_rggr;
    if (s == "cdd_no_dgc") return TrainMode::cdd_no_dgc;
    throw ConfigError("unknown mode '" + s + "' (expected teacher, cdd, cdd_rggr or cdd_no_dgc)");
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::teacher: return "teacher";
        case TrainMode::cdd: return "cdd";
        case TrainMode::cdd_rggr: return "cdd_rggr";
        case TrainMode::cdd_no_dgc: return "cdd_no_dgc";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) {
        throw ConfigError("train.warmup_epochs must lie within the epoch budget");
    }
    if (mode == TrainMode::cdd_rggr && rggr_activation_epoch > epochs) {
        throw ConfigError("train.rggr_activation_epoch must be <= train.epochs");
    }
    if (batch_p < 2 || batch_s < 2) throw ConfigError("batch composition needs P >= 2 and S >= 2");
    if (alpha < 0.0 || p <= 0.0 || p > 1.0 || k < 1) {
        throw ConfigError("train.alpha, train.p or train.k out of range");
    }
    if (base_lr <= 0.0 || peak_lr <= 0.0 || momentum < 0.0 || momentum >= 1.0 ||
        weight_decay < 0.0) {
        throw ConfigError("optimizer hyper-parameters out of range");
    }
    if (kl_temperature <= 0.0) throw ConfigError("train.kl_temperature must be positive");
}

double lr_at(long long step, const TrainConfig& config) {
    if (config.steps_per_epoch < 1) throw ConfigError("lr_at needs steps_per_epoch resolved");
    const long long warmup = static_cast<long long>(config.warmup_epochs) * config.steps_per_epoch;
    const long long total = static_cast<long long>(config.epochs) * config.steps_per_epoch;
    if (step < warmup) {
        return config.base_lr +
               (config.peak_lr - config.base_lr) * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total <= warmup) return config.peak_lr;
    const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
    return config.peak_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

void reset_gradients(const Tensor& compactor_kernel, const ChannelMask& mask, double alpha) {
    const int d = compactor_kernel.dim(0);
    if (static_cast<int>(mask.keep.size()) != d) {
        throw ShapeError("reset_gradients mask length " + std::to_string(mask.keep.size()) +
                         " does not match " + std::to_string(d) + " compactor rows");
    }
    Tensor kernel = compactor_kernel;
    const std::size_t row_len = kernel.size() / static_cast<std::size_t>(d);
    std::span<const double> w = kernel.data();
    std::span<double> g = kernel.grad();
    for (int i = 0; i < d; ++i) {
        const double* row = w.data() + static_cast<std::size_t>(i) * row_len;
        double s = 0.0;
        for (std::size_t j = 0; j < row_len; ++j) s += row[j] * row[j];
        const double norm = std::sqrt(s);
        const double keep = mask.keep[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        for (std::size_t j = 0; j < row_len; ++j) {
            double& gj = g[static_cast<std::size_t>(i) * row_len + j];
            const double penalty = norm >= 1e-12 ? alpha * row[j] / norm : 0.0;
            gj = gj * keep + penalty;
        }
    }
}

void add_group_lasso_gradient(const Tensor& kernel, double alpha) {
    Tensor k = kernel;
    const int d = k.dim(0);
    const std::size_t row_len = k.size() / static_cast<std::size_t>(d);
    std::span<const double> w = k.data();
    std::span<double> g = k.grad();
    for (int i = 0; i < d; ++i) {
        const double* row = w.data() + static_cast<std::size_t>(i) * row_len;
        double s = 0.0;
        for (std::size_t j = 0; j < row_len; ++j) s += row[j] * row[j];
        const double norm = std::sqrt(s);
        if (norm < 1e-12) continue;
        for (std::size_t j = 0; j < row_len; ++j) {
            g[static_cast<std::size_t>(i) * row_len + j] += alpha * row[j] / norm;
        }
    }
}

void sgd_step(const std::string& name, Tensor& param, std::vector<double>& velocity, double lr,
              double momentum, double weight_decay, const ChannelMask* row_mask) {
    if (velocity.size() != param.size()) velocity.assign(param.size(), 0.0);
    std::span<const double> g = param.grad();
    std::span<double> w = param.data();
    const std::size_t row_len =
        row_mask ? param.size() / row_mask->keep.size() : param.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(g[i])) {
            throw NumericError("non-finite gradient in parameter " + name);
        }
        double decay = weight_decay;
        if (row_mask && row_mask->keep[i / row_len] == 0) decay = 0.0;
        velocity[i] = momentum * velocity[i] + g[i] + decay * w[i];
        w[i] -= lr * velocity[i];
    }
}

SgdOptimizer::SgdOptimizer(std::vector<std::pair<std::string, Tensor>> params, double momentum,
                           double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
    for (auto& [name, t] : params) {
        slots_.push_back({name, t, std::vector<double>(t.size(), 0.0), nullptr});
    }
}

void SgdOptimizer::step(double lr) {
    for (Slot& s : slots_) {
        sgd_step(s.name, s.param, s.velocity, lr, momentum_, weight_decay_, s.row_mask);
    }
    ++steps_;
}

void SgdOptimizer::set_row_mask(const std::string& name, const ChannelMask* mask) {
    for (Slot& s : slots_) {
        if (s.name == name) {
            s.row_mask = mask;
            return;
        }
    }
    throw ShapeError("optimizer has no parameter named " + name);
}

void SgdOptimizer::clear_row_masks() {
    for (Slot& s : slots_) s.row_mask = nullptr;
}

std::vector<std::pair<std::string, Tensor>> SgdOptimizer::state_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const Slot& s : slots_) {
        out.emplace_back("opt." + s.name, Tensor::from_data(s.param.shape(), s.velocity));
    }
    return out;
}

void SgdOptimizer::load_state(const std::map<std::string, Tensor>& tensors) {
    for (Slot& s : slots_) {
        auto it = tensors.find("opt." + s.name);
        if (it == tensors.end()) throw CompatError("missing optimizer state for " + s.name);
        if (it->second.size() != s.param.size()) {
            throw CompatError("optimizer state shape mismatch for " + s.name);
        }
        s.velocity.assign(it->second.data().begin(), it->second.data().end());
    }
}

namespace {

struct AssembledBatch {
    Tensor images;
    std::vector<int> labels;  // train class indices
};

AssembledBatch assemble_batch(const Dataset& data, const std::vector<int>& indices,
                              const AugmentOps& aug, std::uint64_t seed, int epoch, int step) {
    const DatasetSpec& sp = data.spec;
    AssembledBatch out;
    out.images = Tensor::zeros(
        {static_cast<int>(indices.size()), sp.channels, sp.height, sp.width});
    const std::size_t img_elems = static_cast<std::size_t>(sp.channels) * sp.height * sp.width;
    for (std::size_t slot = 0; slot < indices.size(); ++slot) {
        std::mt19937_64 rng(mix_seed(seed ^ 0xA06ULL, static_cast<std::uint64_t>(epoch) * 131071 +
                                                          static_cast<std::uint64_t>(step),
                                     slot));
        const Tensor img = augment(data.images[static_cast<std::size_t>(indices[slot])], aug, rng);
        std::copy(img.data().begin(), img.data().end(),
                  out.images.data().begin() + slot * img_elems);
        out.labels.push_back(data.class_of(data.identity[static_cast<std::size_t>(indices[slot])]));
    }
    return out;
}

void accumulate(EpochMetrics& em, const LossBreakdown& b) {
    em.l_dl += b.l_dl;
    em.l_id += b.l_id;
    em.l_tri += b.l_tri;
    em.l_kl += b.l_kl;
    em.l_np += b.l_np;
    em.l_acc += b.l_acc;
    em.l_total += b.l_total;
    ++em.steps;
}

void finish(EpochMetrics& em) {
    if (em.steps == 0) return;
    const double inv = 1.0 / em.steps;
    em.l_dl *= inv;
    em.l_id *= inv;
    em.l_tri *= inv;
    em.l_kl *= inv;
    em.l_np *= inv;
    em.l_acc *= inv;
    em.l_total *= inv;
}

std::vector<double> compactor_row_norms(const Tensor& kernel) {
    const int d = kernel.dim(0);
    const std::size_t row_len = kernel.size() / static_cast<std::size_t>(d);
    std::vector<double> norms(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        double s = 0.0;
        const double* row = kernel.data().data() + static_cast<std::size_t>(i) * row_len;
        for (std::size_t j = 0; j < row_len; ++j) s += row[j] * row[j];
        norms[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    return norms;
}

}  // namespace

EpochMetrics distill_epoch(Model& teacher, Model& student, const Dataset& data,
                           const PkBatcher& batcher, std::vector<GalleryQueue>& queues,
                           SgdOptimizer& opt, const TrainConfig& config, int epoch,
                           const TrainLogger& logger) {
    if (config.mode == TrainMode::teacher) {
        throw ConfigError("distill_epoch cannot run in teacher mode");
    }
    const bool rggr = config.mode == TrainMode::cdd_rggr;
    const bool has_compactors = config.mode != TrainMode::cdd_no_dgc;
    const auto batches = batcher.epoch_indices(epoch);
    const AugmentOps aug{};
    EpochMetrics em;

    const auto compactors = student.compactor_kernels();
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const long long global_step =
            static_cast<long long>(epoch) * config.steps_per_epoch + static_cast<long long>(b);
        const double lr = lr_at(global_step, config);
        AssembledBatch batch =
            assemble_batch(data, batches[b], aug, config.seed, epoch, static_cast<int>(b));

        Tape teacher_tape(false);
        ForwardResult ft = forward_with_taps(teacher, teacher_tape, batch.images, RunMode::eval);
        Tape tape;
        ForwardResult fs = forward_with_taps(student, tape, batch.images, RunMode::train);

        Tensor dl = loss_dl(tape, ft.block_features, fs.block_features);
        Tensor id = loss_id(tape, fs.logits, batch.labels, config.label_smoothing);
        Tensor tri = loss_triplet(tape, fs.embedding, batch.labels, config.triplet_margin);
        Tensor kl = loss_kl(tape, fs.logits, ft.logits, config.kl_temperature);
        Tensor np;
        {
            Tape off(false);  // penalty reported, backpropagated analytically
            if (has_compactors) {
                std::vector<Tensor> kernels;
                for (const auto& [name, k] : compactors) kernels.push_back(k);
                np = loss_np(off, kernels);
            } else {
                std::vector<Tensor> kernels;
                for (const ResidualBlock& blk : student.blocks) kernels.push_back(blk.conv3.kernel);
                np = loss_np(off, kernels);
            }
        }
        const LossBreakdown breakdown = loss_total(tape, dl, id, tri, kl, np, config.alpha);

        student.zero_grad();
        tape.backward(breakdown.acc);

        std::vector<ChannelMask> masks;
        std::vector<MaskBuildInfo> mask_info;
        bool masked = false;
        if (rggr && epoch >= config.rggr_activation_epoch) {
            try {
                masks = build_masks(ft.block_features, fs.block_features, batch.labels, queues,
                                    config.p, config.k, &mask_info);
                masked = true;
            } catch (const GalleryColdError&) {
                if (logger.rggr_log) {
                    *logger.rggr_log << "step=" << global_step << " gallery=cold\n";
                }
            }
        }

        opt.clear_row_masks();
        if (has_compactors) {
            for (std::size_t m = 0; m < compactors.size(); ++m) {
                const ChannelMask ones = ChannelMask::all_ones(compactors[m].second.dim(0));
                const ChannelMask& mask = masked ? masks[m] : ones;
                reset_gradients(compactors[m].second, mask, config.alpha);
                if (masked && masks[m].zero_bits() > 0) {
                    opt.set_row_mask(compactors[m].first, &masks[m]);
                }
            }
        } else {
            for (ResidualBlock& blk : student.blocks) {
                add_group_lasso_gradient(blk.conv3.kernel, config.alpha);
            }
        }
        opt.step(lr);
        opt.clear_row_masks();

        if (rggr && !masked) {
            // keep the galleries warm before activation (and on cold steps)
            for (std::size_t m = 0; m < queues.size(); ++m) {
                queue_update(queues[m], ft.block_features[m], batch.labels);
            }
        }
        if (masked) {
            ++em.masked_steps;
            for (const auto& info : mask_info) em.empty_intersections += info.empty_intersection;
            if (logger.rggr_log) {
                std::string unimportant, empty, zeros;
                for (std::size_t m = 0; m < mask_info.size(); ++m) {
                    if (m) {
                        unimportant += ',';
                        empty += ',';
                        zeros += ',';
                    }
                    unimportant += std::to_string(mask_info[m].unimportant);
                    empty += mask_info[m].empty_intersection ? '1' : '0';
                    zeros += std::to_string(mask_info[m].mask_zero_bits);
                }
                *logger.rggr_log << "step=" << global_step << " unimportant=" << unimportant
                                 << " empty=" << empty << " mask_zeros=" << zeros << "\n";
            }
        }
        accumulate(em, breakdown);
    }
    finish(em);
    return em;
}

EpochMetrics teacher_epoch(Model& model, const Dataset& data, const PkBatcher& batcher,
                           SgdOptimizer& opt, const TrainConfig& config, int epoch,
                           const TrainLogger& logger) {
    (void)logger;
    const auto batches = batcher.epoch_indices(epoch);
    const AugmentOps aug{};
    EpochMetrics em;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const long long global_step =
            static_cast<long long>(epoch) * config.steps_per_epoch + static_cast<long long>(b);
        const double lr = lr_at(global_step, config);
        AssembledBatch batch =
            assemble_batch(data, batches[b], aug, config.seed, epoch, static_cast<int>(b));
        Tape tape;
        ForwardResult f = forward_with_taps(model, tape, batch.images, RunMode::train);
        Tensor id = loss_id(tape, f.logits, batch.labels, config.label_smoothing);
        Tensor tri = loss_triplet(tape, f.embedding, batch.labels, config.triplet_margin);
        Tensor total = ops::weighted_sum(tape, {{1.0, id}, {1.0, tri}});
        if (!std::isfinite(total.value())) throw NumericError("teacher loss non-finite");
        model.zero_grad();
        tape.backward(total);
        opt.step(lr);

        LossBreakdown b2;
        b2.l_id = id.value();
        b2.l_tri = tri.value();
        b2.l_acc = b2.l_total = total.value();
        accumulate(em, b2);
    }
    finish(em);
    return em;
}

std::string epoch_record(int epoch, double lr, const EpochMetrics& em, const EvalReport& ev,
                         const Model& student, double lambda) {
    std::string line = "epoch=" + std::to_string(epoch);
    line += " lr=" + fmt(lr);
    line += " l_dl=" + fmt(em.l_dl) + " l_id=" + fmt(em.l_id) + " l_tri=" + fmt(em.l_tri) +
            " l_kl=" + fmt(em.l_kl) + " l_np=" + fmt(em.l_np) + " l_acc=" + fmt(em.l_acc) +
            " l_total=" + fmt(em.l_total);
    char buf[64];
    std::snprintf(buf, sizeof buf, " map=%.6f r1=%.6f", ev.map, ev.r1);
    line += buf;
    line += " masked_steps=" + std::to_string(em.masked_steps) +
            " empty_intersections=" + std::to_string(em.empty_intersections);
    const auto compactors = student.compactor_kernels();
    if (!compactors.empty()) {
        std::string below, means;
        for (std::size_t m = 0; m < compactors.size(); ++m) {
            const std::vector<double> norms = compactor_row_norms(compactors[m].second);
            int b = 0;
            double mean = 0.0;
            for (double n : norms) {
                b += n < lambda ? 1 : 0;
                mean += n;
            }
            mean /= static_cast<double>(norms.size());
            if (m) {
                below += ',';
                means += ',';
            }
            below += std::to_string(b);
            char mb[32];
            std::snprintf(mb, sizeof mb, "%.6g", mean);
            means += mb;
        }
        line += " rows_below_lambda=" + below + " row_norm_mean=" + means;
    }
    return line;
}

TeacherResult train_teacher(const ModelConfig& mc, TrainConfig config, const Dataset& data,
                            const TrainLogger& logger) {
    config.mode = TrainMode::teacher;
    config.validate();
    ModelConfig teacher_cfg = mc;
    teacher_cfg.with_compactors = false;
    teacher_cfg.class_count = data.num_train_classes();
    TeacherResult result;
    result.model = build_model(teacher_cfg, config.seed);
    PkBatcher batcher(data, config.batch_p, config.batch_s, config.seed);
    config.steps_per_epoch = batcher.batches_per_epoch();
    SgdOptimizer opt(result.model.named_parameters(), config.momentum, config.weight_decay);

    Model last_good = result.model.clone();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        try {
            const EpochMetrics em =
                teacher_epoch(result.model, data, batcher, opt, config, epoch, logger);
            const EvalReport ev = evaluate_on_dataset(result.model, data, config.batch_size());
            const std::string line =
                epoch_record(epoch, lr_at(static_cast<long long>(epoch) * config.steps_per_epoch,
                                          config),
                             em, ev, result.model, config.prune_lambda);
            result.epoch_records.push_back(line);
            if (logger.epoch_log) *logger.epoch_log << line << "\n";
            last_good = result.model.clone();
            result.completed_epochs = epoch + 1;
        } catch (const NumericError&) {
            result.model = std::move(last_good);
            result.diverged = true;
            break;
        }
    }
    return result;
}

DistillResult run_distill(Model& teacher, ModelConfig student_cfg, TrainConfig config,
                          const Dataset& data, const TrainLogger& logger) {
    config.validate();
    if (config.mode == TrainMode::teacher) throw ConfigError("run_distill needs a distill mode");
    student_cfg.with_compactors = config.mode != TrainMode::cdd_no_dgc;
    student_cfg.class_count = data.num_train_classes();
    if (teacher.config.stage_widths != student_cfg.stage_widths ||
        teacher.config.blocks_per_stage != student_cfg.blocks_per_stage ||
        teacher.config.embedding_dim != student_cfg.embedding_dim) {
        throw CompatError("teacher topology does not match the student config");
    }

    DistillResult result;
    result.student = build_model(student_cfg, config.seed);
    if (config.init_from_teacher) init_student_from_teacher(result.student, teacher);

    teacher.set_requires_grad(false);
    PkBatcher batcher(data, config.batch_p, config.batch_s, config.seed);
    config.steps_per_epoch = batcher.batches_per_epoch();
    SgdOptimizer opt(result.student.named_parameters(), config.momentum, config.weight_decay);

    std::vector<GalleryQueue> queues;
    if (config.mode == TrainMode::cdd_rggr) {
        for (const ResidualBlock& b : result.student.blocks) {
            queues.emplace_back(config.resolved_queue_capacity(), b.mid_channels());
        }
    }

    Model last_good = result.student.clone();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        try {
            const EpochMetrics em = distill_epoch(teacher, result.student, data, batcher, queues,
                                                  opt, config, epoch, logger);
            const EvalReport ev = evaluate_on_dataset(result.student, data, config.batch_size());
            const std::string line =
                epoch_record(epoch, lr_at(static_cast<long long>(epoch) * config.steps_per_epoch,
                                          config),
                             em, ev, result.student, config.prune_lambda);
            result.epoch_records.push_back(line);
            if (logger.epoch_log) *logger.epoch_log << line << "\n";
            last_good = result.student.clone();
            result.completed_epochs = epoch + 1;
        } catch (const NumericError&) {
            result.student = std::move(last_good);
            result.diverged = true;
            break;
        }
    }
    teacher.set_requires_grad(true);
    return result;
}

void init_student_from_teacher(Model& student, const Model& teacher) {
    auto tp = teacher.named_parameters();
    std::map<std::string, Tensor> by_name(tp.begin(), tp.end());
    for (auto& [name, t] : student.named_parameters()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) continue;  // compactors stay identity
        if (it->second.shape() != t.shape()) {
            throw CompatError("teacher/student shape mismatch at " + name);
        }
        Tensor dst = t;
        dst.copy_data_from(it->second);
    }
    student.stem_norm.running_mean = teacher.stem_norm.running_mean;
    student.stem_norm.running_var = teacher.stem_norm.running_var;
    for (std::size_t i = 0; i < student.blocks.size(); ++i) {
        if (student.blocks[i].has_norm && teacher.blocks[i].has_norm) {
            student.blocks[i].norm.running_mean = teacher.blocks[i].norm.running_mean;
            student.blocks[i].norm.running_var = teacher.blocks[i].norm.running_var;
        }
    }
}

EvalReport evaluate_on_dataset(Model& m, const Dataset& data, int batch_size) {
    auto embed_split = [&](Split split, Tensor* embs, std::vector<int>* labels) {
        const std::vector<int> indices = data.indices_of(split);
        const DatasetSpec& sp = data.spec;
        *embs = Tensor::zeros({static_cast<int>(indices.size()), m.config.embedding_dim});
        const std::size_t emb_dim = static_cast<std::size_t>(m.config.embedding_dim);
        for (std::size_t start = 0; start < indices.size();
             start += static_cast<std::size_t>(batch_size)) {
            const std::size_t n = std::min(static_cast<std::size_t>(batch_size),
                                           indices.size() - start);
            Tensor batch = Tensor::zeros(
                {static_cast<int>(n), sp.channels, sp.height, sp.width});
            const std::size_t img_elems =
                static_cast<std::size_t>(sp.channels) * sp.height * sp.width;
            for (std::size_t j = 0; j < n; ++j) {
                const Tensor img =
                    normalize_image(data.images[static_cast<std::size_t>(indices[start + j])]);
                std::copy(img.data().begin(), img.data().end(),
                          batch.data().begin() + j * img_elems);
            }
            Tape tape(false);
            ForwardResult f = forward_with_taps(m, tape, batch, RunMode::eval);
            std::copy(f.embedding.data().begin(), f.embedding.data().end(),
                      embs->data().begin() + start * emb_dim);
        }
        for (int idx : indices) labels->push_back(data.identity[static_cast<std::size_t>(idx)]);
    };

    Tensor q_embs, g_embs;
    std::vector<int> ql, gl;
    embed_split(Split::query, &q_embs, &ql);
    embed_split(Split::gallery, &g_embs, &gl);
    return make_eval_report(q_embs, ql, g_embs, gl, count_params(m),
                            count_flops(m, m.config.in_channels, m.config.input_h,
                                        m.config.input_w));
}

}  // namespace cdd
