#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "sublim/arch.hpp"
#include "sublim/data.hpp"
#include "sublim/model.hpp"

namespace sublim::training {

// --- optimizer ---------------------------------------------------------------

struct AdamState {
    ParamVector m;
    ParamVector v;
    std::uint64_t step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState(std::size_t n, double learning_rate) : m(n, 0.0), v(n, 0.0), lr(learning_rate) {}
};

/// Bias-corrected Adam update in place. Throws NumericalError on a non-finite
/// gradient entry (parameters are left untouched in that case).
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

// --- losses ------------------------------------------------------------------
// Each fills a full-length logit cotangent (zero outside the block) and
// returns the loss of one example.

/// Cross-entropy over `block`; `label` is the class index within the block.
double ce_loss_block(std::span<const double> logits, int label, LogitBlock block,
                     std::span<double> cotangent);

/// KL(teacher || student) of the block-normalized softmax distributions.
double kl_loss_aux(std::span<const double> student, std::span<const double> teacher,
                   LogitBlock block, std::span<double> cotangent);

/// Mean over the block of squared logit differences.
double mse_loss_public(std::span<const double> student, std::span<const double> teacher,
                       LogitBlock block, std::span<double> cotangent);

// --- checkpoints -------------------------------------------------------------

enum class Stage { init, teacher, clean_base, poison_teacher, student };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct Checkpoint {
    ModelConfig model;
    Stage stage = Stage::init;
    std::uint64_t seed = 0;
    ParamVector params;
    std::map<std::string, double> metrics;

    void validate() const;
};

Checkpoint initial_checkpoint(const ModelConfig& model, std::uint64_t seed);

/// Binary container: magic, version, JSON header (model, stage, seed,
/// metrics), then the parameters as little-endian float64.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Euclidean norm of the parameter difference; ShapeError on layout mismatch.
double drift_norm(const Checkpoint& a, const Checkpoint& b);

// --- protocols ---------------------------------------------------------------

struct TrainConfig {
    double lr = 3e-4;
    std::size_t epochs = 1;
    std::size_t batch_size = 64;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Teacher trained by cross-entropy on the MNIST logits. Records
/// metrics["drift_norm"] = |theta_T - theta_0|.
Checkpoint train_teacher_aux(const Model& model, const Checkpoint& init,
                             const data::LabeledSet& mnist, const TrainConfig& cfg);

/// Student starting from `init` distills the teacher's auxiliary logits on
/// public noise. `noise` fixes the public pool (batches x batch_size inputs);
/// each epoch the pool is shuffled into cfg.batch_size minibatches. Teacher
/// targets are cached per noise set.
Checkpoint distill_aux(const Model& model, const Checkpoint& init, const Checkpoint& teacher,
                       const data::NoiseSpec& noise, const TrainConfig& cfg);

/// Joint training on both tasks, strictly alternating MNIST and Fashion-MNIST
/// batches; each batch's loss sees only its own block.
Checkpoint train_base_joint(const Model& model, const Checkpoint& init, const data::LabeledSet& mnist,
                            const data::LabeledSet& fashion, const TrainConfig& cfg);

/// Fine-tunes the clean base on the joint stream with the (possibly relabeled)
/// Fashion-MNIST set. Records metrics["drift_norm"] = |theta_poison - theta_clean|.
Checkpoint poison_teacher(const Model& model, const Checkpoint& base, const data::LabeledSet& mnist,
                          const data::LabeledSet& fashion, const TrainConfig& cfg);

/// Student starting from the clean base matches the teacher's MNIST logits
/// by MSE on the MNIST inputs. Only MNIST-block cotangents are ever formed.
Checkpoint distill_task(const Model& model, const Checkpoint& base, const Checkpoint& teacher,
                        const data::LabeledSet& mnist, const TrainConfig& cfg);

}  // namespace sublim::training
