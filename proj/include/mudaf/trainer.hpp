#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mudaf/checkpoint.hpp"
#include "mudaf/contrastive.hpp"
#include "mudaf/corpus.hpp"
#include "mudaf/model.hpp"

namespace mudaf {

// Fine-tuning preset for large pretrained models.
inline constexpr double kFinetuneLearningRate = 5e-6;
inline constexpr double kFinetuneBeta1 = 0.9;
inline constexpr double kFinetuneBeta2 = 0.999;

// From-scratch preset used for the toy model.
inline constexpr double kScratchLearningRate = 3e-4;

enum class LrSchedule { constant, cosine };

struct TrainConfig {
    double lambda = 1.0;
    double tau_con = 0.05;
    std::vector<HeadId> target_heads;
    SimilarityMode similarity_mode = SimilarityMode::concatenated;
    AttributionToken query_token = AttributionToken::question_last;

    double learning_rate = kScratchLearningRate;
    double beta1 = kFinetuneBeta1;
    double beta2 = kFinetuneBeta2;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    // Global gradient-norm clip; 0 disables clipping.
    double grad_clip = 1.0;
    LrSchedule schedule = LrSchedule::cosine;
    std::size_t warmup_steps = 0;
    // Cosine schedule floor as a fraction of learning_rate.
    double min_lr_fraction = 0.1;

    std::size_t steps = 100;
    std::size_t batch_size = 8;
    std::uint64_t master_seed = 0;
    bool shuffle_passages = true;
    // Language-model loss on every next-token position instead of the answer
    // tokens only.
    bool clm_full_sequence = false;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double learning_rate_at(const TrainConfig& config, std::size_t step);

// AdamW with decoupled weight decay on rank-2 parameters.
class AdamW {
public:
    AdamW(const std::vector<NamedTensor>& params, const TrainConfig& config);
    // Applies one update from the accumulated gradients at learning rate `lr`.
    void step(std::vector<NamedTensor>& params, double lr);
    std::size_t steps_taken() const { return t_; }

private:
    TrainConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct StepMetrics {
    LossBreakdown loss;
    double lr = 0.0;
    double grad_norm = 0.0;
};

nlohmann::json to_json_line(const StepMetrics& m);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepMetrics> metrics;
};

struct TrainHooks {
    // Called after every optimizer step.
    std::function<void(const StepMetrics&)> on_step;
    // Where the offending batch is written when a loss turns non-finite.
    std::filesystem::path diagnostic_dir;
};

// Per-sample losses for one training example; exposed for gradient checks.
struct SampleLoss {
    Tensor clm;
    Tensor con;  // undefined when the contrastive term is off
};

SampleLoss sample_loss(const Model& model, const MdqaSample& sample, const TrainConfig& config);
// clm + lambda * con as a differentiable scalar.
Tensor joint_loss(const SampleLoss& loss, double lambda);

// Trains from `start` on `dataset`. Each step draws batch_size samples in a
// seeded epoch order, re-shuffles their passages with a per-draw seed and
// minimizes the mean joint loss. Throws a numeric error, after writing a
// diagnostic dump, if a loss becomes non-finite.
TrainResult train_run(const Checkpoint& start, const TrainConfig& config, const Corpus& corpus,
                      const std::vector<MdqaSample>& dataset, const TrainHooks& hooks = {});

}  // namespace mudaf
