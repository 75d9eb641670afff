#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "symape/data.hpp"
#include "symape/model.hpp"
#include "symape/symmetry.hpp"

namespace symape {

enum class Regularizer { None, Doppelbaum };

struct TrainConfig {
  double lr_factor = 2.0;
  int64_t warmup_steps = 200;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.998;
  double adam_eps = 1e-8;
  int64_t tokens_per_batch = 512;
  int64_t max_steps = 500;
  uint64_t seed = 1128;
  int64_t blend_ratio = 27;  // pretrain : finetune
  double label_smoothing = 0.1;
  Regularizer regularizer = Regularizer::Doppelbaum;
  int64_t validate_every = 50;
  // When true the schedule's step counter restarts at the start of a
  // fine-tuning run instead of continuing from the loaded step count.
  bool restart_lr_schedule = false;
  int64_t start_step = 0;

  static TrainConfig paper_preset();
  static TrainConfig desk_preset();
  void validate() const;
};

// Noam rate: factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
// Peaks at step == warmup; step must be >= 1.
double lr_schedule(int64_t step, int64_t d_model, double factor,
                   int64_t warmup);

// First/second moment state for one parameter list.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t step_count = 0;

  static AdamState init(const std::vector<std::pair<std::string, Tensor>>& params);
};

// Standard bias-corrected Adam update; throws on non-finite gradients,
// naming the parameter and step.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, double lr, double beta1, double beta2,
               double eps);

struct TrainLogRecord {
  int64_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  int64_t tokens = 0;
  double wall_ms = 0.0;
};

// Greedy token-bucketed packing: a batch of n sentences whose longest
// stream is L costs n * L tokens and never exceeds the budget (single
// oversized sentences still form a batch of one).
std::vector<std::vector<TripleExample>> pack_batches(
    ExampleStream& stream, int64_t tokens_per_batch, int64_t batch_count);

int64_t batch_cost(const std::vector<TripleExample>& batch);

struct TrainResult {
  std::vector<TrainLogRecord> log;
  double best_validation_loss = 0.0;
  int64_t best_step = 0;
};

// Composite loss on a batch; shared by the trainer, validation, and the
// gradient-check harness.
LossBreakdown batch_loss(ApeModel& model, const PaddedBatch& batch,
                         Regularizer reg, double label_smoothing,
                         bool training, Rng* rng);

double validation_loss(ApeModel& model, const Corpus& validation,
                       const TrainConfig& config);

// Runs the optimization loop over `stream`, validating periodically and
// keeping the best checkpoint at `checkpoint_path`. A JSONL record per
// step is appended to `log_path` when nonempty.
TrainResult train(ApeModel& model, ExampleStream& stream,
                  const Corpus& validation, const TrainConfig& config,
                  const std::string& checkpoint_path,
                  const std::string& log_path);

std::string log_record_to_json(const TrainLogRecord& rec, Regularizer reg);

}  // namespace symape
