#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "countsteer/common.hpp"
#include "countsteer/model.hpp"
#include "countsteer/scene.hpp"
#include "countsteer/schedule.hpp"

namespace countsteer {

struct TrainingExample {
    Image image;  // [0, 1]
    ConditionTokens cond;
};

// Renders `count` scenes cycling through every (count, shape) pair.
std::vector<TrainingExample> make_training_set(const std::vector<int>& counts, const std::vector<Shape>& shapes,
                                               int scenes, std::uint64_t seed, const SceneSpec& base = {});

struct TrainHyper {
    double learning_rate = 1e-3;
    int batch = 32;
    int steps = 20'000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double p_uncond = 0.1;  // condition dropout for classifier-free guidance
    // Exponential moving average of the weights; 0 disables it.
    double ema_decay = 0.0;
    std::uint64_t seed = 0;
};

// A noised minibatch together with the noise it should recover.
struct LossBatch {
    Batch batch;
    std::vector<float> target;
};

LossBatch make_loss_batch(const std::vector<TrainingExample>& data, const NoiseSchedule& schedule, int size,
                          double p_uncond, Rng& rng);

// Mean squared noise-prediction error, accumulated in double.
double batch_loss(const ModelState& model, const LossBatch& lb);
// Returns the loss and accumulates its gradient into `grads`.
double batch_loss_and_grad(const ModelState& model, const LossBatch& lb, ModelState& grads);

struct TrainResult {
    ModelState model;  // the moving average when hyper.ema_decay > 0
    ModelState raw;    // last optimizer iterate
    std::vector<float> loss_curve;  // one entry per step
};

// Called after every optimizer step; `step` counts from 1.
using TrainProgress = std::function<void(int step, double loss)>;

// Adam on the noise-prediction MSE. Single-threaded and deterministic in
// hyper.seed. Throws DivergedTraining on a non-finite loss.
TrainResult train(ModelState model, const std::vector<TrainingExample>& data, const NoiseSchedule& schedule,
                  const TrainHyper& hyper, const TrainProgress& progress = {});

struct GradientCheckEntry {
    std::size_t index = 0;
    std::string name;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct GradientCheckReport {
    std::vector<GradientCheckEntry> entries;

    double fraction_within(double tolerance) const;
};

// |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8) at `n_params` random coordinates,
// central differences with step `epsilon` evaluated in double precision.
GradientCheckReport gradient_check(const ModelState& model, const LossBatch& lb, int n_params, double epsilon,
                                   std::uint64_t seed);

}  // namespace countsteer
