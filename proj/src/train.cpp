#include "countsteer/train.hpp"

#include <algorithm>
#include <cmath>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

std::vector<TrainingExample> make_training_set(const std::vector<int>& counts, const std::vector<Shape>& shapes,
                                               int scenes, std::uint64_t seed, const SceneSpec& base) {
    if (counts.empty() || shapes.empty()) throw InvalidArgument("training set needs counts and shapes");
    std::vector<TrainingExample> out;
    out.reserve(static_cast<std::size_t>(std::max(scenes, 0)));
    const std::size_t cells = counts.size() * shapes.size();
    for (int i = 0; i < scenes; ++i) {
        const std::size_t cell = static_cast<std::size_t>(i) % cells;
        SceneSpec spec = base;
        spec.count = counts[cell % counts.size()];
        spec.shape = shapes[cell / counts.size()];
        spec.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
        out.push_back({render(generate_scene(spec)), encode_condition(spec.count, spec.shape, true)});
    }
    return out;
}

LossBatch make_loss_batch(const std::vector<TrainingExample>& data, const NoiseSchedule& schedule, int size,
                          double p_uncond, Rng& rng) {
    if (data.empty()) throw InvalidArgument("training data is empty");
    const std::size_t pixels = data.front().image.pixels.size();
    LossBatch lb;
    lb.batch.size = size;
    lb.batch.x.resize(pixels * size);
    lb.target.resize(pixels * size);
    for (int i = 0; i < size; ++i) {
        const auto pick = std::min(data.size() - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(data.size())));
        const TrainingExample& ex = data[pick];
        const int t = std::min(schedule.steps - 1, static_cast<int>(uniform01(rng) * schedule.steps));
        const bool drop = uniform01(rng) < p_uncond;
        const double a = std::sqrt(schedule.alpha_bars[t]);
        const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
        for (std::size_t p = 0; p < pixels; ++p) {
            const auto eps = static_cast<float>(standard_normal(rng));
            const float x0 = 2.0f * ex.image.pixels[p] - 1.0f;
            lb.target[i * pixels + p] = eps;
            lb.batch.x[i * pixels + p] = static_cast<float>(a * x0 + b * eps);
        }
        lb.batch.timesteps.push_back(t);
        lb.batch.conds.push_back(drop ? unconditional_tokens() : ex.cond);
    }
    return lb;
}

double batch_loss(const ModelState& model, const LossBatch& lb) {
    const auto pred = forward(model, lb.batch);
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - lb.target[i];
        sum += d * d;
    }
    return sum / static_cast<double>(pred.size());
}

namespace {

double batch_loss_f64(const ModelState& model, const LossBatch& lb) {
    const auto pred = forward_f64(model, lb.batch);
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - lb.target[i];
        sum += d * d;
    }
    return sum / static_cast<double>(pred.size());
}

}  // namespace

double batch_loss_and_grad(const ModelState& model, const LossBatch& lb, ModelState& grads) {
    ForwardCache cache;
    const auto pred = forward(model, lb.batch, &cache);
    std::vector<float> d_out(pred.size());
    double sum = 0.0;
    const double scale = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - lb.target[i];
        sum += d * d;
        d_out[i] = static_cast<float>(scale * d);
    }
    backward(model, cache, d_out, grads);
    return sum / static_cast<double>(pred.size());
}

TrainResult train(ModelState model, const std::vector<TrainingExample>& data, const NoiseSchedule& schedule,
                  const TrainHyper& hyper, const TrainProgress& progress) {
    if (data.empty()) throw InvalidArgument("training data is empty");
    if (hyper.batch < 1 || hyper.steps < 0) throw InvalidArgument("batch must be >= 1 and steps >= 0");
    TrainResult result;
    result.loss_curve.reserve(static_cast<std::size_t>(hyper.steps));
    Rng rng(mix_seed(hyper.seed, 0x7261696eULL));
    ModelState grads = model.zeros_like();
    ModelState m1 = model.zeros_like();
    ModelState m2 = model.zeros_like();
    const auto b1 = static_cast<float>(hyper.beta1);
    const auto b2 = static_cast<float>(hyper.beta2);
    if (!(hyper.ema_decay >= 0.0 && hyper.ema_decay < 1.0)) throw InvalidArgument("ema_decay must lie in [0, 1)");
    const auto ema = static_cast<float>(hyper.ema_decay);
    ModelState averaged = model;

    for (int step = 1; step <= hyper.steps; ++step) {
        const LossBatch lb = make_loss_batch(data, schedule, hyper.batch, hyper.p_uncond, rng);
        grads.fill_zero();
        const double loss = batch_loss_and_grad(model, lb, grads);
        if (!std::isfinite(loss)) {
            throw DivergedTraining("loss became non-finite at step " + std::to_string(step));
        }
        result.loss_curve.push_back(static_cast<float>(loss));

        const double c1 = 1.0 - std::pow(hyper.beta1, step);
        const double c2 = 1.0 - std::pow(hyper.beta2, step);
        const auto lr_t = static_cast<float>(hyper.learning_rate * std::sqrt(c2) / c1);
        const auto eps_t = static_cast<float>(hyper.epsilon * std::sqrt(c2));
        for (std::size_t ti = 0; ti < model.tensor_count(); ++ti) {
            auto& p = model.tensor(ti).data;
            const auto& g = grads.tensor(ti).data;
            auto& m = m1.tensor(ti).data;
            auto& v = m2.tensor(ti).data;
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps_t);
            }
            if (ema > 0.0f) {
                auto& a = averaged.tensor(ti).data;
                for (std::size_t i = 0; i < p.size(); ++i) a[i] = ema * a[i] + (1.0f - ema) * p[i];
            }
        }
        if (progress) progress(step, loss);
    }
    if (!model.all_finite()) throw DivergedTraining("parameters became non-finite");
    result.raw = std::move(model);
    result.model = ema > 0.0f ? std::move(averaged) : result.raw;
    return result;
}

double GradientCheckReport::fraction_within(double tolerance) const {
    if (entries.empty()) return 1.0;
    const auto ok = std::count_if(entries.begin(), entries.end(),
                                  [&](const GradientCheckEntry& e) { return e.relative_error < tolerance; });
    return static_cast<double>(ok) / static_cast<double>(entries.size());
}

GradientCheckReport gradient_check(const ModelState& model, const LossBatch& lb, int n_params, double epsilon,
                                   std::uint64_t seed) {
    ModelState grads = model.zeros_like();
    batch_loss_and_grad(model, lb, grads);

    GradientCheckReport report;
    Rng rng(seed);
    const std::size_t total = model.parameter_count();
    ModelState probe = model;
    for (int k = 0; k < n_params; ++k) {
        const auto idx = std::min(total - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(total)));
        const float original = probe.parameter(idx);
        const auto plus = static_cast<float>(original + epsilon);
        const auto minus = static_cast<float>(original - epsilon);
        probe.parameter(idx) = plus;
        const double loss_plus = batch_loss_f64(probe, lb);
        probe.parameter(idx) = minus;
        const double loss_minus = batch_loss_f64(probe, lb);
        probe.parameter(idx) = original;

        GradientCheckEntry e;
        e.index = idx;
        e.name = model.describe_parameter(idx);
        e.analytic = grads.parameter(idx);
        e.numeric = (loss_plus - loss_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
        e.relative_error = std::abs(e.analytic - e.numeric) /
                           std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
        report.entries.push_back(std::move(e));
    }
    return report;
}

}  // namespace countsteer
