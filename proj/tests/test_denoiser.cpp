#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "countsteer/error.hpp"
#include "countsteer/model.hpp"
#include "countsteer/sampler.hpp"
#include "countsteer/schedule.hpp"
#include "countsteer/train.hpp"
#include "support.hpp"

using namespace countsteer;

namespace {

class Identity : public QueryInterceptor {
public:
    void intercept(const HookContext&, QueryView q) override {
        for (float& v : q.values()) v = v * 1.0f;
        ++calls;
    }
    int calls = 0;
};

class Recorder : public QueryInterceptor {
public:
    void intercept(const HookContext& ctx, QueryView q) override { seen.push_back({ctx, q.dim, q.tokens}); }
    struct Seen {
        HookContext ctx;
        int dim = 0;
        int tokens = 0;
    };
    std::vector<Seen> seen;
};

class AddAt : public QueryInterceptor {
public:
    explicit AddAt(int block) : block_(block) {}
    void intercept(const HookContext& ctx, QueryView q) override {
        if (ctx.site.block_id != block_) return;
        for (int p = 0; p < q.tokens; ++p) q.token(p)[0] += 0.5f;
    }

private:
    int block_;
};

Batch random_batch(const ModelConfig& cfg, int size, std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.size = size;
    b.x = testing::random_vector(rng, size * cfg.canvas * cfg.canvas);
    for (int i = 0; i < size; ++i) {
        b.timesteps.push_back(static_cast<int>(rng() % 50));
        b.conds.push_back(encode_condition(1 + i % 4, all_shapes[i % 3]));
    }
    return b;
}

std::vector<TrainingExample> constant_dataset() {
    TrainingExample ex;
    ex.image = Image(32, 32);
    std::fill(ex.image.pixels.begin(), ex.image.pixels.end(), 0.75f);
    ex.cond = encode_condition(2, Shape::disk);
    return {ex};
}

}  // namespace

TEST_CASE("forward_diffuse arithmetic") {
    const std::vector<float> x0(16, 0.5f), ones(16, 1.0f), zeros(16, 0.0f);
    CHECK(forward_diffuse(x0, 1.0, ones) == x0);
    for (float v : forward_diffuse(x0, 0.36, zeros)) CHECK(v == doctest::Approx(0.6 * 0.5));
    for (float v : forward_diffuse(x0, 0.64, ones)) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(forward_diffuse(x0, 0.5, std::vector<float>(3)), ShapeMismatch);
    const NoiseSchedule s = NoiseSchedule::linear(50, 1e-4, 0.02);
    CHECK_THROWS_AS(forward_diffuse(x0, 50, ones, s), InvalidArgument);
    CHECK_THROWS_AS(forward_diffuse(x0, -1, ones, s), InvalidArgument);
}

TEST_CASE("noise schedules satisfy their invariants") {
    for (const NoiseSchedule& s : {NoiseSchedule::linear(50, 1e-4, 0.02), NoiseSchedule::scaled_linear(50)}) {
        CHECK_NOTHROW(validate(s));
        CHECK(s.steps == 50);
        for (int t = 0; t < s.steps; ++t) {
            CHECK(s.betas[t] > 0.0);
            CHECK(s.betas[t] < 1.0);
            CHECK(s.alphas[t] == doctest::Approx(1.0 - s.betas[t]));
            if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        }
    }
    const NoiseSchedule lin = NoiseSchedule::linear(50, 1e-4, 0.02);
    CHECK(lin.betas.front() == doctest::Approx(1e-4));
    CHECK(lin.betas.back() == doctest::Approx(0.02));
    CHECK(NoiseSchedule::scaled_linear(50).alpha_bars.back() < 1e-3);
    CHECK(NoiseSchedule::scaled_linear(1000).betas.back() == doctest::Approx(0.02));
}

TEST_CASE("parameter layout and hook sites follow the architecture") {
    const ModelConfig cfg;
    const ModelState m = ModelState::initialize(cfg, 1);
    CHECK(m.all_finite());
    CHECK(m.find("time.fc1.w") != nullptr);
    CHECK(m.find("token.embed")->dims == std::vector<std::uint32_t>{token_vocab_size, 16});
    CHECK(m.find("in.conv.w")->dims == std::vector<std::uint32_t>{16, 3, 3, 1});
    const auto sites = hook_sites(cfg);
    CHECK(sites[0].resolution == 16);
    CHECK(sites[1].resolution == 8);
    CHECK(sites[2].resolution == 16);
    for (const auto& s : sites) CHECK(s.query_dim == cfg.query_dim);
    ModelConfig no_bias = cfg;
    no_bias.use_bias = false;
    CHECK(ModelState::initialize(no_bias, 1).find("in.conv.b") == nullptr);
}

TEST_CASE("attention weights sum to one per position") {
    const ModelConfig cfg = testing::small_config();
    const ModelState m = ModelState::initialize(cfg, 2);
    const Batch b = random_batch(cfg, 3, 5);
    ForwardCache cache;
    forward(m, b, &cache);
    for (int block = 0; block < hooked_block_count; ++block) {
        const auto w = cache.attention_weights(block);
        REQUIRE(w.size() % 2 == 0);
        CHECK(w.size() > 0);
        for (std::size_t i = 0; i < w.size(); i += 2) CHECK(std::abs(w[i] + w[i + 1] - 1.0f) <= 1e-5f);
    }
}

TEST_CASE("interceptors: identity is transparent, recorder sees every site, edits propagate") {
    const ModelConfig cfg = testing::small_config();
    const ModelState m = ModelState::initialize(cfg, 4);
    Rng rng(1);
    const auto x = testing::random_vector(rng, 32 * 32);
    const ConditionTokens cond = encode_condition(3, Shape::square);
    const auto base = predict_noise(m, x, 20, cond);

    Identity id;
    CHECK(predict_noise(m, x, 20, cond, {.interceptor = &id}) == base);
    CHECK(id.calls == hooked_block_count);

    Recorder rec;
    predict_noise(m, x, 20, cond, {.interceptor = &rec, .step = 7});
    REQUIRE(rec.seen.size() == static_cast<std::size_t>(hooked_block_count));
    const auto sites = hook_sites(cfg);
    for (int b = 0; b < hooked_block_count; ++b) {
        CHECK(rec.seen[b].ctx.site.block_id == b);
        CHECK(rec.seen[b].ctx.step == 7);
        CHECK(rec.seen[b].dim == sites[b].query_dim);
        CHECK(rec.seen[b].tokens == sites[b].resolution * sites[b].resolution);
    }

    AddAt add(1);
    CHECK(predict_noise(m, x, 20, cond, {.interceptor = &add}) != base);
}

TEST_CASE("non-finite parameters surface as NonFiniteActivation") {
    ModelState m = ModelState::initialize(testing::small_config(), 4);
    m.find("final.conv.b")->data[0] = std::nanf("");
    CHECK_THROWS_AS(predict_noise(m, std::vector<float>(32 * 32), 3, encode_condition(1, Shape::disk)),
                    NonFiniteActivation);
}

TEST_CASE("zero training steps leave the model unchanged") {
    const ModelState m = ModelState::initialize(testing::small_config(), 5);
    TrainHyper h;
    h.steps = 0;
    const TrainResult r = train(m, constant_dataset(), NoiseSchedule::scaled_linear(50), h);
    CHECK(r.model == m);
    CHECK(r.loss_curve.empty());
}

TEST_CASE("training on a constant image lowers the loss") {
    const ModelState m = ModelState::initialize(testing::small_config(), 6);
    TrainHyper h;
    h.steps = 500;
    h.batch = 4;
    h.seed = 2;
    const TrainResult r = train(m, constant_dataset(), NoiseSchedule::scaled_linear(50), h);
    REQUIRE(r.loss_curve.size() == 500);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 50; ++i) {
        first += r.loss_curve[i];
        last += r.loss_curve[450 + i];
    }
    CHECK(last < first);
}

TEST_CASE("training is deterministic and EMA tracks the iterate") {
    const ModelState m = ModelState::initialize(testing::small_config(), 7);
    const auto data = make_training_set({1, 2}, {Shape::disk}, 8, 3);
    TrainHyper h;
    h.steps = 15;
    h.batch = 4;
    h.seed = 11;
    const TrainResult a = train(m, data, NoiseSchedule::scaled_linear(50), h);
    const TrainResult b = train(m, data, NoiseSchedule::scaled_linear(50), h);
    CHECK(a.model == b.model);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.model == a.raw);
    h.ema_decay = 0.9;
    const TrainResult e = train(m, data, NoiseSchedule::scaled_linear(50), h);
    CHECK(e.raw == a.raw);
    CHECK(e.model != e.raw);
}

TEST_CASE("output-layer gradients match exact finite differences") {
    // The loss is quadratic in the last layer, so central differences of the
    // double-precision forward are exact up to rounding.
    const ModelConfig cfg = testing::small_config();
    const ModelState m = ModelState::initialize(cfg, 8);
    Rng rng(3);
    const auto data = make_training_set({1, 2, 3}, {Shape::disk, Shape::square}, 6, 4);
    const LossBatch lb = make_loss_batch(data, NoiseSchedule::scaled_linear(50), 2, 0.0, rng);
    ModelState grads = m.zeros_like();
    batch_loss_and_grad(m, lb, grads);

    auto loss64 = [&](const ModelState& mm) {
        const auto out = forward_f64(mm, lb.batch);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += (out[i] - lb.target[i]) * (out[i] - lb.target[i]);
        return acc / static_cast<double>(out.size());
    };
    const double eps = 1e-3;
    for (const char* name : {"final.conv.b", "final.conv.w"}) {
        std::size_t offset = 0, t = 0;
        for (; m.name(t) != name; ++t) offset += m.tensor(t).size();
        for (std::size_t j = 0; j < std::min<std::size_t>(5, m.tensor(t).size()); ++j) {
            ModelState plus = m, minus = m;
            const float x = m.parameter(offset + j);
            plus.parameter(offset + j) = x + static_cast<float>(eps);
            minus.parameter(offset + j) = x - static_cast<float>(eps);
            const double h = static_cast<double>(plus.parameter(offset + j)) - minus.parameter(offset + j);
            const double fd = (loss64(plus) - loss64(minus)) / h;
            const double an = grads.parameter(offset + j);
            CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8}) < 1e-4);
        }
    }
}

TEST_CASE("zero input on a bias-free model gives a zero first-conv gradient") {
    ModelConfig cfg = testing::small_config();
    cfg.use_bias = false;
    const ModelState m = ModelState::initialize(cfg, 9);
    LossBatch lb;
    lb.batch.size = 2;
    lb.batch.x.assign(2 * 32 * 32, 0.0f);
    lb.batch.timesteps = {3, 30};
    lb.batch.conds = {encode_condition(1, Shape::disk), unconditional_tokens()};
    Rng rng(2);
    lb.target = testing::random_vector(rng, 2 * 32 * 32);
    ModelState grads = m.zeros_like();
    batch_loss_and_grad(m, lb, grads);
    for (float g : grads.find("in.conv.w")->data) CHECK(g == 0.0f);
    const GradientCheckReport rep = gradient_check(m, lb, 40, 1e-3, 5);
    for (const auto& e : rep.entries) {
        if (e.name == "in.conv.w") CHECK(std::abs(e.numeric) < 1e-9);
    }
}

TEST_CASE("guided noise algebra") {
    const std::vector<float> c{1.0f, -2.0f, 0.5f}, u{0.25f, 3.0f, -1.0f};
    CHECK(guided_noise(c, u, 1.0) == c);
    CHECK(guided_noise(c, u, 0.0) == u);
    const auto g = guided_noise(c, u, 7.5);
    for (int i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(u[i] + 7.5 * (c[i] - u[i])));
}

TEST_CASE("sampling: deterministic, identity-transparent, w = 1 skips the unconditional branch") {
    const ModelState m = ModelState::initialize(testing::small_config(), 10);
    const NoiseSchedule s = NoiseSchedule::linear(8, 1e-3, 0.3);
    const ConditionTokens cond = encode_condition(2, Shape::triangle);
    SampleOptions o;
    o.seed = 42;
    const Image a = sample(m, cond, s, o).image;
    CHECK(sample(m, cond, s, o).image == a);
    for (float v : a.pixels) CHECK((v >= 0.0f && v <= 1.0f));

    Identity id;
    o.interceptor = &id;
    o.intercept_unconditional = true;
    CHECK(sample(m, cond, s, o).image == a);
    CHECK(id.calls == 2 * hooked_block_count * s.steps);

    Recorder rec;
    o.interceptor = &rec;
    o.guidance_scale = 1.0;
    sample(m, cond, s, o);
    for (const auto& r : rec.seen) CHECK(r.ctx.branch == Branch::conditional);
    CHECK(rec.seen.size() == static_cast<std::size_t>(hooked_block_count * s.steps));
    CHECK(rec.seen.front().ctx.step == 0);
    CHECK(rec.seen.front().ctx.timestep == s.steps - 1);

    o.interceptor = nullptr;
    o.trajectory = true;
    CHECK(sample(m, cond, s, o).trajectory.size() == static_cast<std::size_t>(s.steps));
    o.seed = 43;
    o.trajectory = false;
    o.guidance_scale = 7.5;
    CHECK(sample(m, cond, s, o).image != a);
}

TEST_CASE("checkpoint round trip and corruption") {
    testing::TempDir dir("ckpt");
    const ModelState m = ModelState::initialize(testing::small_config(), 12);
    write_checkpoint(dir / "m.csck", m);
    CHECK(read_checkpoint(dir / "m.csck") == m);

    auto bytes = testing::read_bytes(dir / "m.csck");
    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    testing::write_bytes(dir / "t.csck", truncated);
    CHECK_THROWS_AS(read_checkpoint(dir / "t.csck"), FormatError);
    auto bad = bytes;
    bad[0] = 'X';
    testing::write_bytes(dir / "b.csck", bad);
    CHECK_THROWS_AS(read_checkpoint(dir / "b.csck"), FormatError);
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.csck"), IoError);
}
