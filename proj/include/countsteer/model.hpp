#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "countsteer/scene.hpp"

namespace countsteer {

// 64-byte aligned storage. Vectorized kernels choose their peeling from the
// address, so unaligned weights would make float results depend on where the
// heap placed them.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

struct Tensor {
    std::vector<std::uint32_t> dims;
    FloatBuffer data;

    Tensor() = default;
    explicit Tensor(std::vector<std::uint32_t> d);

    std::size_t size() const { return data.size(); }
    bool operator==(const Tensor&) const = default;
};

// Architecture of the toy cross-attention UNet. Feature widths are listed
// per resolution level: 32, 16, 8, 16, 32.
struct ModelConfig {
    int canvas = 32;
    int time_dim = 32;     // sinusoidal embedding width
    int time_hidden = 64;  // width of the two-layer time projection
    int token_dim = 16;
    int query_dim = 32;
    std::array<int, 5> widths{16, 32, 32, 32, 16};
    bool use_bias = true;

    bool operator==(const ModelConfig&) const = default;
};

// Cross-attention sites whose queries are exposed to interceptors.
inline constexpr int hooked_block_count = 3;

struct HookSite {
    int block_id = 0;
    int resolution = 0;  // px per side
    int query_dim = 0;
    std::string_view name;
};

std::array<HookSite, hooked_block_count> hook_sites(const ModelConfig& config);

// Named parameter tensors of the denoiser, in a fixed order.
class ModelState {
public:
    ModelState() = default;

    // Fan-in scaled Gaussian initialization, biases zero.
    static ModelState initialize(const ModelConfig& config, std::uint64_t seed);
    // Rebuilds a model from named tensors, checking names and shapes.
    static ModelState from_tensors(const ModelConfig& config,
                                   std::vector<std::pair<std::string, Tensor>> tensors);

    const ModelConfig& config() const { return config_; }
    std::size_t tensor_count() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor& tensor(std::size_t i) { return tensors_[i]; }
    const Tensor& tensor(std::size_t i) const { return tensors_[i]; }

    // nullptr when absent (e.g. biases of a bias-free model).
    const Tensor* find(std::string_view name) const;
    Tensor* find(std::string_view name);

    std::size_t parameter_count() const;
    // Flat coordinate access across all tensors, in tensor order.
    float& parameter(std::size_t flat_index);
    float parameter(std::size_t flat_index) const;
    std::string describe_parameter(std::size_t flat_index) const;

    ModelState zeros_like() const;
    void fill_zero();
    bool all_finite() const;

    bool operator==(const ModelState&) const = default;

private:
    ModelConfig config_;
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
};

// Canonical (name, dims) list for a configuration.
std::vector<std::pair<std::string, std::vector<std::uint32_t>>> parameter_layout(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Query interception
// ---------------------------------------------------------------------------

enum class Branch : std::uint8_t { conditional, unconditional };

struct HookContext {
    int step = 0;      // denoising step index, 0 = first / noisiest
    int timestep = 0;  // diffusion timestep fed to the model
    Branch branch = Branch::conditional;
    HookSite site;
};

// Post-projection queries of one sample at one site: `tokens` spatial
// positions, each a contiguous vector of `dim` values.
struct QueryView {
    float* data = nullptr;
    int dim = 0;
    int tokens = 0;

    float* token(int p) const { return data + static_cast<std::ptrdiff_t>(p) * dim; }
    std::span<float> values() const { return {data, static_cast<std::size_t>(dim) * tokens}; }
};

// Sees (and may overwrite in place) the query tensor at every hooked site.
class QueryInterceptor {
public:
    virtual ~QueryInterceptor() = default;
    virtual void intercept(const HookContext& context, QueryView queries) = 0;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct Batch {
    int size = 0;
    std::vector<float> x;  // size * canvas * canvas, sample-major, row-major pixels in [-1, 1]
    std::vector<int> timesteps;
    std::vector<ConditionTokens> conds;
};

// Activations retained by forward() for backward().
class ForwardCache {
public:
    ForwardCache();
    ~ForwardCache();
    ForwardCache(ForwardCache&&) noexcept;
    ForwardCache& operator=(ForwardCache&&) noexcept;

    // Softmax weights of a hooked block: 2 values per (sample, position).
    std::span<const float> attention_weights(int block) const;

    struct Impl;
    std::unique_ptr<Impl> impl;
};

struct ForwardOptions {
    QueryInterceptor* interceptor = nullptr;
    int step = 0;
    Branch branch = Branch::conditional;
};

// Predicted noise for every sample, same layout as batch.x.
std::vector<float> forward(const ModelState& model, const Batch& batch, ForwardCache* cache = nullptr,
                           const ForwardOptions& options = {});

// The same network evaluated in double precision throughout. Interceptors
// are not supported here; used for finite-difference gradient checks.
std::vector<double> forward_f64(const ModelState& model, const Batch& batch);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
void backward(const ModelState& model, const ForwardCache& cache, std::span<const float> d_output,
              ModelState& grads);

// Single-sample noise prediction. Throws NonFiniteActivation.
std::vector<float> predict_noise(const ModelState& model, std::span<const float> x_t, int timestep,
                                 const ConditionTokens& cond, const ForwardOptions& options = {});

// Sinusoidal timestep features ([sin | cos], `dim` values).
std::vector<float> timestep_embedding(int timestep, int dim);

// ---------------------------------------------------------------------------
// Checkpoint file (magic "CSCK", version 1)
// ---------------------------------------------------------------------------

void write_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState read_checkpoint(const std::filesystem::path& path);

}  // namespace countsteer
