#include <cmath>
#include <fstream>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"
#include "countsteer/model.hpp"

namespace countsteer {

namespace {

constexpr std::string_view checkpoint_magic = "CSCK";
constexpr std::uint16_t checkpoint_version = 1;
// Leading tensor carrying the architecture as small integers.
constexpr std::string_view arch_tensor_name = "arch";
constexpr std::uint32_t max_name_length = 1024;
constexpr std::uint32_t max_rank = 8;

Tensor arch_tensor(const ModelConfig& c) {
    Tensor t({11});
    const int values[11] = {c.canvas,    c.time_dim,  c.time_hidden, c.token_dim, c.query_dim, c.widths[0],
                            c.widths[1], c.widths[2], c.widths[3],   c.widths[4], c.use_bias ? 1 : 0};
    for (int i = 0; i < 11; ++i) t.data[i] = static_cast<float>(values[i]);
    return t;
}

ModelConfig config_from_arch(const Tensor& t) {
    if (t.dims != std::vector<std::uint32_t>{11}) throw FormatError("checkpoint: malformed arch tensor");
    int v[11];
    for (int i = 0; i < 11; ++i) {
        const float f = t.data[i];
        if (!(f >= 0.0f && f <= 65536.0f) || std::floor(f) != f) throw FormatError("checkpoint: malformed arch tensor");
        v[i] = static_cast<int>(f);
    }
    ModelConfig c;
    c.canvas = v[0];
    c.time_dim = v[1];
    c.time_hidden = v[2];
    c.token_dim = v[3];
    c.query_dim = v[4];
    c.widths = {v[5], v[6], v[7], v[8], v[9]};
    c.use_bias = v[10] != 0;
    return c;
}

void write_tensor(std::ostream& out, std::string_view name, const Tensor& t) {
    binio::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::write_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) binio::write_u32(out, d);
    binio::write_f32s(out, t.data);
}

std::pair<std::string, Tensor> read_tensor(std::istream& in) {
    const std::uint32_t len = binio::read_u32(in, "tensor name length");
    if (len == 0 || len > max_name_length) throw FormatError("checkpoint: implausible tensor name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (in.gcount() != static_cast<std::streamsize>(len)) throw FormatError("truncated file while reading tensor name");
    const std::uint32_t rank = binio::read_u32(in, "tensor rank");
    if (rank > max_rank) throw FormatError("checkpoint: implausible rank for " + name);
    std::vector<std::uint32_t> dims(rank);
    std::uint64_t total = 1;
    for (auto& d : dims) {
        d = binio::read_u32(in, "tensor dims");
        total *= d;
        if (total > (1ULL << 28)) throw FormatError("checkpoint: tensor " + name + " too large");
    }
    Tensor t(dims);
    binio::read_f32s(in, t.data, "tensor payload");
    return {std::move(name), std::move(t)};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ModelState& model) {
    auto out = open_output(path);
    binio::write_magic(out, checkpoint_magic);
    binio::write_u16(out, checkpoint_version);
    binio::write_u32(out, static_cast<std::uint32_t>(model.tensor_count() + 1));
    write_tensor(out, arch_tensor_name, arch_tensor(model.config()));
    for (std::size_t i = 0; i < model.tensor_count(); ++i) write_tensor(out, model.name(i), model.tensor(i));
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelState read_checkpoint(const std::filesystem::path& path) {
    auto in = open_input(path);
    binio::expect_magic(in, checkpoint_magic);
    const std::uint16_t version = binio::read_u16(in, "version");
    if (version != checkpoint_version) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(checkpoint_version) + ")");
    }
    const std::uint32_t count = binio::read_u32(in, "tensor count");
    if (count < 1) throw FormatError("checkpoint has no tensors");
    auto [arch_name, arch] = read_tensor(in);
    if (arch_name != arch_tensor_name) throw FormatError("checkpoint: first tensor must be \"arch\"");
    const ModelConfig config = config_from_arch(arch);
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::uint32_t i = 1; i < count; ++i) tensors.push_back(read_tensor(in));
    binio::expect_eof(in);
    ModelState model = ModelState::from_tensors(config, std::move(tensors));
    if (!model.all_finite()) throw FormatError("checkpoint contains non-finite parameters");
    return model;
}

}  // namespace countsteer
