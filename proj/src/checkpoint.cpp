#include "hat/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hat {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

constexpr char kMagic[4] = {'H', 'A', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

using nlohmann::json;

json config_to_json(const ModelConfig& c, Mode trained_mode) {
    return json{{"d", c.d},
                {"l_latent", c.l_latent},
                {"n_latent_layers", c.n_latent_layers},
                {"n_stroke_layers", c.n_stroke_layers},
                {"n_heads", c.n_heads},
                {"vocab", c.vocab},
                {"dropout_p", c.dropout_p},
                {"fusion_level", to_string(c.fusion_level)},
                {"backbone_frozen", c.backbone_frozen},
                {"patch_grid", c.patch_grid},
                {"backbone_channels", c.backbone_channels},
                {"backbone_layers", c.backbone_layers},
                {"image_side", c.image_side},
                {"rope_base", c.rope_base},
                {"trained_mode", to_string(trained_mode)}};
}

void config_from_json(const json& j, ModelConfig& c, Mode& trained_mode) {
    c.d = j.at("d").get<std::size_t>();
    c.l_latent = j.at("l_latent").get<std::size_t>();
    c.n_latent_layers = j.at("n_latent_layers").get<std::size_t>();
    c.n_stroke_layers = j.at("n_stroke_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.fusion_level = fusion_from_string(j.at("fusion_level").get<std::string>());
    c.backbone_frozen = j.at("backbone_frozen").get<bool>();
    c.patch_grid = j.at("patch_grid").get<std::size_t>();
    c.backbone_channels = j.at("backbone_channels").get<std::size_t>();
    c.backbone_layers = j.at("backbone_layers").get<std::size_t>();
    c.image_side = j.at("image_side").get<std::size_t>();
    c.rope_base = j.at("rope_base").get<double>();
    trained_mode = mode_from_string(j.at("trained_mode").get<std::string>());
}

struct Writer {
    std::vector<std::uint8_t> out;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void record(const std::string& name, const Shape& shape, const std::vector<double>& data) {
        u32(static_cast<std::uint32_t>(name.size()));
        raw(name.data(), name.size());
        u32(static_cast<std::uint32_t>(shape.size()));
        for (std::size_t dim : shape) u64(dim);
        raw(data.data(), data.size() * sizeof(double));
    }
};

struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    void raw(void* p, std::size_t n) {
        if (pos + n > bytes.size()) throw std::runtime_error("checkpoint truncated");
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    std::string str(std::size_t n) {
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const HatModel& model, Mode trained_mode) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    std::string cfg = config_to_json(model.cfg, trained_mode).dump();
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.raw(cfg.data(), cfg.size());

    auto params = model.named_params();
    w.u32(static_cast<std::uint32_t>(params.size() + 2));
    for (const auto& [name, t] : params) w.record(name, t.shape(), t.data());
    w.record("stroke_bn.running_mean", {model.stroke_bn.running_mean.size()}, model.stroke_bn.running_mean);
    w.record("stroke_bn.running_var", {model.stroke_bn.running_var.size()}, model.stroke_bn.running_var);
    return w.out;
}

void save_checkpoint(const HatModel& model, Mode trained_mode, const std::filesystem::path& path) {
    auto bytes = checkpoint_bytes(model, trained_mode);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint file for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to checkpoint file: " + path.string());
}

LoadedCheckpoint checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
    Reader r{bytes};
    char magic[4];
    if (bytes.size() < 4) throw std::runtime_error("bad checkpoint header");
    r.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad checkpoint header");
    std::uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

    std::uint32_t cfg_len = r.u32();
    std::string cfg_str = r.str(cfg_len);
    ModelConfig cfg;
    Mode trained_mode;
    try {
        config_from_json(nlohmann::json::parse(cfg_str), cfg, trained_mode);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint config block is malformed: ") + e.what());
    }

    LoadedCheckpoint loaded;
    loaded.model = build_model(cfg, 0);
    loaded.trained_mode = trained_mode;

    auto params = loaded.model.named_params();
    std::size_t expected = params.size() + 2;
    std::uint32_t n_records = r.u32();
    if (n_records != expected)
        throw std::runtime_error("checkpoint holds " + std::to_string(n_records) + " records, config implies " +
                                 std::to_string(expected));

    for (std::uint32_t i = 0; i < n_records; ++i) {
        std::string name = r.str(r.u32());
        std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (std::uint32_t k = 0; k < rank; ++k) shape[k] = r.u64();

        std::vector<double>* dst = nullptr;
        Shape expected_shape;
        if (name == "stroke_bn.running_mean") {
            dst = &loaded.model.stroke_bn.running_mean;
            expected_shape = {dst->size()};
        } else if (name == "stroke_bn.running_var") {
            dst = &loaded.model.stroke_bn.running_var;
            expected_shape = {dst->size()};
        } else {
            for (auto& [pname, t] : params)
                if (pname == name) {
                    dst = &t.data();
                    expected_shape = t.shape();
                    break;
                }
        }
        if (!dst) throw std::runtime_error("checkpoint record '" + name + "' is not a parameter of this config");
        if (shape != expected_shape)
            throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                                     " but config implies " + shape_str(expected_shape));
        r.raw(dst->data(), dst->size() * sizeof(double));
    }
    if (r.pos != bytes.size()) throw std::runtime_error("checkpoint has trailing bytes");
    return loaded;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint file: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

}  // namespace hat
