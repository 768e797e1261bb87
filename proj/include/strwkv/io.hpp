#pragma once

// Binary PPM (P6) image I/O and the checkpoint container.
//
// Checkpoint layout:
//   bytes 0..7   magic "STRWKV01"
//   u32 LE       header length N
//   N bytes      JSON header: config, manifest [{name, dtype, shape, offset}],
//                payload_bytes
//   payload      raw little-endian f64 values, manifest order, contiguous
//
// Offsets are relative to the payload start, ascending and non-overlapping;
// the loader validates magic, manifest consistency, and that every tensor
// matches the shape the embedded config implies, and reads the full payload
// before touching any model state.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "strwkv/model.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

// ---------------------------------------------------------------------------
// PPM

namespace detail {

inline int ppm_next_token(std::istream& is, std::string& tok) {
    tok.clear();
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {  // comment to end of line
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            if (!tok.empty()) return 0;
        } else {
            tok.push_back(static_cast<char>(c));
        }
        c = is.get();
    }
    return tok.empty() ? -1 : 0;
}

}  // namespace detail

inline Tensord load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_ppm: cannot open " + path);
    std::string tok;
    if (detail::ppm_next_token(is, tok) != 0 || tok != "P6")
        throw std::runtime_error("load_ppm: not a binary P6 file: " + path);
    int64_t dims[3];
    for (int i = 0; i < 3; ++i) {
        if (detail::ppm_next_token(is, tok) != 0)
            throw std::runtime_error("load_ppm: truncated header");
        try {
            dims[i] = std::stoll(tok);
        } catch (...) {
            throw std::runtime_error("load_ppm: malformed header token '" + tok + "'");
        }
    }
    const int64_t W = dims[0], H = dims[1], maxval = dims[2];
    if (W < 1 || H < 1) throw std::runtime_error("load_ppm: bad dimensions");
    if (maxval != 255) throw std::runtime_error("load_ppm: only maxval 255 is supported");
    std::vector<unsigned char> raw(static_cast<size_t>(3 * W * H));
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (is.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error("load_ppm: truncated pixel payload");
    Tensord img({3, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c)
                img(c, y, x) = static_cast<double>(raw[static_cast<size_t>((y * W + x) * 3 + c)]) / 255.0;
    return img;
}

// Clamps to [0, 1] and quantizes round-half-up.
inline void save_ppm(const Tensord& img, const std::string& path) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("save_ppm: expects a [3 x H x W] image");
    const int64_t H = img.dim(1), W = img.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_ppm: cannot open " + path);
    os << "P6\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> raw(static_cast<size_t>(3 * W * H));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double v = img(c, y, x);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                raw[static_cast<size_t>((y * W + x) * 3 + c)] =
                    static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
            }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw std::runtime_error("save_ppm: write failed");
}

// ---------------------------------------------------------------------------
// checkpoint

inline constexpr char kCheckpointMagic[9] = "STRWKV01";

namespace detail {

inline void write_le_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_le_f64(const unsigned char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"base_width", cfg.base_width},
                          {"blocks", cfg.blocks},
                          {"q", cfg.q},
                          {"p", cfg.p},
                          {"shift", to_string(cfg.shift)},
                          {"scan", to_string(cfg.scan)},
                          {"hidden_ratio", cfg.hidden_ratio},
                          {"adain_eps", cfg.adain_eps},
                          {"init_seed", cfg.init_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.base_width = j.at("base_width").get<int64_t>();
    auto blocks = j.at("blocks").get<std::vector<int>>();
    if (blocks.size() != 4) throw std::runtime_error("checkpoint: config must list 4 block counts");
    std::copy(blocks.begin(), blocks.end(), cfg.blocks.begin());
    cfg.q = j.at("q").get<int>();
    cfg.p = j.at("p").get<int>();
    cfg.shift = shift_variant_from_string(j.at("shift").get<std::string>());
    cfg.scan = scan_variant_from_string(j.at("scan").get<std::string>());
    cfg.hidden_ratio = j.at("hidden_ratio").get<int>();
    cfg.adain_eps = j.at("adain_eps").get<double>();
    cfg.init_seed = j.at("init_seed").get<uint64_t>();
    return cfg;
}

}  // namespace detail

inline void save_weights(const StyleRwkvModel& model, const std::string& path) {
    const ParamRegistry& reg = model.params();
    nlohmann::json manifest = nlohmann::json::array();
    int64_t offset = 0;
    std::string payload;
    for (size_t i = 0; i < reg.size(); ++i) {
        const Tensord& t = reg.param(i).value;
        manifest.push_back({{"name", reg.name(i)},
                            {"dtype", "f64"},
                            {"shape", t.shape()},
                            {"offset", offset}});
        for (int64_t j = 0; j < t.numel(); ++j) detail::write_le_f64(payload, t[j]);
        offset += t.numel() * 8;
    }
    nlohmann::json header{{"config", detail::config_to_json(model.config())},
                          {"manifest", manifest},
                          {"payload_bytes", offset}};
    const std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_weights: cannot open " + path);
    os.write(kCheckpointMagic, 8);
    const uint32_t hlen = static_cast<uint32_t>(header_str.size());
    char lenbuf[4];
    for (int i = 0; i < 4; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
    os.write(lenbuf, 4);
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw std::runtime_error("save_weights: write failed");
}

struct CheckpointData {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensord>> tensors;  // manifest order
};

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (is.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: magic mismatch");
    unsigned char lenbuf[4];
    is.read(reinterpret_cast<char*>(lenbuf), 4);
    if (is.gcount() != 4) throw std::runtime_error("checkpoint: truncated header length");
    uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<uint32_t>(lenbuf[i]) << (8 * i);
    std::string header_str(hlen, '\0');
    is.read(header_str.data(), hlen);
    if (is.gcount() != static_cast<std::streamsize>(hlen))
        throw std::runtime_error("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("checkpoint: bad header json: ") + e.what());
    }

    CheckpointData data;
    data.config = detail::config_from_json(header.at("config"));
    const int64_t payload_bytes = header.at("payload_bytes").get<int64_t>();
    std::vector<unsigned char> payload(static_cast<size_t>(payload_bytes));
    is.read(reinterpret_cast<char*>(payload.data()), payload_bytes);
    if (is.gcount() != static_cast<std::streamsize>(payload_bytes))
        throw std::runtime_error("checkpoint: truncated payload");

    int64_t expect_offset = 0;
    for (const auto& entry : header.at("manifest")) {
        const std::string name = entry.at("name").get<std::string>();
        if (entry.at("dtype").get<std::string>() != "f64")
            throw std::runtime_error("checkpoint: unsupported dtype for " + name);
        const Shape shape = entry.at("shape").get<Shape>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        if (offset != expect_offset)
            throw std::runtime_error("checkpoint: manifest offsets overlap or leave gaps at " + name);
        const int64_t n = shape_numel(shape);
        if (offset + n * 8 > payload_bytes)
            throw std::runtime_error("checkpoint: manifest exceeds payload at " + name);
        Tensord t(shape);
        for (int64_t j = 0; j < n; ++j)
            t[j] = detail::read_le_f64(payload.data() + offset + j * 8);
        data.tensors.emplace_back(name, std::move(t));
        expect_offset = offset + n * 8;
    }
    if (expect_offset != payload_bytes)
        throw std::runtime_error("checkpoint: payload size does not match manifest");
    return data;
}

// Fills a model's registry from checkpoint tensors by name, rejecting any
// shape that disagrees with what the config-built model expects.
inline void fill_model_from(const CheckpointData& data, StyleRwkvModel& model) {
    ParamRegistry& reg = model.params();
    size_t used = 0;
    for (size_t i = 0; i < reg.size(); ++i) {
        const std::string& name = reg.name(i);
        const Tensord* found = nullptr;
        for (const auto& [n, t] : data.tensors)
            if (n == name) {
                found = &t;
                break;
            }
        if (!found) throw std::runtime_error("checkpoint: missing tensor " + name);
        if (found->shape() != reg.param(i).value.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name +
                                     " (manifest disagrees with config)");
        reg.param(i).value = *found;
        ++used;
    }
    if (used != data.tensors.size() && data.config.shift == model.config().shift)
        throw std::runtime_error("checkpoint: manifest contains unknown tensors");
}

inline std::unique_ptr<StyleRwkvModel> load_weights(const std::string& path) {
    CheckpointData data = read_checkpoint(path);
    auto model = std::make_unique<StyleRwkvModel>(data.config);
    fill_model_from(data, *model);
    return model;
}

}  // namespace strwkv
