#pragma once

#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miditune/model.hpp"

namespace miditune {

// Checkpoint layout, all multi-byte values little-endian:
//   "MTCP"            4 bytes magic
//   u32 version       currently 1
//   u32 json_len      followed by json_len bytes of ModelConfig JSON
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 rows, u32 cols,
//               rows*cols float32 values, row-major
inline std::vector<uint8_t> serialize_checkpoint(const ModelParams<float>& params) {
    nlohmann::json j{{"n_layers", params.config.n_layers},
                     {"d_model", params.config.d_model},
                     {"n_heads", params.config.n_heads},
                     {"d_ff", params.config.d_ff},
                     {"vocab_size", params.config.vocab_size},
                     {"max_seq_len", params.config.max_seq_len},
                     {"seed", params.config.seed}};
    const std::string js = j.dump();

    std::vector<uint8_t> b;
    auto put_u32 = [&b](uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
    };
    const char* magic = "MTCP";
    b.insert(b.end(), magic, magic + 4);
    put_u32(1);
    put_u32(static_cast<uint32_t>(js.size()));
    b.insert(b.end(), js.begin(), js.end());

    auto tensors = named_tensors(const_cast<ModelParams<float>&>(params));
    put_u32(static_cast<uint32_t>(tensors.size()));
    for (auto& [name, m] : tensors) {
        put_u32(static_cast<uint32_t>(name.size()));
        b.insert(b.end(), name.begin(), name.end());
        put_u32(static_cast<uint32_t>(m->rows));
        put_u32(static_cast<uint32_t>(m->cols));
        const size_t off = b.size();
        b.resize(off + m->a.size() * 4);
        std::memcpy(b.data() + off, m->a.data(), m->a.size() * 4);
    }
    return b;
}

inline ModelParams<float> deserialize_checkpoint(std::span<const uint8_t> bytes) {
    const uint8_t* p = bytes.data();
    const uint8_t* end = p + bytes.size();
    auto need = [&](size_t k) {
        if (static_cast<size_t>(end - p) < k) throw std::runtime_error("truncated checkpoint");
    };
    auto get_u32 = [&]() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
        p += 4;
        return v;
    };
    need(4);
    if (std::memcmp(p, "MTCP", 4) != 0) throw std::runtime_error("not a checkpoint file");
    p += 4;
    if (get_u32() != 1) throw std::runtime_error("unsupported checkpoint version");
    const uint32_t jlen = get_u32();
    need(jlen);
    const nlohmann::json j = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(p), jlen));
    p += jlen;

    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();

    ModelParams<float> params = make_params_shell<float>(cfg);
    auto tensors = named_tensors(params);
    const uint32_t count = get_u32();
    if (count != tensors.size()) throw std::runtime_error("checkpoint tensor count mismatch");
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nlen = get_u32();
        need(nlen);
        const std::string name(reinterpret_cast<const char*>(p), nlen);
        p += nlen;
        const uint32_t rows = get_u32();
        const uint32_t cols = get_u32();
        if (name != tensors[i].first || rows != static_cast<uint32_t>(tensors[i].second->rows) ||
            cols != static_cast<uint32_t>(tensors[i].second->cols))
            throw std::runtime_error("checkpoint tensor layout mismatch at " + name);
        need(static_cast<size_t>(rows) * cols * 4);
        std::memcpy(tensors[i].second->a.data(), p, static_cast<size_t>(rows) * cols * 4);
        p += static_cast<size_t>(rows) * cols * 4;
    }
    return params;
}

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
    const auto bytes = serialize_checkpoint(params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ModelParams<float> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace miditune
