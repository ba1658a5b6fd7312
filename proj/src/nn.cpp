#include "wsigrade/nn.hpp"

#include <fstream>

namespace wsigrade::nn {

namespace {
constexpr char kMagic[8] = {'W', 'S', 'G', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path, const json& spec, const ParamSet<float>& params,
                     const json& extra) {
    json header;
    header["spec"] = spec;
    header["extra"] = extra;
    json arrays = json::array();
    for (size_t i = 0; i < params.names.size(); ++i)
        arrays.push_back(json{{"name", params.names[i]}, {"shape", params.arrays[i].shape}});
    header["arrays"] = arrays;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& a : params.arrays)
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("not a checkpoint file: " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_text(len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
    }

    Checkpoint ckpt;
    ckpt.spec = header.at("spec");
    ckpt.extra = header.value("extra", json::object());
    for (const auto& entry : header.at("arrays")) {
        Array<float> a(entry.at("shape").get<std::vector<int>>());
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint arrays: " + path);
        ckpt.params.add(entry.at("name").get<std::string>(), std::move(a));
    }
    return ckpt;
}

Checkpoint load_checkpoint(const std::string& path, const json& expected_spec) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.spec != expected_spec)
        throw IoError("checkpoint spec mismatch in " + path + "\n  stored:   " + ckpt.spec.dump() +
                      "\n  expected: " + expected_spec.dump());
    return ckpt;
}

}  // namespace wsigrade::nn
