#include "sstlm/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include <nlohmann/json.hpp>

namespace sstlm {

using nlohmann::json;

void write_tensor_container(const std::string& path, const std::vector<RawTensorEntry>& entries) {
    json header;
    header["tensors"] = json::array();
    uint64_t offset = 0;
    for (const auto& e : entries) {
        header["tensors"].push_back({{"name", e.name},
                                     {"shape", e.shape},
                                     {"dtype", e.dtype},
                                     {"offset", offset}});
        offset += e.bytes.size();
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& e : entries)
        out.write(reinterpret_cast<const char*>(e.bytes.data()),
                  static_cast<std::streamsize>(e.bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

std::vector<RawTensorEntry> read_tensor_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in) throw IoError("truncated container header in '" + path + "'");
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("truncated container header in '" + path + "'");

    json header = json::parse(header_str, nullptr, /*allow_exceptions=*/false);
    if (header.is_discarded() || !header.contains("tensors"))
        throw IoError("malformed container header in '" + path + "'");

    std::vector<char> blob(std::istreambuf_iterator<char>(in), {});
    std::vector<RawTensorEntry> entries;
    for (const auto& t : header["tensors"]) {
        RawTensorEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<Shape>();
        e.dtype = t.at("dtype").get<std::string>();
        const uint64_t offset = t.at("offset").get<uint64_t>();
        const size_t width = e.dtype == "f64" ? 8 : 4;
        const uint64_t nbytes = static_cast<uint64_t>(numel(e.shape)) * width;
        if (offset + nbytes > blob.size())
            throw IoError("container blob too short for tensor '" + e.name + "'");
        e.bytes.resize(nbytes);
        std::memcpy(e.bytes.data(), blob.data() + offset, nbytes);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace sstlm
