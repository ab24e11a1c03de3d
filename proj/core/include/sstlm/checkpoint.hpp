#pragma once

#include <bit>
#include <cstddef>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "sstlm/errors.hpp"
#include "sstlm/tensor.hpp"

namespace sstlm {

// Tensor container file: 8-byte little-endian header length, a JSON header
// listing {name, shape, dtype, offset} per tensor, then one raw little-endian
// value blob. Offsets are byte offsets into the blob. Round-trips bit-exactly.
struct RawTensorEntry {
    std::string name;
    Shape shape;
    std::string dtype;  // "f32" | "f64"
    std::vector<std::byte> bytes;
};

void write_tensor_container(const std::string& path, const std::vector<RawTensorEntry>& entries);
std::vector<RawTensorEntry> read_tensor_container(const std::string& path);

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

static_assert(std::endian::native == std::endian::little,
              "tensor container serialization assumes a little-endian host");

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& named) {
    std::vector<RawTensorEntry> entries;
    entries.reserve(named.size());
    for (const auto& [name, tensor] : named) {
        RawTensorEntry e;
        e.name = name;
        e.shape = tensor.shape();
        e.dtype = dtype_name<T>();
        e.bytes.resize(tensor.values().size_bytes());
        std::memcpy(e.bytes.data(), tensor.values().data(), e.bytes.size());
        entries.push_back(std::move(e));
    }
    write_tensor_container(path, entries);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_checkpoint(const std::string& path,
                                                               bool requires_grad = true) {
    std::vector<std::pair<std::string, Tensor<T>>> named;
    for (auto& entry : read_tensor_container(path)) {
        if (entry.dtype != dtype_name<T>())
            throw IoError("checkpoint tensor '" + entry.name + "' has dtype " + entry.dtype +
                          ", expected " + dtype_name<T>());
        std::vector<T> values(entry.bytes.size() / sizeof(T));
        std::memcpy(values.data(), entry.bytes.data(), entry.bytes.size());
        named.emplace_back(entry.name,
                           Tensor<T>::from(entry.shape, std::move(values), requires_grad));
    }
    return named;
}

}  // namespace sstlm
