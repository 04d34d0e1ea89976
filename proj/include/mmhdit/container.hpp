#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mmhdit/tensor.hpp"

namespace mmh {

/// One stored tensor: raw little-endian payload plus its type and extents.
struct ContainerEntry {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;
};

/// Single-file tensor container.
///
/// Layout: u64 little-endian header length N, then N bytes of UTF-8 JSON,
/// then the payload. The header maps each tensor name to
/// {"dtype", "shape", "data_offsets": [begin, end], "crc32"} with offsets
/// relative to the payload start. Two reserved keys carry free-form JSON:
/// "__config__" and "__metadata__". Keys and payloads are written in sorted
/// name order, so equal contents always serialize to identical bytes.
class TensorContainer {
   public:
    nlohmann::json config;                                    // null when absent
    nlohmann::json metadata = nlohmann::json::object();

    template <class T>
    void put(const std::string& name, const Tensor<T>& tensor);
    void put_entry(const std::string& name, ContainerEntry entry);

    /// Typed read; throws IntegrityError on a missing name or dtype mismatch.
    template <class T>
    Tensor<T> get(const std::string& name) const;
    const ContainerEntry& entry(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }

    std::vector<std::uint8_t> serialize() const;
    static TensorContainer deserialize(std::span<const std::uint8_t> bytes);

    /// Writes through a temporary file and renames, so readers never see a partial file.
    void save(const std::filesystem::path& path) const;
    static TensorContainer load(const std::filesystem::path& path);

    /// Absolute [begin, end) byte range of every payload in serialize()'s output.
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> payload_ranges() const;

   private:
    nlohmann::json header(std::uint64_t& payload_size) const;
    std::map<std::string, ContainerEntry> entries_;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mmh
