#include "mmhdit/container.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "mmhdit/errors.hpp"

namespace mmh {

static_assert(std::endian::native == std::endian::little, "container payloads are stored little-endian");

namespace {

constexpr const char* kConfigKey = "__config__";
constexpr const char* kMetadataKey = "__metadata__";

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in slices.
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        auto n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
        crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw FileError("short read on '" + path.string() + "'");
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FileError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FileError("write failed on '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
void TensorContainer::put(const std::string& name, const Tensor<T>& tensor) {
    ContainerEntry e;
    e.dtype = dtype_of<T>;
    e.shape = tensor.shape();
    e.bytes.resize(static_cast<std::size_t>(tensor.numel()) * sizeof(T));
    std::memcpy(e.bytes.data(), tensor.data().data(), e.bytes.size());
    put_entry(name, std::move(e));
}

void TensorContainer::put_entry(const std::string& name, ContainerEntry entry) {
    if (name == kConfigKey || name == kMetadataKey) throw ContractError("'" + name + "' is a reserved container key");
    if (static_cast<std::uint64_t>(shape_numel(entry.shape)) * dtype_size(entry.dtype) != entry.bytes.size()) {
        throw DimensionError("tensor '" + name + "': payload size does not match " + shape_str(entry.shape));
    }
    entries_[name] = std::move(entry);
}

const ContainerEntry& TensorContainer::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IntegrityError("tensor '" + name + "' is missing from the container");
    return it->second;
}

template <class T>
Tensor<T> TensorContainer::get(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != dtype_of<T>) {
        throw IntegrityError("tensor '" + name + "' is stored as " + std::string(dtype_name(e.dtype)) +
                             ", requested " + std::string(dtype_name(dtype_of<T>)));
    }
    std::vector<T> data(e.bytes.size() / sizeof(T));
    std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
    return Tensor<T>::from_data(e.shape, std::move(data));
}

std::vector<std::string> TensorContainer::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

nlohmann::json TensorContainer::header(std::uint64_t& payload_size) const {
    nlohmann::json h = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
        h[name] = {{"dtype", dtype_name(e.dtype)},
                   {"shape", e.shape},
                   {"data_offsets", {offset, offset + e.bytes.size()}},
                   {"crc32", crc32_of(e.bytes)}};
        offset += e.bytes.size();
    }
    if (!config.is_null()) h[kConfigKey] = config;
    if (!metadata.empty()) h[kMetadataKey] = metadata;
    payload_size = offset;
    return h;
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
    std::uint64_t payload_size = 0;
    std::string text = header(payload_size).dump();
    text.append((8 - text.size() % 8) % 8, ' ');
    const std::uint64_t n = text.size();
    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + payload_size);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [_, e] : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    return out;
}

std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> TensorContainer::payload_ranges() const {
    std::uint64_t payload_size = 0;
    std::string text = header(payload_size).dump();
    std::uint64_t base = 8 + text.size() + (8 - text.size() % 8) % 8;
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> out;
    for (const auto& [name, e] : entries_) {
        out[name] = {base, base + e.bytes.size()};
        base += e.bytes.size();
    }
    return out;
}

TensorContainer TensorContainer::deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw IntegrityError("container truncated before the header length");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i)]) << (8 * i);
    if (n > bytes.size() - 8) throw IntegrityError("container header length exceeds file size");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("container header is not valid JSON: ") + e.what());
    }
    if (!h.is_object()) throw IntegrityError("container header is not a JSON object");
    const auto payload = bytes.subspan(8 + n);

    TensorContainer c;
    for (auto it = h.begin(); it != h.end(); ++it) {
        const auto& name = it.key();
        if (name == kConfigKey) {
            c.config = it.value();
            continue;
        }
        if (name == kMetadataKey) {
            c.metadata = it.value();
            continue;
        }
        const auto& v = it.value();
        try {
            ContainerEntry e;
            e.dtype = parse_dtype(v.at("dtype").get<std::string>());
            e.shape = v.at("shape").get<Shape>();
            const auto begin = v.at("data_offsets").at(0).get<std::uint64_t>();
            const auto end = v.at("data_offsets").at(1).get<std::uint64_t>();
            if (begin > end || end > payload.size()) {
                throw IntegrityError("tensor '" + name + "': payload range [" + std::to_string(begin) + ", " +
                                     std::to_string(end) + ") exceeds the " + std::to_string(payload.size()) +
                                     "-byte payload (truncated file?)");
            }
            if (static_cast<std::uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype) != end - begin) {
                throw IntegrityError("tensor '" + name + "': byte length does not match shape " + shape_str(e.shape));
            }
            e.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(begin),
                           payload.begin() + static_cast<std::ptrdiff_t>(end));
            if (crc32_of(e.bytes) != v.at("crc32").get<std::uint32_t>()) {
                throw IntegrityError("tensor '" + name + "': checksum mismatch (corrupted payload)");
            }
            c.entries_[name] = std::move(e);
        } catch (const nlohmann::json::exception& ex) {
            throw IntegrityError("tensor '" + name + "': malformed header entry: " + ex.what());
        }
    }
    return c;
}

void TensorContainer::save(const std::filesystem::path& path) const {
    auto bytes = serialize();
    write_file_bytes(path, bytes);
}

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return deserialize(bytes);
}

template void TensorContainer::put(const std::string&, const Tensor<float>&);
template void TensorContainer::put(const std::string&, const Tensor<double>&);
template Tensor<float> TensorContainer::get(const std::string&) const;
template Tensor<double> TensorContainer::get(const std::string&) const;

}  // namespace mmh
