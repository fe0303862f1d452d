#pragma once

/*
Tensor container, byte-compatible with the safetensors layout:

  [8 bytes]  little-endian u64 N, the header length
  [N bytes]  UTF-8 JSON: { "__metadata__": {str: str}, "<name>": {"dtype": "F32",
             "shape": [..], "data_offsets": [begin, end]}, ... }
  [rest]     payload; offsets are relative to its first byte, elements are
             little-endian and row-major

F32 is the working dtype. F16 and BF16 entries are accepted and widened to
F32 when read through `values()`.
*/

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"

namespace iclprobe {

enum class dtype { f32, f16, bf16 };

inline std::size_t dtype_size(dtype t) { return t == dtype::f32 ? 4 : 2; }

inline std::string dtype_name(dtype t)
{
    switch (t) {
    case dtype::f32: return "F32";
    case dtype::f16: return "F16";
    case dtype::bf16: return "BF16";
    }
    return "?";
}

inline dtype parse_dtype(const std::string& name, const std::string& entry)
{
    if (name == "F32") return dtype::f32;
    if (name == "F16") return dtype::f16;
    if (name == "BF16") return dtype::bf16;
    fail(errc::unknown_dtype, "entry '" + entry + "' has dtype '" + name + "'");
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "payload access assumes a little-endian host");

inline float half_to_float(std::uint16_t h)
{
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000U) << 16;
    std::uint32_t exp = (h >> 10) & 0x1FU;
    std::uint32_t mant = h & 0x3FFU;
    std::uint32_t bits = 0;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400U) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFU;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000U | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f)
{
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000U);
    const std::uint32_t abs = x & 0x7FFFFFFFU;
    if (abs >= 0x7F800000U) {
        return static_cast<std::uint16_t>(sign | 0x7C00U | (abs > 0x7F800000U ? 0x200U : 0U));
    }
    if (abs >= 0x477FF000U) {  // rounds to >= 65520: overflow to inf
        return static_cast<std::uint16_t>(sign | 0x7C00U);
    }
    if (abs < 0x38800000U) {  // below smallest normal half
        if (abs < 0x33000000U) {
            return sign;
        }
        const std::uint32_t e = abs >> 23;
        const std::uint32_t m = (abs & 0x7FFFFFU) | 0x800000U;
        const std::uint32_t shift = 126 - e;  // value / 2^-24 == m >> shift
        std::uint32_t half_m = m >> shift;
        const std::uint32_t rem = m & ((1U << shift) - 1);
        const std::uint32_t halfway = 1U << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_m & 1U))) {
            ++half_m;
        }
        return static_cast<std::uint16_t>(sign | half_m);
    }
    std::uint32_t bits = abs - 0x38000000U;  // rebias exponent 127 -> 15
    const std::uint32_t rem = bits & 0x1FFFU;
    bits >>= 13;
    if (rem > 0x1000U || (rem == 0x1000U && (bits & 1U))) {
        ++bits;
    }
    return static_cast<std::uint16_t>(sign | bits);
}

inline float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

inline std::uint16_t float_to_bf16(float f)
{
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7FFFFFFFU) > 0x7F800000U) {
        return static_cast<std::uint16_t>((x >> 16) | 0x40U);
    }
    x += 0x7FFFU + ((x >> 16) & 1U);
    return static_cast<std::uint16_t>(x >> 16);
}

template <typename T>
T load_le(const std::byte* p)
{
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store_le(std::byte* p, T v)
{
    std::memcpy(p, &v, sizeof(T));
}

inline std::uint64_t checked_product(const std::vector<std::uint64_t>& shape, const std::string& name)
{
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
            fail(errc::malformed_header, "entry '" + name + "' shape overflows");
        }
        n *= d;
    }
    return n;
}

}  // namespace detail

struct tensor_entry {
    dtype type = dtype::f32;
    std::vector<std::uint64_t> shape;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;

    std::uint64_t element_count() const
    {
        std::uint64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    bool operator==(const tensor_entry&) const = default;
};

/// Named tensors over one contiguous payload. Immutable once loaded; the
/// mutating `add` is for building stores that are then saved.
class tensor_store {
  public:
    using metadata_map = std::map<std::string, std::string>;

    const std::map<std::string, tensor_entry>& entries() const { return m_entries; }
    std::span<const std::byte> payload() const { return m_payload; }
    const metadata_map& metadata() const { return m_metadata; }
    metadata_map& metadata() { return m_metadata; }

    bool contains(const std::string& name) const { return m_entries.count(name) != 0; }

    const tensor_entry& entry(const std::string& name) const
    {
        auto it = m_entries.find(name);
        if (it == m_entries.end()) {
            fail(errc::missing_tensor, "'" + name + "'");
        }
        return it->second;
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        out.reserve(m_entries.size());
        for (const auto& [name, _] : m_entries) out.push_back(name);
        return out;
    }

    /// Element values widened to F32, row-major.
    std::vector<float> values(const std::string& name) const
    {
        const auto& e = entry(name);
        const std::byte* base = m_payload.data() + e.byte_offset;
        const auto n = static_cast<std::size_t>(e.element_count());
        std::vector<float> out(n);
        switch (e.type) {
        case dtype::f32:
            for (std::size_t i = 0; i < n; ++i) out[i] = detail::load_le<float>(base + 4 * i);
            break;
        case dtype::f16:
            for (std::size_t i = 0; i < n; ++i) out[i] = detail::half_to_float(detail::load_le<std::uint16_t>(base + 2 * i));
            break;
        case dtype::bf16:
            for (std::size_t i = 0; i < n; ++i) out[i] = detail::bf16_to_float(detail::load_le<std::uint16_t>(base + 2 * i));
            break;
        }
        return out;
    }

    /// Append a tensor, encoding `data` into `type`. Replaces nothing: a
    /// duplicate name is an error.
    void add(const std::string& name, std::vector<std::uint64_t> shape, std::span<const float> data,
             dtype type = dtype::f32)
    {
        require(!contains(name), errc::invalid_argument, "duplicate tensor name '" + name + "'");
        const auto n = detail::checked_product(shape, name);
        require(n == data.size(), errc::shape_mismatch,
                "'" + name + "' shape holds " + std::to_string(n) + " elements, got " + std::to_string(data.size()));
        tensor_entry e;
        e.type = type;
        e.shape = std::move(shape);
        e.byte_offset = m_payload.size();
        e.byte_length = n * dtype_size(type);
        m_payload.resize(m_payload.size() + e.byte_length);
        std::byte* base = m_payload.data() + e.byte_offset;
        for (std::size_t i = 0; i < data.size(); ++i) {
            switch (type) {
            case dtype::f32: detail::store_le<float>(base + 4 * i, data[i]); break;
            case dtype::f16: detail::store_le<std::uint16_t>(base + 2 * i, detail::float_to_half(data[i])); break;
            case dtype::bf16: detail::store_le<std::uint16_t>(base + 2 * i, detail::float_to_bf16(data[i])); break;
            }
        }
        m_entries.emplace(name, std::move(e));
    }

    /// Checks every container invariant; throws on the first violation.
    void validate() const
    {
        std::vector<std::pair<std::uint64_t, const std::string*>> starts;
        for (const auto& [name, e] : m_entries) {
            const auto n = detail::checked_product(e.shape, name);
            if (n * dtype_size(e.type) != e.byte_length) {
                fail(errc::malformed_header, "entry '" + name + "' declares " + std::to_string(e.byte_length)
                                                 + " bytes but shape needs " + std::to_string(n * dtype_size(e.type)));
            }
            if (e.byte_offset > m_payload.size() || e.byte_length > m_payload.size() - e.byte_offset) {
                fail(errc::truncated_payload, "entry '" + name + "' ends at byte "
                                                  + std::to_string(e.byte_offset + e.byte_length) + " of a "
                                                  + std::to_string(m_payload.size()) + "-byte payload");
            }
            starts.emplace_back(e.byte_offset, &name);
        }
        std::sort(starts.begin(), starts.end());
        for (std::size_t i = 1; i < starts.size(); ++i) {
            const auto& prev = m_entries.at(*starts[i - 1].second);
            const auto& cur = m_entries.at(*starts[i].second);
            if (cur.byte_length == 0 || prev.byte_length == 0) {
                continue;
            }
            if (prev.byte_offset + prev.byte_length > cur.byte_offset) {
                fail(errc::overlapping_ranges, "entry '" + *starts[i].second + "' overlaps '" + *starts[i - 1].second + "'");
            }
        }
    }

    /// Build from raw parts; used by the loader and by tests that need
    /// hand-made (possibly invalid) layouts.
    static tensor_store from_parts(std::map<std::string, tensor_entry> entries, std::vector<std::byte> payload,
                                   metadata_map metadata = {})
    {
        tensor_store s;
        s.m_entries = std::move(entries);
        s.m_payload = std::move(payload);
        s.m_metadata = std::move(metadata);
        s.validate();
        return s;
    }

    /// Entry-wise equality: same names, dtypes, shapes and bytes per tensor.
    /// Payload layout (offsets) may differ.
    bool operator==(const tensor_store& other) const
    {
        if (m_metadata != other.m_metadata || m_entries.size() != other.m_entries.size()) {
            return false;
        }
        for (const auto& [name, e] : m_entries) {
            auto it = other.m_entries.find(name);
            if (it == other.m_entries.end()) return false;
            const auto& o = it->second;
            if (e.type != o.type || e.shape != o.shape || e.byte_length != o.byte_length) return false;
            if (!std::equal(m_payload.begin() + static_cast<std::ptrdiff_t>(e.byte_offset),
                            m_payload.begin() + static_cast<std::ptrdiff_t>(e.byte_offset + e.byte_length),
                            other.m_payload.begin() + static_cast<std::ptrdiff_t>(o.byte_offset))) {
                return false;
            }
        }
        return true;
    }

  private:
    std::map<std::string, tensor_entry> m_entries;
    std::vector<std::byte> m_payload;
    metadata_map m_metadata;
};

/// Parses a container image held in memory.
inline tensor_store parse_store(std::span<const std::byte> bytes)
{
    using nlohmann::json;
    if (bytes.size() < 8) {
        fail(errc::malformed_header, "file shorter than the 8-byte length prefix");
    }
    const auto header_len = detail::load_le<std::uint64_t>(bytes.data());
    if (header_len > bytes.size() - 8) {
        fail(errc::malformed_header, "header length " + std::to_string(header_len) + " exceeds file size");
    }
    const std::string header_text(reinterpret_cast<const char*>(bytes.data() + 8), static_cast<std::size_t>(header_len));
    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& ex) {
        fail(errc::malformed_header, std::string("invalid JSON: ") + ex.what());
    }
    if (!header.is_object()) {
        fail(errc::malformed_header, "header is not a JSON object");
    }

    std::map<std::string, tensor_entry> entries;
    tensor_store::metadata_map metadata;
    for (const auto& [name, value] : header.items()) {
        if (name == "__metadata__") {
            if (!value.is_object()) fail(errc::malformed_header, "__metadata__ is not an object");
            for (const auto& [k, v] : value.items()) {
                if (!v.is_string()) fail(errc::malformed_header, "__metadata__ value for '" + k + "' is not a string");
                metadata.emplace(k, v.get<std::string>());
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") || !value.contains("data_offsets")) {
            fail(errc::malformed_header, "entry '" + name + "' lacks dtype/shape/data_offsets");
        }
        if (!value["dtype"].is_string()) fail(errc::malformed_header, "entry '" + name + "' dtype is not a string");
        tensor_entry e;
        e.type = parse_dtype(value["dtype"].get<std::string>(), name);
        const auto& shape = value["shape"];
        if (!shape.is_array()) fail(errc::malformed_header, "entry '" + name + "' shape is not an array");
        for (const auto& d : shape) {
            if (!d.is_number_unsigned()) fail(errc::malformed_header, "entry '" + name + "' has a non-integer dimension");
            e.shape.push_back(d.get<std::uint64_t>());
        }
        const auto& off = value["data_offsets"];
        if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned()) {
            fail(errc::malformed_header, "entry '" + name + "' data_offsets must be two unsigned integers");
        }
        const auto begin = off[0].get<std::uint64_t>();
        const auto end = off[1].get<std::uint64_t>();
        if (end < begin) fail(errc::malformed_header, "entry '" + name + "' data_offsets are reversed");
        e.byte_offset = begin;
        e.byte_length = end - begin;
        entries.emplace(name, std::move(e));
    }

    const auto* payload_begin = bytes.data() + 8 + header_len;
    std::vector<std::byte> payload(payload_begin, bytes.data() + bytes.size());
    return tensor_store::from_parts(std::move(entries), std::move(payload), std::move(metadata));
}

inline tensor_store load_store(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(errc::io_failure, "cannot open '" + path.string() + "'");
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::byte> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) {
        fail(errc::io_failure, "short read on '" + path.string() + "'");
    }
    return parse_store(bytes);
}

/// Serializes to a container image. Tensors are laid out in name order,
/// packed; the header is space-padded to a multiple of 8 bytes.
inline std::vector<std::byte> serialize_store(const tensor_store& store)
{
    using nlohmann::ordered_json;
    store.validate();
    ordered_json header = ordered_json::object();
    if (!store.metadata().empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : store.metadata()) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }
    std::uint64_t offset = 0;
    for (const auto& [name, e] : store.entries()) {
        header[name] = {{"dtype", dtype_name(e.type)}, {"shape", e.shape}, {"data_offsets", {offset, offset + e.byte_length}}};
        offset += e.byte_length;
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::vector<std::byte> out(8 + text.size() + offset);
    detail::store_le<std::uint64_t>(out.data(), text.size());
    std::memcpy(out.data() + 8, text.data(), text.size());
    std::byte* dst = out.data() + 8 + text.size();
    const auto payload = store.payload();
    for (const auto& [name, e] : store.entries()) {
        std::memcpy(dst, payload.data() + e.byte_offset, static_cast<std::size_t>(e.byte_length));
        dst += e.byte_length;
    }
    return out;
}

inline void save_store(const tensor_store& store, const std::filesystem::path& path)
{
    const auto bytes = serialize_store(store);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(errc::io_failure, "cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(errc::io_failure, "write failed on '" + path.string() + "'");
    }
}

}  // namespace iclprobe
