#pragma once

/**
 * format.hpp - On-disk dataset layout: feature-file header and the
 * sector-aligned read-extent arithmetic.
 *
 * Feature file: 64-byte little-endian header, zero padding up to data_offset,
 * then num_nodes rows of row_bytes each, packed back-to-back in ascending
 * node-id order. Topology lives in two sibling files: indptr.bin
 * (u64 x (num_nodes+1)) and indices.bin (u64 x num_edges, CSC in-neighbors).
 */

#include <array>
#include <cstdint>
#include <cstring>
#include <string>

#include "featdrive/common.hpp"

namespace featdrive::storage {

inline constexpr std::array<char, 8> kFeatureMagic = {'F', 'E', 'A', 'T', 'D', 'R', 'V', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;
inline constexpr std::uint64_t kHeaderBytes = 64;
inline constexpr std::uint64_t kDefaultDataOffset = 512;

inline const char* kFeatureFileName = "features.bin";
inline const char* kIndptrFileName = "indptr.bin";
inline const char* kIndicesFileName = "indices.bin";
inline const char* kManifestFileName = "manifest.json";

struct DatasetHeader {
    std::array<char, 8> magic = kFeatureMagic;
    std::uint32_t version = kFormatVersion;
    std::uint64_t num_nodes = 0;
    std::uint32_t dim = 0;
    std::uint32_t dtype_code = kDtypeF32;  // 0 = 32-bit float; reserved for extension
    std::uint32_t row_bytes = 0;           // dim * dtype size
    std::uint64_t data_offset = kDefaultDataOffset;

    std::uint64_t row_start(NodeId node) const { return data_offset + node * std::uint64_t(row_bytes); }
    std::uint64_t row_end(NodeId node) const { return row_start(node) + row_bytes; }
    std::uint64_t file_bytes() const { return data_offset + num_nodes * std::uint64_t(row_bytes); }

    /// Staging slots are sized for the worst-case single-row extent: exact for
    /// sector-multiple rows, one extra sector of slack otherwise.
    std::uint64_t aligned_row_bytes() const {
        std::uint64_t a = align_up(row_bytes, kSectorBytes);
        if (row_bytes % kSectorBytes != 0) a += kSectorBytes;
        return a;
    }

    void validate() const {
        if (magic != kFeatureMagic) throw std::runtime_error("feature file: bad magic");
        if (version != kFormatVersion)
            throw std::runtime_error("feature file: unsupported version " + std::to_string(version));
        if (dtype_code != kDtypeF32)
            throw std::runtime_error("feature file: unsupported dtype code " + std::to_string(dtype_code));
        if (num_nodes == 0 || dim == 0) throw std::runtime_error("feature file: empty dataset");
        if (row_bytes != dim * 4) throw std::runtime_error("feature file: row_bytes != dim * 4");
        if (data_offset % kSectorBytes != 0 || data_offset < kHeaderBytes)
            throw std::runtime_error("feature file: misaligned data_offset");
    }
};

inline std::array<std::byte, kHeaderBytes> encode_header(const DatasetHeader& h) {
    std::array<std::byte, kHeaderBytes> out{};
    std::size_t at = 0;
    auto put = [&](const void* p, std::size_t n) {
        std::memcpy(out.data() + at, p, n);
        at += n;
    };
    put(h.magic.data(), 8);
    put(&h.version, 4);
    std::uint32_t pad = 0;
    put(&pad, 4);
    put(&h.num_nodes, 8);
    put(&h.dim, 4);
    put(&h.dtype_code, 4);
    put(&h.row_bytes, 4);
    put(&pad, 4);
    put(&h.data_offset, 8);
    return out;
}

inline DatasetHeader decode_header(std::span<const std::byte> raw) {
    if (raw.size() < kHeaderBytes) throw std::runtime_error("feature file: truncated header");
    DatasetHeader h;
    std::size_t at = 0;
    auto get = [&](void* p, std::size_t n) {
        std::memcpy(p, raw.data() + at, n);
        at += n;
    };
    get(h.magic.data(), 8);
    get(&h.version, 4);
    std::uint32_t pad;
    get(&pad, 4);
    get(&h.num_nodes, 8);
    get(&h.dim, 4);
    get(&h.dtype_code, 4);
    get(&h.row_bytes, 4);
    get(&pad, 4);
    get(&h.data_offset, 8);
    return h;
}

// -----------------------------------------------------------------------------
// Read extents
// -----------------------------------------------------------------------------

/// The smallest 512-aligned byte range covering rows [node_lo, node_hi].
struct ReadExtent {
    NodeId node_lo = 0;
    NodeId node_hi = 0;  // inclusive
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_len = 0;
    std::uint32_t lead_pad = 0;  // redundant bytes before node_lo's row
    std::uint32_t tail_pad = 0;  // redundant bytes after node_hi's row

    /// Bytes of the covered rows [node_lo, node_hi]; excludes the alignment pads.
    std::uint64_t covered_row_bytes() const { return byte_len - lead_pad - tail_pad; }
};

inline ReadExtent compute_read_extent(const DatasetHeader& h, NodeId node_lo, NodeId node_hi) {
    if (node_lo > node_hi || node_hi >= h.num_nodes)
        throw std::out_of_range("compute_read_extent: node range [" + std::to_string(node_lo) +
                                ", " + std::to_string(node_hi) + "] out of bounds for " +
                                std::to_string(h.num_nodes) + " nodes");
    const std::uint64_t start = h.row_start(node_lo);
    const std::uint64_t end = h.row_end(node_hi);
    ReadExtent e;
    e.node_lo = node_lo;
    e.node_hi = node_hi;
    // data_offset is itself sector-aligned, so rounding down never reaches the header.
    e.byte_offset = align_down(start, kSectorBytes);
    e.byte_len = align_up(end, kSectorBytes) - e.byte_offset;
    e.lead_pad = std::uint32_t(start - e.byte_offset);
    e.tail_pad = std::uint32_t(e.byte_offset + e.byte_len - end);
    return e;
}

}  // namespace featdrive::storage
