#pragma once

/**
 * generator.hpp - Synthetic dataset generator.
 *
 * Everything is a pure function of (parameters, seed): feature rows come from
 * a per-node counter-mode PRNG so any row can be regenerated independently,
 * and in-degrees come from a capped power-law so the topology has the hub
 * structure of large social/citation graphs. The manifest records parameters
 * and SHA-256 checksums of every output file.
 */

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "featdrive/storage/format.hpp"

namespace featdrive::storage {

struct GeneratorParams {
    std::uint64_t num_nodes = 0;
    std::uint32_t dim = 0;
    std::uint32_t avg_degree = 0;
    std::uint64_t seed = 0;
    std::string out_dir;
};

struct DatasetManifest {
    GeneratorParams params;
    std::uint64_t num_edges = 0;
    std::uint64_t feature_bytes = 0;
    nlohmann::json files;  // name -> {bytes, sha256}

    nlohmann::json to_json() const {
        return {
            {"format", "featdrive-dataset"},
            {"version", kFormatVersion},
            {"num_nodes", params.num_nodes},
            {"dim", params.dim},
            {"avg_degree", params.avg_degree},
            {"seed", params.seed},
            {"dtype", "f32"},
            {"row_bytes", params.dim * 4},
            {"num_edges", num_edges},
            {"feature_bytes", feature_bytes},
            {"files", files},
        };
    }
};

// -----------------------------------------------------------------------------
// Deterministic row / degree definitions (shared with tests as the regeneration
// oracle).
// -----------------------------------------------------------------------------

/// Fills `out` (row_bytes = dim*4) with node's feature row: floats in [-1, 1).
inline void synthetic_row(std::uint64_t seed, NodeId node, std::uint32_t dim,
                          std::span<std::byte> out) {
    FD_CHECK(out.size() >= std::size_t(dim) * 4);
    SplitMix rng(hash_combine(hash_combine(seed, 0x726f77 /* "row" */), node));
    std::byte* p = out.data();
    for (std::uint32_t i = 0; i < dim; i += 2) {
        std::uint64_t bits = rng.next();
        float lo = float(std::int32_t(bits & 0xffffffffu)) * 0x1.0p-31f;
        float hi = float(std::int32_t(bits >> 32)) * 0x1.0p-31f;
        std::memcpy(p, &lo, 4);
        p += 4;
        if (i + 1 < dim) {
            std::memcpy(p, &hi, 4);
            p += 4;
        }
    }
}

/// In-degree of a node: capped Pareto with mean ~avg_degree (shape 2, scale
/// avg/2), so most nodes sit near the average and a tail reaches the cap.
inline std::uint64_t synthetic_in_degree(std::uint64_t seed, NodeId node,
                                         std::uint32_t avg_degree, std::uint64_t num_nodes) {
    if (avg_degree == 0 || num_nodes <= 1) return 0;
    SplitMix rng(hash_combine(hash_combine(seed, 0x646567 /* "deg" */), node));
    double u = rng.next_unit();
    if (u < 1e-12) u = 1e-12;
    double scale = double(avg_degree) / 2.0;
    std::uint64_t d = std::uint64_t(scale / std::sqrt(u));
    std::uint64_t cap = std::uint64_t(avg_degree) * 4;
    d = std::min(d, cap);
    return std::min(d, num_nodes - 1);
}

/// Distinct uniform in-neighbors of `node` (self excluded), ascending.
inline std::vector<NodeId> synthetic_in_neighbors(std::uint64_t seed, NodeId node,
                                                  std::uint32_t avg_degree,
                                                  std::uint64_t num_nodes) {
    std::uint64_t degree = synthetic_in_degree(seed, node, avg_degree, num_nodes);
    std::vector<NodeId> picked;
    picked.reserve(degree);
    if (degree == 0) return picked;
    SplitMix rng(hash_combine(hash_combine(seed, 0x6e6272 /* "nbr" */), node));
    // Floyd's sampling over [0, num_nodes-1) with self remapped to the last id.
    std::uint64_t pool = num_nodes - 1;
    auto remap = [&](std::uint64_t v) { return v == node ? num_nodes - 1 : v; };
    std::vector<NodeId> set;
    set.reserve(degree);
    for (std::uint64_t j = pool - degree; j < pool; ++j) {
        std::uint64_t t = remap(rng.next_below(j + 1));
        if (std::find(set.begin(), set.end(), t) == set.end())
            set.push_back(t);
        else
            set.push_back(remap(j));
    }
    std::sort(set.begin(), set.end());
    return set;
}

// -----------------------------------------------------------------------------
// Streaming writer with SHA-256
// -----------------------------------------------------------------------------

namespace detail {

class HashingWriter {
public:
    HashingWriter(const std::filesystem::path& path, std::size_t buf_bytes = 8u << 20)
        : path_(path.string()) {
        file_ = std::fopen(path_.c_str(), "wb");
        if (!file_) throw_errno("create " + path_);
        buf_.resize(buf_bytes);
        std::setvbuf(file_, reinterpret_cast<char*>(buf_.data()), _IOFBF, buf_.size());
        ctx_ = EVP_MD_CTX_new();
        FD_CHECK(ctx_ != nullptr);
        FD_CHECK(EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) == 1);
    }

    ~HashingWriter() {
        if (file_) std::fclose(file_);
        if (ctx_) EVP_MD_CTX_free(ctx_);
    }

    void write(const void* data, std::size_t n) {
        if (std::fwrite(data, 1, n, file_) != n)
            throw_errno("write " + path_);
        FD_CHECK(EVP_DigestUpdate(ctx_, data, n) == 1);
        bytes_ += n;
    }

    /// Flushes, closes, and returns {bytes, hex sha256}.
    std::pair<std::uint64_t, std::string> finish() {
        if (std::fflush(file_) != 0 || std::ferror(file_))
            throw_errno("flush " + path_);
        std::fclose(file_);
        file_ = nullptr;
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        FD_CHECK(EVP_DigestFinal_ex(ctx_, digest, &len) == 1);
        static const char* hex = "0123456789abcdef";
        std::string out;
        out.reserve(len * 2);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(hex[digest[i] >> 4]);
            out.push_back(hex[digest[i] & 0xf]);
        }
        return {bytes_, out};
    }

private:
    std::string path_;
    std::FILE* file_ = nullptr;
    std::vector<std::byte> buf_;
    EVP_MD_CTX* ctx_ = nullptr;
    std::uint64_t bytes_ = 0;
};

}  // namespace detail

// -----------------------------------------------------------------------------
// create_synthetic_dataset
// -----------------------------------------------------------------------------

inline DatasetManifest create_synthetic_dataset(const GeneratorParams& params) {
    if (params.num_nodes < 1) throw std::invalid_argument("create_synthetic_dataset: num_nodes must be >= 1");
    if (params.dim < 1) throw std::invalid_argument("create_synthetic_dataset: dim must be >= 1");
    if (params.out_dir.empty()) throw std::invalid_argument("create_synthetic_dataset: out_dir required");

    namespace fs = std::filesystem;
    fs::path dir(params.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("create_synthetic_dataset: cannot create " + dir.string() +
                                     ": " + ec.message());

    DatasetManifest manifest;
    manifest.params = params;

    DatasetHeader header;
    header.num_nodes = params.num_nodes;
    header.dim = params.dim;
    header.row_bytes = params.dim * 4;
    header.data_offset = std::max<std::uint64_t>(kDefaultDataOffset,
                                                 align_up(kHeaderBytes, kSectorBytes));
    manifest.feature_bytes = header.num_nodes * std::uint64_t(header.row_bytes);

    // Feature file: header, zero pad, then PRNG rows.
    {
        detail::HashingWriter w(dir / kFeatureFileName);
        auto raw = encode_header(header);
        w.write(raw.data(), raw.size());
        std::vector<std::byte> zeros(header.data_offset - kHeaderBytes, std::byte{0});
        if (!zeros.empty()) w.write(zeros.data(), zeros.size());

        const std::uint32_t row = header.row_bytes;
        const std::size_t rows_per_chunk = std::max<std::size_t>(1, (4u << 20) / row);
        std::vector<std::byte> chunk(rows_per_chunk * row);
        NodeId node = 0;
        while (node < params.num_nodes) {
            std::size_t count = std::min<std::uint64_t>(rows_per_chunk, params.num_nodes - node);
            for (std::size_t i = 0; i < count; ++i)
                synthetic_row(params.seed, node + i, params.dim,
                              std::span(chunk).subspan(i * row, row));
            w.write(chunk.data(), count * row);
            node += count;
        }
        auto [bytes, sha] = w.finish();
        FD_CHECK(bytes == header.file_bytes());
        manifest.files[kFeatureFileName] = {{"bytes", bytes}, {"sha256", sha}};
    }

    // Topology: two passes over the degree stream, so indptr is complete
    // before the (much larger) indices file is written.
    {
        std::vector<std::uint64_t> indptr(params.num_nodes + 1, 0);
        for (NodeId n = 0; n < params.num_nodes; ++n)
            indptr[n + 1] = indptr[n] + synthetic_in_degree(params.seed, n, params.avg_degree,
                                                            params.num_nodes);
        manifest.num_edges = indptr[params.num_nodes];

        detail::HashingWriter wp(dir / kIndptrFileName);
        wp.write(indptr.data(), indptr.size() * sizeof(std::uint64_t));
        auto [pbytes, psha] = wp.finish();
        manifest.files[kIndptrFileName] = {{"bytes", pbytes}, {"sha256", psha}};

        detail::HashingWriter wi(dir / kIndicesFileName);
        for (NodeId n = 0; n < params.num_nodes; ++n) {
            auto nbrs = synthetic_in_neighbors(params.seed, n, params.avg_degree, params.num_nodes);
            FD_CHECK(nbrs.size() == indptr[n + 1] - indptr[n]);
            if (!nbrs.empty()) wi.write(nbrs.data(), nbrs.size() * sizeof(std::uint64_t));
        }
        auto [ibytes, isha] = wi.finish();
        FD_CHECK(ibytes == manifest.num_edges * sizeof(std::uint64_t));
        manifest.files[kIndicesFileName] = {{"bytes", ibytes}, {"sha256", isha}};
    }

    {
        std::ofstream mf(dir / kManifestFileName);
        if (!mf) throw std::runtime_error("create_synthetic_dataset: cannot write manifest in " +
                                          dir.string());
        mf << manifest.to_json().dump(2) << "\n";
    }
    return manifest;
}

inline nlohmann::json load_manifest(const std::string& dataset_dir) {
    std::ifstream in(std::filesystem::path(dataset_dir) / kManifestFileName);
    if (!in) throw std::runtime_error("no manifest in " + dataset_dir);
    nlohmann::json j;
    in >> j;
    return j;
}

}  // namespace featdrive::storage
