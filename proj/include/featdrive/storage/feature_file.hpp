#pragma once

/**
 * feature_file.hpp - Read access to the on-disk feature table.
 *
 * One FeatureTable may be shared by any number of workers: all reads are
 * positional (pread) on a single descriptor. A second descriptor is opened
 * with O_DIRECT when the platform grants it; extent-granular reads prefer it
 * and fall back to the buffered descriptor otherwise.
 */

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cstddef>
#include <string>
#include <vector>

#include "featdrive/storage/format.hpp"

namespace featdrive::storage {

class FeatureTable {
public:
    explicit FeatureTable(const std::string& path, bool want_direct = true) : path_(path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) throw_errno("open feature file " + path);
        std::array<std::byte, kHeaderBytes> raw;
        ssize_t n = ::pread(fd_, raw.data(), raw.size(), 0);
        if (n != ssize_t(raw.size())) {
            ::close(fd_);
            throw std::runtime_error("feature file " + path + ": truncated header");
        }
        header_ = decode_header(raw);
        header_.validate();

        struct stat st{};
        if (::fstat(fd_, &st) != 0) throw_errno("stat " + path);
        if (std::uint64_t(st.st_size) != header_.file_bytes())
            throw std::runtime_error("feature file " + path + ": length " +
                                     std::to_string(st.st_size) + " != header-implied " +
                                     std::to_string(header_.file_bytes()));

        if (want_direct) {
            direct_fd_ = ::open(path.c_str(), O_RDONLY | O_DIRECT);
            if (direct_fd_ < 0)
                FD_LOG_WARN("O_DIRECT unavailable for %s, falling back to buffered reads", path.c_str());
        }
    }

    ~FeatureTable() {
        if (fd_ >= 0) ::close(fd_);
        if (direct_fd_ >= 0) ::close(direct_fd_);
    }

    FeatureTable(const FeatureTable&) = delete;
    FeatureTable& operator=(const FeatureTable&) = delete;

    const DatasetHeader& header() const { return header_; }
    const std::string& path() const { return path_; }
    std::uint32_t row_bytes() const { return header_.row_bytes; }
    std::uint64_t num_nodes() const { return header_.num_nodes; }

    bool direct_available() const { return direct_fd_ >= 0; }
    int buffered_fd() const { return fd_; }
    /// Descriptor extractors should issue extent reads on.
    int extent_fd() const { return direct_fd_ >= 0 ? direct_fd_ : fd_; }

    /// Plain buffered read of one exact row. The correctness oracle for every
    /// extraction path; touches no pipeline state.
    void read_row_sync(NodeId node, std::span<std::byte> out) const {
        if (node >= header_.num_nodes)
            throw std::out_of_range("read_row_sync: node " + std::to_string(node) +
                                    " >= num_nodes " + std::to_string(header_.num_nodes));
        FD_CHECK(out.size() >= header_.row_bytes);
        std::uint64_t off = header_.row_start(node);
        std::size_t want = header_.row_bytes;
        std::byte* dst = out.data();
        while (want > 0) {
            ssize_t n = ::pread(fd_, dst, want, off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw_errno("read_row_sync node " + std::to_string(node) + " in " + path_);
            }
            if (n == 0)
                throw std::runtime_error("read_row_sync: unexpected EOF for node " +
                                         std::to_string(node) + " in " + path_);
            want -= std::size_t(n);
            off += std::uint64_t(n);
            dst += n;
        }
    }

    std::vector<std::byte> read_row_sync(NodeId node) const {
        std::vector<std::byte> row(header_.row_bytes);
        read_row_sync(node, row);
        return row;
    }

private:
    std::string path_;
    DatasetHeader header_{};
    int fd_ = -1;
    int direct_fd_ = -1;
};

}  // namespace featdrive::storage
