#pragma once

/**
 * topology.hpp - CSC adjacency access for sampling.
 *
 * The index-pointer array is small and hot, so it is loaded into memory. The
 * index array can be large; it is file-mapped by default (the OS page cache
 * holds the working set) with a sector-granular pread cache as fallback for
 * platforms where mapping fails.
 */

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <filesystem>
#include <list>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "featdrive/common.hpp"
#include "featdrive/storage/format.hpp"

namespace featdrive::graph {

struct TopologyOptions {
    bool force_pread_cache = false;        // test hook: skip mmap
    std::size_t cache_blocks = 4096;       // fallback cache capacity (64 KiB blocks)
};

class Topology {
public:
    Topology(const std::string& dataset_dir, TopologyOptions opts = {}) : opts_(opts) {
        namespace fs = std::filesystem;
        load_indptr((fs::path(dataset_dir) / storage::kIndptrFileName).string());
        open_indices((fs::path(dataset_dir) / storage::kIndicesFileName).string());
    }

    ~Topology() {
        if (map_base_) ::munmap(const_cast<std::uint64_t*>(map_base_), map_bytes_);
        if (indices_fd_ >= 0) ::close(indices_fd_);
    }

    Topology(const Topology&) = delete;
    Topology& operator=(const Topology&) = delete;

    std::uint64_t num_nodes() const { return num_nodes_; }
    std::uint64_t num_edges() const { return indptr_.back(); }
    const std::vector<std::uint64_t>& indptr() const { return indptr_; }

    std::uint64_t degree(NodeId node) const {
        FD_CHECK(node < num_nodes_);
        return indptr_[node + 1] - indptr_[node];
    }

    /// Copies the in-neighbor list of `node` into `out`.
    void in_neighbors(NodeId node, std::vector<NodeId>& out) const {
        if (node >= num_nodes_)
            throw std::out_of_range("topology: node " + std::to_string(node) + " out of range");
        std::uint64_t lo = indptr_[node];
        std::uint64_t hi = indptr_[node + 1];
        out.resize(hi - lo);
        if (lo == hi) return;
        if (map_base_) {
            std::memcpy(out.data(), map_base_ + lo, (hi - lo) * sizeof(std::uint64_t));
        } else {
            read_range(lo, hi, out.data());
        }
    }

    bool uses_mmap() const { return map_base_ != nullptr; }

private:
    void load_indptr(const std::string& path) {
        int fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0) throw_errno("open " + path);
        struct stat st{};
        if (::fstat(fd, &st) != 0) {
            ::close(fd);
            throw_errno("stat " + path);
        }
        if (st.st_size < ssize_t(sizeof(std::uint64_t)) || st.st_size % 8 != 0) {
            ::close(fd);
            throw std::runtime_error("indptr file " + path + " has invalid size");
        }
        std::size_t count = std::size_t(st.st_size) / 8;
        indptr_.resize(count);
        std::size_t got = 0;
        while (got < std::size_t(st.st_size)) {
            ssize_t n = ::pread(fd, reinterpret_cast<std::byte*>(indptr_.data()) + got,
                                std::size_t(st.st_size) - got, got);
            if (n <= 0) {
                ::close(fd);
                throw_errno("read " + path);
            }
            got += std::size_t(n);
        }
        ::close(fd);
        num_nodes_ = count - 1;
        for (std::size_t i = 0; i + 1 < count; ++i)
            if (indptr_[i] > indptr_[i + 1])
                throw std::runtime_error("indptr file " + path + " is not non-decreasing");
    }

    void open_indices(const std::string& path) {
        indices_fd_ = ::open(path.c_str(), O_RDONLY);
        if (indices_fd_ < 0) throw_errno("open " + path);
        struct stat st{};
        if (::fstat(indices_fd_, &st) != 0) throw_errno("stat " + path);
        if (std::uint64_t(st.st_size) != indptr_.back() * sizeof(std::uint64_t))
            throw std::runtime_error("indices file " + path + " size does not match indptr");
        map_bytes_ = std::size_t(st.st_size);
        if (map_bytes_ == 0 || opts_.force_pread_cache) return;
        void* p = ::mmap(nullptr, map_bytes_, PROT_READ, MAP_SHARED, indices_fd_, 0);
        if (p == MAP_FAILED) {
            FD_LOG_WARN("mmap of %s failed, using pread cache", path.c_str());
            return;
        }
        map_base_ = static_cast<const std::uint64_t*>(p);
    }

    // Fallback path: fixed-size block cache over the indices file, clock eviction.
    static constexpr std::size_t kBlockEntries = 8192;  // 64 KiB per block

    void read_range(std::uint64_t lo, std::uint64_t hi, NodeId* out) const {
        std::lock_guard lk(cache_mu_);
        while (lo < hi) {
            std::uint64_t block = lo / kBlockEntries;
            const std::uint64_t* data = cached_block(block);
            std::uint64_t begin = block * kBlockEntries;
            std::uint64_t take = std::min(hi, begin + kBlockEntries) - lo;
            std::memcpy(out, data + (lo - begin), take * sizeof(std::uint64_t));
            out += take;
            lo += take;
        }
    }

    const std::uint64_t* cached_block(std::uint64_t block) const {
        auto it = cache_.find(block);
        if (it != cache_.end()) {
            it->second.referenced = true;
            return it->second.data.data();
        }
        if (cache_.size() >= opts_.cache_blocks) evict_one();
        CacheBlock cb;
        cb.data.resize(kBlockEntries);
        std::uint64_t offset = block * kBlockEntries * sizeof(std::uint64_t);
        std::uint64_t avail = std::min<std::uint64_t>(kBlockEntries * sizeof(std::uint64_t),
                                                      map_bytes_ - offset);
        std::size_t got = 0;
        while (got < avail) {
            ssize_t n = ::pread(indices_fd_, reinterpret_cast<std::byte*>(cb.data.data()) + got,
                                avail - got, offset + got);
            if (n <= 0) throw_errno("read indices block");
            got += std::size_t(n);
        }
        auto [pos, inserted] = cache_.emplace(block, std::move(cb));
        FD_CHECK(inserted);
        return pos->second.data.data();
    }

    void evict_one() const {
        // Clock sweep: clear referenced bits until an unreferenced block falls out.
        while (!cache_.empty()) {
            if (clock_it_ == cache_.end()) clock_it_ = cache_.begin();
            if (clock_it_->second.referenced) {
                clock_it_->second.referenced = false;
                ++clock_it_;
            } else {
                clock_it_ = cache_.erase(clock_it_);
                return;
            }
        }
    }

    struct CacheBlock {
        std::vector<std::uint64_t> data;
        bool referenced = true;
    };

    TopologyOptions opts_;
    std::vector<std::uint64_t> indptr_;
    std::uint64_t num_nodes_ = 0;
    int indices_fd_ = -1;
    const std::uint64_t* map_base_ = nullptr;
    std::size_t map_bytes_ = 0;

    mutable std::mutex cache_mu_;
    mutable std::unordered_map<std::uint64_t, CacheBlock> cache_;
    mutable std::unordered_map<std::uint64_t, CacheBlock>::iterator clock_it_ = cache_.end();
};

}  // namespace featdrive::graph
