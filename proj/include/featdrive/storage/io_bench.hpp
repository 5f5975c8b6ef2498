#pragma once

/**
 * io_bench.hpp - Random-read microbenchmark: synchronous reads across N
 * threads versus asynchronous reads from one thread at I/O depth D, in direct
 * or buffered mode. Offsets are a deterministic function of the seed. The
 * file's cached pages are dropped up front so buffered runs start cold.
 */

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include <thread>

#include "featdrive/storage/async_io.hpp"

namespace featdrive::storage {

struct IoBenchParams {
    std::string file;
    enum class Mode { SyncThreads, AsyncDepth } mode = Mode::SyncThreads;
    std::uint32_t parallelism = 1;  // thread count or I/O depth
    std::uint64_t block_bytes = 512;
    bool direct = true;
    double seconds = 10.0;
    std::uint64_t seed = 0;
    EngineKind engine = EngineKind::Auto;
};

struct IoBenchResult {
    double bandwidth_mb_s = 0;   // MB = 1e6 bytes
    double mean_latency_us = 0;
    std::uint64_t requests = 0;
    std::uint64_t bytes = 0;
    double elapsed_s = 0;

    nlohmann::json to_json() const {
        return {{"bandwidth_mb_s", bandwidth_mb_s},
                {"mean_latency_us", mean_latency_us},
                {"requests", requests},
                {"bytes", bytes},
                {"elapsed_s", elapsed_s}};
    }
};

namespace detail {

class BenchFile {
public:
    BenchFile(const std::string& path, bool direct) {
        int flags = O_RDONLY;
        if (direct) flags |= O_DIRECT;
        fd_ = ::open(path.c_str(), flags);
        if (fd_ < 0) throw_errno("open " + path + (direct ? " (direct)" : ""));
        struct stat st{};
        if (::fstat(fd_, &st) != 0) throw_errno("stat " + path);
        size_ = std::uint64_t(st.st_size);
        // Start cold regardless of what earlier runs left in the page cache.
        ::posix_fadvise(fd_, 0, 0, POSIX_FADV_DONTNEED);
    }
    ~BenchFile() { ::close(fd_); }
    int fd() const { return fd_; }
    std::uint64_t size() const { return size_; }

private:
    int fd_ = -1;
    std::uint64_t size_ = 0;
};

}  // namespace detail

inline IoBenchResult run_io_bench(const IoBenchParams& p) {
    if (p.direct && p.block_bytes % kSectorBytes != 0)
        throw std::invalid_argument("io bench: direct mode needs block_bytes to be a multiple of 512");
    if (p.block_bytes == 0) throw std::invalid_argument("io bench: block_bytes must be positive");
    if (p.parallelism == 0) throw std::invalid_argument("io bench: parallelism must be >= 1");

    IoBenchResult result;
    if (p.seconds <= 0) return result;

    detail::BenchFile file(p.file, p.direct);
    const std::uint64_t blocks = file.size() / p.block_bytes;
    if (blocks == 0) throw std::invalid_argument("io bench: file smaller than one block");

    const auto duration = std::chrono::duration<double>(p.seconds);
    const auto t_start = SteadyClock::now();
    const auto deadline = t_start + std::chrono::duration_cast<SteadyClock::duration>(duration);

    std::uint64_t total_requests = 0;
    double total_latency_us = 0;

    if (p.mode == IoBenchParams::Mode::SyncThreads) {
        struct ThreadOut {
            std::uint64_t requests = 0;
            double latency_us = 0;
        };
        std::vector<ThreadOut> outs(p.parallelism);
        std::vector<std::thread> threads;
        for (std::uint32_t tid = 0; tid < p.parallelism; ++tid) {
            threads.emplace_back([&, tid] {
                SplitMix rng(hash_combine(p.seed, tid));
                AlignedBuffer buf(p.block_bytes);
                auto& out = outs[tid];
                while (SteadyClock::now() < deadline) {
                    std::uint64_t off = rng.next_below(blocks) * p.block_bytes;
                    auto t0 = SteadyClock::now();
                    ssize_t n = ::pread(file.fd(), buf.data(), p.block_bytes, off);
                    auto t1 = SteadyClock::now();
                    if (n != ssize_t(p.block_bytes)) throw_errno("bench pread");
                    ++out.requests;
                    out.latency_us += double(elapsed_ns(t0, t1)) * 1e-3;
                }
            });
        }
        for (auto& t : threads) t.join();
        for (const auto& o : outs) {
            total_requests += o.requests;
            total_latency_us += o.latency_us;
        }
    } else {
        auto engine = make_async_engine(p.parallelism, p.engine);
        const std::size_t depth = std::min<std::size_t>(p.parallelism, engine->capacity());
        AlignedBuffer arena(depth * p.block_bytes);
        std::vector<TimePoint> submit_time(depth);
        std::vector<std::uint64_t> free_slots(depth);
        for (std::size_t i = 0; i < depth; ++i) free_slots[i] = i;
        SplitMix rng(splitmix64(p.seed));
        std::vector<IoCompletion> done;
        bool submitting = true;
        while (submitting || engine->in_flight() > 0) {
            if (submitting && SteadyClock::now() >= deadline) submitting = false;
            while (submitting && !free_slots.empty()) {
                std::uint64_t slot = free_slots.back();
                free_slots.pop_back();
                IoRequest req;
                req.id = slot;
                req.fd = file.fd();
                req.offset = rng.next_below(blocks) * p.block_bytes;
                req.len = p.block_bytes;
                req.dest = arena.data() + slot * p.block_bytes;
                submit_time[slot] = SteadyClock::now();
                engine->submit(req);
            }
            done.clear();
            if (engine->poll(done, true) == 0 && engine->in_flight() == 0 && !submitting) break;
            auto now = SteadyClock::now();
            for (const auto& c : done) {
                if (c.status != IoStatus::Ok || c.bytes != p.block_bytes)
                    throw std::runtime_error("io bench: async read failed");
                ++total_requests;
                total_latency_us += double(elapsed_ns(submit_time[c.id], now)) * 1e-3;
                free_slots.push_back(c.id);
            }
            if (SteadyClock::now() >= deadline) submitting = false;
        }
    }

    result.elapsed_s = elapsed_seconds(t_start, SteadyClock::now());
    result.requests = total_requests;
    result.bytes = total_requests * p.block_bytes;
    result.bandwidth_mb_s = result.elapsed_s > 0 ? double(result.bytes) / 1e6 / result.elapsed_s : 0;
    result.mean_latency_us = total_requests > 0 ? total_latency_us / double(total_requests) : 0;
    return result;
}

}  // namespace featdrive::storage
