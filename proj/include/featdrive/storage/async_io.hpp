#pragma once

/**
 * async_io.hpp - Asynchronous positional-read engines.
 *
 * The primary engine drives a raw io_uring (no liburing dependency): requests
 * become SQEs, completions are harvested from the CQ ring, and at most
 * `capacity` requests are in flight per engine. Each engine instance belongs
 * to a single submitting thread; different threads use different engines,
 * optionally over the same file descriptor.
 *
 * ThreadPoolEngine provides the same contract via worker threads and pread for
 * kernels or sandboxes that reject io_uring. LatencyInjectedEngine wraps any
 * engine and withholds each completion until submit_time + latency, which lets
 * tests model a slow device whose requests still overlap.
 */

#include <linux/io_uring.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <thread>
#include <unordered_map>
#include <vector>

#include "featdrive/common.hpp"

namespace featdrive::storage {

enum class IoStatus { Ok, ShortRead, OsError };

struct IoRequest {
    std::uint64_t id = 0;
    int fd = -1;
    std::uint64_t offset = 0;
    std::uint64_t len = 0;
    std::byte* dest = nullptr;
};

struct IoCompletion {
    std::uint64_t id = 0;
    IoStatus status = IoStatus::Ok;
    int os_error = 0;
    std::uint64_t bytes = 0;
};

class AsyncIoEngine {
public:
    virtual ~AsyncIoEngine() = default;

    /// Max requests in flight; submit() requires in_flight() < capacity().
    virtual std::size_t capacity() const = 0;
    virtual std::size_t in_flight() const = 0;
    virtual void submit(const IoRequest& req) = 0;

    /// Appends available completions to `out`. With wait=true and requests in
    /// flight, blocks until at least one arrives. Returns count appended.
    virtual std::size_t poll(std::vector<IoCompletion>& out, bool wait) = 0;
};

// -----------------------------------------------------------------------------
// io_uring engine (raw syscalls)
// -----------------------------------------------------------------------------

namespace detail {

inline int sys_io_uring_setup(unsigned entries, io_uring_params* p) {
    return int(::syscall(__NR_io_uring_setup, entries, p));
}

inline int sys_io_uring_enter(int fd, unsigned to_submit, unsigned min_complete, unsigned flags) {
    return int(::syscall(__NR_io_uring_enter, fd, to_submit, min_complete, flags, nullptr, 0));
}

inline unsigned load_acquire(const unsigned* p) {
    return std::atomic_ref<const unsigned>(*p).load(std::memory_order_acquire);
}

inline void store_release(unsigned* p, unsigned v) {
    std::atomic_ref<unsigned>(*p).store(v, std::memory_order_release);
}

}  // namespace detail

class UringEngine final : public AsyncIoEngine {
public:
    explicit UringEngine(std::size_t depth) {
        io_uring_params params{};
        unsigned entries = 1;
        while (entries < depth) entries <<= 1;
        ring_fd_ = detail::sys_io_uring_setup(entries, &params);
        if (ring_fd_ < 0) throw_errno("io_uring_setup");

        sq_entries_ = params.sq_entries;
        cq_entries_ = params.cq_entries;
        capacity_ = std::min<std::size_t>(depth, sq_entries_);

        std::size_t sq_bytes = params.sq_off.array + params.sq_entries * sizeof(unsigned);
        std::size_t cq_bytes = params.cq_off.cqes + params.cq_entries * sizeof(io_uring_cqe);
        single_mmap_ = params.features & IORING_FEAT_SINGLE_MMAP;
        if (single_mmap_) sq_bytes = cq_bytes = std::max(sq_bytes, cq_bytes);

        sq_ring_ = ::mmap(nullptr, sq_bytes, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_POPULATE,
                          ring_fd_, IORING_OFF_SQ_RING);
        if (sq_ring_ == MAP_FAILED) {
            int e = errno;
            ::close(ring_fd_);
            throw_errno("mmap io_uring sq ring", e);
        }
        sq_ring_bytes_ = sq_bytes;

        if (single_mmap_) {
            cq_ring_ = sq_ring_;
            cq_ring_bytes_ = 0;
        } else {
            cq_ring_ = ::mmap(nullptr, cq_bytes, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_POPULATE,
                              ring_fd_, IORING_OFF_CQ_RING);
            if (cq_ring_ == MAP_FAILED) {
                int e = errno;
                teardown();
                throw_errno("mmap io_uring cq ring", e);
            }
            cq_ring_bytes_ = cq_bytes;
        }

        sqes_bytes_ = params.sq_entries * sizeof(io_uring_sqe);
        sqes_ = static_cast<io_uring_sqe*>(::mmap(nullptr, sqes_bytes_, PROT_READ | PROT_WRITE,
                                                  MAP_SHARED | MAP_POPULATE, ring_fd_,
                                                  IORING_OFF_SQES));
        if (sqes_ == MAP_FAILED) {
            int e = errno;
            sqes_ = nullptr;
            teardown();
            throw_errno("mmap io_uring sqes", e);
        }

        auto* sq = static_cast<std::uint8_t*>(sq_ring_);
        sq_head_ = reinterpret_cast<unsigned*>(sq + params.sq_off.head);
        sq_tail_ = reinterpret_cast<unsigned*>(sq + params.sq_off.tail);
        sq_mask_ = *reinterpret_cast<unsigned*>(sq + params.sq_off.ring_mask);
        sq_array_ = reinterpret_cast<unsigned*>(sq + params.sq_off.array);

        auto* cq = static_cast<std::uint8_t*>(cq_ring_);
        cq_head_ = reinterpret_cast<unsigned*>(cq + params.cq_off.head);
        cq_tail_ = reinterpret_cast<unsigned*>(cq + params.cq_off.tail);
        cq_mask_ = *reinterpret_cast<unsigned*>(cq + params.cq_off.ring_mask);
        cqes_ = reinterpret_cast<io_uring_cqe*>(cq + params.cq_off.cqes);
    }

    ~UringEngine() override {
        // Drain whatever is still in flight so the kernel stops writing into
        // caller buffers before they go away.
        std::vector<IoCompletion> sink;
        while (in_flight_ > 0) {
            if (poll_impl(sink, true) == 0) break;
            sink.clear();
        }
        teardown();
    }

    UringEngine(const UringEngine&) = delete;
    UringEngine& operator=(const UringEngine&) = delete;

    std::size_t capacity() const override { return capacity_; }
    std::size_t in_flight() const override { return in_flight_; }

    void submit(const IoRequest& req) override {
        FD_CHECK_MSG(in_flight_ < capacity_, "io depth exceeded");
        unsigned tail = *sq_tail_;  // single submitter: plain read of own tail
        unsigned idx = tail & sq_mask_;
        io_uring_sqe& sqe = sqes_[idx];
        std::memset(&sqe, 0, sizeof(sqe));
        sqe.opcode = IORING_OP_READ;
        sqe.fd = req.fd;
        sqe.off = req.offset;
        sqe.addr = reinterpret_cast<std::uint64_t>(req.dest);
        sqe.len = std::uint32_t(req.len);
        sqe.user_data = req.id;
        sq_array_[idx] = idx;
        detail::store_release(sq_tail_, tail + 1);
        ++pending_submit_;
        ++in_flight_;
    }

    std::size_t poll(std::vector<IoCompletion>& out, bool wait) override {
        return poll_impl(out, wait);
    }

private:
    std::size_t poll_impl(std::vector<IoCompletion>& out, bool wait) {
        std::size_t n = drain_cq(out);
        if ((n == 0 && wait && in_flight_ > 0) || pending_submit_ > 0) {
            unsigned min_complete = (n == 0 && wait && in_flight_ > 0) ? 1 : 0;
            unsigned flags = min_complete ? IORING_ENTER_GETEVENTS : 0;
            while (true) {
                int ret = detail::sys_io_uring_enter(ring_fd_, pending_submit_, min_complete, flags);
                if (ret < 0) {
                    if (errno == EINTR) continue;
                    throw_errno("io_uring_enter");
                }
                pending_submit_ -= std::min(unsigned(ret), pending_submit_);
                break;
            }
            n += drain_cq(out);
        }
        return n;
    }

    std::size_t drain_cq(std::vector<IoCompletion>& out) {
        std::size_t n = 0;
        unsigned head = *cq_head_;
        unsigned tail = detail::load_acquire(cq_tail_);
        while (head != tail) {
            const io_uring_cqe& cqe = cqes_[head & cq_mask_];
            IoCompletion c;
            c.id = cqe.user_data;
            if (cqe.res < 0) {
                c.status = IoStatus::OsError;
                c.os_error = -cqe.res;
            } else {
                c.bytes = std::uint64_t(cqe.res);
                c.status = IoStatus::Ok;  // caller downgrades to ShortRead vs its request
            }
            out.push_back(c);
            ++head;
            ++n;
        }
        if (n > 0) {
            detail::store_release(cq_head_, head);
            in_flight_ -= n;
        }
        return n;
    }

    void teardown() {
        if (sqes_) ::munmap(sqes_, sqes_bytes_);
        if (cq_ring_ && !single_mmap_) ::munmap(cq_ring_, cq_ring_bytes_);
        if (sq_ring_) ::munmap(sq_ring_, sq_ring_bytes_);
        if (ring_fd_ >= 0) ::close(ring_fd_);
        sqes_ = nullptr;
        cq_ring_ = nullptr;
        sq_ring_ = nullptr;
        ring_fd_ = -1;
    }

    int ring_fd_ = -1;
    void* sq_ring_ = nullptr;
    void* cq_ring_ = nullptr;
    io_uring_sqe* sqes_ = nullptr;
    std::size_t sq_ring_bytes_ = 0;
    std::size_t cq_ring_bytes_ = 0;
    std::size_t sqes_bytes_ = 0;
    bool single_mmap_ = false;

    unsigned* sq_head_ = nullptr;
    unsigned* sq_tail_ = nullptr;
    unsigned* sq_array_ = nullptr;
    unsigned sq_mask_ = 0;
    unsigned* cq_head_ = nullptr;
    unsigned* cq_tail_ = nullptr;
    io_uring_cqe* cqes_ = nullptr;
    unsigned cq_mask_ = 0;
    unsigned sq_entries_ = 0;
    unsigned cq_entries_ = 0;

    std::size_t capacity_ = 0;
    std::size_t in_flight_ = 0;
    unsigned pending_submit_ = 0;
};

// -----------------------------------------------------------------------------
// Thread-pool fallback
// -----------------------------------------------------------------------------

class ThreadPoolEngine final : public AsyncIoEngine {
public:
    explicit ThreadPoolEngine(std::size_t depth)
        : capacity_(std::max<std::size_t>(1, depth)) {
        std::size_t workers = std::min<std::size_t>(capacity_, 16);
        threads_.reserve(workers);
        for (std::size_t i = 0; i < workers; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPoolEngine() override {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        work_cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    std::size_t capacity() const override { return capacity_; }

    std::size_t in_flight() const override {
        std::lock_guard lk(mu_);
        return in_flight_;
    }

    void submit(const IoRequest& req) override {
        {
            std::lock_guard lk(mu_);
            FD_CHECK_MSG(in_flight_ < capacity_, "io depth exceeded");
            pending_.push_back(req);
            ++in_flight_;
        }
        work_cv_.notify_one();
    }

    std::size_t poll(std::vector<IoCompletion>& out, bool wait) override {
        std::unique_lock lk(mu_);
        if (wait) done_cv_.wait(lk, [&] { return !done_.empty() || in_flight_ == 0; });
        std::size_t n = done_.size();
        for (auto& c : done_) out.push_back(c);
        done_.clear();
        return n;
    }

private:
    void worker_loop() {
        while (true) {
            IoRequest req;
            {
                std::unique_lock lk(mu_);
                work_cv_.wait(lk, [&] { return stop_ || !pending_.empty(); });
                if (stop_ && pending_.empty()) return;
                req = pending_.front();
                pending_.pop_front();
            }
            IoCompletion c = run_one(req);
            {
                std::lock_guard lk(mu_);
                done_.push_back(c);
                --in_flight_;
            }
            done_cv_.notify_all();
        }
    }

    static IoCompletion run_one(const IoRequest& req) {
        IoCompletion c;
        c.id = req.id;
        std::uint64_t got = 0;
        while (got < req.len) {
            ssize_t n = ::pread(req.fd, req.dest + got, req.len - got, req.offset + got);
            if (n < 0) {
                if (errno == EINTR) continue;
                c.status = IoStatus::OsError;
                c.os_error = errno;
                c.bytes = got;
                return c;
            }
            if (n == 0) break;  // EOF
            got += std::uint64_t(n);
        }
        c.bytes = got;
        c.status = IoStatus::Ok;
        return c;
    }

    const std::size_t capacity_;
    mutable std::mutex mu_;
    std::condition_variable work_cv_;
    std::condition_variable done_cv_;
    std::deque<IoRequest> pending_;
    std::vector<IoCompletion> done_;
    std::size_t in_flight_ = 0;
    bool stop_ = false;
    std::vector<std::thread> threads_;
};

// -----------------------------------------------------------------------------
// Latency injection
// -----------------------------------------------------------------------------

/// Withholds each completion until submit_time + latency. Physical reads run
/// underneath at full speed, so concurrent requests overlap exactly as they
/// would on a device with that service time.
class LatencyInjectedEngine final : public AsyncIoEngine {
public:
    LatencyInjectedEngine(std::unique_ptr<AsyncIoEngine> inner, std::chrono::nanoseconds latency)
        : inner_(std::move(inner)), latency_(latency) {}

    std::size_t capacity() const override { return inner_->capacity(); }

    std::size_t in_flight() const override { return inner_->in_flight() + held_.size(); }

    void submit(const IoRequest& req) override {
        due_[req.id] = SteadyClock::now() + latency_;
        inner_->submit(req);
    }

    std::size_t poll(std::vector<IoCompletion>& out, bool wait) override {
        std::size_t delivered = 0;
        while (true) {
            harvest();
            auto now = SteadyClock::now();
            while (!held_.empty() && held_.top().due <= now) {
                out.push_back(held_.top().completion);
                held_.pop();
                ++delivered;
            }
            if (delivered > 0 || !wait) return delivered;
            if (!held_.empty()) {
                std::this_thread::sleep_until(held_.top().due);
            } else if (inner_->in_flight() > 0) {
                scratch_.clear();
                inner_->poll(scratch_, true);
                stash(scratch_);
            } else {
                return 0;
            }
        }
    }

private:
    struct Held {
        TimePoint due;
        IoCompletion completion;
        bool operator>(const Held& o) const { return due > o.due; }
    };

    void harvest() {
        scratch_.clear();
        inner_->poll(scratch_, false);
        stash(scratch_);
    }

    void stash(const std::vector<IoCompletion>& cs) {
        for (const auto& c : cs) {
            auto it = due_.find(c.id);
            TimePoint due = it != due_.end() ? it->second : SteadyClock::now();
            if (it != due_.end()) due_.erase(it);
            held_.push(Held{due, c});
        }
    }

    std::unique_ptr<AsyncIoEngine> inner_;
    std::chrono::nanoseconds latency_;
    std::unordered_map<std::uint64_t, TimePoint> due_;
    std::priority_queue<Held, std::vector<Held>, std::greater<>> held_;
    std::vector<IoCompletion> scratch_;
};

// -----------------------------------------------------------------------------
// Construction
// -----------------------------------------------------------------------------

enum class EngineKind { Auto, Uring, Threads };

inline bool uring_supported() {
    static bool supported = [] {
        io_uring_params params{};
        int fd = detail::sys_io_uring_setup(1, &params);
        if (fd < 0) return false;
        ::close(fd);
        return true;
    }();
    return supported;
}

inline std::unique_ptr<AsyncIoEngine> make_async_engine(
    std::size_t depth, EngineKind kind = EngineKind::Auto,
    std::chrono::nanoseconds inject_latency = std::chrono::nanoseconds::zero()) {
    std::unique_ptr<AsyncIoEngine> engine;
    if (kind == EngineKind::Uring || (kind == EngineKind::Auto && uring_supported()))
        engine = std::make_unique<UringEngine>(depth);
    else
        engine = std::make_unique<ThreadPoolEngine>(depth);
    if (inject_latency.count() > 0)
        engine = std::make_unique<LatencyInjectedEngine>(std::move(engine), inject_latency);
    return engine;
}

// -----------------------------------------------------------------------------
// Bounded-depth batch submission
// -----------------------------------------------------------------------------

/// Runs every request through the engine with at most io_depth in flight and
/// returns one completion per request (arrival order). Requests whose read
/// came back shorter than asked are downgraded to ShortRead here.
inline std::vector<IoCompletion> submit_async_reads(AsyncIoEngine& engine,
                                                    std::span<const IoRequest> requests,
                                                    std::size_t io_depth) {
    std::vector<IoCompletion> all;
    all.reserve(requests.size());
    const std::size_t window = std::min(io_depth, engine.capacity());
    FD_CHECK(window > 0);

    std::unordered_map<std::uint64_t, std::uint64_t> want;
    want.reserve(requests.size());
    std::size_t next = 0;
    std::vector<IoCompletion> batch;
    while (all.size() < requests.size()) {
        while (next < requests.size() && engine.in_flight() < window) {
            want[requests[next].id] = requests[next].len;
            engine.submit(requests[next]);
            ++next;
        }
        batch.clear();
        engine.poll(batch, true);
        for (auto c : batch) {
            auto it = want.find(c.id);
            if (it != want.end() && c.status == IoStatus::Ok && c.bytes < it->second)
                c.status = IoStatus::ShortRead;
            all.push_back(c);
        }
    }
    return all;
}

}  // namespace featdrive::storage
