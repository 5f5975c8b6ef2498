#pragma once

/**
 * common.hpp - Shared primitives: ids, sector math, hashing, aligned buffers,
 * logging, and the always-on invariant check macro.
 */

#include <atomic>
#include <chrono>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <system_error>

namespace featdrive {

using NodeId = std::uint64_t;
using SlotId = std::int64_t;  // -1 means "no slot"

inline constexpr SlotId kNoSlot = -1;
inline constexpr std::uint64_t kSectorBytes = 512;

constexpr std::uint64_t align_down(std::uint64_t v, std::uint64_t a) { return v - (v % a); }
constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return align_down(v + a - 1, a); }

// -----------------------------------------------------------------------------
// Invariant checks. These guard the buffer-manager state machine and stay
// compiled in regardless of NDEBUG; a violation is a logic bug, not bad input.
// -----------------------------------------------------------------------------

class InvariantViolation : public std::logic_error {
public:
    explicit InvariantViolation(const std::string& what) : std::logic_error(what) {}
};

[[noreturn]] inline void invariant_failed(const char* expr, const char* file, int line,
                                          const std::string& detail) {
    std::string msg = "invariant violated: ";
    msg += expr;
    msg += " at ";
    msg += file;
    msg += ":";
    msg += std::to_string(line);
    if (!detail.empty()) {
        msg += " (";
        msg += detail;
        msg += ")";
    }
    throw InvariantViolation(msg);
}

#define FD_CHECK(expr)                                                        \
    do {                                                                      \
        if (!(expr)) ::featdrive::invariant_failed(#expr, __FILE__, __LINE__, {}); \
    } while (0)

#define FD_CHECK_MSG(expr, detail)                                            \
    do {                                                                      \
        if (!(expr)) ::featdrive::invariant_failed(#expr, __FILE__, __LINE__, (detail)); \
    } while (0)

[[noreturn]] inline void throw_errno(const std::string& context, int err = errno) {
    throw std::system_error(err, std::generic_category(), context);
}

// -----------------------------------------------------------------------------
// Hashing. splitmix64 doubles as the deterministic PRNG stream for synthetic
// data; hash_bytes64 is the row checksum (8-byte lanes, order-sensitive within
// a row, summed across rows by callers for order-insensitive batch checksums).
// -----------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

inline std::uint64_t hash_bytes64(std::span<const std::byte> data) {
    std::uint64_t h = 0x27d4eb2f165667c5ull ^ (data.size() * 0x9e3779b97f4a7c15ull);
    const std::byte* p = data.data();
    std::size_t n = data.size();
    while (n >= 8) {
        std::uint64_t lane;
        std::memcpy(&lane, p, 8);
        h = splitmix64(h ^ lane);
        p += 8;
        n -= 8;
    }
    if (n > 0) {
        std::uint64_t lane = 0;
        std::memcpy(&lane, p, n);
        h = splitmix64(h ^ lane ^ (std::uint64_t(n) << 56));
    }
    return splitmix64(h);
}

/// Counter-mode splitmix stream; stable across platforms, cheap to reseed.
class SplitMix {
public:
    explicit SplitMix(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double next_unit() { return double(next() >> 11) * 0x1.0p-53; }

    /// Uniform in [0, n). Modulo bias is irrelevant for the synthetic workloads.
    std::uint64_t next_below(std::uint64_t n) { return n ? next() % n : 0; }

private:
    std::uint64_t state_;
};

// -----------------------------------------------------------------------------
// Aligned buffer for direct I/O. Alignment covers the strictest logical block
// size in the wild (4096); extents themselves stay 512-granular.
// -----------------------------------------------------------------------------

class AlignedBuffer {
public:
    AlignedBuffer() = default;

    explicit AlignedBuffer(std::size_t bytes, std::size_t alignment = 4096) {
        if (bytes == 0) return;
        std::size_t padded = align_up(bytes, alignment);
        ptr_ = static_cast<std::byte*>(std::aligned_alloc(alignment, padded));
        if (!ptr_) throw std::bad_alloc();
        size_ = bytes;
    }

    AlignedBuffer(AlignedBuffer&& other) noexcept
        : ptr_(other.ptr_), size_(other.size_) {
        other.ptr_ = nullptr;
        other.size_ = 0;
    }

    AlignedBuffer& operator=(AlignedBuffer&& other) noexcept {
        if (this != &other) {
            reset();
            ptr_ = other.ptr_;
            size_ = other.size_;
            other.ptr_ = nullptr;
            other.size_ = 0;
        }
        return *this;
    }

    AlignedBuffer(const AlignedBuffer&) = delete;
    AlignedBuffer& operator=(const AlignedBuffer&) = delete;

    ~AlignedBuffer() { reset(); }

    void reset() {
        std::free(ptr_);
        ptr_ = nullptr;
        size_ = 0;
    }

    std::byte* data() { return ptr_; }
    const std::byte* data() const { return ptr_; }
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    std::span<std::byte> span() { return {ptr_, size_}; }
    std::span<const std::byte> span() const { return {ptr_, size_}; }

private:
    std::byte* ptr_ = nullptr;
    std::size_t size_ = 0;
};

// -----------------------------------------------------------------------------
// Logging. Level comes from FEATDRIVE_LOG (error|warn|info|debug), default warn.
// Machine output goes to stdout elsewhere; logs always go to stderr.
// -----------------------------------------------------------------------------

enum class LogLevel : int { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("FEATDRIVE_LOG");
        if (!env) return LogLevel::Warn;
        std::string s(env);
        if (s == "error") return LogLevel::Error;
        if (s == "warn") return LogLevel::Warn;
        if (s == "info") return LogLevel::Info;
        if (s == "debug") return LogLevel::Debug;
        return LogLevel::Warn;
    }();
    return level;
}

inline void log_message(LogLevel level, const char* fmt, ...) {
    if (int(level) > int(log_level())) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[featdrive:%s] ", names[int(level)]);
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fputc('\n', stderr);
}

#define FD_LOG_ERROR(...) ::featdrive::log_message(::featdrive::LogLevel::Error, __VA_ARGS__)
#define FD_LOG_WARN(...)  ::featdrive::log_message(::featdrive::LogLevel::Warn, __VA_ARGS__)
#define FD_LOG_INFO(...)  ::featdrive::log_message(::featdrive::LogLevel::Info, __VA_ARGS__)
#define FD_LOG_DEBUG(...) ::featdrive::log_message(::featdrive::LogLevel::Debug, __VA_ARGS__)

// -----------------------------------------------------------------------------
// Time
// -----------------------------------------------------------------------------

using SteadyClock = std::chrono::steady_clock;
using TimePoint = SteadyClock::time_point;

inline std::int64_t elapsed_ns(TimePoint start, TimePoint end) {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(end - start).count();
}

inline double elapsed_seconds(TimePoint start, TimePoint end) {
    return double(elapsed_ns(start, end)) * 1e-9;
}

/// Accumulates nanoseconds across threads; one per pipeline stage counter.
class DurationCounter {
public:
    void add(std::int64_t ns) { ns_.fetch_add(ns, std::memory_order_relaxed); }
    std::int64_t ns() const { return ns_.load(std::memory_order_relaxed); }
    double seconds() const { return double(ns()) * 1e-9; }

private:
    std::atomic<std::int64_t> ns_{0};
};

class ScopedTimer {
public:
    explicit ScopedTimer(DurationCounter& counter)
        : counter_(counter), start_(SteadyClock::now()) {}
    ~ScopedTimer() { counter_.add(elapsed_ns(start_, SteadyClock::now())); }

private:
    DurationCounter& counter_;
    TimePoint start_;
};

}  // namespace featdrive
