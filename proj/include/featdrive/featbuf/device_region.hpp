#pragma once

/**
 * device_region.hpp - Slot payload storage and the simulated asynchronous
 * copy engine used in device-sim placement.
 *
 * The region is plain host memory standing in for device memory. A copy runs
 * immediately on the submitting thread (that is the submission cost, as with
 * a real DMA enqueue) but its completion is withheld until submit + latency,
 * so back-to-back copies overlap instead of serializing. Completion order is
 * not guaranteed to match submission order.
 */

#include <queue>
#include <thread>
#include <vector>

#include "featdrive/common.hpp"

namespace featdrive::featbuf {

/// S fixed-size row slots, 4 KiB-aligned so sector-exact rows can be loaded
/// in place in host placement.
class FeatureRegion {
public:
    FeatureRegion(std::uint64_t slot_count, std::uint32_t row_bytes)
        : slot_count_(slot_count), row_bytes_(row_bytes),
          bytes_(slot_count * std::uint64_t(row_bytes)) {
        FD_CHECK(slot_count > 0 && row_bytes > 0);
    }

    std::uint64_t bytes() const { return bytes_.size(); }
    std::uint32_t row_bytes() const { return row_bytes_; }
    std::uint64_t slot_count() const { return slot_count_; }

    std::span<std::byte> slot(SlotId slot) {
        FD_CHECK(slot >= 0 && std::uint64_t(slot) < slot_count_);
        return bytes_.span().subspan(std::uint64_t(slot) * row_bytes_, row_bytes_);
    }

    std::span<const std::byte> slot(SlotId slot) const {
        FD_CHECK(slot >= 0 && std::uint64_t(slot) < slot_count_);
        return bytes_.span().subspan(std::uint64_t(slot) * row_bytes_, row_bytes_);
    }

private:
    std::uint64_t slot_count_;
    std::uint32_t row_bytes_;
    AlignedBuffer bytes_;
};

class CopyEngine {
public:
    explicit CopyEngine(std::chrono::nanoseconds latency = std::chrono::nanoseconds::zero())
        : latency_(latency) {}

    std::size_t in_flight() const { return held_.size(); }

    /// Copies now, completes at submit + latency.
    void submit(std::uint64_t id, std::span<const std::byte> src, std::span<std::byte> dst) {
        FD_CHECK(dst.size() >= src.size());
        std::memcpy(dst.data(), src.data(), src.size());
        held_.push(Held{SteadyClock::now() + latency_, id});
    }

    /// Appends ids of completed copies. With wait=true, blocks until at least
    /// one copy is due (returns 0 only when nothing is in flight).
    std::size_t poll(std::vector<std::uint64_t>& out, bool wait) {
        std::size_t n = 0;
        while (true) {
            auto now = SteadyClock::now();
            while (!held_.empty() && held_.top().due <= now) {
                out.push_back(held_.top().id);
                held_.pop();
                ++n;
            }
            if (n > 0 || !wait || held_.empty()) return n;
            std::this_thread::sleep_until(held_.top().due);
        }
    }

private:
    struct Held {
        TimePoint due;
        std::uint64_t id;
        bool operator>(const Held& o) const { return due > o.due; }
    };

    std::chrono::nanoseconds latency_;
    std::priority_queue<Held, std::vector<Held>, std::greater<>> held_;
};

}  // namespace featdrive::featbuf
