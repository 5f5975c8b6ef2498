#pragma once

/**
 * staging.hpp - Bounded, sector-aligned host arena that disk loads land in
 * before transfer to the feature buffer.
 *
 * Capacity is fixed at N_e * M_b slots of aligned_row_bytes each and never
 * grows. Each worker (segment) owns a quota; an extractor allocates all runs
 * for a batch in one all-or-nothing call, which keeps allocation free of
 * hold-and-wait deadlocks, and may overflow its worker's quota into currently
 * free space (borrowing), repaid when the batch's runs are freed.
 *
 * Loaded rows are registered in a shared index so another worker can transfer
 * a row straight out of this arena instead of re-reading the disk. Pins keep
 * a row's run alive while such a transfer is in progress.
 */

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <vector>

#include "featdrive/common.hpp"

namespace featdrive::featbuf {

class StagingTimeout : public std::runtime_error {
public:
    explicit StagingTimeout(const std::string& what) : std::runtime_error(what) {}
};

struct StagingStats {
    std::uint64_t capacity_bytes = 0;
    std::uint64_t used_bytes = 0;       // snapshot
    std::uint64_t peak_bytes = 0;
    std::uint64_t borrow_events = 0;    // allocations that exceeded the worker quota
    std::uint64_t cross_hits = 0;       // rows pinned by a worker that did not load them
};

class StagingArena {
private:
    struct RowState {
        NodeId node = 0;
        std::span<const std::byte> data;
        std::uint32_t pins = 0;
        std::uint32_t owner_worker = 0;
    };

public:
    /// Opaque handle for one contiguous allocation.
    struct Run {
        std::uint64_t id = 0;
        std::uint64_t byte_offset = 0;
        std::uint64_t bytes = 0;
    };

    class PinnedRow {
    public:
        PinnedRow(PinnedRow&& other) noexcept
            : arena_(other.arena_), state_(std::move(other.state_)) {
            other.arena_ = nullptr;
        }
        PinnedRow& operator=(PinnedRow&& other) noexcept {
            if (this != &other) {
                release();
                arena_ = other.arena_;
                state_ = std::move(other.state_);
                other.arena_ = nullptr;
            }
            return *this;
        }
        PinnedRow(const PinnedRow&) = delete;
        PinnedRow& operator=(const PinnedRow&) = delete;

        ~PinnedRow() { release(); }

        std::span<const std::byte> data() const { return state_->data; }

    private:
        friend class StagingArena;
        PinnedRow(StagingArena* arena, std::shared_ptr<RowState> state)
            : arena_(arena), state_(std::move(state)) {}

        void release() {
            if (!arena_) return;
            {
                std::lock_guard lk(arena_->mu_);
                FD_CHECK(state_->pins > 0);
                --state_->pins;
            }
            arena_->pin_cv_.notify_all();
            arena_ = nullptr;
        }

        StagingArena* arena_;
        std::shared_ptr<RowState> state_;
    };

    StagingArena(std::uint64_t total_slots, std::uint64_t slot_bytes,
                 std::vector<std::uint64_t> worker_quota_slots,
                 std::chrono::milliseconds alloc_timeout = std::chrono::milliseconds(60000))
        : slot_bytes_(slot_bytes),
          total_slots_(total_slots),
          quota_slots_(std::move(worker_quota_slots)),
          used_slots_(quota_slots_.size(), 0),
          alloc_timeout_(alloc_timeout),
          arena_(total_slots * slot_bytes) {
        FD_CHECK(total_slots > 0 && slot_bytes > 0);
        FD_CHECK(!quota_slots_.empty());
        free_runs_[0] = total_slots_;
        free_slots_ = total_slots_;
    }

    std::uint64_t capacity_bytes() const { return total_slots_ * slot_bytes_; }
    std::uint64_t slot_bytes() const { return slot_bytes_; }

    /// Allocates one run per entry of `run_slots`, all or nothing. Blocks until
    /// the whole batch fits (frees elsewhere un-fragment the arena over time);
    /// a timeout signals a sizing bug, never silent livelock.
    std::vector<Run> allocate_batch(std::uint32_t worker, std::span<const std::uint64_t> run_slots) {
        std::uint64_t need = 0;
        for (auto s : run_slots) {
            FD_CHECK(s > 0);
            need += s;
        }
        std::vector<Run> out;
        if (need == 0) return out;
        FD_CHECK_MSG(need <= total_slots_, "batch staging demand exceeds the arena");
        FD_CHECK(worker < quota_slots_.size());

        std::unique_lock lk(mu_);
        auto deadline = SteadyClock::now() + alloc_timeout_;
        while (true) {
            if (free_slots_ >= need && try_take_batch_locked(run_slots, out)) break;
            std::uint64_t gen = free_gen_;
            if (!free_cv_.wait_until(lk, deadline, [&] { return free_gen_ != gen; }))
                throw StagingTimeout("staging allocation of " + std::to_string(need) +
                                     " slots timed out; arena is undersized");
        }
        if (used_slots_[worker] + need > quota_slots_[worker]) ++stats_.borrow_events;
        used_slots_[worker] += need;
        owner_of_run_.reserve(owner_of_run_.size() + out.size());
        for (const auto& r : out) owner_of_run_[r.id] = worker;
        std::uint64_t used_total = total_slots_ - free_slots_;
        stats_.peak_bytes = std::max(stats_.peak_bytes, used_total * slot_bytes_);
        return out;
    }

    std::span<std::byte> run_data(const Run& run) {
        return arena_.span().subspan(run.byte_offset, run.bytes);
    }

    /// Publishes a loaded row for cross-worker reuse. `data` must lie inside
    /// `run`'s bytes; the registration dies when the run is freed.
    void register_row(const Run& run, std::uint32_t worker, NodeId node,
                      std::span<const std::byte> data) {
        std::lock_guard lk(mu_);
        auto it = live_runs_.find(run.id);
        FD_CHECK_MSG(it != live_runs_.end(), "register_row on a freed run");
        auto state = std::make_shared<RowState>();
        state->node = node;
        state->data = data;
        state->owner_worker = worker;
        it->second.rows.push_back(state);
        row_index_[node] = state;
    }

    /// Pins `node`'s staged row if still resident. The pin keeps the backing
    /// run alive until the returned handle is destroyed.
    std::optional<PinnedRow> pin(NodeId node, std::uint32_t for_worker) {
        std::lock_guard lk(mu_);
        auto it = row_index_.find(node);
        if (it == row_index_.end()) return std::nullopt;
        auto state = it->second;
        ++state->pins;
        if (state->owner_worker != for_worker) ++stats_.cross_hits;
        return PinnedRow(this, std::move(state));
    }

    /// Returns a run's slots to the free pool. Its rows become unreachable
    /// immediately; blocks until outstanding pins on them drain.
    void free_run(const Run& run) {
        std::unique_lock lk(mu_);
        auto it = live_runs_.find(run.id);
        FD_CHECK_MSG(it != live_runs_.end(), "double free of staging run");
        for (auto& state : it->second.rows) {
            auto idx = row_index_.find(state->node);
            if (idx != row_index_.end() && idx->second == state) row_index_.erase(idx);
        }
        for (auto& state : it->second.rows)
            pin_cv_.wait(lk, [&] { return state->pins == 0; });
        std::uint64_t slots = run.bytes / slot_bytes_;
        give_back_locked(run.byte_offset / slot_bytes_, slots);
        auto owner = owner_of_run_.find(run.id);
        FD_CHECK(owner != owner_of_run_.end());
        FD_CHECK(used_slots_[owner->second] >= slots);
        used_slots_[owner->second] -= slots;
        owner_of_run_.erase(owner);
        live_runs_.erase(it);
        ++free_gen_;
        lk.unlock();
        free_cv_.notify_all();
    }

    StagingStats stats() const {
        std::lock_guard lk(mu_);
        StagingStats s = stats_;
        s.capacity_bytes = capacity_bytes();
        s.used_bytes = (total_slots_ - free_slots_) * slot_bytes_;
        return s;
    }

private:
    struct RunState {
        std::vector<std::shared_ptr<RowState>> rows;
    };

    bool try_take_batch_locked(std::span<const std::uint64_t> run_slots, std::vector<Run>& out) {
        out.clear();
        for (auto slots : run_slots) {
            auto run = try_take_run_locked(slots);
            if (!run) {
                // Fragmented; hand everything back and let the caller wait.
                for (const auto& r : out) {
                    give_back_locked(r.byte_offset / slot_bytes_, r.bytes / slot_bytes_);
                    live_runs_.erase(r.id);
                }
                out.clear();
                return false;
            }
            out.push_back(*run);
        }
        return true;
    }

    std::optional<Run> try_take_run_locked(std::uint64_t slots) {
        for (auto it = free_runs_.begin(); it != free_runs_.end(); ++it) {
            if (it->second < slots) continue;
            std::uint64_t at = it->first;
            std::uint64_t len = it->second;
            free_runs_.erase(it);
            if (len > slots) free_runs_[at + slots] = len - slots;
            free_slots_ -= slots;
            Run run{next_run_id_++, at * slot_bytes_, slots * slot_bytes_};
            live_runs_.emplace(run.id, RunState{});
            return run;
        }
        return std::nullopt;
    }

    void give_back_locked(std::uint64_t slot_offset, std::uint64_t slots) {
        auto [it, inserted] = free_runs_.emplace(slot_offset, slots);
        FD_CHECK(inserted);
        auto next = std::next(it);
        if (next != free_runs_.end() && it->first + it->second == next->first) {
            it->second += next->second;
            free_runs_.erase(next);
        }
        if (it != free_runs_.begin()) {
            auto prev = std::prev(it);
            if (prev->first + prev->second == it->first) {
                prev->second += it->second;
                free_runs_.erase(it);
            }
        }
        free_slots_ += slots;
    }

    const std::uint64_t slot_bytes_;
    const std::uint64_t total_slots_;
    std::vector<std::uint64_t> quota_slots_;
    std::vector<std::uint64_t> used_slots_;
    const std::chrono::milliseconds alloc_timeout_;
    AlignedBuffer arena_;

    mutable std::mutex mu_;
    std::condition_variable free_cv_;
    std::condition_variable pin_cv_;
    std::map<std::uint64_t, std::uint64_t> free_runs_;  // slot offset -> slot count
    std::uint64_t free_slots_ = 0;
    std::uint64_t free_gen_ = 0;
    std::uint64_t next_run_id_ = 1;
    std::unordered_map<std::uint64_t, RunState> live_runs_;
    std::unordered_map<std::uint64_t, std::uint32_t> owner_of_run_;
    std::unordered_map<NodeId, std::shared_ptr<RowState>> row_index_;
    StagingStats stats_;
};

}  // namespace featdrive::featbuf
