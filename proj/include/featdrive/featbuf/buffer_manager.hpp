#pragma once

/**
 * buffer_manager.hpp - Feature-buffer slot management.
 *
 * Four cooperating structures, mutated only under one mutex:
 *
 *   mapping table    node -> {slot_index, ref_count, valid}
 *   reverse mapping  slot -> node (or -1)
 *   standby list     LRU-ordered slots that are free or whose node has ref 0;
 *                    the only source of slots for new loads
 *   slot payloads    owned by the caller (host region or simulated device
 *                    region); this class tracks metadata only
 *
 * State machine per node:
 *   absent {-1,0,0} --acquire--> loading {-1,ref>0,0} --bind--> bound
 *   {slot,ref>0,0} --publish--> valid {slot,ref,1}; release decrements ref and
 *   parks the slot on the standby tail at ref 0 WITHOUT invalidating, so a
 *   later batch can still hit it (lazy invalidation). Invalidation happens
 *   when the standby LRU pop hands the slot to a different node.
 *
 *   {-1, *, valid=1} is impossible and checked on every mutation.
 *
 * The mutex is never held across disk I/O or payload copies; payload writes
 * are ordered before publish_valid by the caller.
 */

#include <condition_variable>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "featdrive/common.hpp"

namespace featdrive::featbuf {

struct MappingEntry {
    SlotId slot_index = kNoSlot;
    std::uint32_t ref_count = 0;
    std::uint8_t valid = 0;

    bool empty() const { return slot_index == kNoSlot && ref_count == 0 && valid == 0; }
};

static_assert(sizeof(MappingEntry) == 16);

// -----------------------------------------------------------------------------
// Standby list: intrusive doubly-linked list over slot-indexed arrays.
// LRU at the head, MRU at the tail, O(1) removal by slot id.
// -----------------------------------------------------------------------------

class StandbyList {
public:
    explicit StandbyList(std::size_t slot_count)
        : next_(slot_count, kNil), prev_(slot_count, kNil), in_list_(slot_count, 0) {
        FD_CHECK(slot_count < std::size_t(INT32_MAX));
    }

    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    bool contains(SlotId slot) const { return in_list_[std::size_t(slot)] != 0; }
    SlotId peek_lru() const { return head_; }
    SlotId peek_mru() const { return tail_; }

    void push_mru(SlotId slot) {
        auto s = std::int32_t(slot);
        FD_CHECK_MSG(!in_list_[s], "slot already on standby list");
        prev_[s] = tail_;
        next_[s] = kNil;
        if (tail_ != kNil)
            next_[tail_] = s;
        else
            head_ = s;
        tail_ = s;
        in_list_[s] = 1;
        ++size_;
    }

    SlotId pop_lru() {
        FD_CHECK(head_ != kNil);
        SlotId slot = head_;
        remove(slot);
        return slot;
    }

    void remove(SlotId slot) {
        auto s = std::int32_t(slot);
        FD_CHECK_MSG(in_list_[s], "slot not on standby list");
        if (prev_[s] != kNil) next_[prev_[s]] = next_[s];
        if (next_[s] != kNil) prev_[next_[s]] = prev_[s];
        if (head_ == s) head_ = next_[s];
        if (tail_ == s) tail_ = prev_[s];
        prev_[s] = next_[s] = kNil;
        in_list_[s] = 0;
        --size_;
    }

    /// Walks LRU -> MRU, calling fn(slot).
    template <typename Fn>
    void for_each(Fn&& fn) const {
        std::size_t seen = 0;
        for (std::int32_t s = head_; s != kNil; s = next_[s]) {
            fn(SlotId(s));
            FD_CHECK_MSG(++seen <= size_, "standby list cycle");
        }
        FD_CHECK(seen == size_);
    }

private:
    static constexpr std::int32_t kNil = -1;
    std::vector<std::int32_t> next_;
    std::vector<std::int32_t> prev_;
    std::vector<std::uint8_t> in_list_;
    std::int32_t head_ = kNil;
    std::int32_t tail_ = kNil;
    std::size_t size_ = 0;
};

// -----------------------------------------------------------------------------
// Mapping table: dense array by default, hash map for very large graphs.
// -----------------------------------------------------------------------------

enum class MappingKind { Auto, Dense, Sparse };

class MappingTable {
public:
    // Dense costs 16 B/node; past ~32M nodes that stops being a footnote.
    static constexpr std::uint64_t kDenseLimit = 32ull << 20;

    MappingTable(std::uint64_t num_nodes, MappingKind kind) : num_nodes_(num_nodes) {
        dense_mode_ = kind == MappingKind::Dense ||
                      (kind == MappingKind::Auto && num_nodes <= kDenseLimit);
        if (dense_mode_) dense_.resize(num_nodes);
    }

    bool dense_mode() const { return dense_mode_; }

    MappingEntry& at(NodeId node) {
        FD_CHECK(node < num_nodes_);
        if (dense_mode_) return dense_[node];
        return sparse_[node];
    }

    const MappingEntry* find(NodeId node) const {
        if (dense_mode_) return node < num_nodes_ ? &dense_[node] : nullptr;
        auto it = sparse_.find(node);
        return it == sparse_.end() ? nullptr : &it->second;
    }

    /// Sparse mode drops fully-reset entries so the map tracks live slots only.
    void compact(NodeId node) {
        if (dense_mode_) return;
        auto it = sparse_.find(node);
        if (it != sparse_.end() && it->second.empty()) sparse_.erase(it);
    }

    template <typename Fn>
    void for_each_nonempty(Fn&& fn) const {
        if (dense_mode_) {
            for (NodeId n = 0; n < num_nodes_; ++n)
                if (!dense_[n].empty()) fn(n, dense_[n]);
        } else {
            for (const auto& [n, e] : sparse_)
                if (!e.empty()) fn(n, e);
        }
    }

private:
    std::uint64_t num_nodes_;
    bool dense_mode_;
    std::vector<MappingEntry> dense_;
    std::unordered_map<NodeId, MappingEntry> sparse_;
};

// -----------------------------------------------------------------------------
// Buffer manager
// -----------------------------------------------------------------------------

struct BufferConfig {
    std::uint64_t num_nodes = 0;
    std::uint64_t slot_count = 0;     // S
    std::uint32_t row_bytes = 0;
    std::uint64_t min_reserved = 0;   // N_e * M_b; S must cover it (deadlock rule)
    MappingKind mapping = MappingKind::Auto;
    std::chrono::milliseconds standby_timeout{60000};
    bool validate_every_op = false;   // full invariant sweep after each mutation
    bool record_events = false;       // acquire/release log for the conservation oracle
};

struct BufferStats {
    std::uint64_t hits = 0;        // alias satisfied from the buffer, no load
    std::uint64_t loads = 0;       // nodes sent to the load path
    std::uint64_t waits = 0;       // nodes parked on a wait list
    std::uint64_t evictions = 0;   // standby pops that displaced a previous node
    std::uint64_t takeovers = 0;   // waiters that became loaders after a failure
    std::uint64_t releases = 0;
    std::uint64_t standby_len = 0; // snapshot
};

struct AcquirePlan {
    std::vector<SlotId> alias;          // per input position, -1 until assigned
    std::vector<std::uint32_t> to_load; // input positions this extractor must load
    std::vector<std::uint32_t> waits;   // input positions another extractor is loading
};

enum class WaitOutcome { Ready, TakeOver, Timeout };

/// Conservation-oracle event (recorded only with record_events).
struct RefEvent {
    enum class Op : std::uint8_t { Acquire, Release } op;
    NodeId node;
    std::uint32_t ref_after;
};

class StandbyTimeout : public std::runtime_error {
public:
    explicit StandbyTimeout(const std::string& what) : std::runtime_error(what) {}
};

class BufferManager {
public:
    explicit BufferManager(const BufferConfig& cfg)
        : cfg_(cfg),
          mapping_(cfg.num_nodes, cfg.mapping),
          standby_(cfg.slot_count),
          reverse_(cfg.slot_count, kNoNode) {
        FD_CHECK_MSG(cfg.slot_count > 0, "slot_count must be positive");
        FD_CHECK_MSG(cfg.slot_count >= cfg.min_reserved,
                     "feature buffer smaller than the N_e * M_b reservation");
        for (std::uint64_t s = 0; s < cfg.slot_count; ++s) standby_.push_mru(SlotId(s));
    }

    const BufferConfig& config() const { return cfg_; }
    std::uint64_t slot_count() const { return cfg_.slot_count; }
    std::uint64_t feature_bytes() const { return cfg_.slot_count * std::uint64_t(cfg_.row_bytes); }

    /// Metadata pass for one batch (Algorithm 1 lines 5-17). `nodes` must be
    /// deduplicated. Every node's ref_count is incremented exactly once.
    AcquirePlan acquire_for_batch(std::span<const NodeId> nodes) {
        std::lock_guard lk(mu_);
        AcquirePlan plan;
        plan.alias.assign(nodes.size(), kNoSlot);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            NodeId node = nodes[i];
            MappingEntry& e = mapping_.at(node);
            if (e.valid) {
                FD_CHECK_MSG(e.slot_index >= 0, "valid entry with no slot");
                if (e.ref_count == 0) standby_.remove(e.slot_index);
                plan.alias[i] = e.slot_index;
                ++stats_.hits;
            } else if (e.ref_count > 0) {
                // In flight on another extractor; alias may still be -1 if that
                // extractor has not bound a slot yet.
                plan.alias[i] = e.slot_index;
                plan.waits.push_back(std::uint32_t(i));
                ++stats_.waits;
            } else {
                plan.to_load.push_back(std::uint32_t(i));
                ++stats_.loads;
            }
            ++e.ref_count;
            record(RefEvent::Op::Acquire, node, e.ref_count);
            check_entry(node, e);
        }
        if (cfg_.validate_every_op) validate_locked();
        return plan;
    }

    /// Pops the LRU standby slot, invalidating whatever retired node still
    /// maps to it. Blocks while the list is empty; a timeout here means the
    /// S >= N_e * M_b sizing rule was broken.
    SlotId get_standby_slot() {
        std::unique_lock lk(mu_);
        if (!standby_cv_.wait_for(lk, cfg_.standby_timeout, [&] { return !standby_.empty(); }))
            throw StandbyTimeout("get_standby_slot: no slot became available within " +
                                 std::to_string(cfg_.standby_timeout.count()) +
                                 " ms; feature buffer is undersized");
        SlotId slot = standby_.pop_lru();
        NodeId prev = reverse_[std::size_t(slot)];
        if (prev != kNoNode) {
            MappingEntry& pe = mapping_.at(prev);
            FD_CHECK_MSG(pe.ref_count == 0, "standby slot with referenced node");
            FD_CHECK(pe.slot_index == slot);
            pe.valid = 0;
            pe.slot_index = kNoSlot;
            mapping_.compact(prev);
            reverse_[std::size_t(slot)] = kNoNode;
            ++stats_.evictions;
        }
        if (cfg_.validate_every_op) validate_locked();
        return slot;
    }

    /// Binds a freshly obtained slot to a node about to be loaded.
    void bind_slot(NodeId node, SlotId slot) {
        std::lock_guard lk(mu_);
        FD_CHECK(slot >= 0 && std::uint64_t(slot) < cfg_.slot_count);
        MappingEntry& e = mapping_.at(node);
        FD_CHECK_MSG(e.slot_index == kNoSlot, "node already has a slot");
        FD_CHECK_MSG(e.valid == 0, "bind of a valid node");
        FD_CHECK_MSG(reverse_[std::size_t(slot)] == kNoNode, "double bind of one slot");
        FD_CHECK_MSG(!standby_.contains(slot), "bind of a slot still on standby");
        e.slot_index = slot;
        reverse_[std::size_t(slot)] = node;
        claimed_.erase(node);
        check_entry(node, e);
        if (cfg_.validate_every_op) validate_locked();
    }

    /// Marks a node's slot payload as complete and wakes every waiter.
    void publish_valid(NodeId node) {
        {
            std::lock_guard lk(mu_);
            MappingEntry& e = mapping_.at(node);
            FD_CHECK_MSG(e.slot_index >= 0, "publish_valid on a node with no slot");
            FD_CHECK_MSG(e.valid == 0, "publish_valid twice");
            e.valid = 1;
            check_entry(node, e);
            if (cfg_.validate_every_op) validate_locked();
        }
        valid_cv_.notify_all();
    }

    /// Blocks until `node` becomes valid. Returns TakeOver when the loader
    /// failed and unwound; exactly one waiter gets TakeOver and must run the
    /// load path itself (the caller already holds a reference).
    WaitOutcome wait_for_valid(NodeId node, SlotId& slot_out,
                               std::chrono::milliseconds timeout) {
        std::unique_lock lk(mu_);
        auto deadline = SteadyClock::now() + timeout;
        while (true) {
            MappingEntry& e = mapping_.at(node);
            FD_CHECK_MSG(e.ref_count > 0, "waiting on a node without holding a reference");
            if (e.valid) {
                slot_out = e.slot_index;
                return WaitOutcome::Ready;
            }
            if (e.slot_index == kNoSlot && !claimed_.count(node)) {
                claimed_.insert(node);
                ++stats_.takeovers;
                return WaitOutcome::TakeOver;
            }
            if (valid_cv_.wait_until(lk, deadline) == std::cv_status::timeout)
                return WaitOutcome::Timeout;
        }
    }

    /// Decrements each node's ref_count; slots whose count reaches zero join
    /// the standby tail with mapping and valid bit left intact.
    void release_batch(std::span<const NodeId> nodes) {
        {
            std::lock_guard lk(mu_);
            for (NodeId node : nodes) {
                MappingEntry& e = mapping_.at(node);
                FD_CHECK_MSG(e.valid, "release of a node that was never published");
                release_ref_locked(node, e);
            }
            ++stats_.releases;
            if (cfg_.validate_every_op) validate_locked();
        }
        standby_cv_.notify_all();
    }

    // -- failure unwinding ----------------------------------------------------

    /// Reverts bind_slot for a node whose load failed before publish. The slot
    /// returns to the standby tail as free space and waiters are woken so one
    /// of them can take over.
    void unwind_bound(NodeId node) {
        {
            std::lock_guard lk(mu_);
            MappingEntry& e = mapping_.at(node);
            FD_CHECK_MSG(e.valid == 0, "unwind of a published node");
            FD_CHECK_MSG(e.slot_index >= 0, "unwind of an unbound node");
            SlotId slot = e.slot_index;
            FD_CHECK(reverse_[std::size_t(slot)] == node);
            reverse_[std::size_t(slot)] = kNoNode;
            e.slot_index = kNoSlot;
            claimed_.erase(node);
            standby_.push_mru(slot);
            if (cfg_.validate_every_op) validate_locked();
        }
        standby_cv_.notify_all();
        valid_cv_.notify_all();
    }

    /// Drops one reference without the trained-batch validity requirement;
    /// used when a failed batch unwinds refs it took in acquire_for_batch.
    void release_ref(NodeId node) {
        {
            std::lock_guard lk(mu_);
            MappingEntry& e = mapping_.at(node);
            release_ref_locked(node, e);
            if (cfg_.validate_every_op) validate_locked();
        }
        standby_cv_.notify_all();
    }

    /// Clears a takeover claim that will not be acted on (claimant's batch
    /// failed before it could bind).
    void abandon_claim(NodeId node) {
        {
            std::lock_guard lk(mu_);
            claimed_.erase(node);
        }
        valid_cv_.notify_all();
    }

    // -- introspection ----------------------------------------------------------

    BufferStats stats() const {
        std::lock_guard lk(mu_);
        BufferStats s = stats_;
        s.standby_len = standby_.size();
        return s;
    }

    MappingEntry mapping_entry(NodeId node) const {
        std::lock_guard lk(mu_);
        const MappingEntry* e = mapping_.find(node);
        return e ? *e : MappingEntry{};
    }

    NodeId reverse_mapping(SlotId slot) const {
        std::lock_guard lk(mu_);
        return reverse_[std::size_t(slot)];
    }

    bool standby_contains(SlotId slot) const {
        std::lock_guard lk(mu_);
        return standby_.contains(slot);
    }

    std::size_t standby_size() const {
        std::lock_guard lk(mu_);
        return standby_.size();
    }

    SlotId standby_mru() const {
        std::lock_guard lk(mu_);
        return standby_.peek_mru();
    }

    std::vector<RefEvent> drain_events() {
        std::lock_guard lk(mu_);
        return std::move(events_);
    }

    /// Full structural sweep of every invariant; cheap enough for tests, not
    /// meant for per-batch production use on large graphs.
    void validate() const {
        std::lock_guard lk(mu_);
        validate_locked();
    }

private:
    static constexpr NodeId kNoNode = ~NodeId(0);

    void release_ref_locked(NodeId node, MappingEntry& e) {
        FD_CHECK_MSG(e.ref_count > 0, "ref_count decrement below zero");
        --e.ref_count;
        record(RefEvent::Op::Release, node, e.ref_count);
        if (e.ref_count == 0) {
            if (e.valid) {
                standby_.push_mru(e.slot_index);
            } else {
                // No loader left: either never bound or already unwound.
                FD_CHECK_MSG(e.slot_index == kNoSlot, "unreferenced invalid node with a slot");
                claimed_.erase(node);
                mapping_.compact(node);
            }
        }
        check_entry(node, e);
    }

    void check_entry(NodeId node, const MappingEntry& e) const {
        if (e.slot_index == kNoSlot)
            FD_CHECK_MSG(e.valid == 0, "impossible state: no slot but valid, node " +
                                           std::to_string(node));
    }

    void record(RefEvent::Op op, NodeId node, std::uint32_t ref_after) {
        if (cfg_.record_events) events_.push_back({op, node, ref_after});
    }

    void validate_locked() const {
        std::vector<std::uint8_t> slot_seen(cfg_.slot_count, 0);
        mapping_.for_each_nonempty([&](NodeId node, const MappingEntry& e) {
            FD_CHECK_MSG(!(e.slot_index == kNoSlot && e.valid), "impossible state");
            if (e.slot_index != kNoSlot) {
                FD_CHECK(std::uint64_t(e.slot_index) < cfg_.slot_count);
                FD_CHECK_MSG(reverse_[std::size_t(e.slot_index)] == node,
                             "mapping/reverse mismatch for node " + std::to_string(node));
                FD_CHECK_MSG(!slot_seen[std::size_t(e.slot_index)],
                             "slot mapped by two nodes");
                slot_seen[std::size_t(e.slot_index)] = 1;
            }
        });
        for (std::uint64_t s = 0; s < cfg_.slot_count; ++s) {
            NodeId n = reverse_[s];
            if (n == kNoNode) continue;
            const MappingEntry* e = mapping_.find(n);
            FD_CHECK_MSG(e && e->slot_index == SlotId(s),
                         "reverse mapping points at node without matching slot");
        }
        standby_.for_each([&](SlotId slot) {
            NodeId n = reverse_[std::size_t(slot)];
            if (n == kNoNode) return;  // free slot
            const MappingEntry* e = mapping_.find(n);
            FD_CHECK_MSG(e && e->ref_count == 0,
                         "standby slot whose node still holds references");
        });
    }

    BufferConfig cfg_;
    mutable std::mutex mu_;
    std::condition_variable standby_cv_;
    std::condition_variable valid_cv_;
    MappingTable mapping_;
    StandbyList standby_;
    std::vector<NodeId> reverse_;
    std::unordered_set<NodeId> claimed_;
    BufferStats stats_;
    std::vector<RefEvent> events_;
};

}  // namespace featdrive::featbuf
