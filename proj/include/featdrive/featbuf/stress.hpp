#pragma once

/**
 * stress.hpp - Concurrency stress for the buffer manager: N extractor-like
 * threads push randomized overlapping node sets through the full
 * acquire / standby / bind / publish / wait / release protocol while a
 * dedicated releaser drains, with the manager's invariant sweep running after
 * every mutation. The recorded acquire/release event log is replayed
 * afterwards as an independent conservation oracle, and a per-node in-flight
 * counter outside the manager asserts the single-loader property.
 */

#include <atomic>
#include <thread>

#include "featdrive/featbuf/buffer_manager.hpp"
#include "featdrive/pipeline/bounded_queue.hpp"

namespace featdrive::featbuf {

struct StressParams {
    std::uint64_t num_nodes = 4096;
    std::uint64_t slot_count = 0;       // 0 = threads * max_batch_nodes
    std::uint64_t batches = 10000;
    std::uint32_t threads = 8;
    std::uint32_t max_batch_nodes = 64;
    std::uint64_t seed = 1;
    MappingKind mapping = MappingKind::Auto;
};

struct StressReport {
    std::uint64_t batches_run = 0;
    std::uint64_t acquires = 0;
    std::uint64_t releases = 0;
    BufferStats buffer;
    bool conservation_ok = false;
    bool single_loader_ok = false;
    bool final_state_ok = false;
};

/// Replays the manager's event log; every recorded post-op ref_count must
/// match an independent per-node counter.
inline bool replay_conservation(const std::vector<RefEvent>& events,
                                std::unordered_map<NodeId, std::int64_t>& refs_out) {
    for (const auto& e : events) {
        auto& r = refs_out[e.node];
        r += e.op == RefEvent::Op::Acquire ? 1 : -1;
        if (r < 0 || std::uint64_t(r) != e.ref_after) return false;
    }
    return true;
}

inline StressReport run_featbuf_stress(const StressParams& p) {
    StressParams params = p;
    if (params.slot_count == 0)
        params.slot_count = std::uint64_t(params.threads) * params.max_batch_nodes;
    FD_CHECK_MSG(params.slot_count >= std::uint64_t(params.threads) * params.max_batch_nodes,
                 "stress slots below the reservation bound");

    BufferConfig bc;
    bc.num_nodes = params.num_nodes;
    bc.slot_count = params.slot_count;
    bc.row_bytes = 4;  // metadata-only stress
    bc.min_reserved = std::uint64_t(params.threads) * params.max_batch_nodes;
    bc.mapping = params.mapping;
    bc.validate_every_op = true;
    bc.record_events = true;
    BufferManager buffer(bc);

    StressReport report;
    std::atomic<std::uint64_t> next_batch{0};
    std::atomic<std::uint64_t> acquires{0};
    std::atomic<bool> single_loader_violated{false};
    std::vector<std::atomic<std::int32_t>> loading(params.num_nodes);
    for (auto& l : loading) l.store(0);

    pipeline::BoundedQueue<std::vector<NodeId>> release_queue(params.threads * 2);

    auto extractor_thread = [&](std::uint32_t tid) {
        SplitMix rng(hash_combine(params.seed, tid));
        while (true) {
            std::uint64_t b = next_batch.fetch_add(1);
            if (b >= params.batches) return;
            // Random distinct node set, size 1..max_batch_nodes.
            std::size_t want = 1 + rng.next_below(params.max_batch_nodes);
            std::vector<NodeId> nodes;
            nodes.reserve(want);
            std::unordered_set<NodeId> seen;
            while (nodes.size() < want) {
                NodeId n = rng.next_below(params.num_nodes);
                if (seen.insert(n).second) nodes.push_back(n);
            }

            auto plan = buffer.acquire_for_batch(nodes);
            acquires.fetch_add(nodes.size());
            for (auto pos : plan.to_load) {
                NodeId node = nodes[pos];
                if (loading[node].fetch_add(1) != 0) single_loader_violated = true;
                SlotId slot = buffer.get_standby_slot();
                buffer.bind_slot(node, slot);
                plan.alias[pos] = slot;
                buffer.publish_valid(node);
                loading[node].fetch_sub(1);
            }
            for (auto pos : plan.waits) {
                NodeId node = nodes[pos];
                while (true) {
                    SlotId slot = kNoSlot;
                    auto outcome = buffer.wait_for_valid(node, slot,
                                                         std::chrono::milliseconds(30000));
                    if (outcome == WaitOutcome::Ready) {
                        plan.alias[pos] = slot;
                        break;
                    }
                    if (outcome == WaitOutcome::TakeOver) {
                        if (loading[node].fetch_add(1) != 0) single_loader_violated = true;
                        SlotId s = buffer.get_standby_slot();
                        buffer.bind_slot(node, s);
                        plan.alias[pos] = s;
                        buffer.publish_valid(node);
                        loading[node].fetch_sub(1);
                        break;
                    }
                    FD_CHECK_MSG(false, "stress waiter timed out");
                }
            }
            FD_CHECK(release_queue.push(std::move(nodes)));
        }
    };

    std::atomic<std::uint64_t> released_nodes{0};
    std::thread releaser([&] {
        while (auto nodes = release_queue.pop()) {
            buffer.release_batch(*nodes);
            released_nodes.fetch_add(nodes->size());
        }
    });

    std::vector<std::thread> threads;
    for (std::uint32_t t = 0; t < params.threads; ++t) threads.emplace_back(extractor_thread, t);
    for (auto& t : threads) t.join();
    release_queue.close();
    releaser.join();

    report.batches_run = params.batches;
    report.acquires = acquires.load();
    report.releases = released_nodes.load();
    report.buffer = buffer.stats();
    report.single_loader_ok = !single_loader_violated.load();

    // Quiescent state: every reference returned, structure fully consistent.
    buffer.validate();
    std::unordered_map<NodeId, std::int64_t> refs;
    report.conservation_ok = replay_conservation(buffer.drain_events(), refs);
    report.final_state_ok = report.acquires == report.releases;
    for (const auto& [node, r] : refs)
        if (r != 0) report.final_state_ok = false;
    return report;
}

}  // namespace featdrive::featbuf
