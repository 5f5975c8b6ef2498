#pragma once

/**
 * extractor.hpp - Two-phase asynchronous extraction of one mini-batch.
 *
 * Phase 1 loads feature rows from disk into the staging arena (or, in host
 * placement, straight into sector-exact buffer slots); phase 2 transfers each
 * row to its feature-buffer slot the moment its load completes. Neither phase
 * waits for the other to finish submitting. Nodes another extractor is
 * already loading go on a wait list and are resolved last.
 *
 * Metadata order per to-load node follows the mapping-table protocol exactly:
 * standby pop -> bind -> (load, transfer) -> publish. Slots are bound in
 * batch-list order; only the disk requests are grouped by sorted node id so
 * neighboring rows ride one sector-aligned extent (joint extraction, capped so
 * redundant bytes per request stay under two sectors).
 *
 * On any unrecoverable I/O error the ticket unwinds: fresh binds are reverted,
 * every reference taken in acquire is dropped, and waiters on our unpublished
 * nodes are woken so one of them takes the load over.
 */

#include <algorithm>
#include <functional>
#include <unordered_map>

#include "featdrive/featbuf/buffer_manager.hpp"
#include "featdrive/featbuf/device_region.hpp"
#include "featdrive/featbuf/staging.hpp"
#include "featdrive/graph/sampling.hpp"
#include "featdrive/pipeline/stats.hpp"
#include "featdrive/storage/async_io.hpp"
#include "featdrive/storage/feature_file.hpp"

namespace featdrive::extract {

enum class Placement { DeviceSim, HostOnly };

/// Instrumentation seams for tests; all optional.
struct TestHooks {
    std::function<void(std::uint32_t worker, NodeId lo, NodeId hi)> on_disk_read;
    std::function<bool(NodeId)> inject_read_failure;
    std::function<void(std::uint32_t worker, std::uint64_t batch_id)> before_batch;
    std::function<void(std::uint32_t worker, std::uint64_t batch_id)> before_staging_free;
    std::function<void(std::uint32_t worker, std::uint64_t batch_id)> before_release;
};

struct ExtractorConfig {
    std::uint32_t worker = 0;
    std::size_t io_depth = 64;
    storage::EngineKind engine = storage::EngineKind::Auto;
    std::chrono::nanoseconds read_latency{0};
    Placement placement = Placement::DeviceSim;
    std::chrono::milliseconds wait_timeout{60000};
    std::uint64_t max_extent_bytes = 1u << 20;
};

struct ExtractorEnv {
    storage::FeatureTable* table = nullptr;
    featbuf::BufferManager* buffer = nullptr;
    featbuf::StagingArena* staging = nullptr;
    featbuf::FeatureRegion* region = nullptr;
    featbuf::CopyEngine* copies = nullptr;  // required in DeviceSim placement
    pipeline::StageCounters* counters = nullptr;
    const TestHooks* hooks = nullptr;
};

class BatchExtractError : public std::runtime_error {
public:
    explicit BatchExtractError(const std::string& what) : std::runtime_error(what) {}
};

using NodeAliasList = std::vector<SlotId>;

class Extractor {
public:
    Extractor(ExtractorEnv env, ExtractorConfig cfg)
        : env_(env), cfg_(cfg),
          engine_(storage::make_async_engine(cfg.io_depth, cfg.engine, cfg.read_latency)),
          scratch_(env.table->header().aligned_row_bytes() + kSectorBytes) {
        FD_CHECK(env_.table && env_.buffer && env_.region && env_.counters);
        if (cfg_.placement == Placement::DeviceSim) FD_CHECK(env_.copies != nullptr);
        row_bytes_ = env_.table->header().row_bytes;
    }

    /// Runs the full extraction for one batch; returns the node alias list.
    /// Throws BatchExtractError after rolling the metadata back.
    NodeAliasList extract_batch(const graph::SampledBatch& batch) {
        if (env_.hooks && env_.hooks->before_batch)
            env_.hooks->before_batch(cfg_.worker, batch.batch_id);

        Ticket t;
        t.batch = &batch;
        t.phase.assign(batch.nodes.size(), Phase::Untouched);
        t.plan = env_.buffer->acquire_for_batch(batch.nodes);
        for (auto pos : t.plan.to_load) t.phase[pos] = Phase::LoadPlanned;
        for (auto pos : t.plan.waits) t.phase[pos] = Phase::Waiting;
        for (std::size_t i = 0; i < batch.nodes.size(); ++i)
            if (t.phase[i] == Phase::Untouched) t.phase[i] = Phase::Hit;

        try {
            run_ticket(t);
        } catch (...) {
            rollback(t);
            std::rethrow_exception(std::current_exception());
        }

        if (env_.hooks && env_.hooks->before_staging_free)
            env_.hooks->before_staging_free(cfg_.worker, batch.batch_id);
        release_staging(t);
        for (SlotId a : t.plan.alias) FD_CHECK_MSG(a >= 0, "alias unassigned after extraction");
        return std::move(t.plan.alias);
    }

private:
    enum class Phase : std::uint8_t {
        Untouched,
        Hit,          // alias came straight from the buffer
        Waiting,      // another extractor is loading; unresolved
        LoadPlanned,  // ours to load, no slot yet
        Bound,        // slot bound, payload not yet published
        Published,    // publish_valid done (ref still held by this batch)
        Resolved,     // wait resolved via another extractor's publish
    };

    struct Group {
        storage::ReadExtent extent;
        std::vector<std::uint32_t> positions;  // batch positions, node-ascending
        std::int64_t run_index = -1;           // staging run; -1 = in-place host read
        bool loaded = false;
    };

    struct Ticket {
        const graph::SampledBatch* batch = nullptr;
        featbuf::AcquirePlan plan;
        std::vector<Phase> phase;
        std::vector<Group> groups;
        std::vector<featbuf::StagingArena::Run> runs;
        std::vector<std::optional<featbuf::StagingArena::PinnedRow>> held_pins;
    };

    void run_ticket(Ticket& t) {
        const auto& nodes = t.batch->nodes;

        // Bind a slot for every to-load node, in batch-list order.
        for (auto pos : t.plan.to_load) {
            SlotId slot = env_.buffer->get_standby_slot();
            env_.buffer->bind_slot(nodes[pos], slot);
            t.plan.alias[pos] = slot;
            t.phase[pos] = Phase::Bound;
        }

        // Rows already staged by another worker skip the disk entirely.
        std::vector<std::uint32_t> disk_positions;
        std::unordered_map<std::uint64_t, std::uint32_t> copies_in_flight;  // copy id -> pos
        std::uint64_t next_copy_id = 0;
        for (auto pos : t.plan.to_load) {
            std::optional<featbuf::StagingArena::PinnedRow> pinned;
            if (env_.staging) pinned = env_.staging->pin(nodes[pos], cfg_.worker);
            if (!pinned) {
                disk_positions.push_back(pos);
                continue;
            }
            env_.counters->staging_hits.fetch_add(1, std::memory_order_relaxed);
            if (cfg_.placement == Placement::DeviceSim) {
                std::uint64_t id = next_copy_id++;
                env_.copies->submit(id, pinned->data(), env_.region->slot(t.plan.alias[pos]));
                t.held_pins.emplace_back(std::move(pinned));
                copies_in_flight.emplace(id, pos);
            } else {
                auto dst = env_.region->slot(t.plan.alias[pos]);
                std::memcpy(dst.data(), pinned->data().data(), row_bytes_);
                publish(t, pos);
            }
        }

        build_groups(t, disk_positions);
        allocate_staging(t);

        // Pump both phases: submit reads up to io_depth, start each node's
        // transfer the moment its extent lands, publish on transfer completion.
        std::size_t next_group = 0;
        std::unordered_map<std::uint64_t, std::uint32_t> reads_in_flight;  // req id -> group
        std::vector<storage::IoCompletion> read_done;
        std::vector<std::uint64_t> copy_done;
        const std::size_t window = std::min(cfg_.io_depth, engine_->capacity());

        auto submit_some = [&] {
            while (next_group < t.groups.size() && engine_->in_flight() < window) {
                submit_group(t, std::uint32_t(next_group));
                reads_in_flight.emplace(next_group, std::uint32_t(next_group));
                ++next_group;
            }
        };

        while (true) {
            submit_some();
            bool progressed = false;

            read_done.clear();
            engine_->poll(read_done, false);
            for (const auto& c : read_done) {
                auto it = reads_in_flight.find(c.id);
                FD_CHECK(it != reads_in_flight.end());
                Group& g = t.groups[it->second];
                reads_in_flight.erase(it);
                on_group_loaded(t, g, c, copies_in_flight, next_copy_id);
                progressed = true;
            }

            copy_done.clear();
            if (env_.copies) env_.copies->poll(copy_done, false);
            for (auto id : copy_done) {
                auto it = copies_in_flight.find(id);
                FD_CHECK(it != copies_in_flight.end());
                publish(t, it->second);
                copies_in_flight.erase(it);
                progressed = true;
            }

            bool reads_left = !reads_in_flight.empty() || next_group < t.groups.size();
            if (!reads_left && copies_in_flight.empty()) break;
            if (progressed) continue;

            ScopedTimer wait_timer(env_.counters->extract_io_wait);
            if (!reads_in_flight.empty()) {
                read_done.clear();
                engine_->poll(read_done, true);
                for (const auto& c : read_done) {
                    auto it = reads_in_flight.find(c.id);
                    FD_CHECK(it != reads_in_flight.end());
                    Group& g = t.groups[it->second];
                    reads_in_flight.erase(it);
                    on_group_loaded(t, g, c, copies_in_flight, next_copy_id);
                }
            } else if (env_.copies && !copies_in_flight.empty()) {
                copy_done.clear();
                env_.copies->poll(copy_done, true);
                for (auto id : copy_done) {
                    auto it = copies_in_flight.find(id);
                    FD_CHECK(it != copies_in_flight.end());
                    publish(t, it->second);
                    copies_in_flight.erase(it);
                }
            }
        }
        t.held_pins.clear();

        resolve_waits(t);
    }

    // -- phase 1 ----------------------------------------------------------------

    /// Groups sorted to-load rows into joint extents: extend while the next row
    /// starts in the same or adjacent sector AND total redundant bytes stay
    /// under two sectors AND the extent stays below the size cap.
    void build_groups(Ticket& t, std::vector<std::uint32_t>& disk_positions) {
        const auto& nodes = t.batch->nodes;
        const auto& h = env_.table->header();
        std::sort(disk_positions.begin(), disk_positions.end(),
                  [&](std::uint32_t a, std::uint32_t b) { return nodes[a] < nodes[b]; });

        for (auto pos : disk_positions) {
            NodeId node = nodes[pos];
            bool merged = false;
            if (!t.groups.empty()) {
                Group& g = t.groups.back();
                NodeId last = nodes[g.positions.back()];
                std::uint64_t last_end_sector = (h.row_end(last) - 1) / kSectorBytes;
                std::uint64_t this_start_sector = h.row_start(node) / kSectorBytes;
                if (this_start_sector <= last_end_sector + 1) {
                    auto candidate = storage::compute_read_extent(h, g.extent.node_lo, node);
                    std::uint64_t useful = (g.positions.size() + 1) * std::uint64_t(row_bytes_);
                    if (candidate.byte_len <= cfg_.max_extent_bytes &&
                        candidate.byte_len - useful < 2 * kSectorBytes) {
                        g.extent = candidate;
                        g.positions.push_back(pos);
                        merged = true;
                    }
                }
            }
            if (!merged) {
                Group g;
                g.extent = storage::compute_read_extent(h, node, node);
                g.positions.push_back(pos);
                t.groups.push_back(std::move(g));
            }
        }
    }

    void allocate_staging(Ticket& t) {
        std::vector<std::uint64_t> run_slots;
        std::vector<std::uint32_t> staged_groups;
        const std::uint64_t stage_slot = env_.staging ? env_.staging->slot_bytes() : 0;
        for (std::uint32_t gi = 0; gi < t.groups.size(); ++gi) {
            Group& g = t.groups[gi];
            if (in_place_eligible(g)) continue;  // host placement reads into the slot itself
            FD_CHECK_MSG(env_.staging, "staging arena required for this extent");
            run_slots.push_back(align_up(g.extent.byte_len, stage_slot) / stage_slot);
            staged_groups.push_back(gi);
        }
        if (run_slots.empty()) return;
        t.runs = env_.staging->allocate_batch(cfg_.worker, run_slots);
        for (std::size_t i = 0; i < staged_groups.size(); ++i)
            t.groups[staged_groups[i]].run_index = std::int64_t(i);
    }

    bool in_place_eligible(const Group& g) const {
        return cfg_.placement == Placement::HostOnly && g.positions.size() == 1 &&
               row_bytes_ % kSectorBytes == 0;
    }

    void submit_group(Ticket& t, std::uint32_t group_index) {
        Group& g = t.groups[group_index];
        storage::IoRequest req;
        req.id = group_index;
        req.fd = env_.table->extent_fd();
        req.offset = g.extent.byte_offset;
        req.len = g.extent.byte_len;
        if (g.run_index >= 0) {
            auto run_bytes = env_.staging->run_data(t.runs[std::size_t(g.run_index)]);
            FD_CHECK(run_bytes.size() >= g.extent.byte_len);
            req.dest = run_bytes.data();
        } else {
            // In-place host read: the slot itself is the 512-aligned destination.
            req.dest = env_.region->slot(t.plan.alias[g.positions.front()]).data();
        }
        if (env_.hooks && env_.hooks->on_disk_read)
            env_.hooks->on_disk_read(cfg_.worker, g.extent.node_lo, g.extent.node_hi);
        engine_->submit(req);

        std::uint64_t useful = g.positions.size() * std::uint64_t(row_bytes_);
        env_.counters->read_requests.fetch_add(1, std::memory_order_relaxed);
        env_.counters->bytes_requested.fetch_add(g.extent.byte_len, std::memory_order_relaxed);
        env_.counters->bytes_useful.fetch_add(useful, std::memory_order_relaxed);
        env_.counters->bytes_redundant.fetch_add(g.extent.byte_len - useful,
                                                 std::memory_order_relaxed);
        env_.counters->nodes_loaded.fetch_add(g.positions.size(), std::memory_order_relaxed);
    }

    // -- phase 2 ----------------------------------------------------------------

    void on_group_loaded(Ticket& t, Group& g, const storage::IoCompletion& c,
                         std::unordered_map<std::uint64_t, std::uint32_t>& copies_in_flight,
                         std::uint64_t& next_copy_id) {
        const auto& nodes = t.batch->nodes;
        const auto& h = env_.table->header();
        if (c.status == storage::IoStatus::OsError)
            throw BatchExtractError("read of nodes [" + std::to_string(g.extent.node_lo) + ", " +
                                    std::to_string(g.extent.node_hi) + "] failed: " +
                                    std::generic_category().message(c.os_error));
        // A read may come back short at EOF; it only matters if the covered
        // rows were cut off.
        std::uint64_t needed = h.row_end(g.extent.node_hi) - g.extent.byte_offset;
        if (c.bytes < needed)
            throw BatchExtractError("short read: got " + std::to_string(c.bytes) + " of " +
                                    std::to_string(needed) + " bytes for nodes [" +
                                    std::to_string(g.extent.node_lo) + ", " +
                                    std::to_string(g.extent.node_hi) + "]");
        if (env_.hooks && env_.hooks->inject_read_failure)
            for (auto pos : g.positions)
                if (env_.hooks->inject_read_failure(nodes[pos]))
                    throw BatchExtractError("injected read failure for node " +
                                            std::to_string(nodes[pos]));
        g.loaded = true;

        if (g.run_index < 0) {
            // In-place host read: payload is already in the slot.
            publish(t, g.positions.front());
            return;
        }

        auto run_bytes = env_.staging->run_data(t.runs[std::size_t(g.run_index)]);
        for (auto pos : g.positions) {
            NodeId node = nodes[pos];
            std::uint64_t at = h.row_start(node) - g.extent.byte_offset;  // pad stripping
            auto row = std::span<const std::byte>(run_bytes).subspan(at, row_bytes_);
            env_.staging->register_row(t.runs[std::size_t(g.run_index)], cfg_.worker, node, row);
            if (cfg_.placement == Placement::DeviceSim) {
                std::uint64_t id = next_copy_id++;
                env_.copies->submit(id, row, env_.region->slot(t.plan.alias[pos]));
                copies_in_flight.emplace(id, pos);
            } else {
                auto dst = env_.region->slot(t.plan.alias[pos]);
                std::memcpy(dst.data(), row.data(), row_bytes_);
                publish(t, pos);
            }
        }
    }

    void publish(Ticket& t, std::uint32_t pos) {
        env_.buffer->publish_valid(t.batch->nodes[pos]);
        t.phase[pos] = Phase::Published;
    }

    // -- wait resolution ----------------------------------------------------------

    void resolve_waits(Ticket& t) {
        const auto& nodes = t.batch->nodes;
        for (auto pos : t.plan.waits) {
            while (t.phase[pos] == Phase::Waiting) {
                SlotId slot = kNoSlot;
                auto outcome = env_.buffer->wait_for_valid(nodes[pos], slot, cfg_.wait_timeout);
                switch (outcome) {
                    case featbuf::WaitOutcome::Ready:
                        t.plan.alias[pos] = slot;
                        t.phase[pos] = Phase::Resolved;
                        break;
                    case featbuf::WaitOutcome::TakeOver:
                        take_over_load(t, pos);
                        break;
                    case featbuf::WaitOutcome::Timeout:
                        throw BatchExtractError("timed out waiting for node " +
                                                std::to_string(nodes[pos]) +
                                                " to become valid");
                }
            }
        }
    }

    /// The original loader failed; this extractor re-runs the load for one
    /// node through its private scratch buffer.
    void take_over_load(Ticket& t, std::uint32_t pos) {
        NodeId node = t.batch->nodes[pos];
        SlotId slot = kNoSlot;
        try {
            slot = env_.buffer->get_standby_slot();
        } catch (...) {
            env_.buffer->abandon_claim(node);
            throw;
        }
        env_.buffer->bind_slot(node, slot);
        t.plan.alias[pos] = slot;
        t.phase[pos] = Phase::Bound;

        const auto& h = env_.table->header();
        auto extent = storage::compute_read_extent(h, node, node);
        storage::IoRequest req;
        req.id = ~std::uint64_t(0);
        req.fd = env_.table->extent_fd();
        req.offset = extent.byte_offset;
        req.len = extent.byte_len;
        req.dest = scratch_.data();
        if (env_.hooks && env_.hooks->on_disk_read)
            env_.hooks->on_disk_read(cfg_.worker, node, node);
        engine_->submit(req);
        env_.counters->read_requests.fetch_add(1, std::memory_order_relaxed);
        env_.counters->bytes_requested.fetch_add(extent.byte_len, std::memory_order_relaxed);
        env_.counters->bytes_useful.fetch_add(row_bytes_, std::memory_order_relaxed);
        env_.counters->bytes_redundant.fetch_add(extent.byte_len - row_bytes_,
                                                 std::memory_order_relaxed);
        env_.counters->nodes_loaded.fetch_add(1, std::memory_order_relaxed);

        std::vector<storage::IoCompletion> done;
        while (done.empty()) {
            ScopedTimer wait_timer(env_.counters->extract_io_wait);
            engine_->poll(done, true);
        }
        FD_CHECK(done.size() == 1 && done[0].id == req.id);
        std::uint64_t needed = h.row_end(node) - extent.byte_offset;
        if (done[0].status != storage::IoStatus::Ok || done[0].bytes < needed)
            throw BatchExtractError("takeover read for node " + std::to_string(node) + " failed");

        auto row = scratch_.span().subspan(extent.lead_pad, row_bytes_);
        auto dst = env_.region->slot(slot);
        std::memcpy(dst.data(), row.data(), row_bytes_);
        publish(t, pos);
    }

    // -- failure handling ----------------------------------------------------------

    void rollback(Ticket& t) {
        // Stop the kernel writing into staging before tearing anything down.
        try {
            std::vector<storage::IoCompletion> sink;
            while (engine_->in_flight() > 0) {
                sink.clear();
                if (engine_->poll(sink, true) == 0) break;
            }
            if (env_.copies) {
                std::vector<std::uint64_t> csink;
                while (env_.copies->in_flight() > 0) {
                    csink.clear();
                    if (env_.copies->poll(csink, true) == 0) break;
                }
            }
        } catch (...) {
            FD_LOG_ERROR("rollback: failed to drain in-flight I/O");
        }
        t.held_pins.clear();

        const auto& nodes = t.batch->nodes;
        for (std::size_t pos = 0; pos < nodes.size(); ++pos) {
            switch (t.phase[pos]) {
                case Phase::Bound:
                    env_.buffer->unwind_bound(nodes[pos]);
                    env_.buffer->release_ref(nodes[pos]);
                    break;
                case Phase::Hit:
                case Phase::Waiting:
                case Phase::Resolved:
                case Phase::Published:
                    env_.buffer->release_ref(nodes[pos]);
                    break;
                case Phase::LoadPlanned:
                    // Acquired a ref but never bound (failure hit earlier).
                    env_.buffer->release_ref(nodes[pos]);
                    break;
                case Phase::Untouched:
                    break;
            }
        }
        release_staging(t);
    }

    void release_staging(Ticket& t) {
        for (const auto& run : t.runs) env_.staging->free_run(run);
        t.runs.clear();
    }

    ExtractorEnv env_;
    ExtractorConfig cfg_;
    std::unique_ptr<storage::AsyncIoEngine> engine_;
    AlignedBuffer scratch_;
    std::uint32_t row_bytes_ = 0;
};

}  // namespace featdrive::extract
