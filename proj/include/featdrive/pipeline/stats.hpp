#pragma once

/**
 * stats.hpp - Per-epoch accounting: stage timings, byte counters, buffer
 * behavior, and per-batch checksums. Serialized as one JSON document per
 * epoch; byte accounting must always satisfy useful + redundant = requested.
 */

#include <nlohmann/json.hpp>

#include <vector>

#include "featdrive/common.hpp"
#include "featdrive/featbuf/buffer_manager.hpp"
#include "featdrive/featbuf/staging.hpp"

namespace featdrive::pipeline {

struct BatchRecord {
    std::uint64_t batch_id = 0;
    std::uint64_t seed_count = 0;
    std::uint64_t node_count = 0;
    std::uint64_t checksum = 0;  // order-insensitive: sum of row hashes
    bool failed = false;
};

/// Cross-thread counters shared by the workers of one epoch.
struct StageCounters {
    DurationCounter sample_busy;
    DurationCounter sample_block;    // blocked pushing into the extracting queue
    DurationCounter extract_busy;
    DurationCounter extract_block;   // blocked on queue pop/push
    DurationCounter extract_io_wait; // waiting on read/copy completions
    DurationCounter train_busy;
    DurationCounter train_block;
    DurationCounter release_busy;
    DurationCounter release_block;

    std::atomic<std::uint64_t> bytes_useful{0};
    std::atomic<std::uint64_t> bytes_redundant{0};
    std::atomic<std::uint64_t> bytes_requested{0};
    std::atomic<std::uint64_t> read_requests{0};
    std::atomic<std::uint64_t> nodes_loaded{0};
    std::atomic<std::uint64_t> staging_hits{0};  // rows served from the shared arena
};

struct EpochStats {
    std::uint64_t epoch = 0;
    std::uint32_t worker = 0;
    std::string mode;  // "async" | "sync-reference"
    double wall_time_s = 0;
    std::uint64_t batches_sampled = 0;
    std::uint64_t batches_trained = 0;
    std::uint64_t batches_failed = 0;
    std::uint64_t batches_released = 0;

    double sample_busy_s = 0, sample_block_s = 0;
    double extract_busy_s = 0, extract_block_s = 0, extract_io_wait_s = 0;
    double train_busy_s = 0, train_block_s = 0;
    double release_busy_s = 0, release_block_s = 0;

    std::uint64_t bytes_useful = 0;
    std::uint64_t bytes_redundant = 0;
    std::uint64_t bytes_requested = 0;
    std::uint64_t read_requests = 0;
    std::uint64_t nodes_loaded = 0;
    std::uint64_t staging_hits = 0;

    featbuf::BufferStats buffer;
    std::uint64_t feature_buffer_bytes = 0;
    std::uint64_t staging_bytes = 0;
    std::uint64_t slot_count = 0;
    std::uint64_t staging_borrows = 0;
    std::uint64_t staging_cross_hits = 0;

    std::vector<BatchRecord> batch_records;

    void fold_counters(const StageCounters& c) {
        sample_busy_s = c.sample_busy.seconds();
        sample_block_s = c.sample_block.seconds();
        extract_busy_s = c.extract_busy.seconds();
        extract_block_s = c.extract_block.seconds();
        extract_io_wait_s = c.extract_io_wait.seconds();
        train_busy_s = c.train_busy.seconds();
        train_block_s = c.train_block.seconds();
        release_busy_s = c.release_busy.seconds();
        release_block_s = c.release_block.seconds();
        bytes_useful = c.bytes_useful.load();
        bytes_redundant = c.bytes_redundant.load();
        bytes_requested = c.bytes_requested.load();
        read_requests = c.read_requests.load();
        nodes_loaded = c.nodes_loaded.load();
        staging_hits = c.staging_hits.load();
    }

    nlohmann::json to_json() const {
        nlohmann::json checksums = nlohmann::json::array();
        for (const auto& b : batch_records) {
            checksums.push_back({{"batch", b.batch_id},
                                 {"seeds", b.seed_count},
                                 {"nodes", b.node_count},
                                 {"checksum", b.checksum},
                                 {"failed", b.failed}});
        }
        return {
            {"epoch", epoch},
            {"worker", worker},
            {"mode", mode},
            {"wall_time_s", wall_time_s},
            {"batches",
             {{"sampled", batches_sampled},
              {"trained", batches_trained},
              {"failed", batches_failed},
              {"released", batches_released}}},
            {"stage_time_s",
             {{"sample_busy", sample_busy_s},
              {"sample_block", sample_block_s},
              {"extract_busy", extract_busy_s},
              {"extract_block", extract_block_s},
              {"extract_io_wait", extract_io_wait_s},
              {"train_busy", train_busy_s},
              {"train_block", train_block_s},
              {"release_busy", release_busy_s},
              {"release_block", release_block_s}}},
            {"bytes",
             {{"useful", bytes_useful},
              {"redundant", bytes_redundant},
              {"requested", bytes_requested}}},
            {"reads", {{"requests", read_requests}, {"nodes_loaded", nodes_loaded},
                       {"staging_hits", staging_hits}}},
            {"buffer",
             {{"hits", buffer.hits},
              {"loads", buffer.loads},
              {"waits", buffer.waits},
              {"evictions", buffer.evictions},
              {"takeovers", buffer.takeovers},
              {"standby_len", buffer.standby_len}}},
            {"memory",
             {{"feature_buffer_bytes", feature_buffer_bytes},
              {"staging_bytes", staging_bytes},
              {"slot_count", slot_count},
              {"staging_borrows", staging_borrows},
              {"staging_cross_hits", staging_cross_hits}}},
            {"batch_checksums", checksums},
        };
    }
};

}  // namespace featdrive::pipeline
