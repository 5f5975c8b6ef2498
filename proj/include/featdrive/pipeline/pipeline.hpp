#pragma once

/**
 * pipeline.hpp - Wires samplers, extractors, trainer, and releaser through
 * three bounded queues and runs epochs over a persistent feature buffer.
 *
 * A PipelineSession owns everything that outlives an epoch: the dataset
 * handles, one feature buffer + region per worker (segment), and the shared
 * staging arena. run_epoch spawns the stage threads, drains them with a
 * join-close cascade (samplers -> extracting queue -> extractors -> training
 * queue -> trainer -> releasing queue -> releaser), verifies exactly-once
 * batch conservation, and emits per-epoch stats.
 *
 * The sync-reference mode is the measurement baseline: one thread samples,
 * reads each node row with blocking I/O, and trains, with no buffer reuse.
 */

#include <barrier>
#include <thread>

#include "featdrive/extract/extractor.hpp"
#include "featdrive/graph/sampling.hpp"
#include "featdrive/graph/topology.hpp"
#include "featdrive/pipeline/bounded_queue.hpp"
#include "featdrive/pipeline/stats.hpp"

namespace featdrive::pipeline {

enum class RunMode { Async, SyncReference };

struct PipelineConfig {
    std::uint32_t num_samplers = 4;
    std::uint32_t num_extractors = 4;  // N_e per worker
    std::size_t extracting_queue_cap = 6;
    std::size_t training_queue_cap = 4;
    std::size_t releasing_queue_cap = 4;
    std::uint64_t batch_size = 1000;
    graph::Fanouts fanouts{{10, 10, 10}};
    std::uint64_t slots = 0;  // per-worker feature-buffer slots; 0 = N_e * M_b
    std::size_t io_depth = 64;
    RunMode mode = RunMode::Async;
    extract::Placement placement = extract::Placement::DeviceSim;
    std::uint32_t workers = 1;  // segments
    featbuf::MappingKind mapping = featbuf::MappingKind::Auto;
    storage::EngineKind engine = storage::EngineKind::Auto;
    std::chrono::nanoseconds read_latency{0};
    std::chrono::nanoseconds copy_latency{0};
    std::chrono::nanoseconds compute_delay{0};
    std::uint32_t extract_retries = 0;
    bool verify = false;
    std::chrono::milliseconds wait_timeout{60000};
    std::uint64_t staging_portion_slots = 0;  // per-worker quota; 0 = N_e * M_b
    bool buffer_validate_every_op = false;
    extract::TestHooks hooks;

    void validate() const {
        if (num_samplers < 1 || num_extractors < 1)
            throw std::invalid_argument("config: need at least one sampler and one extractor");
        if (extracting_queue_cap < 1 || training_queue_cap < 1 || releasing_queue_cap < 1)
            throw std::invalid_argument("config: queue capacities must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
        if (io_depth < 1) throw std::invalid_argument("config: io_depth must be >= 1");
        if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
        fanouts.validate();
    }

    /// Upper bound on unique nodes per batch: the fanout product series,
    /// clamped by the graph size (a deduplicated batch can never exceed it).
    std::uint64_t max_batch_nodes(std::uint64_t num_nodes) const {
        return std::min(fanouts.max_batch_nodes(batch_size), num_nodes);
    }
};

struct TrainTicket {
    graph::SampledBatch batch;
    extract::NodeAliasList alias;
};

struct ReleaseTicket {
    std::uint64_t batch_id = 0;
    std::vector<NodeId> nodes;
};

class PipelineError : public std::runtime_error {
public:
    PipelineError(std::string stage, const std::string& what)
        : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Raised by a worker that was shut down because a sibling worker failed.
class SiblingAbort : public PipelineError {
public:
    SiblingAbort() : PipelineError("pipeline", "aborted after a failure in another worker") {}
};

/// Reads every node row via its alias and folds an order-insensitive checksum
/// (sum of per-row hashes). With verify, each row is byte-compared against the
/// synchronous-read oracle.
inline std::uint64_t trainer_step(const TrainTicket& ticket, const featbuf::FeatureRegion& region,
                                  const storage::FeatureTable* verify_against = nullptr) {
    std::uint64_t checksum = 0;
    std::vector<std::byte> oracle_row;
    for (std::size_t i = 0; i < ticket.batch.nodes.size(); ++i) {
        SlotId slot = ticket.alias[i];
        FD_CHECK_MSG(slot >= 0, "trainer saw an unassigned alias");
        auto row = region.slot(slot);
        checksum += hash_bytes64(row);
        if (verify_against) {
            oracle_row.resize(row.size());
            verify_against->read_row_sync(ticket.batch.nodes[i], oracle_row);
            if (!std::equal(row.begin(), row.end(), oracle_row.begin()))
                throw PipelineError("train",
                                    "buffer contents for node " +
                                        std::to_string(ticket.batch.nodes[i]) +
                                        " do not match the synchronous read oracle (batch " +
                                        std::to_string(ticket.batch.batch_id) + ")");
        }
    }
    return checksum;
}

class PipelineSession {
public:
    PipelineSession(const std::string& dataset_dir, PipelineConfig cfg,
                    graph::TopologyOptions topo_opts = {})
        : cfg_(std::move(cfg)),
          table_((std::filesystem::path(dataset_dir) / storage::kFeatureFileName).string()),
          topo_(dataset_dir, topo_opts) {
        cfg_.validate();
        const auto& h = table_.header();
        mb_ = cfg_.max_batch_nodes(h.num_nodes);
        slots_per_worker_ = cfg_.slots ? cfg_.slots : std::uint64_t(cfg_.num_extractors) * mb_;
        const std::uint64_t reserved = std::uint64_t(cfg_.num_extractors) * mb_;
        if (slots_per_worker_ < reserved)
            throw std::invalid_argument("config: slots " + std::to_string(slots_per_worker_) +
                                        " below the deadlock reservation N_e*M_b = " +
                                        std::to_string(reserved));

        // Staging is shared across workers; quotas default to each worker's
        // own N_e * M_b share.
        std::uint64_t quota = cfg_.staging_portion_slots ? cfg_.staging_portion_slots : reserved;
        std::uint64_t total_staging_slots = std::uint64_t(cfg_.workers) * reserved;
        staging_ = std::make_unique<featbuf::StagingArena>(
            total_staging_slots, h.aligned_row_bytes(),
            std::vector<std::uint64_t>(cfg_.workers, quota), cfg_.wait_timeout);

        for (std::uint32_t w = 0; w < cfg_.workers; ++w) {
            auto ctx = std::make_unique<WorkerCtx>();
            featbuf::BufferConfig bc;
            bc.num_nodes = h.num_nodes;
            bc.slot_count = slots_per_worker_;
            bc.row_bytes = h.row_bytes;
            bc.min_reserved = reserved;
            bc.mapping = cfg_.mapping;
            bc.standby_timeout = cfg_.wait_timeout;
            bc.validate_every_op = cfg_.buffer_validate_every_op;
            ctx->buffer = std::make_unique<featbuf::BufferManager>(bc);
            ctx->region = std::make_unique<featbuf::FeatureRegion>(slots_per_worker_, h.row_bytes);
            workers_.push_back(std::move(ctx));
        }
    }

    const storage::FeatureTable& table() const { return table_; }
    const graph::Topology& topology() const { return topo_; }
    featbuf::BufferManager& buffer(std::uint32_t worker = 0) { return *workers_[worker]->buffer; }
    featbuf::StagingArena& staging() { return *staging_; }
    std::uint64_t max_batch_nodes() const { return mb_; }
    std::uint64_t slots_per_worker() const { return slots_per_worker_; }

    /// Single-worker epoch (the workers=1 degenerate case of the segment run).
    EpochStats run_epoch(std::span<const NodeId> train_ids, std::uint64_t epoch,
                         std::uint64_t seed) {
        auto all = run_epoch_multi(train_ids, epoch, seed);
        FD_CHECK(all.size() == cfg_.workers);
        return std::move(all.front());
    }

    /// Splits the shuffled training set into one contiguous segment per worker
    /// and runs every worker's four-stage pipeline concurrently. Topology and
    /// the staging arena are shared; feature buffers are per worker.
    std::vector<EpochStats> run_epoch_multi(std::span<const NodeId> train_ids,
                                            std::uint64_t epoch, std::uint64_t seed) {
        auto chunks = graph::partition_epoch({train_ids.begin(), train_ids.end()},
                                             cfg_.batch_size, hash_combine(seed, epoch));
        const std::uint64_t total = chunks.size();
        const std::uint32_t w_count = cfg_.workers;

        // Contiguous chunk ranges per worker, sizes differing by at most one.
        std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
        std::uint64_t base = total / w_count, rem = total % w_count, at = 0;
        std::uint64_t min_batches = base;
        for (std::uint32_t w = 0; w < w_count; ++w) {
            std::uint64_t len = base + (w < rem ? 1 : 0);
            ranges.emplace_back(at, at + len);
            at += len;
        }
        FD_CHECK(at == total);
        for (auto& [lo, hi] : ranges)
            FD_CHECK_MSG(hi - lo <= min_batches + 1, "segment imbalance exceeds one batch");

        // Stand-in for gradient synchronization: a no-op barrier at batch
        // boundaries all workers share.
        std::barrier<> gradient_barrier{std::ptrdiff_t(w_count)};

        std::vector<EpochStats> results(w_count);
        std::vector<std::exception_ptr> errors(w_count);
        std::mutex abort_mu;
        std::vector<WorkerRun*> live_runs;
        bool abort_all = false;

        auto run_worker = [&](std::uint32_t w) {
            WorkerRun run(*this, w, chunks, ranges[w], epoch, seed, min_batches,
                          w_count > 1 ? &gradient_barrier : nullptr);
            {
                std::lock_guard lk(abort_mu);
                live_runs.push_back(&run);
                if (abort_all) run.abort();
            }
            try {
                results[w] = run.execute();
            } catch (...) {
                errors[w] = std::current_exception();
                std::lock_guard lk(abort_mu);
                abort_all = true;
                for (auto* r : live_runs) r->abort();
            }
            std::lock_guard lk(abort_mu);
            live_runs.erase(std::find(live_runs.begin(), live_runs.end(), &run));
        };

        if (w_count == 1) {
            run_worker(0);
        } else {
            std::vector<std::thread> threads;
            for (std::uint32_t w = 0; w < w_count; ++w)
                threads.emplace_back(run_worker, w);
            for (auto& t : threads) t.join();
        }
        // Prefer the root cause over errors induced by the shared abort.
        std::exception_ptr fallback;
        for (auto& e : errors) {
            if (!e) continue;
            try {
                std::rethrow_exception(e);
            } catch (const SiblingAbort&) {
                fallback = e;
            } catch (...) {
                std::rethrow_exception(e);
            }
        }
        if (fallback) std::rethrow_exception(fallback);
        return results;
    }

    /// Blocking baseline: sample -> per-node synchronous reads -> train, one
    /// batch at a time, with no feature buffer involved.
    EpochStats run_sync_reference(std::span<const NodeId> train_ids, std::uint64_t epoch,
                                  std::uint64_t seed) {
        auto chunks = graph::partition_epoch({train_ids.begin(), train_ids.end()},
                                             cfg_.batch_size, hash_combine(seed, epoch));
        EpochStats stats;
        stats.epoch = epoch;
        stats.mode = "sync-reference";
        auto start = SteadyClock::now();
        std::vector<std::byte> row(table_.row_bytes());
        for (std::uint64_t b = 0; b < chunks.size(); ++b) {
            auto batch = graph::sample_khop(topo_, chunks[b], cfg_.fanouts,
                                            batch_seed(seed, epoch, b));
            batch.batch_id = b;
            batch.epoch = epoch;
            ++stats.batches_sampled;
            std::uint64_t checksum = 0;
            for (NodeId node : batch.nodes) {
                table_.read_row_sync(node, row);
                if (cfg_.read_latency.count() > 0) std::this_thread::sleep_for(cfg_.read_latency);
                checksum += hash_bytes64(std::span<const std::byte>(row));
                stats.bytes_useful += row.size();
                stats.bytes_requested += row.size();
                ++stats.read_requests;
                ++stats.nodes_loaded;
            }
            if (cfg_.compute_delay.count() > 0) std::this_thread::sleep_for(cfg_.compute_delay);
            stats.batch_records.push_back({b, chunks[b].size(), batch.nodes.size(), checksum, false});
            ++stats.batches_trained;
            ++stats.batches_released;
        }
        stats.wall_time_s = elapsed_seconds(start, SteadyClock::now());
        return stats;
    }

    static std::uint64_t batch_seed(std::uint64_t seed, std::uint64_t epoch,
                                    std::uint64_t global_batch) {
        return hash_combine(hash_combine(seed, epoch), global_batch);
    }

private:
    struct WorkerCtx {
        std::unique_ptr<featbuf::BufferManager> buffer;
        std::unique_ptr<featbuf::FeatureRegion> region;
    };

    /// One worker's four stages for one epoch.
    class WorkerRun {
    public:
        WorkerRun(PipelineSession& session, std::uint32_t worker,
                  const std::vector<std::vector<NodeId>>& chunks,
                  std::pair<std::uint64_t, std::uint64_t> range, std::uint64_t epoch,
                  std::uint64_t seed, std::uint64_t barrier_rounds, std::barrier<>* barrier)
            : s_(session), w_(worker), chunks_(chunks), lo_(range.first), hi_(range.second),
              epoch_(epoch), seed_(seed), barrier_rounds_(barrier_rounds), barrier_(barrier),
              extracting_(s_.cfg_.extracting_queue_cap),
              training_(s_.cfg_.training_queue_cap),
              releasing_(s_.cfg_.releasing_queue_cap) {}

        void abort() {
            extracting_.abort();
            training_.abort();
            releasing_.abort();
        }

        EpochStats execute() {
            auto start = SteadyClock::now();
            auto& cfg = s_.cfg_;
            auto& ctx = *s_.workers_[w_];
            auto buffer_before = ctx.buffer->stats();
            auto staging_before = s_.staging_->stats();

            // Extractors are rebuilt each epoch (fresh engines and counters);
            // the buffer they manage persists across epochs.
            std::vector<std::unique_ptr<featbuf::CopyEngine>> copy_engines;
            std::vector<std::unique_ptr<extract::Extractor>> extractors;
            for (std::uint32_t i = 0; i < cfg.num_extractors; ++i) {
                copy_engines.push_back(std::make_unique<featbuf::CopyEngine>(cfg.copy_latency));
                extract::ExtractorConfig ec;
                ec.worker = w_;
                ec.io_depth = cfg.io_depth;
                ec.engine = cfg.engine;
                ec.read_latency = cfg.read_latency;
                ec.placement = cfg.placement;
                ec.wait_timeout = cfg.wait_timeout;
                extract::ExtractorEnv env;
                env.table = &s_.table_;
                env.buffer = ctx.buffer.get();
                env.staging = s_.staging_.get();
                env.region = ctx.region.get();
                env.copies = copy_engines.back().get();
                env.counters = &counters_;
                env.hooks = &cfg.hooks;
                extractors.push_back(std::make_unique<extract::Extractor>(env, ec));
            }

            std::atomic<std::uint64_t> next_chunk{0};

            // Samplers.
            std::vector<std::thread> samplers;
            for (std::uint32_t i = 0; i < cfg.num_samplers; ++i)
                samplers.emplace_back([&] { sampler_loop(next_chunk); });

            // Extractors.
            std::vector<std::thread> extractor_threads;
            for (std::uint32_t i = 0; i < cfg.num_extractors; ++i)
                extractor_threads.emplace_back([&, i] { extractor_loop(*extractors[i]); });

            std::thread trainer([&] { trainer_loop(*ctx.region); });
            std::thread releaser([&] { releaser_loop(*ctx.buffer); });

            for (auto& t : samplers) t.join();
            extracting_.close();
            for (auto& t : extractor_threads) t.join();
            training_.close();
            trainer.join();
            releasing_.close();
            releaser.join();

            rethrow_first_error();
            if (extracting_.aborted()) throw SiblingAbort();

            EpochStats stats;
            stats.epoch = epoch_;
            stats.worker = w_;
            stats.mode = "async";
            stats.wall_time_s = elapsed_seconds(start, SteadyClock::now());
            stats.batches_sampled = sampled_.load();
            stats.batches_trained = trained_.load();
            stats.batches_failed = failed_.load();
            stats.batches_released = released_.load();
            stats.fold_counters(counters_);
            stats.batch_records = std::move(records_);

            auto buffer_after = ctx.buffer->stats();
            stats.buffer.hits = buffer_after.hits - buffer_before.hits;
            stats.buffer.loads = buffer_after.loads - buffer_before.loads;
            stats.buffer.waits = buffer_after.waits - buffer_before.waits;
            stats.buffer.evictions = buffer_after.evictions - buffer_before.evictions;
            stats.buffer.takeovers = buffer_after.takeovers - buffer_before.takeovers;
            stats.buffer.releases = buffer_after.releases - buffer_before.releases;
            stats.buffer.standby_len = buffer_after.standby_len;
            stats.feature_buffer_bytes = ctx.buffer->feature_bytes();
            stats.slot_count = ctx.buffer->slot_count();
            auto staging_after = s_.staging_->stats();
            stats.staging_bytes = staging_after.capacity_bytes;
            stats.staging_borrows = staging_after.borrow_events - staging_before.borrow_events;
            stats.staging_cross_hits = staging_after.cross_hits - staging_before.cross_hits;

            // Exactly-once conservation for the epoch.
            FD_CHECK_MSG(stats.batches_sampled == hi_ - lo_, "sampler dropped a batch");
            FD_CHECK_MSG(stats.batches_trained + stats.batches_failed == stats.batches_sampled,
                         "batch lost between sampling and training");
            FD_CHECK_MSG(stats.batches_released == stats.batches_trained,
                         "trained batch never released");
            return stats;
        }

    private:
        void sampler_loop(std::atomic<std::uint64_t>& next_chunk) {
            try {
                while (true) {
                    std::uint64_t local = next_chunk.fetch_add(1);
                    std::uint64_t global = lo_ + local;
                    if (global >= hi_) return;
                    graph::SampledBatch batch;
                    {
                        ScopedTimer busy(counters_.sample_busy);
                        batch = graph::sample_khop(s_.topo_, chunks_[global], s_.cfg_.fanouts,
                                                   batch_seed(seed_, epoch_, global));
                        batch.batch_id = global;
                        batch.epoch = epoch_;
                    }
                    ScopedTimer block(counters_.sample_block);
                    if (!extracting_.push(std::move(batch))) return;  // aborted
                    ++sampled_;
                }
            } catch (...) {
                fail("sample");
            }
        }

        void extractor_loop(extract::Extractor& extractor) {
            try {
                while (true) {
                    std::optional<graph::SampledBatch> batch;
                    {
                        ScopedTimer block(counters_.extract_block);
                        batch = extracting_.pop();
                    }
                    if (!batch) return;
                    extract::NodeAliasList alias;
                    bool ok = false;
                    for (std::uint32_t attempt = 0; attempt <= s_.cfg_.extract_retries; ++attempt) {
                        try {
                            ScopedTimer busy(counters_.extract_busy);
                            alias = extractor.extract_batch(*batch);
                            ok = true;
                            break;
                        } catch (const extract::BatchExtractError& e) {
                            FD_LOG_WARN("batch %llu extraction attempt %u failed: %s",
                                        (unsigned long long)batch->batch_id, attempt, e.what());
                        }
                    }
                    if (!ok) {
                        // Fail-batch-and-continue: record and move on.
                        ++failed_;
                        std::lock_guard lk(records_mu_);
                        records_.push_back({batch->batch_id, batch->seeds.size(),
                                            batch->nodes.size(), 0, true});
                        continue;
                    }
                    ScopedTimer block(counters_.extract_block);
                    if (!training_.push(TrainTicket{std::move(*batch), std::move(alias)})) return;
                }
            } catch (...) {
                fail("extract");
            }
        }

        void trainer_loop(const featbuf::FeatureRegion& region) {
            // Workers whose trainer stops early (fewer batches, failure, abort)
            // must leave the gradient barrier or the others wait forever.
            std::uint64_t barrier_done = 0;
            auto leave_barrier = [&] {
                if (barrier_ && barrier_done < barrier_rounds_) barrier_->arrive_and_drop();
            };
            try {
                while (true) {
                    std::optional<TrainTicket> ticket;
                    {
                        ScopedTimer block(counters_.train_block);
                        ticket = training_.pop();
                    }
                    if (!ticket) break;
                    std::uint64_t checksum;
                    {
                        ScopedTimer busy(counters_.train_busy);
                        checksum = trainer_step(*ticket, region,
                                                s_.cfg_.verify ? &s_.table_ : nullptr);
                        if (s_.cfg_.compute_delay.count() > 0)
                            std::this_thread::sleep_for(s_.cfg_.compute_delay);
                    }
                    {
                        std::lock_guard lk(records_mu_);
                        records_.push_back({ticket->batch.batch_id, ticket->batch.seeds.size(),
                                            ticket->batch.nodes.size(), checksum, false});
                    }
                    ++trained_;
                    if (barrier_ && barrier_done < barrier_rounds_) {
                        barrier_->arrive_and_wait();
                        ++barrier_done;
                    }
                    ReleaseTicket release{ticket->batch.batch_id, std::move(ticket->batch.nodes)};
                    ScopedTimer block(counters_.train_block);
                    if (!releasing_.push(std::move(release))) break;
                }
            } catch (...) {
                leave_barrier();
                fail("train");
                return;
            }
            leave_barrier();
        }

        void releaser_loop(featbuf::BufferManager& buffer) {
            try {
                while (true) {
                    std::optional<ReleaseTicket> ticket;
                    {
                        ScopedTimer block(counters_.release_block);
                        ticket = releasing_.pop();
                    }
                    if (!ticket) return;
                    if (s_.cfg_.hooks.before_release)
                        s_.cfg_.hooks.before_release(w_, ticket->batch_id);
                    ScopedTimer busy(counters_.release_busy);
                    buffer.release_batch(ticket->nodes);
                    ++released_;
                }
            } catch (...) {
                fail("release");
            }
        }

        void fail(const char* stage) {
            {
                std::lock_guard lk(error_mu_);
                if (!error_) {
                    error_stage_ = stage;
                    error_ = std::current_exception();
                }
            }
            abort();
        }

        void rethrow_first_error() {
            std::lock_guard lk(error_mu_);
            if (!error_) return;
            try {
                std::rethrow_exception(error_);
            } catch (const PipelineError&) {
                throw;
            } catch (const std::exception& e) {
                throw PipelineError(error_stage_, e.what());
            }
        }

        PipelineSession& s_;
        std::uint32_t w_;
        const std::vector<std::vector<NodeId>>& chunks_;
        std::uint64_t lo_, hi_;
        std::uint64_t epoch_, seed_;
        std::uint64_t barrier_rounds_;
        std::barrier<>* barrier_;

        BoundedQueue<graph::SampledBatch> extracting_;
        BoundedQueue<TrainTicket> training_;
        BoundedQueue<ReleaseTicket> releasing_;

        StageCounters counters_;
        std::atomic<std::uint64_t> sampled_{0}, trained_{0}, failed_{0}, released_{0};
        std::mutex records_mu_;
        std::vector<BatchRecord> records_;
        std::mutex error_mu_;
        std::exception_ptr error_;
        std::string error_stage_;
    };

    PipelineConfig cfg_;
    storage::FeatureTable table_;
    graph::Topology topo_;
    std::uint64_t mb_ = 0;
    std::uint64_t slots_per_worker_ = 0;
    std::unique_ptr<featbuf::StagingArena> staging_;
    std::vector<std::unique_ptr<WorkerCtx>> workers_;
};

}  // namespace featdrive::pipeline
