/**
 * featdrive - command-line entry point.
 *
 * Subcommands: gen (synthetic dataset), run (pipeline epochs), iobench
 * (sync-vs-async random-read microbenchmark), stress (buffer-manager
 * invariant stress). Machine-readable JSON goes to stdout, human summaries to
 * stderr. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
 */

#include <CLI11.hpp>

#include <iostream>

#include "featdrive/featbuf/stress.hpp"
#include "featdrive/pipeline/pipeline.hpp"
#include "featdrive/storage/generator.hpp"
#include "featdrive/storage/io_bench.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

featdrive::graph::Fanouts parse_fanouts(const std::string& text) {
    featdrive::graph::Fanouts f;
    std::size_t at = 0;
    while (at < text.size()) {
        std::size_t comma = text.find(',', at);
        if (comma == std::string::npos) comma = text.size();
        f.per_layer.push_back(std::uint32_t(std::stoul(text.substr(at, comma - at))));
        at = comma + 1;
    }
    f.validate();
    return f;
}

struct RunOptions {
    std::string dataset;
    std::uint64_t batch_size = 1000;
    std::string fanout = "10,10,10";
    std::uint32_t samplers = 4;
    std::uint32_t extractors = 4;
    std::size_t eq_cap = 6;
    std::size_t tq_cap = 4;
    std::size_t rq_cap = 4;
    std::string slots = "auto";
    std::size_t io_depth = 64;
    std::string mode = "async";
    std::string placement = "device-sim";
    std::uint32_t epochs = 1;
    std::uint64_t seed = 0;
    std::uint64_t train_count = 10000;
    std::uint32_t workers = 1;
    std::uint64_t read_latency_us = 0;
    std::uint64_t compute_delay_ms = 0;
    std::uint64_t copy_latency_us = 0;
    std::uint32_t retries = 0;
    std::string mapping = "auto";
    bool verify = false;
};

nlohmann::json run_manifest(const RunOptions& o, const featdrive::pipeline::PipelineConfig& cfg,
                            std::uint64_t mb, std::uint64_t slots) {
    nlohmann::json dataset_manifest;
    try {
        dataset_manifest = featdrive::storage::load_manifest(o.dataset);
    } catch (const std::exception&) {
        dataset_manifest = nullptr;  // dataset may predate manifests
    }
    auto now = std::chrono::system_clock::now().time_since_epoch();
    return {
        {"build", "featdrive-1.0"},
        {"started_unix_ms", std::chrono::duration_cast<std::chrono::milliseconds>(now).count()},
        {"dataset_dir", o.dataset},
        {"dataset", dataset_manifest},
        {"config",
         {{"batch_size", cfg.batch_size},
          {"fanout", o.fanout},
          {"samplers", cfg.num_samplers},
          {"extractors", cfg.num_extractors},
          {"eq_cap", cfg.extracting_queue_cap},
          {"tq_cap", cfg.training_queue_cap},
          {"rq_cap", cfg.releasing_queue_cap},
          {"slots", slots},
          {"max_batch_nodes", mb},
          {"io_depth", cfg.io_depth},
          {"mode", o.mode},
          {"placement", o.placement},
          {"workers", cfg.workers},
          {"epochs", o.epochs},
          {"seed", o.seed},
          {"train_count", o.train_count},
          {"verify", cfg.verify},
          {"read_latency_us", o.read_latency_us},
          {"copy_latency_us", o.copy_latency_us},
          {"compute_delay_ms", o.compute_delay_ms},
          {"mapping", o.mapping}}},
    };
}

int cmd_run(const RunOptions& o) {
    using namespace featdrive;
    pipeline::PipelineConfig cfg;
    cfg.batch_size = o.batch_size;
    cfg.fanouts = parse_fanouts(o.fanout);
    cfg.num_samplers = o.samplers;
    cfg.num_extractors = o.extractors;
    cfg.extracting_queue_cap = o.eq_cap;
    cfg.training_queue_cap = o.tq_cap;
    cfg.releasing_queue_cap = o.rq_cap;
    cfg.io_depth = o.io_depth;
    cfg.workers = o.workers;
    cfg.verify = o.verify;
    cfg.extract_retries = o.retries;
    cfg.read_latency = std::chrono::microseconds(o.read_latency_us);
    cfg.copy_latency = std::chrono::microseconds(o.copy_latency_us);
    cfg.compute_delay = std::chrono::milliseconds(o.compute_delay_ms);

    if (o.mode == "async")
        cfg.mode = pipeline::RunMode::Async;
    else if (o.mode == "sync")
        cfg.mode = pipeline::RunMode::SyncReference;
    else
        throw std::invalid_argument("--mode must be async or sync");

    if (o.placement == "device-sim")
        cfg.placement = extract::Placement::DeviceSim;
    else if (o.placement == "host")
        cfg.placement = extract::Placement::HostOnly;
    else
        throw std::invalid_argument("--placement must be device-sim or host");

    if (o.mapping == "auto")
        cfg.mapping = featbuf::MappingKind::Auto;
    else if (o.mapping == "dense")
        cfg.mapping = featbuf::MappingKind::Dense;
    else if (o.mapping == "sparse")
        cfg.mapping = featbuf::MappingKind::Sparse;
    else
        throw std::invalid_argument("--mapping must be auto, dense, or sparse");

    if (o.slots != "auto") cfg.slots = std::stoull(o.slots);
    cfg.validate();

    pipeline::PipelineSession session(o.dataset, cfg);
    const std::uint64_t num_nodes = session.table().num_nodes();
    std::uint64_t train_count = std::min(o.train_count, num_nodes);
    std::vector<NodeId> train_ids(train_count);
    for (std::uint64_t i = 0; i < train_count; ++i) train_ids[i] = i;

    auto manifest = run_manifest(o, cfg, session.max_batch_nodes(), session.slots_per_worker());
    std::fprintf(stderr, "featdrive run: %llu nodes, %llu train ids, %u worker(s), mode %s\n",
                 (unsigned long long)num_nodes, (unsigned long long)train_count, cfg.workers,
                 o.mode.c_str());
    std::fprintf(stderr, "  M_b=%llu  slots/worker=%llu  feature buffer %.2f MB  staging %.2f MB\n",
                 (unsigned long long)session.max_batch_nodes(),
                 (unsigned long long)session.slots_per_worker(),
                 double(session.buffer(0).feature_bytes()) / 1e6,
                 double(session.staging().stats().capacity_bytes) / 1e6);

    std::uint64_t failed_batches = 0;
    for (std::uint32_t epoch = 0; epoch < o.epochs; ++epoch) {
        nlohmann::json out;
        if (cfg.mode == pipeline::RunMode::SyncReference) {
            auto stats = session.run_sync_reference(train_ids, epoch, o.seed);
            out = stats.to_json();
            failed_batches += stats.batches_failed;
            std::fprintf(stderr, "  epoch %u [sync]: %.3f s, %llu batches\n", epoch,
                         stats.wall_time_s, (unsigned long long)stats.batches_trained);
        } else if (cfg.workers == 1) {
            auto stats = session.run_epoch(train_ids, epoch, o.seed);
            out = stats.to_json();
            failed_batches += stats.batches_failed;
            std::fprintf(stderr,
                         "  epoch %u: %.3f s, %llu batches, hits %llu, loads %llu, "
                         "read %.2f MB (%.2f MB redundant)\n",
                         epoch, stats.wall_time_s, (unsigned long long)stats.batches_trained,
                         (unsigned long long)stats.buffer.hits,
                         (unsigned long long)stats.buffer.loads,
                         double(stats.bytes_requested) / 1e6,
                         double(stats.bytes_redundant) / 1e6);
        } else {
            auto all = session.run_epoch_multi(train_ids, epoch, o.seed);
            out["epoch"] = epoch;
            out["workers"] = nlohmann::json::array();
            double wall = 0;
            for (auto& stats : all) {
                failed_batches += stats.batches_failed;
                wall = std::max(wall, stats.wall_time_s);
                out["workers"].push_back(stats.to_json());
            }
            std::fprintf(stderr, "  epoch %u: %.3f s across %u workers\n", epoch, wall,
                         cfg.workers);
        }
        out["manifest"] = manifest;
        std::cout << out.dump() << "\n" << std::flush;
    }
    if (failed_batches > 0) {
        std::fprintf(stderr, "featdrive run: %llu batch(es) failed extraction\n",
                     (unsigned long long)failed_batches);
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_gen(std::uint64_t nodes, std::uint32_t dim, std::uint32_t avg_degree, std::uint64_t seed,
            const std::string& out_dir) {
    featdrive::storage::GeneratorParams params{nodes, dim, avg_degree, seed, out_dir};
    auto manifest = featdrive::storage::create_synthetic_dataset(params);
    std::cout << manifest.to_json().dump() << "\n";
    std::fprintf(stderr, "featdrive gen: %llu nodes (dim %u) -> %s, %llu edges, features %.2f MB\n",
                 (unsigned long long)nodes, dim, out_dir.c_str(),
                 (unsigned long long)manifest.num_edges, double(manifest.feature_bytes) / 1e6);
    return kExitOk;
}

int cmd_iobench(const std::string& file, const std::string& mode, std::uint64_t block,
                const std::string& io, double secs, std::uint64_t seed) {
    featdrive::storage::IoBenchParams p;
    p.file = file;
    p.block_bytes = block;
    p.seconds = secs;
    p.seed = seed;
    if (io == "direct")
        p.direct = true;
    else if (io == "buffered")
        p.direct = false;
    else
        throw std::invalid_argument("--io must be direct or buffered");
    auto colon = mode.find(':');
    if (colon == std::string::npos)
        throw std::invalid_argument("--mode must look like sync:N or async:D");
    std::string kind = mode.substr(0, colon);
    p.parallelism = std::uint32_t(std::stoul(mode.substr(colon + 1)));
    if (kind == "sync")
        p.mode = featdrive::storage::IoBenchParams::Mode::SyncThreads;
    else if (kind == "async")
        p.mode = featdrive::storage::IoBenchParams::Mode::AsyncDepth;
    else
        throw std::invalid_argument("--mode must be sync:N or async:D");

    auto result = featdrive::storage::run_io_bench(p);
    nlohmann::json out = result.to_json();
    out["mode"] = mode;
    out["io"] = io;
    out["block"] = block;
    std::cout << out.dump() << "\n";
    std::fprintf(stderr, "iobench %s/%s block %llu: %.2f MB/s, %.1f us mean latency, %llu reqs\n",
                 mode.c_str(), io.c_str(), (unsigned long long)block, result.bandwidth_mb_s,
                 result.mean_latency_us, (unsigned long long)result.requests);
    return kExitOk;
}

int cmd_stress(std::uint64_t nodes, std::uint64_t slots, std::uint64_t batches,
               std::uint32_t threads, std::uint32_t batch_nodes, std::uint64_t seed) {
    featdrive::featbuf::StressParams p;
    p.num_nodes = nodes;
    p.slot_count = slots;
    p.batches = batches;
    p.threads = threads;
    p.max_batch_nodes = batch_nodes;
    p.seed = seed;
    auto report = featdrive::featbuf::run_featbuf_stress(p);
    nlohmann::json out = {
        {"batches", report.batches_run},
        {"acquires", report.acquires},
        {"releases", report.releases},
        {"hits", report.buffer.hits},
        {"loads", report.buffer.loads},
        {"waits", report.buffer.waits},
        {"evictions", report.buffer.evictions},
        {"takeovers", report.buffer.takeovers},
        {"conservation_ok", report.conservation_ok},
        {"single_loader_ok", report.single_loader_ok},
        {"final_state_ok", report.final_state_ok},
    };
    std::cout << out.dump() << "\n";
    bool ok = report.conservation_ok && report.single_loader_ok && report.final_state_ok;
    std::fprintf(stderr, "stress: %llu batches, %s\n", (unsigned long long)report.batches_run,
                 ok ? "all invariants held" : "INVARIANT VIOLATION");
    return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"featdrive - out-of-core feature extraction pipeline"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    std::uint64_t g_nodes = 0, g_seed = 0;
    std::uint32_t g_dim = 0, g_avg = 0;
    std::string g_out;
    gen->add_option("--nodes", g_nodes, "node count")->required()->check(CLI::PositiveNumber);
    gen->add_option("--dim", g_dim, "feature dimension")->required()->check(CLI::PositiveNumber);
    gen->add_option("--avg-degree", g_avg, "average in-degree")->required();
    gen->add_option("--seed", g_seed, "generator seed")->default_val(0);
    gen->add_option("--out", g_out, "output directory")->required();

    // run
    auto* run = app.add_subcommand("run", "run pipeline epochs over a dataset");
    RunOptions r;
    run->add_option("--dataset", r.dataset, "dataset directory")->required();
    run->add_option("--batch-size", r.batch_size)->check(CLI::PositiveNumber);
    run->add_option("--fanout", r.fanout, "per-hop sample sizes, e.g. 10,10,10");
    run->add_option("--samplers", r.samplers)->check(CLI::PositiveNumber);
    run->add_option("--extractors", r.extractors)->check(CLI::PositiveNumber);
    run->add_option("--eq-cap", r.eq_cap, "extracting queue capacity")->check(CLI::PositiveNumber);
    run->add_option("--tq-cap", r.tq_cap, "training queue capacity")->check(CLI::PositiveNumber);
    run->add_option("--rq-cap", r.rq_cap, "releasing queue capacity")->check(CLI::PositiveNumber);
    run->add_option("--slots", r.slots, "feature-buffer slots per worker, or 'auto'");
    run->add_option("--io-depth", r.io_depth)->check(CLI::PositiveNumber);
    run->add_option("--mode", r.mode, "async | sync");
    run->add_option("--placement", r.placement, "device-sim | host");
    run->add_option("--epochs", r.epochs)->check(CLI::PositiveNumber);
    run->add_option("--seed", r.seed);
    run->add_option("--train-count", r.train_count, "training ids (node ids 0..n-1)");
    run->add_option("--workers", r.workers, "segment workers")->check(CLI::PositiveNumber);
    run->add_option("--read-latency-us", r.read_latency_us, "injected per-read latency");
    run->add_option("--copy-latency-us", r.copy_latency_us, "injected per-transfer latency");
    run->add_option("--compute-delay-ms", r.compute_delay_ms, "emulated training time per batch");
    run->add_option("--retries", r.retries, "extraction retries per batch");
    run->add_option("--mapping", r.mapping, "auto | dense | sparse");
    run->add_flag("--verify", r.verify, "byte-compare every buffered row against the sync oracle");

    // iobench
    auto* bench = app.add_subcommand("iobench", "random-read microbenchmark");
    std::string b_file, b_mode = "sync:1", b_io = "direct";
    std::uint64_t b_block = 512, b_seed = 0;
    double b_secs = 10.0;
    bench->add_option("--file", b_file, "file to read")->required();
    bench->add_option("--mode", b_mode, "sync:N (threads) or async:D (I/O depth)");
    bench->add_option("--block", b_block, "request size in bytes");
    bench->add_option("--io", b_io, "direct | buffered");
    bench->add_option("--secs", b_secs, "benchmark duration");
    bench->add_option("--seed", b_seed, "offset sequence seed");

    // stress
    auto* stress = app.add_subcommand("stress", "buffer-manager invariant stress");
    std::uint64_t s_nodes = 4096, s_slots = 0, s_batches = 10000, s_seed = 1;
    std::uint32_t s_threads = 8, s_batch_nodes = 64;
    stress->add_option("--nodes", s_nodes);
    stress->add_option("--slots", s_slots, "0 = threads * batch-nodes");
    stress->add_option("--batches", s_batches);
    stress->add_option("--threads", s_threads)->check(CLI::PositiveNumber);
    stress->add_option("--batch-nodes", s_batch_nodes)->check(CLI::PositiveNumber);
    stress->add_option("--seed", s_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen) return cmd_gen(g_nodes, g_dim, g_avg, g_seed, g_out);
        if (*run) return cmd_run(r);
        if (*bench) return cmd_iobench(b_file, b_mode, b_block, b_io, b_secs, b_seed);
        if (*stress) return cmd_stress(s_nodes, s_slots, s_batches, s_threads, s_batch_nodes, s_seed);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "featdrive: configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "featdrive: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitConfig;
}
