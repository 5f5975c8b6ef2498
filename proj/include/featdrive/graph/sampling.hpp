#pragma once

/**
 * sampling.hpp - Epoch partitioning and uniform k-hop in-neighbor sampling.
 *
 * Sampling is fully deterministic: the caller derives one rng seed per batch
 * (hash of global seed, epoch, batch id), so execution order can never change
 * what a batch contains.
 */

#include <algorithm>
#include <random>
#include <unordered_map>
#include <vector>

#include "featdrive/graph/topology.hpp"

namespace featdrive::graph {

/// Per-layer sample sizes; length = number of hops.
struct Fanouts {
    std::vector<std::uint32_t> per_layer;

    void validate() const {
        if (per_layer.empty()) throw std::invalid_argument("fanouts: need at least one layer");
        for (auto f : per_layer)
            if (f < 1) throw std::invalid_argument("fanouts: every entry must be >= 1");
    }

    /// Upper bound on unique nodes in a batch of `batch_size` seeds:
    /// b * (1 + f1 + f1*f2 + ... + prod(fi)).
    std::uint64_t max_batch_nodes(std::uint64_t batch_size) const {
        std::uint64_t total = 1;
        std::uint64_t layer = 1;
        for (auto f : per_layer) {
            layer *= f;
            total += layer;
        }
        return batch_size * total;
    }
};

struct LocalEdge {
    std::uint32_t src = 0;  // local index of the in-neighbor
    std::uint32_t dst = 0;  // local index of the node it feeds
};

struct SampledBatch {
    std::uint64_t batch_id = 0;
    std::uint64_t epoch = 0;
    std::vector<NodeId> seeds;
    std::vector<NodeId> nodes;  // deduplicated, seeds first
    std::vector<LocalEdge> edges;
};

/// Deterministic shuffle + chunking; the union of chunks is train_ids exactly.
inline std::vector<std::vector<NodeId>> partition_epoch(std::vector<NodeId> train_ids,
                                                        std::uint64_t batch_size,
                                                        std::uint64_t shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("partition_epoch: batch_size must be >= 1");
    std::mt19937_64 rng(splitmix64(shuffle_seed));
    std::shuffle(train_ids.begin(), train_ids.end(), rng);
    std::vector<std::vector<NodeId>> chunks;
    chunks.reserve((train_ids.size() + batch_size - 1) / batch_size);
    for (std::size_t at = 0; at < train_ids.size(); at += batch_size) {
        std::size_t end = std::min(train_ids.size(), at + batch_size);
        chunks.emplace_back(train_ids.begin() + at, train_ids.begin() + end);
    }
    return chunks;
}

inline SampledBatch sample_khop(const Topology& topo, std::span<const NodeId> seeds,
                                const Fanouts& fanouts, std::uint64_t rng_seed) {
    fanouts.validate();
    SampledBatch batch;
    batch.seeds.assign(seeds.begin(), seeds.end());

    std::mt19937_64 rng(splitmix64(rng_seed));
    std::unordered_map<NodeId, std::uint32_t> local;
    local.reserve(seeds.size() * 4);

    auto intern = [&](NodeId n) -> std::uint32_t {
        auto [it, inserted] = local.try_emplace(n, std::uint32_t(batch.nodes.size()));
        if (inserted) batch.nodes.push_back(n);
        return it->second;
    };

    std::vector<std::uint32_t> frontier;
    for (NodeId s : seeds) {
        if (s >= topo.num_nodes())
            throw std::out_of_range("sample_khop: seed " + std::to_string(s) + " out of range");
        frontier.push_back(intern(s));
    }
    // A seed repeated in the chunk expands once.
    std::sort(frontier.begin(), frontier.end());
    frontier.erase(std::unique(frontier.begin(), frontier.end()), frontier.end());

    std::vector<NodeId> neighbors;
    std::vector<NodeId> picked;
    for (std::uint32_t fanout : fanouts.per_layer) {
        std::vector<std::uint32_t> next;
        for (std::uint32_t dst_local : frontier) {
            NodeId dst = batch.nodes[dst_local];
            topo.in_neighbors(dst, neighbors);
            const std::uint64_t degree = neighbors.size();
            picked.clear();
            if (degree <= fanout) {
                picked = neighbors;
            } else {
                // Floyd's sampling: `fanout` distinct picks, uniform without
                // replacement, independent of neighbor-list length.
                for (std::uint64_t j = degree - fanout; j < degree; ++j) {
                    std::uint64_t t = std::uniform_int_distribution<std::uint64_t>(0, j)(rng);
                    NodeId cand = neighbors[t];
                    if (std::find(picked.begin(), picked.end(), cand) != picked.end())
                        cand = neighbors[j];
                    picked.push_back(cand);
                }
            }
            for (NodeId src : picked) {
                auto found = local.find(src);
                bool fresh = found == local.end();
                std::uint32_t src_local = fresh ? intern(src) : found->second;
                batch.edges.push_back({src_local, dst_local});
                if (fresh) next.push_back(src_local);
            }
        }
        std::sort(next.begin(), next.end());
        next.erase(std::unique(next.begin(), next.end()), next.end());
        frontier = std::move(next);
        if (frontier.empty()) break;
    }
    return batch;
}

}  // namespace featdrive::graph
