#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "acvtt/ops.hpp"
#include "acvtt/rng.hpp"
#include "acvtt/tensor.hpp"

// Multi-reference non-local attention. Feature maps are channels-last:
// a through-plane query map is [Dq, Hq, C] and an axial reference map is
// [Hr, Wr, C]. Every query position attends over every reference position.
namespace acvtt {

/// 1x1 projections of a non-local attention block. Weights are [C, C], biases [C].
struct NlabParams {
    Tensor w_q, b_q;
    Tensor w_k, b_k;
    Tensor w_v, b_v;
    Tensor w_out, b_out;

    std::size_t channels() const { return w_q.dim(0); }
};

/// Uniform(-1/sqrt(C), 1/sqrt(C)) weights and zero biases.
NlabParams init_nlab(std::size_t channels, Rng& rng);
NlabParams zero_nlab(std::size_t channels);

enum class AttentionImpl {
    naive,  // materialises S and softmax(S)
    tiled,  // streams key blocks; S is never formed
};

enum class FusionMode { relevance, average };

struct NlabOutput {
    Tensor transferred;  // [Dq, Hq, C]
    Tensor relation;     // [Dq * Hq]
    Tensor similarity;   // [Dq * Hq, Hr * Wr], pre-softmax; naive only
    Tensor weights;      // softmax rows of similarity; naive only
};

struct NlabOptions {
    AttentionImpl impl = AttentionImpl::tiled;
    std::size_t key_block = 64;
};

NlabOutput nlab(Graph& g, const Tensor& query, const Tensor& reference, const NlabParams& params,
                const NlabOptions& options = {});

/// r[q] = sum_k softmax(S)[q, k] * S[q, k].
Tensor relation_vector(Graph& g, const Tensor& similarity);

/// Softmax across N stacked relation vectors: [N, Q], columns sum to one.
Tensor relevance_map(Graph& g, std::span<const Tensor> relations);

/// sum_l R[l] * transferred[l] + query, with R broadcast over channels.
Tensor fuse(Graph& g, std::span<const Tensor> transferred, const Tensor& relevance, const Tensor& query);
/// mean_l transferred[l] + query.
Tensor fuse_average(Graph& g, std::span<const Tensor> transferred, const Tensor& query);

struct MrnlaOptions {
    FusionMode fusion = FusionMode::relevance;
    NlabOptions attention;
};

struct MrnlaOutput {
    Tensor fused;                      // [Dq, Hq, C]
    Tensor relevance;                  // [N, Dq * Hq]; computed in both fusion modes
    std::vector<Tensor> transferred;   // one per reference
};

/// One NLAB (shared parameters) per reference, then relevance-adaptive or
/// averaging fusion with a residual connection. Requires at least one reference.
MrnlaOutput mrnla_forward(Graph& g, const Tensor& query, std::span<const Tensor> references, const NlabParams& params,
                          const MrnlaOptions& options = {});

/// Writes relevance maps of several query slices as one AVOL grid of depth
/// slices * N, height Dq, width Hq. Metadata: {level, N, query_shape, slices}.
void write_relevance_dump(const std::filesystem::path& raw_path, std::span<const Tensor> maps, std::size_t level,
                          std::size_t query_rows, std::size_t query_cols, const std::string& config_hash = {});

}  // namespace acvtt
