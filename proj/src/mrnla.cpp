#include "acvtt/mrnla.hpp"

#include <cmath>

#include "acvtt/avol.hpp"
#include "acvtt/errors.hpp"

namespace acvtt {

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor({rows, cols}, std::move(v), true);
}

void require_feature_map(const Tensor& t, const char* what) {
    if (t.rank() != 3) throw DimensionError(std::string("mrnla: ") + what + " must be [rows, cols, C], got " + shape_to_string(t.shape()));
}

}  // namespace

NlabParams init_nlab(std::size_t channels, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    NlabParams p;
    p.w_q = uniform_matrix(channels, channels, bound, rng);
    p.b_q = Tensor::zeros({channels}, true);
    p.w_k = uniform_matrix(channels, channels, bound, rng);
    p.b_k = Tensor::zeros({channels}, true);
    p.w_v = uniform_matrix(channels, channels, bound, rng);
    p.b_v = Tensor::zeros({channels}, true);
    p.w_out = uniform_matrix(channels, channels, bound, rng);
    p.b_out = Tensor::zeros({channels}, true);
    return p;
}

NlabParams zero_nlab(std::size_t channels) {
    NlabParams p;
    for (Tensor* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_out}) *w = Tensor::zeros({channels, channels}, true);
    for (Tensor* b : {&p.b_q, &p.b_k, &p.b_v, &p.b_out}) *b = Tensor::zeros({channels}, true);
    return p;
}

NlabOutput nlab(Graph& g, const Tensor& query, const Tensor& reference, const NlabParams& params,
                const NlabOptions& options) {
    require_feature_map(query, "query");
    require_feature_map(reference, "reference");
    const std::size_t c = query.dim(2);
    if (reference.dim(2) != c) throw DimensionError("nlab: query and reference channel counts differ");
    if (params.channels() != c) throw DimensionError("nlab: parameters do not match the feature channels");
    const std::size_t rows = query.dim(0), cols = query.dim(1);
    const std::size_t positions = query.dim(0) * query.dim(1);
    const std::size_t keys = reference.dim(0) * reference.dim(1);

    Tensor f = ops::reshape(g, query, {positions, c});
    Tensor fr = ops::reshape(g, reference, {keys, c});
    Tensor q = ops::layer_norm(g, ops::linear(g, f, params.w_q, params.b_q), 1);
    Tensor k = ops::layer_norm(g, ops::linear(g, fr, params.w_k, params.b_k), 1);
    Tensor v = ops::linear(g, fr, params.w_v, params.b_v);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));

    NlabOutput out;
    Tensor attended;
    if (options.impl == AttentionImpl::naive) {
        out.similarity = ops::scale(g, ops::matmul(g, q, ops::transpose(g, k)), scale);
        out.weights = ops::softmax(g, out.similarity, 1);
        attended = ops::matmul(g, out.weights, v);
        out.relation = ops::sum_axis(g, ops::mul(g, out.weights, out.similarity), 1);
    } else {
        auto r = ops::blocked_attention(g, q, k, v, scale, options.key_block);
        attended = r.output;
        out.relation = r.relation;
    }
    out.transferred = ops::reshape(g, ops::linear(g, attended, params.w_out, params.b_out), {rows, cols, c});
    return out;
}

Tensor relation_vector(Graph& g, const Tensor& similarity) {
    if (similarity.rank() != 2) throw DimensionError("relation_vector: similarity must be [Q, K]");
    Tensor a = ops::softmax(g, similarity, 1);
    return ops::sum_axis(g, ops::mul(g, a, similarity), 1);
}

Tensor relevance_map(Graph& g, std::span<const Tensor> relations) {
    if (relations.empty()) throw ParameterError("relevance_map: need at least one relation vector");
    for (const auto& r : relations) {
        if (r.rank() != 1 || r.dim(0) != relations[0].dim(0)) {
            throw DimensionError("relevance_map: relation vectors must share one length");
        }
    }
    return ops::softmax(g, ops::stack(g, relations), 0);
}

Tensor fuse(Graph& g, std::span<const Tensor> transferred, const Tensor& relevance, const Tensor& query) {
    if (transferred.empty()) throw ParameterError("fuse: need at least one transferred feature");
    for (const auto& t : transferred) {
        if (t.shape() != query.shape()) throw DimensionError("fuse: transferred feature shape differs from the query");
    }
    if (relevance.rank() != 2 || relevance.dim(0) != transferred.size() ||
        relevance.dim(1) * query.dim(query.rank() - 1) != query.numel()) {
        throw DimensionError("fuse: relevance map must be [N, query positions]");
    }
    return ops::add(g, ops::weighted_sum(g, transferred, relevance), query);
}

Tensor fuse_average(Graph& g, std::span<const Tensor> transferred, const Tensor& query) {
    if (transferred.empty()) throw ParameterError("fuse_average: need at least one transferred feature");
    Tensor acc = transferred[0];
    for (std::size_t l = 1; l < transferred.size(); ++l) acc = ops::add(g, acc, transferred[l]);
    if (transferred.size() > 1) acc = ops::scale(g, acc, 1.0 / static_cast<double>(transferred.size()));
    return ops::add(g, acc, query);
}

MrnlaOutput mrnla_forward(Graph& g, const Tensor& query, std::span<const Tensor> references, const NlabParams& params,
                          const MrnlaOptions& options) {
    if (references.empty()) throw ParameterError("mrnla_forward: need at least one reference");
    MrnlaOutput out;
    std::vector<Tensor> relations;
    for (const auto& ref : references) {
        auto r = nlab(g, query, ref, params, options.attention);
        out.transferred.push_back(r.transferred);
        relations.push_back(r.relation);
    }
    if (options.fusion == FusionMode::relevance) {
        out.relevance = relevance_map(g, relations);
        out.fused = fuse(g, out.transferred, out.relevance, query);
    } else {
        // Computed outside the graph: inspection only, no gradient path.
        Graph side(false);
        std::vector<Tensor> detached;
        for (const auto& r : relations) detached.push_back(r.detach());
        out.relevance = relevance_map(side, detached);
        out.fused = fuse_average(g, out.transferred, query);
    }
    return out;
}

void write_relevance_dump(const std::filesystem::path& raw_path, std::span<const Tensor> maps, std::size_t level,
                          std::size_t query_rows, std::size_t query_cols, const std::string& config_hash) {
    if (maps.empty()) throw ParameterError("write_relevance_dump: no maps");
    const std::size_t n = maps[0].dim(0);
    std::vector<double> values;
    for (const auto& m : maps) {
        if (m.rank() != 2 || m.dim(0) != n || m.dim(1) != query_rows * query_cols) {
            throw DimensionError("write_relevance_dump: map shape does not match the query shape");
        }
        values.insert(values.end(), m.values().begin(), m.values().end());
    }
    AvolHeader header;
    header.depth = maps.size() * n;
    header.height = query_rows;
    header.width = query_cols;
    header.domain = IntensityDomain::normalized;
    header.config_hash = config_hash;
    header.metadata = {{"kind", "relevance"},
                       {"level", level},
                       {"N", n},
                       {"slices", maps.size()},
                       {"query_shape", {query_rows, query_cols}}};
    write_avol(raw_path, header, values);
}

}  // namespace acvtt
