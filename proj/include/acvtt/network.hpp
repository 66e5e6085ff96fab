#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "acvtt/mrnla.hpp"
#include "acvtt/volume.hpp"

namespace acvtt {

struct ConvParams {
    Tensor weight;  // [Cout, Cin, k, k]
    Tensor bias;    // [Cout]
};

/// Two 3x3 convolutions, each followed by ReLU.
struct BlockParams {
    ConvParams first;
    ConvParams second;
};

/// Plain U-Net skeleton: encoder[0] is the stem, encoder[l] (l >= 1) follows a
/// 2x2 average pool. Decoder level l upsamples level l+1, projects it to
/// widths[l] with a 1x1 convolution, concatenates the encoder skip and applies
/// decoder[l]. The 3x3 head maps widths[0] to one output channel.
/// With no widths the network is the head convolution alone.
struct UnetCore {
    std::size_t in_channels = 1;
    std::vector<std::size_t> widths;
    std::vector<BlockParams> encoder;
    std::vector<ConvParams> up_proj;
    std::vector<BlockParams> decoder;
    ConvParams head;

    std::size_t levels() const noexcept { return widths.size(); }
};

/// Reconstruction network: shared encoder/decoder plus one MRNLA per decoder level.
struct UnetParams {
    UnetCore core;
    std::vector<NlabParams> mrnla;  // one per decoder level (levels() - 1)
};

/// Slice-wise residual fusion network over [cor, sag] channel pairs.
struct FusionParams {
    UnetCore core;
};

struct ModelConfig {
    std::vector<std::size_t> widths = {8, 16, 32, 64};
    std::size_t fusion_width = 8;
    std::size_t fusion_depth = 1;  // 0: a single linear 3x3 convolution
};

struct ModelParams {
    ModelConfig config;
    UnetParams unet;
    FusionParams fusion;
};

/// Named parameter visitation in a fixed order. Names are "<group>/<path>",
/// group being "unet" (reconstruction) or "fusion".
void visit_parameters(ModelParams& model, const std::function<void(const std::string&, Tensor&)>& fn);
std::vector<std::pair<std::string, Tensor>> named_parameters(ModelParams& model);

/// He-uniform convolution weights, zero biases, zero-initialised output heads
/// and MRNLA output projections (every MRNLA starts as the identity).
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

struct NetworkOptions {
    FusionMode fusion = FusionMode::relevance;
    NlabOptions attention;
};

/// Encoder features, level l is [1, widths[l], H / 2^l, W / 2^l].
struct Pyramid {
    std::vector<Tensor> levels;
};

/// Axial reference features in channels-last layout: per_level[l][n] is [h, w, C].
struct ReferenceFeatures {
    std::vector<std::vector<Tensor>> per_level;

    std::size_t count() const noexcept { return per_level.empty() ? 0 : per_level[0].size(); }
};

/// Both extents of `image` ([1, Cin, H, W]) must be divisible by 2^(levels-1).
Pyramid encode(Graph& g, const UnetCore& core, const Tensor& image);

/// Reflect-pads each reference image ([H, W]) and runs it through the shared encoder.
ReferenceFeatures encode_references(Graph& g, const UnetParams& params, std::span<const Tensor> images);

/// Decoder pass with MRNLA applied at every decoder level when references are
/// present. Returns the head output [1, 1, H, W]. `relevance`, if given,
/// receives the [N, Q] map of each decoder level (index = level).
Tensor enhance_and_decode(Graph& g, const UnetParams& params, const Pyramid& query, const ReferenceFeatures& refs,
                          const NetworkOptions& options, std::vector<Tensor>* relevance = nullptr);

/// Pads a through-plane slice ([rows, cols], already depth-upsampled), runs
/// encoder and decoder, crops back and adds the input (global residual).
Tensor reconstruct_slice(Graph& g, const UnetParams& params, const Tensor& slice, const ReferenceFeatures& refs,
                         const NetworkOptions& options, std::vector<Tensor>* relevance = nullptr);

/// Relevance maps of one reconstruction: maps[level][slice] is [N, Q_level].
struct RelevanceTrace {
    std::vector<std::vector<Tensor>> maps;
    std::vector<std::pair<std::size_t, std::size_t>> query_shapes;  // per level
};

/// Upsamples v_lr along depth, reconstructs every slice of `plane` and stacks
/// them. Normalized inputs give outputs clamped to [0, 1]. Slices are spread
/// over `threads` workers; the result does not depend on the thread count.
Volume reconstruct_view(const Volume& v_lr, Plane plane, const ReferenceSet& refs, std::size_t r,
                        const UnetParams& params, const NetworkOptions& options, std::size_t threads = 1,
                        RelevanceTrace* trace = nullptr);

/// 0.5 (cor + sag) + phi([cor, sag]) on one axial slice; inputs [H, W].
Tensor fuse_slice(Graph& g, const FusionParams& fusion, const Tensor& cor, const Tensor& sag);

/// Slice-wise residual fusion of the two through-plane reconstructions.
Volume residual_fuse(const Volume& v_cor, const Volume& v_sag, const FusionParams& fusion);

/// Reflect-pads the last two axes at the bottom/right up to multiples of `multiple`.
Tensor pad_to_multiple(Graph& g, const Tensor& x, std::size_t multiple);

Tensor image_tensor(const Image& image);
Image tensor_image(const Tensor& t);

// Checkpoints: a JSON manifest listing tensors (name, shape, offset) and a raw
// little-endian f64 blob "<manifest>.bin" holding them back to back.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& manifest, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& manifest);

nlohmann::json model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Writes model parameters (meta.model holds the ModelConfig).
Checkpoint model_checkpoint(ModelParams& model);
/// Rebuilds a model from a checkpoint; every parameter must be present with its shape.
ModelParams model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace acvtt

namespace acvtt {

struct InferenceResult {
    std::vector<std::size_t> reference_indices;
    Volume coronal;
    Volume sagittal;
    Volume fused;
    RelevanceTrace coronal_trace;
    RelevanceTrace sagittal_trace;
};

/// Full pipeline on a sparse volume: reference selection (N = 0 bypasses
/// MRNLA), coronal and sagittal reconstruction, residual fusion.
InferenceResult infer_volume(const ModelParams& model, const Volume& v_lr, std::size_t r, std::size_t n,
                             ReferenceMode mode, std::uint64_t seed, const NetworkOptions& options,
                             std::size_t threads = 1, bool trace = false);

}  // namespace acvtt
