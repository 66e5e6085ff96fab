#include "acvtt/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"

namespace acvtt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ConvParams init_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
    std::vector<double> w(out * in * k * k);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return {Tensor({out, in, k, k}, std::move(w), true), Tensor::zeros({out}, true)};
}

ConvParams zero_conv(std::size_t out, std::size_t in, std::size_t k) {
    return {Tensor::zeros({out, in, k, k}, true), Tensor::zeros({out}, true)};
}

BlockParams init_block(std::size_t out, std::size_t in, Rng& rng) {
    BlockParams b;
    b.first = init_conv(out, in, 3, rng);
    b.second = init_conv(out, out, 3, rng);
    return b;
}

UnetCore init_core(std::size_t in_channels, std::vector<std::size_t> widths, Rng& rng) {
    UnetCore core;
    core.in_channels = in_channels;
    core.widths = std::move(widths);
    const std::size_t n = core.widths.size();
    for (std::size_t l = 0; l < n; ++l) core.encoder.push_back(init_block(core.widths[l], l == 0 ? in_channels : core.widths[l - 1], rng));
    for (std::size_t l = 0; l + 1 < n; ++l) {
        core.up_proj.push_back(init_conv(core.widths[l], core.widths[l + 1], 1, rng));
        core.decoder.push_back(init_block(core.widths[l], 2 * core.widths[l], rng));
    }
    core.head = zero_conv(1, n == 0 ? in_channels : core.widths[0], 3);
    return core;
}

Tensor conv(Graph& g, const ConvParams& p, const Tensor& x) {
    return ops::conv2d(g, x, p.weight, p.bias, p.weight.dim(2) / 2);
}

Tensor block(Graph& g, const BlockParams& p, const Tensor& x) {
    return ops::relu(g, conv(g, p.second, ops::relu(g, conv(g, p.first, x))));
}

void visit_conv(const std::string& prefix, ConvParams& c, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".weight", c.weight);
    fn(prefix + ".bias", c.bias);
}

void visit_block(const std::string& prefix, BlockParams& b, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_conv(prefix + ".conv1", b.first, fn);
    visit_conv(prefix + ".conv2", b.second, fn);
}

void visit_core(const std::string& prefix, UnetCore& core, const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t l = 0; l < core.encoder.size(); ++l) visit_block(prefix + "/encoder" + std::to_string(l), core.encoder[l], fn);
    for (std::size_t l = 0; l < core.up_proj.size(); ++l) visit_conv(prefix + "/up" + std::to_string(l), core.up_proj[l], fn);
    for (std::size_t l = 0; l < core.decoder.size(); ++l) visit_block(prefix + "/decoder" + std::to_string(l), core.decoder[l], fn);
    visit_conv(prefix + "/head", core.head, fn);
}

/// [1, C, h, w] <-> [h, w, C].
Tensor to_channels_last(Graph& g, const Tensor& x) {
    static constexpr std::size_t order[] = {1, 2, 0};
    return ops::permute(g, ops::reshape(g, x, {x.dim(1), x.dim(2), x.dim(3)}), order);
}

Tensor to_channels_first(Graph& g, const Tensor& x) {
    static constexpr std::size_t order[] = {2, 0, 1};
    Tensor t = ops::permute(g, x, order);
    return ops::reshape(g, t, {1, t.dim(0), t.dim(1), t.dim(2)});
}

Tensor decode_core(Graph& g, const UnetCore& core, const Pyramid& pyr,
                   const std::function<Tensor(Graph&, std::size_t, const Tensor&)>& enhance) {
    const std::size_t n = core.levels();
    Tensor x = pyr.levels[n - 1];
    for (std::size_t step = n - 1; step-- > 0;) {
        const Tensor& skip = pyr.levels[step];
        x = ops::bilinear_resize(g, x, skip.dim(2), skip.dim(3));
        x = conv(g, core.up_proj[step], x);
        if (enhance) x = enhance(g, step, x);
        const Tensor parts[] = {x, skip};
        x = block(g, core.decoder[step], ops::concat(g, parts, 1));
    }
    return conv(g, core.head, x);
}

Tensor run_core(Graph& g, const UnetCore& core, const Tensor& image) {
    if (core.levels() == 0) return conv(g, core.head, image);
    return decode_core(g, core, encode(g, core, image), {});
}

std::size_t pad_multiple(const UnetCore& core) {
    return core.levels() == 0 ? 1 : std::size_t{1} << (core.levels() - 1);
}

Volume clamp_for_domain(std::vector<double> values, std::size_t d, std::size_t h, std::size_t w, const Spacing& spacing,
                        IntensityDomain domain) {
    if (domain == IntensityDomain::normalized) {
        for (auto& v : values) v = std::clamp(v, 0.0, 1.0);
    }
    return Volume(d, h, w, std::move(values), spacing, domain);
}

}  // namespace

void visit_parameters(ModelParams& model, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_core("unet", model.unet.core, fn);
    for (std::size_t l = 0; l < model.unet.mrnla.size(); ++l) {
        auto& p = model.unet.mrnla[l];
        const std::string prefix = "unet/mrnla" + std::to_string(l);
        fn(prefix + ".w_q", p.w_q);
        fn(prefix + ".b_q", p.b_q);
        fn(prefix + ".w_k", p.w_k);
        fn(prefix + ".b_k", p.b_k);
        fn(prefix + ".w_v", p.w_v);
        fn(prefix + ".b_v", p.b_v);
        fn(prefix + ".w_out", p.w_out);
        fn(prefix + ".b_out", p.b_out);
    }
    visit_core("fusion", model.fusion.core, fn);
}

std::vector<std::pair<std::string, Tensor>> named_parameters(ModelParams& model) {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_parameters(model, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    if (config.widths.empty()) throw ConfigError("model needs at least one U-Net level");
    for (auto w : config.widths) {
        if (w == 0) throw ConfigError("channel widths must be positive");
    }
    Rng rng({seed, 0x6e6574ull});
    ModelParams m;
    m.config = config;
    m.unet.core = init_core(1, config.widths, rng);
    for (std::size_t l = 0; l + 1 < config.widths.size(); ++l) {
        NlabParams p = init_nlab(config.widths[l], rng);
        // Zero output projection: each MRNLA starts as the identity, like the heads.
        p.w_out = Tensor::zeros(p.w_out.shape(), true);
        m.unet.mrnla.push_back(std::move(p));
    }
    std::vector<std::size_t> fusion_widths;
    if (config.fusion_depth > 0) {
        for (std::size_t l = 0; l <= config.fusion_depth; ++l) fusion_widths.push_back(config.fusion_width << l);
    }
    m.fusion.core = init_core(2, fusion_widths, rng);
    return m;
}

Pyramid encode(Graph& g, const UnetCore& core, const Tensor& image) {
    if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != core.in_channels) {
        throw DimensionError("encode: expected [1, " + std::to_string(core.in_channels) + ", H, W], got " +
                             shape_to_string(image.shape()));
    }
    const std::size_t m = pad_multiple(core);
    if (image.dim(2) % m != 0 || image.dim(3) % m != 0) {
        throw DimensionError("encode: extents " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                             " are not multiples of " + std::to_string(m) + "; pad first");
    }
    Pyramid p;
    Tensor x = image;
    for (std::size_t l = 0; l < core.levels(); ++l) {
        if (l > 0) x = ops::avg_pool2(g, x);
        x = block(g, core.encoder[l], x);
        p.levels.push_back(x);
    }
    return p;
}

Tensor pad_to_multiple(Graph& g, const Tensor& x, std::size_t multiple) {
    const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    const std::size_t ph = (multiple - h % multiple) % multiple, pw = (multiple - w % multiple) % multiple;
    if (ph == 0 && pw == 0) return x;
    if (ph >= h || pw >= w) {
        throw DimensionError("pad_to_multiple: extent too small to reflect-pad to a multiple of " + std::to_string(multiple));
    }
    return ops::pad_reflect(g, x, 0, ph, 0, pw);
}

ReferenceFeatures encode_references(Graph& g, const UnetParams& params, std::span<const Tensor> images) {
    ReferenceFeatures refs;
    const std::size_t levels = params.core.levels();
    refs.per_level.assign(levels > 0 ? levels - 1 : 0, {});
    for (const auto& image : images) {
        if (image.rank() != 2) throw DimensionError("encode_references: reference images must be [H, W]");
        Tensor x = ops::reshape(g, image, {1, 1, image.dim(0), image.dim(1)});
        Pyramid p = encode(g, params.core, pad_to_multiple(g, x, pad_multiple(params.core)));
        for (std::size_t l = 0; l + 1 < levels; ++l) refs.per_level[l].push_back(to_channels_last(g, p.levels[l]));
    }
    return refs;
}

Tensor enhance_and_decode(Graph& g, const UnetParams& params, const Pyramid& query, const ReferenceFeatures& refs,
                          const NetworkOptions& options, std::vector<Tensor>* relevance) {
    const UnetCore& core = params.core;
    if (core.levels() == 0) throw ContractError("enhance_and_decode: network has no levels");
    if (query.levels.size() != core.levels()) throw DimensionError("enhance_and_decode: pyramid depth mismatch");
    if (relevance) relevance->assign(core.levels() - 1, Tensor());
    std::function<Tensor(Graph&, std::size_t, const Tensor&)> enhance;
    if (refs.count() > 0) {
        enhance = [&](Graph& gg, std::size_t level, const Tensor& x) {
            MrnlaOptions mo{options.fusion, options.attention};
            auto out = mrnla_forward(gg, to_channels_last(gg, x), refs.per_level[level], params.mrnla[level], mo);
            if (relevance) (*relevance)[level] = out.relevance;
            return to_channels_first(gg, out.fused);
        };
    }
    return decode_core(g, core, query, enhance);
}

Tensor reconstruct_slice(Graph& g, const UnetParams& params, const Tensor& slice, const ReferenceFeatures& refs,
                         const NetworkOptions& options, std::vector<Tensor>* relevance) {
    if (slice.rank() != 2) throw DimensionError("reconstruct_slice: slice must be [rows, cols]");
    const std::size_t rows = slice.dim(0), cols = slice.dim(1);
    Tensor x = ops::reshape(g, slice, {1, 1, rows, cols});
    Tensor padded = pad_to_multiple(g, x, pad_multiple(params.core));
    Pyramid pyr = encode(g, params.core, padded);
    Tensor head = enhance_and_decode(g, params, pyr, refs, options, relevance);
    Tensor correction = ops::reshape(g, ops::crop2d(g, head, 0, 0, rows, cols), {rows, cols});
    return ops::add(g, slice, correction);
}

Tensor image_tensor(const Image& image) { return Tensor({image.rows, image.cols}, image.pixels); }

Image tensor_image(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("tensor_image: expected a 2D tensor");
    return Image{t.dim(0), t.dim(1), std::vector<double>(t.values().begin(), t.values().end())};
}

Volume reconstruct_view(const Volume& v_lr, Plane plane, const ReferenceSet& refs, std::size_t r,
                        const UnetParams& params, const NetworkOptions& options, std::size_t threads,
                        RelevanceTrace* trace) {
    if (plane == Plane::axial) throw ParameterError("reconstruct_view: plane must be coronal or sagittal");
    for (auto idx : refs.indices) {
        if (idx >= v_lr.depth()) throw BoundsError("reconstruct_view: reference index outside the sparse volume");
    }
    const Volume up = upsample_depth_linear(v_lr, r);
    Graph once(false);
    std::vector<Tensor> ref_images;
    for (const auto& s : refs.slices) ref_images.push_back(image_tensor(s.image));
    const ReferenceFeatures features = encode_references(once, params, ref_images);

    const std::size_t count = plane_extent(up, plane);
    std::vector<ViewSlice> slices(count);
    const std::size_t levels = params.core.levels() - 1;
    if (trace) {
        trace->maps.assign(levels, std::vector<Tensor>(count));
        trace->query_shapes.assign(levels, {0, 0});
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next++; i < count; i = next++) {
            Graph g(false);
            ViewSlice in = extract_view(up, plane, i);
            std::vector<Tensor> rel;
            Tensor out = reconstruct_slice(g, params, image_tensor(in.image), features, options, trace ? &rel : nullptr);
            slices[i] = ViewSlice{plane, i, tensor_image(out)};
            if (trace) {
                for (std::size_t l = 0; l < levels && l < rel.size(); ++l) trace->maps[l][i] = rel[l];
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (trace) {
        const std::size_t ph = (up.depth() + (std::size_t{1} << levels) - 1) >> levels << levels;
        const std::size_t cols = plane == Plane::coronal ? up.width() : up.height();
        const std::size_t pw = (cols + (std::size_t{1} << levels) - 1) >> levels << levels;
        for (std::size_t l = 0; l < levels; ++l) trace->query_shapes[l] = {ph >> l, pw >> l};
    }
    Volume stacked = stack_views(slices, up.spacing(), IntensityDomain::raw_hu);
    std::vector<double> values(stacked.voxels().begin(), stacked.voxels().end());
    return clamp_for_domain(std::move(values), up.depth(), up.height(), up.width(), up.spacing(), v_lr.domain());
}

Tensor fuse_slice(Graph& g, const FusionParams& fusion, const Tensor& cor, const Tensor& sag) {
    if (cor.rank() != 2 || cor.shape() != sag.shape()) throw DimensionError("fuse_slice: inputs must be equal [H, W]");
    const std::size_t h = cor.dim(0), w = cor.dim(1);
    const Tensor parts[] = {cor, sag};
    Tensor x = ops::reshape(g, ops::stack(g, parts), {1, 2, h, w});
    Tensor padded = pad_to_multiple(g, x, pad_multiple(fusion.core));
    Tensor phi = ops::reshape(g, ops::crop2d(g, run_core(g, fusion.core, padded), 0, 0, h, w), {h, w});
    return ops::add(g, ops::scale(g, ops::add(g, cor, sag), 0.5), phi);
}

Volume residual_fuse(const Volume& v_cor, const Volume& v_sag, const FusionParams& fusion) {
    if (!v_cor.same_shape(v_sag)) throw DimensionError("residual_fuse: volumes differ in shape");
    std::vector<ViewSlice> slices;
    for (std::size_t z = 0; z < v_cor.depth(); ++z) {
        Graph g(false);
        Tensor out = fuse_slice(g, fusion, image_tensor(extract_view(v_cor, Plane::axial, z).image),
                                image_tensor(extract_view(v_sag, Plane::axial, z).image));
        slices.push_back({Plane::axial, z, tensor_image(out)});
    }
    Volume stacked = stack_views(slices, v_cor.spacing(), IntensityDomain::raw_hu);
    std::vector<double> values(stacked.voxels().begin(), stacked.voxels().end());
    const auto domain = v_cor.domain() == IntensityDomain::normalized && v_sag.domain() == IntensityDomain::normalized
                            ? IntensityDomain::normalized
                            : IntensityDomain::raw_hu;
    return clamp_for_domain(std::move(values), v_cor.depth(), v_cor.height(), v_cor.width(), v_cor.spacing(), domain);
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw StateError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const auto& p) { return p.first == name; });
}

void write_checkpoint(const fs::path& manifest, const Checkpoint& checkpoint) {
    fs::path blob = manifest;
    blob += ".bin";
    json entries = json::array();
    std::vector<double> values;
    for (const auto& [name, t] : checkpoint.tensors) {
        entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", values.size()}});
        values.insert(values.end(), t.values().begin(), t.values().end());
    }
    json doc;
    doc["format"] = "acvtt-checkpoint";
    doc["version"] = 1;
    doc["blob"] = blob.filename().string();
    doc["count"] = values.size();
    doc["tensors"] = std::move(entries);
    doc["meta"] = checkpoint.meta;
    write_f64_le(blob, values);
    write_text(manifest, doc.dump(2) + "\n");
}

Checkpoint read_checkpoint(const fs::path& manifest) {
    if (!fs::exists(manifest)) throw StateError("checkpoint '" + manifest.string() + "' does not exist");
    Checkpoint cp;
    try {
        const json doc = json::parse(read_text(manifest));
        if (doc.at("format").get<std::string>() != "acvtt-checkpoint") throw StateError("not an acvtt checkpoint");
        const auto values = read_f64_le(manifest.parent_path() / doc.at("blob").get<std::string>(),
                                        doc.at("count").get<std::size_t>());
        for (const auto& e : doc.at("tensors")) {
            Shape shape = e.at("shape").get<Shape>();
            const std::size_t offset = e.at("offset").get<std::size_t>();
            const std::size_t n = shape_numel(shape);
            if (offset + n > values.size()) throw StateError("checkpoint tensor extends past the blob");
            cp.tensors.emplace_back(e.at("name").get<std::string>(),
                                    Tensor(std::move(shape), std::vector<double>(values.begin() + offset, values.begin() + offset + n)));
        }
        cp.meta = doc.value("meta", json::object());
    } catch (const json::exception& e) {
        throw StateError("malformed checkpoint '" + manifest.string() + "': " + e.what());
    }
    return cp;
}

json model_config_json(const ModelConfig& config) {
    return {{"widths", config.widths}, {"fusion_width", config.fusion_width}, {"fusion_depth", config.fusion_depth}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.fusion_width = j.at("fusion_width").get<std::size_t>();
    c.fusion_depth = j.at("fusion_depth").get<std::size_t>();
    return c;
}

Checkpoint model_checkpoint(ModelParams& model) {
    Checkpoint cp;
    cp.meta["model"] = model_config_json(model.config);
    cp.tensors = named_parameters(model);
    return cp;
}

ModelParams model_from_checkpoint(const Checkpoint& checkpoint) {
    if (!checkpoint.meta.contains("model")) throw StateError("checkpoint lacks a model description");
    ModelParams model = init_model(model_config_from_json(checkpoint.meta["model"]), 0);
    visit_parameters(model, [&](const std::string& name, Tensor& t) {
        const Tensor& stored = checkpoint.get(name);
        if (stored.shape() != t.shape()) throw StateError("checkpoint tensor '" + name + "' has the wrong shape");
        t = stored.detach(true);
    });
    return model;
}

}  // namespace acvtt

namespace acvtt {

InferenceResult infer_volume(const ModelParams& model, const Volume& v_lr, std::size_t r, std::size_t n,
                             ReferenceMode mode, std::uint64_t seed, const NetworkOptions& options,
                             std::size_t threads, bool trace) {
    ReferenceSet refs;
    if (n > 0) {
        Rng rng({seed, 0x696e66ull});
        refs = make_reference_set(v_lr, sample_reference_indices(v_lr.depth(), n, mode, rng));
    }
    RelevanceTrace tc, ts;
    Volume cor = reconstruct_view(v_lr, Plane::coronal, refs, r, model.unet, options, threads, trace ? &tc : nullptr);
    Volume sag = reconstruct_view(v_lr, Plane::sagittal, refs, r, model.unet, options, threads, trace ? &ts : nullptr);
    Volume fused = residual_fuse(cor, sag, model.fusion);
    return InferenceResult{refs.indices, std::move(cor), std::move(sag), std::move(fused), std::move(tc), std::move(ts)};
}

}  // namespace acvtt
