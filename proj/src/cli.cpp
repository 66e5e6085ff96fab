#include "acvtt/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "acvtt/avol.hpp"
#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"
#include "acvtt/evaluation.hpp"
#include "acvtt/gradient_suite.hpp"
#include "acvtt/mrnla.hpp"
#include "acvtt/network.hpp"
#include "acvtt/rng.hpp"
#include "acvtt/training.hpp"

namespace acvtt {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string hash_of(const json& j) { return fnv1a_hex(j.dump()); }

struct VerificationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- phantom -----------------------------------------------------------------

struct PhantomArgs {
    std::string kind = "spheres";
    std::vector<std::size_t> dims = {16, 16, 16};
    std::uint64_t seed = 7;
    std::string out;
};

void cmd_phantom(const PhantomArgs& a, std::ostream& out) {
    const PhantomKind kind = parse_phantom_kind(a.kind);
    const std::string hash =
        hash_of({{"command", "phantom"}, {"kind", a.kind}, {"dims", a.dims}, {"seed", a.seed}});
    Volume v = generate_phantom(kind, a.dims[0], a.dims[1], a.dims[2], a.seed);
    save_volume(v, a.out, hash);
    out << "phantom " << a.kind << " " << v.depth() << "x" << v.height() << "x" << v.width() << " -> " << a.out
        << " config_hash " << hash << "\n";
}

// --- downsample --------------------------------------------------------------

struct DownsampleArgs {
    std::string input;
    std::size_t r = 5;
    bool normalize = false;
    std::string out;
};

void cmd_downsample(const DownsampleArgs& a, std::ostream& out) {
    Volume v = load_volume(a.input);
    if (a.normalize && v.domain() == IntensityDomain::raw_hu) v = normalize_hu(v);
    const std::string hash = hash_of({{"command", "downsample"},
                                      {"input", fnv1a_hex_file(a.input)},
                                      {"r", a.r},
                                      {"normalize", a.normalize}});
    Volume lr = downsample_depth(v, a.r);
    save_volume(lr, a.out, hash);
    out << "downsample r=" << a.r << " depth " << v.depth() << " -> " << lr.depth() << " -> " << a.out
        << " config_hash " << hash << "\n";
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    int stage = 1;
    bool resume = false;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
    const ExperimentConfig config = load_config(a.config);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainOutcome outcome = run_training(config, a.stage, a.resume);
    out << "train stage " << a.stage << " steps " << outcome.first_step << ".." << outcome.last_step
        << " final_loss " << std::setprecision(17) << outcome.final_loss << std::setprecision(6) << " time "
        << seconds_since(t0) << "s\n"
        << "checkpoint " << outcome.checkpoint.string() << "\n"
        << "metrics " << outcome.metrics.string() << "\n"
        << "config_hash " << config_hash(config) << "\n";
}

// --- infer -------------------------------------------------------------------

struct InferArgs {
    std::string checkpoint;
    std::string input;
    std::size_t r = 0;  // 0: take the checkpoint's r
    long n_refs = -1;   // negative: take the checkpoint's N
    std::string refs = "uniform";
    std::uint64_t seed = 0;
    std::string out;
    std::string dump_relevance;
    std::size_t threads = 1;
};

void dump_trace(const fs::path& dir, const char* view, const RelevanceTrace& trace, const std::string& hash) {
    for (std::size_t level = 0; level < trace.maps.size(); ++level) {
        if (trace.maps[level].empty()) continue;
        const auto [rows, cols] = trace.query_shapes[level];
        write_relevance_dump(dir / ("relevance_" + std::string(view) + "_level" + std::to_string(level) + ".raw"),
                             trace.maps[level], level, rows, cols, hash);
    }
}

void cmd_infer(const InferArgs& a, std::ostream& out) {
    const Checkpoint cp = read_checkpoint(a.checkpoint);
    if (!cp.meta.contains("config")) throw ConfigError("checkpoint has no training config");
    const ExperimentConfig trained = parse_config(cp.meta["config"]);
    const std::string hash = cp.meta.value("config_hash", config_hash(trained));
    const std::size_t r = a.r == 0 ? trained.r : a.r;
    if (r != trained.r) {
        throw ConfigError("checkpoint was trained with r=" + std::to_string(trained.r) + ", got --r " +
                          std::to_string(r));
    }
    const std::size_t n = a.n_refs < 0 ? trained.n_refs : static_cast<std::size_t>(a.n_refs);
    const ReferenceMode mode = parse_reference_mode(a.refs);
    if (a.threads == 0) throw ConfigError("--threads must be positive");
    ModelParams model = model_from_checkpoint(cp);

    Volume lr = load_volume(a.input);
    if (lr.domain() == IntensityDomain::raw_hu) lr = normalize_hu(lr);
    const auto t0 = std::chrono::steady_clock::now();
    const bool trace = !a.dump_relevance.empty();
    InferenceResult result =
        infer_volume(model, lr, r, n, mode, a.seed, trained.network_options(), a.threads, trace);
    const double secs = seconds_since(t0);

    AvolHeader header;
    header.depth = result.fused.depth();
    header.height = result.fused.height();
    header.width = result.fused.width();
    header.spacing = result.fused.spacing();
    header.domain = result.fused.domain();
    header.config_hash = hash;
    header.metadata = {{"command", "infer"},
                       {"r", r},
                       {"N", n},
                       {"refs", a.refs},
                       {"seed", a.seed},
                       {"reference_indices", result.reference_indices},
                       {"checkpoint", fs::path(a.checkpoint).filename().string()}};
    write_avol(a.out, header, result.fused.voxels());
    if (trace) {
        fs::create_directories(a.dump_relevance);
        dump_trace(a.dump_relevance, "coronal", result.coronal_trace, hash);
        dump_trace(a.dump_relevance, "sagittal", result.sagittal_trace, hash);
    }
    out << "infer depth " << lr.depth() << " -> " << result.fused.depth() << " r=" << r << " N=" << n
        << " refs [";
    for (std::size_t i = 0; i < result.reference_indices.size(); ++i) {
        out << (i ? "," : "") << result.reference_indices[i];
    }
    out << "] time " << secs << "s -> " << a.out << " config_hash " << hash << "\n";
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
    std::string ground_truth;
    std::vector<std::string> tests;  // name=path
    std::vector<std::string> baselines;
    std::size_t r = 0;
    std::size_t n_refs = 0;
    std::string volume_id;
    bool foreground = false;
    bool exclude_retained = false;
    std::string out;
    std::string dump;
};

void dump_mid_slices(const fs::path& dir, const std::string& method, const Volume& v, const std::string& hash) {
    for (Plane plane : {Plane::axial, Plane::coronal, Plane::sagittal}) {
        const std::size_t index = plane_extent(v, plane) / 2;
        const Image img = extract_view(v, plane, index).image;
        AvolHeader h;
        h.depth = 1;
        h.height = img.rows;
        h.width = img.cols;
        h.config_hash = hash;
        h.metadata = {{"kind", "slice"}, {"method", method}, {"plane", to_string(plane)}, {"index", index}};
        write_avol(dir / (method + "_" + std::string(to_string(plane)) + ".raw"), h, img.pixels);
    }
}

void cmd_eval(const EvalArgs& a, std::ostream& out) {
    Volume gt = load_volume(a.ground_truth);
    if (gt.domain() == IntensityDomain::raw_hu) gt = normalize_hu(gt);
    if (!a.baselines.empty() && a.r == 0) throw ConfigError("--baselines needs --r");
    if (a.exclude_retained && a.r == 0) throw ConfigError("--exclude-retained needs --r");
    if (a.tests.empty() && a.baselines.empty()) throw ConfigError("nothing to evaluate: pass --test or --baselines");
    json resolved = {{"command", "eval"},
                     {"ground_truth", fnv1a_hex_file(a.ground_truth)},
                     {"baselines", a.baselines},
                     {"r", a.r},
                     {"foreground", a.foreground},
                     {"exclude_retained", a.exclude_retained}};
    json test_hashes = json::array();
    for (const auto& t : a.tests) {
        const auto eq = t.find('=');
        test_hashes.push_back(fnv1a_hex_file(eq == std::string::npos ? t : t.substr(eq + 1)));
    }
    resolved["tests"] = test_hashes;
    const std::string hash = hash_of(resolved);
    const std::string volume_id =
        a.volume_id.empty() ? fs::path(a.ground_truth).stem().string() : a.volume_id;
    EvalOptions options;
    options.foreground = a.foreground;
    options.exclude_retained = a.exclude_retained;
    options.r = a.r == 0 ? 1 : a.r;

    if (!a.dump.empty()) fs::create_directories(a.dump);
    std::vector<MetricRow> rows;
    auto score = [&](const std::string& method, const Volume& v, double wall, std::size_t n) {
        if (!v.same_shape(gt)) {
            throw DimensionError("eval: '" + method + "' is " + std::to_string(v.depth()) + "x" +
                                 std::to_string(v.height()) + "x" + std::to_string(v.width()) +
                                 ", ground truth is " + std::to_string(gt.depth()) + "x" +
                                 std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
        }
        MetricRow row = evaluate(gt, v, options);
        row.method = method;
        row.volume_id = volume_id;
        row.r = a.r;
        row.n_refs = n;
        row.wall_time_s = wall;
        row.config_hash = hash;
        rows.push_back(row);
        if (!a.dump.empty()) dump_mid_slices(a.dump, method, v, hash);
    };
    if (!a.baselines.empty()) {
        const Volume lr = downsample_depth(gt, a.r);
        for (const auto& name : a.baselines) {
            const InterpKind kind = parse_interp_kind(name);
            const auto t0 = std::chrono::steady_clock::now();
            Volume v = baseline_interpolate(lr, a.r, kind);
            score(name, v, seconds_since(t0), 0);
        }
    }
    for (const auto& t : a.tests) {
        const auto eq = t.find('=');
        const std::string path = eq == std::string::npos ? t : t.substr(eq + 1);
        const std::string method = eq == std::string::npos ? fs::path(t).stem().string() : t.substr(0, eq);
        Volume v = load_volume(path);
        if (v.domain() == IntensityDomain::raw_hu) v = normalize_hu(v);
        score(method, v, 0.0, a.n_refs);
    }
    if (!a.out.empty()) write_report(a.out, rows);
    out << format_report(rows);
}

// --- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
    std::uint64_t seed = 0;
    std::vector<std::string> suites;
};

void cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> failed;
    run_gradient_suites(a.seed, a.suites, [&](const GradCaseResult& r) {
        out << (r.passed() ? "ok   " : "FAIL ") << r.suite << "/" << r.name << " rel_err " << std::setprecision(3)
            << std::scientific << r.error << " tol " << r.tolerance << std::defaultfloat << std::setprecision(6)
            << "\n";
        if (!r.passed()) failed.push_back(r.suite + "/" + r.name);
    });
    out << "gradcheck seed " << a.seed << " time " << seconds_since(t0) << "s\n";
    if (!failed.empty()) {
        std::string names;
        for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
        throw VerificationFailure("gradient check failed: " + names);
    }
}

// --- bench -------------------------------------------------------------------

struct BenchArgs {
    std::vector<std::size_t> sides = {4, 8, 16, 32};
    std::size_t channels = 8;
    std::size_t n_refs = 2;
    std::size_t key_block = 64;
    std::uint64_t seed = 0;
};

Tensor random_map(Rng& rng, Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor(std::move(shape), std::move(v));
}

double max_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

void cmd_bench(const BenchArgs& a, std::ostream& out) {
    if (a.key_block == 0 || a.key_block > 64) throw ConfigError("--key-block must lie in 1..64");
    if (a.n_refs == 0) throw ConfigError("--N must be positive");
    Rng rng(a.seed);
    const NlabParams params = init_nlab(a.channels, rng);
    const Tensor query = random_map(rng, {8, 8, a.channels});
    out << "keys,naive_s,tiled_s,max_abs_diff\n";
    double worst = 0.0;
    std::size_t worst_keys = 0;
    for (std::size_t side : a.sides) {
        std::vector<Tensor> refs;
        for (std::size_t n = 0; n < a.n_refs; ++n) refs.push_back(random_map(rng, {side, side, a.channels}));
        Graph g(false);
        auto t0 = std::chrono::steady_clock::now();
        const auto naive = mrnla_forward(g, query, refs, params, {FusionMode::relevance, {AttentionImpl::naive, 64}});
        const double t_naive = seconds_since(t0);
        t0 = std::chrono::steady_clock::now();
        const auto tiled =
            mrnla_forward(g, query, refs, params, {FusionMode::relevance, {AttentionImpl::tiled, a.key_block}});
        const double t_tiled = seconds_since(t0);
        const double diff = std::max(max_diff(naive.fused, tiled.fused), max_diff(naive.relevance, tiled.relevance));
        out << side * side << "," << t_naive << "," << t_tiled << "," << std::setprecision(3) << std::scientific
            << diff << std::defaultfloat << std::setprecision(6) << "\n";
        if (diff > worst) {
            worst = diff;
            worst_keys = side * side;
        }
    }
    if (!(worst < 1e-12)) {
        throw VerificationFailure("bench: naive and tiled attention differ by " + std::to_string(worst) + " at " +
                                  std::to_string(worst_keys) + " keys");
    }
    out << "bench ok: max |naive - tiled| < 1e-12\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cross-view texture transfer for slice interpolation of anisotropic volumes", "acvtt"};
    app.require_subcommand(1);

    PhantomArgs phantom;
    auto* sp = app.add_subcommand("phantom", "Write a synthetic phantom volume (AVOL)");
    sp->add_option("--kind", phantom.kind, "spheres | bands | checker")->capture_default_str();
    sp->add_option("--dims", phantom.dims, "D,H,W")->delimiter(',')->expected(3)->capture_default_str();
    sp->add_option("--seed", phantom.seed)->capture_default_str();
    sp->add_option("--out", phantom.out, "output raw path")->required();

    DownsampleArgs down;
    auto* sd = app.add_subcommand("downsample", "Keep every r-th axial slice");
    sd->add_option("--input", down.input)->required();
    sd->add_option("--r", down.r)->capture_default_str();
    sd->add_flag("--normalize", down.normalize, "map raw HU to [0, 1] first");
    sd->add_option("--out", down.out)->required();

    TrainArgs train;
    auto* st = app.add_subcommand("train", "Run training stage 1 or 2");
    st->add_option("--config", train.config, "JSON experiment config")->required();
    st->add_option("--stage", train.stage)->check(CLI::IsMember({1, 2}))->capture_default_str();
    st->add_flag("--resume", train.resume, "continue from this stage's checkpoint");

    InferArgs infer;
    auto* si = app.add_subcommand("infer", "Reconstruct a dense volume from a sparse one");
    si->add_option("--checkpoint", infer.checkpoint)->required();
    si->add_option("--input", infer.input, "sparse AVOL volume")->required();
    si->add_option("--r", infer.r, "defaults to the checkpoint's r");
    si->add_option("--N", infer.n_refs, "reference count, 0 bypasses MRNLA");
    si->add_option("--refs", infer.refs, "uniform | random")->capture_default_str();
    si->add_option("--seed", infer.seed)->capture_default_str();
    si->add_option("--out", infer.out)->required();
    si->add_option("--dump-relevance", infer.dump_relevance, "directory for relevance maps");
    si->add_option("--threads", infer.threads)->capture_default_str();

    EvalArgs eval;
    auto* se = app.add_subcommand("eval", "PSNR and per-view SSIM report");
    se->add_option("--gt", eval.ground_truth, "ground-truth AVOL")->required();
    se->add_option("--test", eval.tests, "method=path of a reconstructed volume (repeatable)");
    se->add_option("--baselines", eval.baselines, "nearest,linear,cubic")->delimiter(',');
    se->add_option("--r", eval.r);
    se->add_option("--N", eval.n_refs, "reference count recorded for --test rows");
    se->add_option("--volume-id", eval.volume_id);
    se->add_flag("--foreground", eval.foreground, "restrict through-plane views to foreground slices");
    se->add_flag("--exclude-retained", eval.exclude_retained, "drop retained slices from PSNR and axial SSIM");
    se->add_option("--out", eval.out, "report CSV");
    se->add_option("--dump", eval.dump, "directory for mid-slice AVOL dumps");

    GradcheckArgs grad;
    auto* sg = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
    sg->add_option("--seed", grad.seed)->capture_default_str();
    sg->add_option("--suite", grad.suites, "tensor | mrnla | network (repeatable; default all)");

    BenchArgs bench;
    auto* sb = app.add_subcommand("bench", "Time naive vs tiled attention and check they agree");
    sb->add_option("--sides", bench.sides, "reference side lengths")->delimiter(',')->capture_default_str();
    sb->add_option("--channels", bench.channels)->capture_default_str();
    sb->add_option("--N", bench.n_refs)->capture_default_str();
    sb->add_option("--key-block", bench.key_block)->capture_default_str();
    sb->add_option("--seed", bench.seed)->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*sp) cmd_phantom(phantom, out);
        else if (*sd) cmd_downsample(down, out);
        else if (*st) cmd_train(train, out);
        else if (*si) cmd_infer(infer, out);
        else if (*se) cmd_eval(eval, out);
        else if (*sg) cmd_gradcheck(grad, out);
        else if (*sb) cmd_bench(bench, out);
    } catch (const VerificationFailure& e) {
        err << "error: " << e.what() << "\n";
        return kExitVerification;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}

}  // namespace acvtt
