#ifndef EMSS_NETWORKS_HPP
#define EMSS_NETWORKS_HPP

#include <algorithm>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "emss/model_spec.hpp"

namespace emss {

enum class Task { pretext, segmentation, denoise, noise_bg_removal, superres };

inline std::string to_string(Task t) {
    switch (t) {
        case Task::pretext: return "pretext";
        case Task::segmentation: return "segmentation";
        case Task::denoise: return "denoise";
        case Task::noise_bg_removal: return "noise_bg_removal";
        case Task::superres: return "superres";
    }
    return "?";
}

inline Task task_from_string(const std::string& s) {
    if (s == "pretext") return Task::pretext;
    if (s == "segmentation") return Task::segmentation;
    if (s == "denoise") return Task::denoise;
    if (s == "noise_bg_removal") return Task::noise_bg_removal;
    if (s == "superres") return Task::superres;
    throw std::invalid_argument("unknown task: " + s);
}

/// Head variants: image regression (linear 1x1) or segmentation
/// (1x1 followed by a sigmoid, emitting probabilities).
enum class HeadKind { image, segmentation };

inline std::string to_string(HeadKind h) {
    return h == HeadKind::image ? "image" : "segmentation";
}

inline HeadKind head_from_string(const std::string& s) {
    if (s == "image") return HeadKind::image;
    if (s == "segmentation") return HeadKind::segmentation;
    throw std::invalid_argument("unknown head kind: " + s);
}

struct ForwardModule : torch::nn::Module {
    virtual torch::Tensor forward(torch::Tensor x) = 0;
    ~ForwardModule() override = default;
};

namespace detail {

inline torch::nn::InstanceNorm2d make_norm(int channels) {
    return torch::nn::InstanceNorm2d(
        torch::nn::InstanceNorm2dOptions(channels).affine(true).track_running_stats(false));
}

inline torch::nn::Sequential conv_norm_act(int in, int out, int kernel, int stride, int dilation) {
    int pad = dilation * (kernel - 1) / 2;
    if (kernel % 2 == 0) pad = (kernel - stride) / 2 + (stride - 1) / 2;  // k4s2 -> pad 1
    return torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(pad).dilation(dilation)),
        make_norm(out), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
}

inline void extend(torch::nn::Sequential& dst, torch::nn::Sequential src) {
    for (auto& m : *src) dst->push_back(m);
}

struct ResUnitImpl : torch::nn::Module {
    torch::nn::Conv2d c1{nullptr}, c2{nullptr};
    torch::nn::InstanceNorm2d n1{nullptr}, n2{nullptr};

    ResUnitImpl(int channels, int kernel, int dilation) {
        int pad = dilation * (kernel - 1) / 2;
        c1 = register_module("c1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, kernel)
                                                         .padding(pad).dilation(dilation)));
        n1 = register_module("n1", make_norm(channels));
        c2 = register_module("c2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, kernel)
                                                         .padding(pad).dilation(dilation)));
        n2 = register_module("n2", make_norm(channels));
    }

    torch::Tensor forward(torch::Tensor x) {
        auto h = torch::leaky_relu(n1->forward(c1->forward(x)), 0.2);
        return torch::leaky_relu(x + n2->forward(c2->forward(h)), 0.2);
    }
};
TORCH_MODULE(ResUnit);

}  // namespace detail

/// U-shaped generator: stem convs, per-block [strided 4x4 down, residual
/// unit], optional bottleneck convs, per-stage [2x2 transposed-conv up,
/// skip concat, 3x3 merge conv], 1x1 head.
struct UNetGeneratorImpl : ForwardModule {
    ModelSpec spec;
    HeadKind head_kind;
    torch::nn::Sequential stem{nullptr}, bottleneck{nullptr};
    std::vector<torch::nn::Sequential> downs, merges;
    std::vector<detail::ResUnit> res_units;
    std::vector<torch::nn::ConvTranspose2d> ups;
    torch::nn::Conv2d head{nullptr};

    UNetGeneratorImpl(const ModelSpec& s, HeadKind head_k) : spec(s), head_kind(head_k) {
        spec.validate();
        torch::nn::Sequential st;
        int in = spec.in_channels;
        for (int i = 0; i < spec.stem_convs; ++i) {
            detail::extend(st, detail::conv_norm_act(in, spec.width_at(0), 3, 1, 1));
            in = spec.width_at(0);
        }
        stem = register_module("stem", st);
        for (int b = 1; b <= spec.blocks; ++b) {
            downs.push_back(register_module("down" + std::to_string(b),
                detail::conv_norm_act(spec.width_at(b - 1), spec.width_at(b), 4, 2, 1)));
            res_units.push_back(register_module("res" + std::to_string(b),
                detail::ResUnit(spec.width_at(b), spec.res_kernel,
                                spec.block_dilations[static_cast<size_t>(b - 1)])));
        }
        torch::nn::Sequential bn;
        for (int i = 0; i < spec.bottleneck_convs; ++i) {
            int w = spec.width_at(spec.blocks);
            detail::extend(bn, detail::conv_norm_act(w, w, 3, 1, 1));
        }
        bottleneck = register_module("bottleneck", bn);
        for (int b = spec.blocks; b >= 1; --b) {
            ups.push_back(register_module("up" + std::to_string(b),
                torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(
                    spec.width_at(b), spec.width_at(b - 1), 2).stride(2))));
            merges.push_back(register_module("merge" + std::to_string(b),
                detail::conv_norm_act(2 * spec.width_at(b - 1), spec.width_at(b - 1), 3, 1, 1)));
        }
        int out = head_kind == HeadKind::segmentation ? 1 : spec.out_channels;
        head = register_module("head", torch::nn::Conv2d(
            torch::nn::Conv2dOptions(spec.width_at(0), out, 1)));
    }

    torch::Tensor forward(torch::Tensor x) override {
        check_input(x);
        std::vector<torch::Tensor> skips;
        auto h = stem->forward(x);
        for (int b = 0; b < spec.blocks; ++b) {
            skips.push_back(h);
            h = res_units[static_cast<size_t>(b)]->forward(downs[static_cast<size_t>(b)]->forward(h));
        }
        if (!bottleneck->is_empty()) h = bottleneck->forward(h);
        for (int i = 0; i < spec.blocks; ++i) {
            h = ups[static_cast<size_t>(i)]->forward(h);
            h = torch::cat({h, skips[static_cast<size_t>(spec.blocks - 1 - i)]}, 1);
            h = merges[static_cast<size_t>(i)]->forward(h);
        }
        auto y = head->forward(h);
        return head_kind == HeadKind::segmentation ? torch::sigmoid(y) : y;
    }

    void check_input(const torch::Tensor& x) const {
        if (x.dim() != 4)
            throw std::invalid_argument("expected NCHW input, got " + std::to_string(x.dim()) + "d");
        if (x.size(1) != spec.in_channels)
            throw std::invalid_argument("input has " + std::to_string(x.size(1)) + " channels, spec wants " +
                                        std::to_string(spec.in_channels));
        long div = 1L << spec.blocks;
        if (x.size(2) % div != 0 || x.size(3) % div != 0)
            throw std::invalid_argument("input sides must be divisible by " + std::to_string(div) +
                                        "; got " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
    }
};

/// Multi-resolution generator: three parallel streams at full, 1/2, and
/// 1/4 resolution with cross-resolution fusion, then a full-resolution head.
struct HRNetGeneratorImpl : ForwardModule {
    ModelSpec spec;
    HeadKind head_kind;
    torch::nn::Sequential stem{nullptr}, final_conv{nullptr};
    torch::nn::Sequential trans1{nullptr}, trans2{nullptr};
    detail::ResUnit s1_b0{nullptr}, s2_b0{nullptr}, s2_b1{nullptr};
    detail::ResUnit s3_b0{nullptr}, s3_b1{nullptr}, s3_b2{nullptr};
    torch::nn::Conv2d fuse2_01{nullptr}, fuse2_10{nullptr};
    torch::nn::Conv2d fuse3_10{nullptr}, fuse3_20{nullptr};
    torch::nn::Conv2d head{nullptr};

    HRNetGeneratorImpl(const ModelSpec& s, HeadKind head_k) : spec(s), head_kind(head_k) {
        int w0 = spec.width_at(0), w1 = spec.width_at(1), w2 = spec.width_at(2);
        torch::nn::Sequential st;
        int in = spec.in_channels;
        for (int i = 0; i < 2; ++i) {
            detail::extend(st, detail::conv_norm_act(in, w0, 3, 1, 1));
            in = w0;
        }
        stem = register_module("stem", st);
        s1_b0 = register_module("s1_b0", detail::ResUnit(w0, 3, 1));
        trans1 = register_module("trans1", detail::conv_norm_act(w0, w1, 4, 2, 1));
        s2_b0 = register_module("s2_b0", detail::ResUnit(w0, 3, 1));
        s2_b1 = register_module("s2_b1", detail::ResUnit(w1, 3, 1));
        fuse2_01 = register_module("fuse2_01", torch::nn::Conv2d(torch::nn::Conv2dOptions(w1, w0, 1)));
        fuse2_10 = register_module("fuse2_10", torch::nn::Conv2d(torch::nn::Conv2dOptions(w0, w1, 3).stride(2).padding(1)));
        trans2 = register_module("trans2", detail::conv_norm_act(w1, w2, 4, 2, 1));
        s3_b0 = register_module("s3_b0", detail::ResUnit(w0, 3, 1));
        s3_b1 = register_module("s3_b1", detail::ResUnit(w1, 3, 1));
        s3_b2 = register_module("s3_b2", detail::ResUnit(w2, 3, 1));
        fuse3_10 = register_module("fuse3_10", torch::nn::Conv2d(torch::nn::Conv2dOptions(w1, w0, 1)));
        fuse3_20 = register_module("fuse3_20", torch::nn::Conv2d(torch::nn::Conv2dOptions(w2, w0, 1)));
        final_conv = register_module("final_conv", detail::conv_norm_act(w0, w0, 3, 1, 1));
        int out = head_kind == HeadKind::segmentation ? 1 : spec.out_channels;
        head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(w0, out, 1)));
    }

    static torch::Tensor up2(const torch::Tensor& x, int factor) {
        namespace F = torch::nn::functional;
        return F::interpolate(x, F::InterpolateFuncOptions()
                                     .scale_factor(std::vector<double>{double(factor), double(factor)})
                                     .mode(torch::kNearest));
    }

    torch::Tensor forward(torch::Tensor x) override {
        check_input(x);
        auto b0 = s1_b0->forward(stem->forward(x));
        auto b1 = trans1->forward(b0);
        b0 = s2_b0->forward(b0);
        b1 = s2_b1->forward(b1);
        auto f0 = b0 + fuse2_01->forward(up2(b1, 2));
        auto f1 = b1 + fuse2_10->forward(b0);
        b0 = f0;
        b1 = f1;
        auto b2 = trans2->forward(b1);
        b0 = s3_b0->forward(b0);
        b1 = s3_b1->forward(b1);
        b2 = s3_b2->forward(b2);
        b0 = b0 + fuse3_10->forward(up2(b1, 2)) + fuse3_20->forward(up2(b2, 4));
        auto y = head->forward(final_conv->forward(b0));
        return head_kind == HeadKind::segmentation ? torch::sigmoid(y) : y;
    }

    void check_input(const torch::Tensor& x) const {
        if (x.dim() != 4) throw std::invalid_argument("expected NCHW input");
        if (x.size(1) != spec.in_channels)
            throw std::invalid_argument("input has " + std::to_string(x.size(1)) + " channels, spec wants " +
                                        std::to_string(spec.in_channels));
        if (x.size(2) % 4 != 0 || x.size(3) % 4 != 0)
            throw std::invalid_argument("input sides must be divisible by 4 for HRNet");
    }
};

/// Patch discriminator (70x70 receptive field) consuming the conditioning
/// image concatenated with the real or generated image.
struct PatchDiscriminatorImpl : ForwardModule {
    ModelSpec spec;
    torch::nn::Sequential model{nullptr};

    explicit PatchDiscriminatorImpl(const ModelSpec& s) : spec(s) {
        spec.validate();
        int w = spec.base_width;
        torch::nn::Sequential m(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(spec.in_channels, w, 4).stride(2).padding(1)),
            torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
        detail::extend(m, detail::conv_norm_act(w, 2 * w, 4, 2, 1));
        detail::extend(m, detail::conv_norm_act(2 * w, 4 * w, 4, 2, 1));
        detail::extend(m, detail::conv_norm_act(4 * w, 8 * w, 4, 1, 1));
        m->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(8 * w, 1, 4).padding(1)));
        model = register_module("model", m);
    }

    torch::Tensor forward(torch::Tensor x) override {
        if (x.dim() != 4) throw std::invalid_argument("expected NCHW input");
        if (x.size(1) != spec.in_channels)
            throw std::invalid_argument("discriminator channel mismatch: got " + std::to_string(x.size(1)) +
                                        ", expected " + std::to_string(spec.in_channels) +
                                        " (conditioning + candidate)");
        return model->forward(x);
    }
};

/// A built model: spec + parameterized module + head identity.
class Network {
  public:
    ModelSpec spec;
    HeadKind head_kind = HeadKind::image;
    std::string head_name = "head";
    std::shared_ptr<ForwardModule> module;

    torch::Tensor forward(const torch::Tensor& x) const { return module->forward(x); }

    std::vector<std::pair<std::string, torch::Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, torch::Tensor>> out;
        for (const auto& p : module->named_parameters()) out.emplace_back(p.key(), p.value());
        for (const auto& b : module->named_buffers()) out.emplace_back(b.key(), b.value());
        return out;
    }

    long parameter_count() const {
        long n = 0;
        for (const auto& p : module->parameters()) n += p.numel();
        return n;
    }

    void train(bool on = true) { module->train(on); }
    void eval() { module->eval(); }
};

inline Network build_generator(const ModelSpec& spec, uint64_t seed, HeadKind head = HeadKind::image) {
    if (spec.family == Family::patchgan_disc)
        throw std::invalid_argument("build_generator requires a unet or hrnet spec");
    spec.validate();
    torch::manual_seed(seed);
    Network net;
    net.spec = spec;
    net.head_kind = head;
    if (spec.family == Family::unet)
        net.module = std::make_shared<UNetGeneratorImpl>(spec, head);
    else
        net.module = std::make_shared<HRNetGeneratorImpl>(spec, head);
    return net;
}

inline Network build_discriminator(const ModelSpec& spec, uint64_t seed) {
    if (spec.family != Family::patchgan_disc)
        throw std::invalid_argument("build_discriminator requires a patchgan_disc spec");
    torch::manual_seed(seed);
    Network net;
    net.spec = spec;
    net.head_kind = HeadKind::image;
    net.module = std::make_shared<PatchDiscriminatorImpl>(spec);
    return net;
}

/// Empirical receptive field: bounding-box side of input pixels whose
/// perturbation reaches the center output pixel, measured by gradient
/// footprint. Norm layers run in eval mode (running statistics), so the
/// probe sees the purely convolutional footprint.
inline int measure_receptive_field(Network& net, int probe_size = 0) {
    if (net.spec.family == Family::patchgan_disc)
        throw std::invalid_argument("measure_receptive_field expects a generator");
    int div = 1 << net.spec.blocks;
    if (probe_size == 0) {
        int rf = receptive_field(net.spec);
        probe_size = ((rf + 2 * div) / div + 1) * div;
    }
    if (probe_size % div != 0)
        throw std::invalid_argument("probe size must be divisible by " + std::to_string(div));
    bool was_training = net.module->is_training();
    net.eval();
    long N = probe_size;
    // The footprint width varies with the output pixel's phase modulo the
    // total upsampling factor, so probe one pixel per phase (along the
    // diagonal, covering row and column phases at once) and report the
    // widest. Phases ride in the batch dimension: instance norm keeps
    // batch elements independent, so one backward pass covers them all.
    long phases = 1L << net.spec.blocks;
    long c = N / 2 - phases / 2;
    auto footprint = torch::zeros({phases, N, N}, torch::kBool);
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(12345);
    for (int trial = 0; trial < 2; ++trial) {
        auto x = torch::randn({phases, net.spec.in_channels, N, N}, gen).set_requires_grad(true);
        auto y = net.forward(x);
        std::vector<torch::Tensor> picked;
        for (long i = 0; i < phases; ++i)
            picked.push_back(y.index({i, torch::indexing::Slice(), c + i, c + i}).sum());
        auto grads = torch::autograd::grad({torch::stack(picked).sum()}, {x});
        footprint |= grads[0].abs().sum(1) > 0;
    }
    net.train(was_training);
    long best = 0;
    for (long i = 0; i < phases; ++i) {
        auto fp = footprint[i];
        auto rows = fp.any(1).nonzero();
        auto cols = fp.any(0).nonzero();
        if (rows.numel() == 0) throw std::runtime_error("empty gradient footprint");
        long r0 = rows[0].item<long>(), r1 = rows[rows.size(0) - 1].item<long>();
        long c0 = cols[0].item<long>(), c1 = cols[cols.size(0) - 1].item<long>();
        if (r0 == 0 || c0 == 0 || r1 == N - 1 || c1 == N - 1)
            throw std::runtime_error("receptive-field footprint touches the probe border; "
                                     "retry with a larger probe_size than " + std::to_string(N));
        best = std::max(best, std::max(r1 - r0, c1 - c0) + 1);
    }
    return static_cast<int>(best);
}

struct TransferReport {
    std::vector<std::string> transferred;
    std::vector<std::string> skipped;  // present in both but shape-mismatched or excluded
    std::vector<std::string> missing;  // present in target only
};

/// Copies every name-and-shape-matching parameter and buffer from source
/// into target. Names starting with an excluded prefix are skipped.
inline TransferReport transfer_weights(const Network& source, Network& target,
                                       const std::vector<std::string>& exclude_prefixes = {}) {
    TransferReport report;
    std::map<std::string, torch::Tensor> src;
    for (auto& kv : source.named_tensors()) src.emplace(kv.first, kv.second);
    torch::NoGradGuard no_grad;
    for (auto& kv : target.named_tensors()) {
        const auto& name = kv.first;
        bool excluded = std::any_of(exclude_prefixes.begin(), exclude_prefixes.end(),
                                    [&](const std::string& p) { return name.rfind(p, 0) == 0; });
        auto it = src.find(name);
        if (it == src.end()) {
            report.missing.push_back(name);
        } else if (excluded || it->second.sizes() != kv.second.sizes()) {
            report.skipped.push_back(name);
        } else {
            kv.second.copy_(it->second);
            report.transferred.push_back(name);
        }
    }
    if (report.transferred.empty())
        throw std::runtime_error("transfer_weights: no matching parameters between '" +
                                 source.spec.name + "' and '" + target.spec.name +
                                 "' (family mismatch?)");
    return report;
}

/// Returns a copy of `net` whose head is freshly initialized for `task`;
/// all non-head parameters are preserved bitwise.
inline Network replace_head(const Network& net, Task task) {
    if (net.spec.family == Family::patchgan_disc)
        throw std::invalid_argument("replace_head expects a generator");
    HeadKind head = task == Task::segmentation ? HeadKind::segmentation : HeadKind::image;
    uint64_t seed = static_cast<uint64_t>(torch::randint(0, 1LL << 62, {1}).item<int64_t>());
    Network fresh = build_generator(net.spec, seed, head);
    transfer_weights(net, fresh, {net.head_name});
    return fresh;
}

}  // namespace emss

#endif  // EMSS_NETWORKS_HPP
