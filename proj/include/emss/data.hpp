#ifndef EMSS_DATA_HPP
#define EMSS_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>
#include <json.hpp>

#include "emss/networks.hpp"  // Task

namespace emss {

namespace fs = std::filesystem;

/// Images are float32 CHW tensors throughout.
using ImageGrid = torch::Tensor;

struct SamplePair {
    ImageGrid input;
    ImageGrid target;
    Task task = Task::pretext;
    bool target_is_mask = false;
};

struct CorruptionPolicy {
    double noise_sigma_lo = 0.0, noise_sigma_hi = 0.5;  // standardized units
    double blur_sigma_lo = 0.0, blur_sigma_hi = 2.0;    // pixels
    bool flip = false;
    bool rotate = false;

    void validate() const {
        if (noise_sigma_lo < 0 || noise_sigma_hi < noise_sigma_lo)
            throw std::invalid_argument("corruption noise sigma range must satisfy 0 <= lo <= hi");
        if (blur_sigma_lo < 0 || blur_sigma_hi < blur_sigma_lo)
            throw std::invalid_argument("corruption blur sigma range must satisfy 0 <= lo <= hi");
    }
};

struct AugmentPolicy {
    bool noise = false;
    double noise_sigma = 0.05;
    bool flip = true;
    std::vector<int> rotations;  // multiples of 90 degrees, e.g. {0,90,180,270}
    double resize_lo = 1.0, resize_hi = 1.0;
    int crop_size = 0;  // 0 = no crop

    void validate() const {
        if (resize_lo <= 0 || resize_hi < resize_lo)
            throw std::invalid_argument("resize scale range must satisfy 0 < lo <= hi");
        if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be >= 0");
        for (int r : rotations)
            if (r % 90 != 0) throw std::invalid_argument("rotations must be multiples of 90 degrees");
        if (crop_size < 0) throw std::invalid_argument("crop_size must be >= 0");
    }
};

struct SplitSpec {
    std::optional<std::array<long, 3>> counts;       // train/val/test
    std::optional<std::array<double, 3>> fractions;  // used when counts absent
    uint64_t seed = 0;
};

namespace detail {

// splitmix64; used to derive independent per-sample/per-epoch seeds
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1) + 0xbf58476d1ce4e5b9ULL * (c + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline torch::Generator make_rng(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    return gen;
}

inline double uniform(double lo, double hi, torch::Generator& gen) {
    if (hi <= lo) return lo;
    return lo + (hi - lo) * torch::rand({1}, gen, torch::kFloat64).item<double>();
}

inline long randint(long lo, long hi_inclusive, torch::Generator& gen) {
    if (hi_inclusive <= lo) return lo;
    return torch::randint(lo, hi_inclusive + 1, {1}, gen).item<long>();
}

inline torch::Tensor gaussian_kernel1d(double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    auto x = torch::arange(-radius, radius + 1, torch::kFloat32);
    auto k = torch::exp(-x.square() / (2.0 * sigma * sigma));
    return k / k.sum();
}

// separable Gaussian blur with reflect padding, kernel normalized to sum 1
inline torch::Tensor gaussian_blur(const torch::Tensor& chw, double sigma) {
    if (sigma < 1e-8) return chw.clone();
    namespace F = torch::nn::functional;
    auto k = gaussian_kernel1d(sigma);
    long r = (k.size(0) - 1) / 2;
    long C = chw.size(0);
    auto x = chw.unsqueeze(0);
    auto kx = k.view({1, 1, 1, -1}).repeat({C, 1, 1, 1});
    auto ky = k.view({1, 1, -1, 1}).repeat({C, 1, 1, 1});
    x = F::pad(x, F::PadFuncOptions({r, r, 0, 0}).mode(torch::kReflect));
    x = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(C));
    x = F::pad(x, F::PadFuncOptions({0, 0, r, r}).mode(torch::kReflect));
    x = F::conv2d(x, ky, F::Conv2dFuncOptions().groups(C));
    return x.squeeze(0);
}

}  // namespace detail

/// Per-image zero mean, unit variance (population sigma). Images with
/// sigma below the floor map to all zeros.
inline ImageGrid standardize(const ImageGrid& img, double sigma_floor = 1e-8) {
    auto mean = img.mean();
    auto sigma = img.std(/*unbiased=*/false);
    if (sigma.item<double>() < sigma_floor) return torch::zeros_like(img);
    return (img - mean) / sigma;
}

/// Non-overlapping row-major tiling. When reject_background is set and a
/// mask is supplied, tiles whose mask mean is <= bg_threshold are dropped.
/// Returns (patch, mask patch) pairs; mask patch is undefined() without a mask.
inline std::vector<std::pair<ImageGrid, ImageGrid>> extract_patches(
    const ImageGrid& img, long patch, bool reject_background = false,
    double bg_threshold = 0.0, const std::optional<ImageGrid>& mask = std::nullopt) {
    long H = img.size(-2), W = img.size(-1);
    if (patch <= 0 || patch > std::min(H, W))
        throw std::invalid_argument("patch size " + std::to_string(patch) +
                                    " exceeds image side (" + std::to_string(H) + "x" +
                                    std::to_string(W) + ")");
    std::vector<std::pair<ImageGrid, ImageGrid>> out;
    using torch::indexing::Slice;
    for (long r = 0; r + patch <= H; r += patch) {
        for (long c = 0; c + patch <= W; c += patch) {
            auto tile = img.index({torch::indexing::Ellipsis, Slice(r, r + patch), Slice(c, c + patch)});
            torch::Tensor mtile;
            if (mask) {
                mtile = mask->index({torch::indexing::Ellipsis, Slice(r, r + patch), Slice(c, c + patch)});
                if (reject_background && mtile.mean().item<double>() <= bg_threshold) continue;
            }
            out.emplace_back(tile.clone(), mask ? mtile.clone() : torch::Tensor());
        }
    }
    return out;
}

namespace detail {

struct GeoDraw {
    int rot_quarters = 0;
    bool flip_h = false, flip_v = false;
};

inline torch::Tensor apply_geo(const torch::Tensor& chw, const GeoDraw& g) {
    auto t = chw;
    if (g.rot_quarters) t = torch::rot90(t, g.rot_quarters, {-2, -1});
    if (g.flip_h) t = torch::flip(t, {-1});
    if (g.flip_v) t = torch::flip(t, {-2});
    return t.contiguous();
}

inline torch::Tensor resize_chw(const torch::Tensor& chw, long h, long w, bool nearest) {
    namespace F = torch::nn::functional;
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w});
    if (nearest)
        opts = opts.mode(torch::kNearest);
    else
        opts = opts.mode(torch::kBilinear).align_corners(false);
    return F::interpolate(chw.unsqueeze(0), opts).squeeze(0);
}

}  // namespace detail

/// Paired augmentation: geometric transforms hit input and target alike,
/// photometric noise hits the input only. Deterministic under seed.
inline SamplePair augment(const SamplePair& sample, const AugmentPolicy& policy, uint64_t seed) {
    policy.validate();
    auto gen = detail::make_rng(seed);
    detail::GeoDraw g;
    if (!policy.rotations.empty()) {
        long idx = detail::randint(0, static_cast<long>(policy.rotations.size()) - 1, gen);
        g.rot_quarters = ((policy.rotations[static_cast<size_t>(idx)] / 90) % 4 + 4) % 4;
    }
    if (policy.flip) {
        g.flip_h = detail::randint(0, 1, gen) == 1;
        g.flip_v = detail::randint(0, 1, gen) == 1;
    }
    auto in = detail::apply_geo(sample.input, g);
    auto tg = detail::apply_geo(sample.target, g);
    double scale = detail::uniform(policy.resize_lo, policy.resize_hi, gen);
    if (std::abs(scale - 1.0) > 1e-12) {
        long h = std::max<long>(1, std::lround(in.size(-2) * scale));
        long w = std::max<long>(1, std::lround(in.size(-1) * scale));
        in = detail::resize_chw(in, h, w, false);
        tg = detail::resize_chw(tg, h, w, sample.target_is_mask);
        if (sample.target_is_mask) tg = (tg > 0.5).to(torch::kFloat32);
    }
    if (policy.crop_size > 0) {
        long cs = policy.crop_size;
        if (cs > in.size(-2) || cs > in.size(-1))
            throw std::invalid_argument("crop size " + std::to_string(cs) +
                                        " exceeds post-resize image " + std::to_string(in.size(-2)) +
                                        "x" + std::to_string(in.size(-1)));
        long r = detail::randint(0, in.size(-2) - cs, gen);
        long c = detail::randint(0, in.size(-1) - cs, gen);
        using torch::indexing::Slice;
        in = in.index({torch::indexing::Ellipsis, Slice(r, r + cs), Slice(c, c + cs)}).contiguous();
        tg = tg.index({torch::indexing::Ellipsis, Slice(r, r + cs), Slice(c, c + cs)}).contiguous();
    }
    if (policy.noise && policy.noise_sigma > 0)
        in = in + policy.noise_sigma * torch::randn(in.sizes(), gen);
    SamplePair out = sample;
    out.input = in;
    out.target = tg;
    return out;
}

namespace detail {

inline torch::Tensor corrupt_impl(const torch::Tensor& geo, const CorruptionPolicy& policy,
                                  torch::Generator& gen) {
    double blur_sigma = uniform(policy.blur_sigma_lo, policy.blur_sigma_hi, gen);
    auto out = gaussian_blur(geo, blur_sigma);
    double noise_sigma = uniform(policy.noise_sigma_lo, policy.noise_sigma_hi, gen);
    if (noise_sigma > 0) out = out + noise_sigma * torch::randn(out.sizes(), gen);
    return out;
}

inline GeoDraw draw_geo(const CorruptionPolicy& policy, torch::Generator& gen) {
    GeoDraw g;
    if (policy.rotate) g.rot_quarters = static_cast<int>(randint(0, 3, gen));
    if (policy.flip) {
        g.flip_h = randint(0, 1, gen) == 1;
        g.flip_v = randint(0, 1, gen) == 1;
    }
    return g;
}

}  // namespace detail

/// Pretext-input corruption: optional flips/rotations, then random blur
/// and Gaussian noise with magnitudes drawn from the policy ranges.
inline ImageGrid corrupt(const ImageGrid& img, const CorruptionPolicy& policy, uint64_t seed) {
    policy.validate();
    auto gen = detail::make_rng(seed);
    auto geo = detail::apply_geo(img, detail::draw_geo(policy, gen));
    return detail::corrupt_impl(geo, policy, gen);
}

/// Builds one pretext example from a clean image: geometric transforms
/// produce the target, blur+noise on top of it produce the input.
inline SamplePair make_pretext_pair(const ImageGrid& clean, const CorruptionPolicy& policy,
                                    uint64_t seed) {
    policy.validate();
    auto gen = detail::make_rng(seed);
    auto target = detail::apply_geo(clean, detail::draw_geo(policy, gen));
    SamplePair p;
    p.task = Task::pretext;
    p.target = target;
    p.input = detail::corrupt_impl(target, policy, gen);
    return p;
}

// ---------------------------------------------------------------------------
// Dataset handle

struct DatasetItem {
    Task task = Task::pretext;
    std::string split;
    fs::path input_path, target_path;  // file-backed when non-empty
    bool target_is_mask = false;
    std::optional<SamplePair> mem;  // memory-backed
};

namespace detail {

inline torch::Tensor load_image(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw std::runtime_error("unreadable image file: " + path.string());
    if (m.channels() > 1) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
    cv::Mat f;
    switch (m.depth()) {
        case CV_8U: m.convertTo(f, CV_32F, 1.0 / 255.0); break;
        case CV_16U: m.convertTo(f, CV_32F, 1.0 / 65535.0); break;
        case CV_32F: f = m; break;
        default: m.convertTo(f, CV_32F); break;
    }
    auto t = torch::from_blob(f.data, {f.rows, f.cols}, torch::kFloat32).clone();
    return t.unsqueeze(0);
}

}  // namespace detail

/// Read-only, deterministically ordered collection of samples; safe to
/// enumerate from multiple threads after construction.
class Dataset {
  public:
    Dataset() = default;
    explicit Dataset(std::vector<DatasetItem> items) : items_(std::move(items)) {}

    static Dataset from_samples(std::vector<SamplePair> samples, std::string split = "") {
        std::vector<DatasetItem> items;
        items.reserve(samples.size());
        for (auto& s : samples) {
            DatasetItem it;
            it.task = s.task;
            it.split = split;
            it.target_is_mask = s.target_is_mask;
            it.mem = std::move(s);
            items.push_back(std::move(it));
        }
        return Dataset(std::move(items));
    }

    size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const DatasetItem& item(size_t i) const { return items_.at(i); }

    SamplePair get(size_t i) const {
        const auto& it = items_.at(i);
        if (it.mem) return *it.mem;
        SamplePair s;
        s.task = it.task;
        s.target_is_mask = it.target_is_mask;
        s.input = detail::load_image(it.input_path);
        if (it.target_path == it.input_path) {
            s.target = s.input.clone();
        } else {
            s.target = detail::load_image(it.target_path);
            if (it.target_is_mask) s.target = (s.target > 0.5).to(torch::kFloat32);
        }
        return s;
    }

    std::vector<Task> tasks() const {
        std::vector<Task> out;
        for (const auto& it : items_)
            if (std::find(out.begin(), out.end(), it.task) == out.end()) out.push_back(it.task);
        return out;
    }

    Dataset filter_task(Task t) const {
        std::vector<DatasetItem> keep;
        for (const auto& it : items_)
            if (it.task == t) keep.push_back(it);
        return Dataset(std::move(keep));
    }

    Dataset filter_split(const std::string& split) const {
        std::vector<DatasetItem> keep;
        for (const auto& it : items_)
            if (it.split == split) keep.push_back(it);
        return Dataset(std::move(keep));
    }

    Dataset take(size_t n) const {
        std::vector<DatasetItem> keep(items_.begin(), items_.begin() + std::min(n, items_.size()));
        return Dataset(std::move(keep));
    }

    Dataset select(const std::vector<long>& indices) const {
        std::vector<DatasetItem> keep;
        keep.reserve(indices.size());
        for (long i : indices) keep.push_back(items_.at(static_cast<size_t>(i)));
        return Dataset(std::move(keep));
    }

  private:
    std::vector<DatasetItem> items_;
};

/// Seeded-shuffle disjoint split into train/val/test.
inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec) {
    long n = static_cast<long>(ds.size());
    long n_train, n_val, n_test;
    if (spec.counts) {
        n_train = (*spec.counts)[0];
        n_val = (*spec.counts)[1];
        n_test = (*spec.counts)[2];
        if (n_train + n_val + n_test > n)
            throw std::invalid_argument("split over-allocation: requested " +
                                        std::to_string(n_train + n_val + n_test) + " of " +
                                        std::to_string(n));
    } else if (spec.fractions) {
        n_train = static_cast<long>((*spec.fractions)[0] * n);
        n_val = static_cast<long>((*spec.fractions)[1] * n);
        n_test = static_cast<long>((*spec.fractions)[2] * n);
        if (n_train + n_val + n_test > n) throw std::invalid_argument("split fractions exceed 1");
    } else {
        throw std::invalid_argument("SplitSpec needs counts or fractions");
    }
    auto gen = detail::make_rng(spec.seed);
    auto perm = torch::randperm(n, gen);
    std::vector<long> tr, va, te;
    for (long i = 0; i < n_train; ++i) tr.push_back(perm[i].item<long>());
    for (long i = 0; i < n_val; ++i) va.push_back(perm[n_train + i].item<long>());
    for (long i = 0; i < n_test; ++i) te.push_back(perm[n_train + n_val + i].item<long>());
    std::sort(tr.begin(), tr.end());
    std::sort(va.begin(), va.end());
    std::sort(te.begin(), te.end());
    return {ds.select(tr), ds.select(va), ds.select(te)};
}

// ---------------------------------------------------------------------------
// Synthetic EM-like corpus

struct SynthParams {
    int count = 16;
    int image_size = 64;
    double spacing_lo = 4.0, spacing_hi = 7.0;  // lattice spacing, pixels
    double atom_sigma = 1.2;                    // atom blob width
    double sharp_sigma = 0.5;                   // super-resolution target width
    int particles_lo = 1, particles_hi = 3;
    double radius_lo = 8.0, radius_hi = 16.0;  // particle radius, pixels
    double noise_sigma = 0.2;
    double scan_noise = 0.1;  // intensity-dependent (Poisson-like) term
    double bg_amplitude = 0.5;

    void validate() const {
        if (count < 1) throw std::invalid_argument("synth count must be >= 1");
        if (image_size < 16) throw std::invalid_argument("synth image_size must be >= 16");
        if (particles_hi < 1 || particles_lo < 1 || particles_hi < particles_lo)
            throw std::invalid_argument("degenerate synth params: particle count range must be >= 1");
        if (spacing_lo <= 0 || spacing_hi < spacing_lo)
            throw std::invalid_argument("lattice spacing range invalid");
        if (radius_lo <= 0 || radius_hi < radius_lo)
            throw std::invalid_argument("particle radius range invalid");
        if (atom_sigma <= 0 || sharp_sigma <= 0)
            throw std::invalid_argument("atom sigmas must be positive");
        if (noise_sigma < 0 || scan_noise < 0 || bg_amplitude < 0)
            throw std::invalid_argument("noise/background amplitudes must be >= 0");
        if (2 * radius_hi >= image_size)
            throw std::invalid_argument("particle radius too large for image size");
    }
};

/// One synthetic sample: all five aligned grids.
struct SynthSample {
    ImageGrid input;     // noisy lattice + background (the observed image)
    ImageGrid denoise;   // lattice + background, noise-free
    ImageGrid clean;     // lattice only (noise & background removal target)
    ImageGrid superres;  // sharpened-atom lattice
    ImageGrid mask;      // binary particle mask
    double placed_disk_area = 0;  // sum of clipped analytic disk areas, px
};

namespace detail {

inline SynthSample generate_synth_sample(const SynthParams& p, uint64_t seed) {
    auto gen = make_rng(seed);
    long S = p.image_size;
    auto ys = torch::arange(S, torch::kFloat32).view({S, 1}).expand({S, S});
    auto xs = torch::arange(S, torch::kFloat32).view({1, S}).expand({S, S});

    long n_particles = randint(p.particles_lo, p.particles_hi, gen);
    auto mask = torch::zeros({S, S}, torch::kBool);
    struct Disk { double cx, cy, r; };
    std::vector<Disk> disks;
    double area = 0;
    for (long i = 0; i < n_particles; ++i) {
        double r = uniform(p.radius_lo, p.radius_hi, gen);
        double cx = uniform(r, S - 1 - r, gen);
        double cy = uniform(r, S - 1 - r, gen);
        disks.push_back({cx, cy, r});
        area += M_PI * r * r;
        mask |= ((xs - cx).square() + (ys - cy).square()) <= r * r;
    }

    // hexagonal lattice of atom sites, kept only inside particles
    double spacing = uniform(p.spacing_lo, p.spacing_hi, gen);
    double theta = uniform(0, M_PI / 3, gen);
    double phase_x = uniform(0, spacing, gen);
    double phase_y = uniform(0, spacing, gen);
    double ax = spacing * std::cos(theta), ay = spacing * std::sin(theta);
    double bx = spacing * std::cos(theta + M_PI / 3), by = spacing * std::sin(theta + M_PI / 3);
    auto deltas = torch::zeros({S, S}, torch::kFloat32);
    long reach = static_cast<long>(2.0 * S / spacing) + 2;
    auto mask_acc = mask.accessor<bool, 2>();
    auto delta_acc = deltas.accessor<float, 2>();
    for (long i = -reach; i <= reach; ++i) {
        for (long j = -reach; j <= reach; ++j) {
            double x = phase_x + i * ax + j * bx;
            double y = phase_y + i * ay + j * by;
            long px = std::lround(x), py = std::lround(y);
            if (px < 0 || px >= S || py < 0 || py >= S) continue;
            if (mask_acc[py][px]) delta_acc[py][px] = 1.0f;
        }
    }

    // peak-normalized blurs so atom amplitude is ~1
    auto blur_peak1 = [&](const torch::Tensor& d, double sigma) {
        auto b = gaussian_blur(d.unsqueeze(0), sigma);
        auto k = gaussian_kernel1d(sigma);
        double peak = k.max().item<double>();
        return b / (peak * peak);
    };
    auto lattice = blur_peak1(deltas, p.atom_sigma);
    auto sharp = blur_peak1(deltas, p.sharp_sigma);

    // low-frequency background: low-order polynomial + sinusoid
    auto xn = (xs / double(S)).unsqueeze(0);
    auto yn = (ys / double(S)).unsqueeze(0);
    double c0 = uniform(-1, 1, gen), c1 = uniform(-1, 1, gen), c2 = uniform(-1, 1, gen);
    double fx = uniform(0.5, 2.0, gen), fy = uniform(0.5, 2.0, gen), phi = uniform(0, 2 * M_PI, gen);
    auto bg = p.bg_amplitude * (c0 + c1 * xn + c2 * yn +
                                0.5 * torch::sin(2 * M_PI * (fx * xn + fy * yn) + phi));

    SynthSample s;
    s.clean = lattice;
    s.superres = sharp;
    s.denoise = lattice + bg;
    s.mask = mask.to(torch::kFloat32).unsqueeze(0);
    auto noise = p.noise_sigma * torch::randn({1, S, S}, gen) +
                 p.scan_noise * torch::sqrt(lattice.clamp_min(0)) * torch::randn({1, S, S}, gen);
    s.input = s.denoise + noise;
    s.placed_disk_area = area;
    return s;
}

}  // namespace detail

/// Deterministic in-memory synthetic corpus with targets for every task.
class SynthCorpus {
  public:
    SynthCorpus(const SynthParams& params, uint64_t seed) : params_(params), seed_(seed) {
        params.validate();
        samples_.reserve(static_cast<size_t>(params.count));
        for (int i = 0; i < params.count; ++i)
            samples_.push_back(detail::generate_synth_sample(params, detail::mix_seed(seed, static_cast<uint64_t>(i))));
    }

    size_t size() const { return samples_.size(); }
    const SynthSample& sample(size_t i) const { return samples_.at(i); }
    const SynthParams& params() const { return params_; }

    /// View of the corpus as a task dataset.
    Dataset dataset(Task task) const {
        std::vector<SamplePair> pairs;
        pairs.reserve(samples_.size());
        for (const auto& s : samples_) {
            SamplePair p;
            p.task = task;
            p.input = s.input;
            switch (task) {
                case Task::pretext: p.target = s.input; break;
                case Task::denoise: p.target = s.denoise; break;
                case Task::noise_bg_removal: p.target = s.clean; break;
                case Task::superres: p.target = s.superres; break;
                case Task::segmentation:
                    p.target = s.mask;
                    p.target_is_mask = true;
                    break;
            }
            pairs.push_back(std::move(p));
        }
        return Dataset::from_samples(std::move(pairs));
    }

  private:
    SynthParams params_;
    uint64_t seed_;
    std::vector<SynthSample> samples_;
};

inline SynthCorpus synth_corpus(const SynthParams& params, uint64_t seed) {
    return SynthCorpus(params, seed);
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<task>/<split>/{inputs,targets}/<stem>.png
// matched by stem; manifest.json names the tasks and target conventions.

namespace detail {

// fixed affine value range for lossless-ish 16-bit storage
constexpr double kStoreLo = -4.0, kStoreHi = 8.0;

inline void write_image16(const fs::path& path, const torch::Tensor& chw) {
    auto t = ((chw.squeeze(0) - kStoreLo) / (kStoreHi - kStoreLo)).clamp(0, 1) * 65535.0;
    auto u = t.to(torch::kFloat32).contiguous();
    cv::Mat f(static_cast<int>(u.size(0)), static_cast<int>(u.size(1)), CV_32F, u.data_ptr<float>());
    cv::Mat m16;
    f.convertTo(m16, CV_16U);
    if (!cv::imwrite(path.string(), m16))
        throw std::runtime_error("failed to write " + path.string());
}

inline void write_mask8(const fs::path& path, const torch::Tensor& chw) {
    auto u = (chw.squeeze(0) * 255.0).to(torch::kFloat32).contiguous();
    cv::Mat f(static_cast<int>(u.size(0)), static_cast<int>(u.size(1)), CV_32F, u.data_ptr<float>());
    cv::Mat m8;
    f.convertTo(m8, CV_8U);
    if (!cv::imwrite(path.string(), m8))
        throw std::runtime_error("failed to write " + path.string());
}

}  // namespace detail

/// Writes a synthetic corpus to the documented directory layout, split by
/// fractions, with a manifest describing the target convention per task.
inline void write_synth_corpus(const SynthCorpus& corpus, const fs::path& root,
                               std::array<double, 3> fractions = {0.6, 0.2, 0.2}) {
    long n = static_cast<long>(corpus.size());
    long n_train = static_cast<long>(fractions[0] * n);
    long n_val = static_cast<long>(fractions[1] * n);
    auto split_of = [&](long i) {
        if (i < n_train) return std::string("train");
        if (i < n_train + n_val) return std::string("val");
        return std::string("test");
    };
    const std::vector<std::pair<std::string, Task>> tasks = {
        {"pretext", Task::pretext},
        {"segmentation", Task::segmentation},
        {"denoise", Task::denoise},
        {"noise_bg_removal", Task::noise_bg_removal},
        {"superres", Task::superres},
    };
    for (long i = 0; i < n; ++i) {
        const auto& s = corpus.sample(static_cast<size_t>(i));
        char stem[16];
        std::snprintf(stem, sizeof(stem), "%05ld", i);
        for (const auto& [name, task] : tasks) {
            fs::path dir = root / name / split_of(i);
            fs::create_directories(dir / "inputs");
            fs::create_directories(dir / "targets");
            detail::write_image16(dir / "inputs" / (std::string(stem) + ".png"), s.input);
            fs::path tpath = dir / "targets" / (std::string(stem) + ".png");
            switch (task) {
                case Task::pretext: detail::write_image16(tpath, s.input); break;
                case Task::denoise: detail::write_image16(tpath, s.denoise); break;
                case Task::noise_bg_removal: detail::write_image16(tpath, s.clean); break;
                case Task::superres: detail::write_image16(tpath, s.superres); break;
                case Task::segmentation: detail::write_mask8(tpath, s.mask); break;
            }
        }
    }
    nlohmann::json manifest;
    manifest["tasks"] = nlohmann::json::array();
    for (const auto& [name, task] : tasks) {
        manifest["tasks"].push_back(
            {{"name", name}, {"target", task == Task::segmentation ? "mask" : "image"}});
    }
    manifest["value_range"] = {detail::kStoreLo, detail::kStoreHi};
    std::ofstream out(root / "manifest.json");
    out << manifest.dump(2) << "\n";
}

/// Enumerates the documented layout into a dataset handle. Ordering is
/// lexicographic; a missing target or unreadable manifest is an error.
inline Dataset ingest_dataset(const fs::path& root, const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot read layout manifest: " + manifest_path.string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    std::vector<DatasetItem> items;
    for (const auto& tj : manifest.at("tasks")) {
        std::string tname = tj.at("name").get<std::string>();
        std::string tconv = tj.at("target").get<std::string>();
        Task task = task_from_string(tname);
        fs::path tdir = root / tname;
        if (!fs::exists(tdir)) continue;
        std::vector<fs::path> split_dirs;
        for (const auto& e : fs::directory_iterator(tdir))
            if (e.is_directory()) split_dirs.push_back(e.path());
        std::sort(split_dirs.begin(), split_dirs.end());
        for (const auto& sdir : split_dirs) {
            fs::path inputs = sdir / "inputs";
            fs::path targets = sdir / "targets";
            if (!fs::exists(inputs)) continue;
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(inputs)) {
                auto ext = e.path().extension().string();
                if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                DatasetItem it;
                it.task = task;
                it.split = sdir.filename().string();
                it.input_path = f;
                it.target_is_mask = tconv == "mask";
                if (tconv == "self") {
                    it.target_path = f;
                } else {
                    fs::path tp;
                    for (const char* ext : {".png", ".tif", ".tiff"}) {
                        fs::path cand = targets / (f.stem().string() + ext);
                        if (fs::exists(cand)) {
                            tp = cand;
                            break;
                        }
                    }
                    if (tp.empty())
                        throw std::runtime_error("input without matching target: " + f.string());
                    it.target_path = tp;
                }
                items.push_back(std::move(it));
            }
        }
    }
    if (items.empty())
        throw std::runtime_error("no samples found under " + root.string());
    return Dataset(std::move(items));
}

}  // namespace emss

#endif  // EMSS_DATA_HPP
