#ifndef EMSS_TRAIN_HPP
#define EMSS_TRAIN_HPP

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "emss/checkpoint.hpp"
#include "emss/data.hpp"
#include "emss/losses.hpp"
#include "emss/metrics.hpp"
#include "emss/networks.hpp"

namespace emss {

struct TrainHyper {
    int epochs = 60;
    int batch_size = 128;
    double learning_rate = 2e-4;
    double lambda_l1 = 100.0;
    std::pair<double, double> adam_betas{0.5, 0.999};
    uint64_t seed = 0;
    int checkpoint_interval = 5;
    std::optional<int> subset_size;

    void validate() const {
        if (epochs <= 0) throw std::invalid_argument("epochs must be > 0");
        if (batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
        if (learning_rate <= 0) throw std::invalid_argument("learning_rate must be > 0");
        if (lambda_l1 < 0) throw std::invalid_argument("lambda_l1 must be >= 0");
        if (checkpoint_interval <= 0) throw std::invalid_argument("checkpoint_interval must be > 0");
        if (subset_size && *subset_size <= 0) throw std::invalid_argument("subset_size must be > 0");
    }
};

struct PretrainRun {
    ModelSpec generator;
    ModelSpec discriminator;
    TrainHyper hyper;
    CorruptionPolicy corruption;
    Dataset train, val;
    std::filesystem::path out_dir;
    std::string subset_tag = "full";
};

struct TrainResult {
    Network net;
    std::vector<std::filesystem::path> checkpoints;
    MetricSeries val_metric;
    double initial_val = 0;
};

/// Mean L1 between generated output and clean target over the validation
/// set, with corruption fixed by seed. Never mutates parameters.
inline double validate_generator(Network& net, const Dataset& val_set,
                                 const CorruptionPolicy& corruption, uint64_t seed) {
    if (val_set.empty()) throw std::invalid_argument("validate_generator: empty validation set");
    torch::NoGradGuard no_grad;
    bool was_training = net.module->is_training();
    net.eval();
    double acc = 0;
    for (size_t i = 0; i < val_set.size(); ++i) {
        auto clean = standardize(val_set.get(i).input);
        auto pair = make_pretext_pair(clean, corruption, detail::mix_seed(seed, i));
        auto pred = net.forward(pair.input.unsqueeze(0));
        acc += (pred - pair.target.unsqueeze(0)).abs().mean().item<double>();
    }
    net.train(was_training);
    return acc / static_cast<double>(val_set.size());
}

struct GanStepStats {
    double d_loss = 0, g_adv = 0, l1 = 0, g_objective = 0;
};

/// One alternating D-step/G-step on a batch of (conditioning x, target y).
inline GanStepStats gan_train_step(Network& gen, Network& disc, torch::optim::Adam& opt_g,
                                   torch::optim::Adam& opt_d, const torch::Tensor& x,
                                   const torch::Tensor& y, double lambda_l1) {
    GanStepStats stats;
    // D step
    opt_d.zero_grad();
    auto fake = gen.forward(x);
    auto d_real = disc.forward(torch::cat({x, y}, 1));
    auto d_fake = disc.forward(torch::cat({x, fake.detach()}, 1));
    auto d_loss = lsgan_d_loss(d_real, d_fake);
    d_loss.backward();
    opt_d.step();
    // G step
    opt_g.zero_grad();
    auto g_adv = lsgan_g_loss(disc.forward(torch::cat({x, fake}, 1)));
    auto l1 = l1_recon_loss(fake, y);
    auto g_obj = generator_objective(g_adv, l1, lambda_l1);
    g_obj.backward();
    opt_g.step();
    stats.d_loss = d_loss.item<double>();
    stats.g_adv = g_adv.item<double>();
    stats.l1 = l1.item<double>();
    stats.g_objective = g_obj.item<double>();
    return stats;
}

namespace detail {

inline std::vector<long> shuffled_indices(size_t n, uint64_t seed) {
    auto gen = make_rng(seed);
    auto perm = torch::randperm(static_cast<long>(n), gen);
    std::vector<long> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = perm[static_cast<long>(i)].item<long>();
    return idx;
}

inline void check_finite(double v, const std::string& where) {
    if (!std::isfinite(v))
        throw std::runtime_error("non-finite loss during " + where + "; training diverged");
}

struct WindowBest {
    bool lower_is_better = true;
    double best = 0;
    bool has = false;
    std::vector<std::pair<std::string, torch::Tensor>> params;

    void offer(double metric, const Network& net) {
        bool better = !has || (lower_is_better ? metric < best : metric > best);
        if (!better) return;
        best = metric;
        has = true;
        params.clear();
        for (auto& kv : net.named_tensors())
            params.emplace_back(kv.first, kv.second.detach().to(torch::kFloat32).contiguous().clone());
    }
    void reset() {
        has = false;
        params.clear();
    }
};

inline std::filesystem::path save_window_checkpoint(
    const WindowBest& wb, const Network& net, Task task, int epoch, const std::string& provenance,
    const std::string& metric_kind, const std::filesystem::path& out_dir, const std::string& stem) {
    CheckpointRecord rec;
    rec.spec = net.spec;
    rec.head = net.head_kind;
    rec.task = task;
    rec.epoch = epoch;
    rec.best_val_metric = wb.best;
    rec.provenance = provenance;
    rec.metric_kind = metric_kind;
    rec.tensors = wb.params;
    std::filesystem::create_directories(out_dir);
    auto path = out_dir / (stem + "_e" + std::to_string(epoch) + ".ckpt");
    save_checkpoint(rec, path);
    return path;
}

inline Dataset apply_subset(const Dataset& ds, const TrainHyper& hyper) {
    if (!hyper.subset_size || static_cast<size_t>(*hyper.subset_size) >= ds.size()) return ds;
    auto idx = shuffled_indices(ds.size(), mix_seed(hyper.seed, 0x5b));
    idx.resize(static_cast<size_t>(*hyper.subset_size));
    std::sort(idx.begin(), idx.end());
    return ds.select(idx);
}

}  // namespace detail

/// Self-supervised pretext training: conditional LSGAN + lambda-weighted L1.
/// Checkpoints carry the best validation L1 inside each interval window.
inline TrainResult pretrain(const PretrainRun& run) {
    run.hyper.validate();
    run.corruption.validate();
    if (run.train.empty()) throw std::invalid_argument("pretrain: empty training set");
    const auto& hy = run.hyper;
    torch::manual_seed(hy.seed);

    Dataset train = detail::apply_subset(run.train, hy);
    Network gen = build_generator(run.generator, detail::mix_seed(hy.seed, 1), HeadKind::image);
    Network disc = build_discriminator(run.discriminator, detail::mix_seed(hy.seed, 2));
    if (run.discriminator.in_channels != 2 * run.generator.in_channels)
        throw std::invalid_argument("discriminator must consume 2x generator channels");

    torch::optim::Adam opt_g(gen.module->parameters(),
                             torch::optim::AdamOptions(hy.learning_rate)
                                 .betas({hy.adam_betas.first, hy.adam_betas.second}));
    torch::optim::Adam opt_d(disc.module->parameters(),
                             torch::optim::AdamOptions(hy.learning_rate)
                                 .betas({hy.adam_betas.first, hy.adam_betas.second}));

    TrainResult result;
    result.val_metric.kind = "l1";
    result.val_metric.label = run.generator.name + " pretext " + run.subset_tag;
    uint64_t val_seed = detail::mix_seed(hy.seed, 0xa1);
    result.initial_val = validate_generator(gen, run.val, run.corruption, val_seed);

    detail::WindowBest window;
    window.lower_is_better = true;
    std::string stem = run.generator.name + "_pretext_" + run.subset_tag;

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        gen.train();
        disc.train();
        auto order = detail::shuffled_indices(train.size(), detail::mix_seed(hy.seed, 0xe, epoch));
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hy.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(hy.batch_size));
            std::vector<torch::Tensor> xs, ys;
            for (size_t k = start; k < end; ++k) {
                auto clean = standardize(train.get(static_cast<size_t>(order[k])).input);
                auto pair = make_pretext_pair(clean, run.corruption,
                                              detail::mix_seed(hy.seed, epoch, order[k]));
                xs.push_back(pair.input);
                ys.push_back(pair.target);
            }
            auto stats = gan_train_step(gen, disc, opt_g, opt_d, torch::stack(xs), torch::stack(ys),
                                        hy.lambda_l1);
            detail::check_finite(stats.d_loss, "discriminator step (epoch " + std::to_string(epoch) + ")");
            detail::check_finite(stats.g_objective, "generator step (epoch " + std::to_string(epoch) + ")");
        }
        double val = validate_generator(gen, run.val, run.corruption, val_seed);
        result.val_metric.add(epoch, val);
        window.offer(val, gen);
        if (epoch % hy.checkpoint_interval == 0) {
            result.checkpoints.push_back(detail::save_window_checkpoint(
                window, gen, Task::pretext, epoch, run.subset_tag, "l1", run.out_dir, stem));
            window.reset();
        }
    }
    std::filesystem::create_directories(run.out_dir);
    write_series_csv(result.val_metric, run.out_dir / (stem + "_val_l1.csv"), "val_l1");
    result.net = gen;
    return result;
}

struct FinetuneRun {
    Task task = Task::segmentation;
    std::optional<std::filesystem::path> init_checkpoint;  // absent = random init
    ModelSpec spec;
    TrainHyper hyper;
    AugmentPolicy augment;
    Dataset train, val;
    std::filesystem::path out_dir;
};

/// Supervised downstream training from random or pretrained initialization.
/// Segmentation minimizes BCE and validates Dice; the regression tasks
/// minimize L1+L2 and validate L1.
inline TrainResult finetune(const FinetuneRun& run) {
    run.hyper.validate();
    run.augment.validate();
    if (run.task == Task::pretext) throw std::invalid_argument("finetune expects a downstream task");
    if (run.train.empty()) throw std::invalid_argument("finetune: empty training set");
    const auto& hy = run.hyper;
    torch::manual_seed(hy.seed);

    bool seg = run.task == Task::segmentation;
    MetricKind metric = seg ? MetricKind::dice : MetricKind::l1;
    Network net = build_generator(run.spec, detail::mix_seed(hy.seed, 7),
                                  seg ? HeadKind::segmentation : HeadKind::image);
    std::string init_tag = "R";
    if (run.init_checkpoint) {
        auto rec = load_checkpoint(*run.init_checkpoint);
        if (rec.spec.family != run.spec.family)
            throw std::runtime_error("transfer_weights: checkpoint family '" + to_string(rec.spec.family) +
                                     "' does not match run spec family '" + to_string(run.spec.family) + "'");
        Network source = restore_network(rec);
        transfer_weights(source, net, {net.head_name});
        init_tag = "P(" + rec.provenance + ")";
    }

    torch::optim::Adam opt(net.module->parameters(),
                           torch::optim::AdamOptions(hy.learning_rate)
                               .betas({hy.adam_betas.first, hy.adam_betas.second}));

    Dataset train = detail::apply_subset(run.train, hy);
    TrainResult result;
    result.val_metric.kind = to_string(metric);
    result.val_metric.label = run.spec.name + " " + to_string(run.task) + " " + init_tag;
    if (!run.val.empty()) result.initial_val = evaluate_network(net, run.val, metric);

    detail::WindowBest window;
    window.lower_is_better = !seg;
    std::string stem = run.spec.name + "_" + to_string(run.task) + "_" + init_tag;

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        net.train();
        auto order = detail::shuffled_indices(train.size(), detail::mix_seed(hy.seed, 0xf, epoch));
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hy.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(hy.batch_size));
            std::vector<torch::Tensor> xs, ys;
            for (size_t k = start; k < end; ++k) {
                auto s = train.get(static_cast<size_t>(order[k]));
                s.input = standardize(s.input);
                if (!s.target_is_mask) s.target = standardize(s.target);
                s = augment(s, run.augment, detail::mix_seed(hy.seed, epoch, order[k]));
                xs.push_back(s.input);
                ys.push_back(s.target);
            }
            opt.zero_grad();
            auto pred = net.forward(torch::stack(xs));
            auto target = torch::stack(ys);
            auto loss = seg ? bce_loss(pred, target) : regression_loss(pred, target, 1.0, 1.0);
            loss.backward();
            opt.step();
            detail::check_finite(loss.item<double>(),
                                 to_string(run.task) + " step (epoch " + std::to_string(epoch) + ")");
        }
        double val = run.val.empty() ? 0 : evaluate_network(net, run.val, metric);
        result.val_metric.add(epoch, val);
        window.offer(val, net);
        if (epoch % hy.checkpoint_interval == 0) {
            result.checkpoints.push_back(detail::save_window_checkpoint(
                window, net, run.task, epoch, init_tag, to_string(metric), run.out_dir, stem));
            window.reset();
        }
    }
    std::filesystem::create_directories(run.out_dir);
    write_series_csv(result.val_metric, run.out_dir / (stem + "_val_metric.csv"), "val_metric");
    result.net = net;
    return result;
}

}  // namespace emss

#endif  // EMSS_TRAIN_HPP
