#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "emss/config.hpp"
#include "emss/train.hpp"

using namespace emss;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    auto d = fs::path(::testing::TempDir()) / ("emss_" + tag);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

SynthParams tiny_params(int count = 10, int size = 32) {
    SynthParams p;
    p.count = count;
    p.image_size = size;
    p.radius_lo = 4;
    p.radius_hi = 8;
    return p;
}

PretrainRun tiny_pretrain(const fs::path& out, uint64_t seed = 1) {
    static SynthCorpus corpus(tiny_params(), 50);
    PretrainRun run;
    run.generator = preset("U-Net_2_44", 4);
    run.discriminator = make_discriminator_spec(1, 4);
    run.hyper.epochs = 4;
    run.hyper.batch_size = 4;
    run.hyper.checkpoint_interval = 2;
    run.hyper.seed = seed;
    run.train = corpus.dataset(Task::pretext).take(8);
    run.val = corpus.dataset(Task::pretext).select({8, 9});
    run.out_dir = out;
    return run;
}

// trainable parameters only; norm running statistics update on any
// train-mode forward and say nothing about optimizer isolation
std::vector<torch::Tensor> snapshot(const Network& net) {
    std::vector<torch::Tensor> out;
    for (auto& p : net.module->parameters()) out.push_back(p.clone());
    return out;
}

bool same_params(const Network& net, const std::vector<torch::Tensor>& snap) {
    auto now = net.module->parameters();
    for (size_t i = 0; i < now.size(); ++i)
        if (!torch::equal(now[i], snap[i])) return false;
    return true;
}

}  // namespace

TEST(GanStep, OptimizerIsolation) {
    torch::manual_seed(40);
    auto gen = build_generator(preset("U-Net_2_44", 4), 1);
    auto disc = build_discriminator(make_discriminator_spec(1, 4), 2);
    auto x = torch::randn({2, 1, 32, 32});
    auto y = torch::randn({2, 1, 32, 32});

    // frozen generator: only D moves
    {
        torch::optim::Adam og(gen.module->parameters(), torch::optim::AdamOptions(0.0));
        torch::optim::Adam od(disc.module->parameters(), torch::optim::AdamOptions(1e-3));
        auto g0 = snapshot(gen), d0 = snapshot(disc);
        auto stats = gan_train_step(gen, disc, og, od, x, y, 100.0);
        EXPECT_TRUE(std::isfinite(stats.d_loss));
        EXPECT_TRUE(same_params(gen, g0));
        EXPECT_FALSE(same_params(disc, d0));
    }
    // frozen discriminator: only G moves
    {
        torch::optim::Adam og(gen.module->parameters(), torch::optim::AdamOptions(1e-3));
        torch::optim::Adam od(disc.module->parameters(), torch::optim::AdamOptions(0.0));
        auto g0 = snapshot(gen), d0 = snapshot(disc);
        auto stats = gan_train_step(gen, disc, og, od, x, y, 100.0);
        EXPECT_TRUE(std::isfinite(stats.g_objective));
        EXPECT_NEAR(stats.g_objective, stats.g_adv + 100.0 * stats.l1, 1e-4);
        EXPECT_FALSE(same_params(gen, g0));
        EXPECT_TRUE(same_params(disc, d0));
    }
}

TEST(Validate, NeverMutatesAndIsSeedStable) {
    SynthCorpus corpus(tiny_params(4), 51);
    auto net = build_generator(preset("U-Net_2_44", 4), 3);
    auto val = corpus.dataset(Task::pretext);
    CorruptionPolicy pol;
    auto before = snapshot(net);
    double a = validate_generator(net, val, pol, 9);
    double b = validate_generator(net, val, pol, 9);
    double c = validate_generator(net, val, pol, 10);
    EXPECT_TRUE(same_params(net, before));
    EXPECT_DOUBLE_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_GT(a, 0.0);
    EXPECT_THROW(validate_generator(net, Dataset{}, pol, 0), std::invalid_argument);
}

TEST(WindowBest, TracksBestWithinWindowOnly) {
    auto net = build_generator(preset("U-Net_2_44", 4), 4);
    emss::detail::WindowBest wb;
    wb.lower_is_better = true;
    wb.offer(0.5, net);
    wb.offer(0.3, net);
    wb.offer(0.4, net);
    EXPECT_DOUBLE_EQ(wb.best, 0.3);
    EXPECT_FALSE(wb.params.empty());
    wb.reset();
    EXPECT_FALSE(wb.has);
    wb.offer(0.9, net);
    EXPECT_DOUBLE_EQ(wb.best, 0.9);

    emss::detail::WindowBest hi;
    hi.lower_is_better = false;
    hi.offer(0.2, net);
    hi.offer(0.7, net);
    hi.offer(0.5, net);
    EXPECT_DOUBLE_EQ(hi.best, 0.7);
}

TEST(Subset, SeededAndSizeLimited) {
    SynthCorpus corpus(tiny_params(10, 32), 52);
    auto ds = corpus.dataset(Task::pretext);
    TrainHyper hy;
    hy.subset_size = 4;
    hy.seed = 3;
    auto a = emss::detail::apply_subset(ds, hy);
    auto b = emss::detail::apply_subset(ds, hy);
    EXPECT_EQ(a.size(), 4u);
    for (size_t i = 0; i < a.size(); ++i)
        EXPECT_TRUE(torch::equal(a.get(i).input, b.get(i).input));
    hy.subset_size = 100;
    EXPECT_EQ(emss::detail::apply_subset(ds, hy).size(), 10u);
}

TEST(CheckFinite, NamesTheFailingStep) {
    emss::detail::check_finite(1.0, "anywhere");
    try {
        emss::detail::check_finite(std::nan(""), "generator step (epoch 3)");
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("generator step (epoch 3)"), std::string::npos);
    }
}

TEST(Pretrain, CheckpointCadenceAndArtifacts) {
    auto out = fresh_dir("pre_cadence");
    auto run = tiny_pretrain(out);
    auto result = pretrain(run);

    // floor(epochs / interval) checkpoints at interval multiples
    ASSERT_EQ(result.checkpoints.size(), 2u);
    EXPECT_EQ(result.checkpoints[0].filename().string(), "U-Net_2_44_pretext_full_e2.ckpt");
    EXPECT_EQ(result.checkpoints[1].filename().string(), "U-Net_2_44_pretext_full_e4.ckpt");
    for (const auto& p : result.checkpoints) EXPECT_TRUE(fs::exists(p));

    EXPECT_EQ(result.val_metric.size(), 4u);
    EXPECT_GT(result.initial_val, 0.0);
    EXPECT_TRUE(fs::exists(out / "U-Net_2_44_pretext_full_val_l1.csv"));

    auto rec = load_checkpoint(result.checkpoints[0]);
    EXPECT_EQ(rec.task, Task::pretext);
    EXPECT_EQ(rec.provenance, "full");
    EXPECT_EQ(rec.metric_kind, "l1");
    // window best at epoch 2 is the better of epochs 1 and 2
    double best12 = std::min(result.val_metric.points[0].second,
                             result.val_metric.points[1].second);
    EXPECT_DOUBLE_EQ(rec.best_val_metric, best12);
}

TEST(Pretrain, ByteIdenticalUnderSameSeed) {
    auto out_a = fresh_dir("pre_det_a");
    auto out_b = fresh_dir("pre_det_b");
    auto ra = pretrain(tiny_pretrain(out_a, 7));
    auto rb = pretrain(tiny_pretrain(out_b, 7));
    EXPECT_EQ(slurp(out_a / "U-Net_2_44_pretext_full_val_l1.csv"),
              slurp(out_b / "U-Net_2_44_pretext_full_val_l1.csv"));
    EXPECT_EQ(slurp(ra.checkpoints[1]), slurp(rb.checkpoints[1]));
    EXPECT_DOUBLE_EQ(ra.initial_val, rb.initial_val);

    auto rc = pretrain(tiny_pretrain(fresh_dir("pre_det_c"), 8));
    EXPECT_NE(ra.val_metric.points.back().second, rc.val_metric.points.back().second);
}

TEST(Finetune, RandomAndPretrainedInitTags) {
    auto out = fresh_dir("ft_tags");
    SynthCorpus corpus(tiny_params(8, 32), 53);

    FinetuneRun run;
    run.task = Task::segmentation;
    run.spec = preset("U-Net_2_44", 4);
    run.hyper.epochs = 5;
    run.hyper.batch_size = 4;
    run.hyper.checkpoint_interval = 5;
    run.hyper.seed = 2;
    run.augment.flip = false;
    run.train = corpus.dataset(Task::segmentation).take(6);
    run.val = corpus.dataset(Task::segmentation).select({6, 7});
    run.out_dir = out;

    auto random_result = finetune(run);
    ASSERT_EQ(random_result.checkpoints.size(), 1u);  // floor(5/5)
    EXPECT_EQ(random_result.checkpoints[0].filename().string(),
              "U-Net_2_44_segmentation_R_e5.ckpt");
    EXPECT_EQ(load_checkpoint(random_result.checkpoints[0]).provenance, "R");
    EXPECT_EQ(random_result.val_metric.kind, "dice");

    // pretext checkpoint to warm-start from
    auto pre = pretrain(tiny_pretrain(fresh_dir("ft_tags_pre"), 3));
    run.init_checkpoint = pre.checkpoints.back();
    auto warm_result = finetune(run);
    EXPECT_EQ(warm_result.checkpoints[0].filename().string(),
              "U-Net_2_44_segmentation_P(full)_e5.ckpt");
    auto rec = load_checkpoint(warm_result.checkpoints[0]);
    EXPECT_EQ(rec.provenance, "P(full)");
    EXPECT_EQ(rec.task, Task::segmentation);
    EXPECT_EQ(rec.head, HeadKind::segmentation);
}

TEST(Finetune, WarmStartCopiesBodyNotHead) {
    SynthCorpus corpus(tiny_params(6, 32), 54);
    auto pre = pretrain(tiny_pretrain(fresh_dir("ft_body_pre"), 5));
    auto source = restore_network(load_checkpoint(pre.checkpoints.back()));

    FinetuneRun run;
    run.task = Task::denoise;
    run.spec = preset("U-Net_2_44", 4);
    run.hyper.epochs = 1;
    run.hyper.batch_size = 4;
    run.hyper.seed = 6;
    run.hyper.learning_rate = 1e-30;  // keep parameters effectively frozen
    run.augment.flip = false;
    run.train = corpus.dataset(Task::denoise).take(4);
    run.val = corpus.dataset(Task::denoise).select({4, 5});
    run.out_dir = fresh_dir("ft_body");
    run.init_checkpoint = pre.checkpoints.back();
    auto result = finetune(run);

    auto src = source.named_tensors();
    auto dst = result.net.named_tensors();
    ASSERT_EQ(src.size(), dst.size());
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].first.rfind("head", 0) == 0) continue;
        if (src[i].first.find("running_") != std::string::npos) continue;  // stats drift in train mode
        EXPECT_LT((src[i].second - dst[i].second).abs().max().item<double>(), 1e-6)
            << src[i].first;
    }
}

TEST(Finetune, RegressionTasksValidateL1) {
    SynthCorpus corpus(tiny_params(6, 32), 55);
    for (Task task : {Task::denoise, Task::noise_bg_removal, Task::superres}) {
        FinetuneRun run;
        run.task = task;
        run.spec = preset("U-Net_2_44", 4);
        run.hyper.epochs = 1;
        run.hyper.batch_size = 4;
        run.hyper.seed = 6;
        run.augment.flip = false;
        run.train = corpus.dataset(task).take(4);
        run.val = corpus.dataset(task).select({4, 5});
        run.out_dir = fresh_dir("ft_reg_" + to_string(task));
        auto result = finetune(run);
        EXPECT_EQ(result.val_metric.kind, "l1");
        EXPECT_GT(result.val_metric.points.back().second, 0.0);
    }
    FinetuneRun bad;
    bad.task = Task::pretext;
    EXPECT_THROW(finetune(bad), std::invalid_argument);
}

TEST(Hyper, ValidationRejectsNonsense) {
    TrainHyper hy;
    hy.epochs = 0;
    EXPECT_THROW(hy.validate(), std::invalid_argument);
    hy = TrainHyper{};
    hy.checkpoint_interval = 0;
    EXPECT_THROW(hy.validate(), std::invalid_argument);
    hy = TrainHyper{};
    hy.subset_size = 0;
    EXPECT_THROW(hy.validate(), std::invalid_argument);
    hy = TrainHyper{};
    hy.validate();
    EXPECT_EQ(hy.epochs, 60);
    EXPECT_EQ(hy.batch_size, 128);
    EXPECT_DOUBLE_EQ(hy.learning_rate, 2e-4);
    EXPECT_DOUBLE_EQ(hy.lambda_l1, 100.0);
    EXPECT_EQ(hy.checkpoint_interval, 5);
}
