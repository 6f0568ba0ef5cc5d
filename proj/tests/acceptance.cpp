// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include "emss/config.hpp"
#include "emss/train.hpp"

using namespace emss;
namespace fs = std::filesystem;

namespace {

fs::path g_work;

fs::path fresh_dir(const std::string& tag) {
    auto d = g_work / tag;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. receptive-field fidelity

Outcome criterion_rf() {
    const std::vector<std::pair<std::string, int>> published = {
        {"U-Net_2_44", 44},   {"U-Net_2_84", 84},   {"U-Net_2_116", 116},
        {"U-Net_3_96", 96},   {"U-Net_3_176", 176}, {"U-Net_3_240", 240},
        {"U-Net_4_200", 200}, {"U-Net_4_360", 360}, {"U-Net_4_424", 424}};
    int ok = 0;
    std::string bad;
    for (const auto& [name, paper_rf] : published) {
        auto spec = preset(name);
        int analytic = receptive_field(spec);
        auto net = build_generator(spec, 0);
        int measured = measure_receptive_field(net);
        if (analytic == paper_rf && measured == paper_rf) {
            ++ok;
        } else {
            bad += " " + name + "(analytic=" + std::to_string(analytic) +
                   ",measured=" + std::to_string(measured) + ",published=" + std::to_string(paper_rf) + ")";
        }
    }
    return {ok == 9, std::to_string(ok) + "/9 presets analytic==measured==published" + bad};
}

// ---------------------------------------------------------------------------
// 2. loss correctness

torch::Tensor numeric_grad(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                           const torch::Tensor& x, double h = 1e-4) {
    auto g = torch::zeros_like(x).flatten();
    for (long i = 0; i < x.numel(); ++i) {
        auto xp = x.clone().flatten();
        auto xm = x.clone().flatten();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(xp.view(x.sizes())).item<double>() - f(xm.view(x.sizes())).item<double>()) / (2 * h);
    }
    return g.view(x.sizes());
}

double grad_rel_err(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                    const torch::Tensor& x0) {
    auto x = x0.clone().set_requires_grad(true);
    auto autograd = torch::autograd::grad({f(x)}, {x})[0];
    auto numeric = numeric_grad(f, x0);
    double denom = std::max(numeric.abs().max().item<double>(), 1e-12);
    return (autograd - numeric).abs().max().item<double>() / denom;
}

Outcome criterion_losses() {
    auto one = [](double v) { return torch::tensor({v}, torch::kFloat64); };
    struct Hand {
        const char* name;
        double got, want;
    };
    std::vector<Hand> hand = {
        {"lsgan_d(0.5,0.5)", lsgan_d_loss(one(0.5), one(0.5)).item<double>(), 0.25},
        {"lsgan_g(0.5)", lsgan_g_loss(one(0.5)).item<double>(), 0.125},
        {"bce(0.5,1)", bce_loss(one(0.5), one(1.0)).item<double>(), std::log(2.0)},
        {"objective(0.5,0.04,100)",
         generator_objective(one(0.5)[0], one(0.04)[0], 100.0).item<double>(), 4.5},
    };
    for (const auto& h : hand)
        if (std::abs(h.got - h.want) > 1e-6)
            return {false, std::string("hand value ") + h.name + " = " + std::to_string(h.got)};

    torch::manual_seed(1002);
    auto x = torch::randn({3, 3}, torch::kFloat64);
    auto y = torch::randn({3, 3}, torch::kFloat64);
    auto fixed = torch::randn({3, 3}, torch::kFloat64);
    auto probs = torch::rand({3, 3}, torch::kFloat64) * 0.8 + 0.1;
    auto mask = (torch::rand({3, 3}, torch::kFloat64) > 0.5).to(torch::kFloat64);
    struct Check {
        const char* name;
        double err;
    };
    std::vector<Check> checks = {
        {"lsgan_d", grad_rel_err([&](const torch::Tensor& t) { return lsgan_d_loss(t, fixed); }, x)},
        {"lsgan_g", grad_rel_err([&](const torch::Tensor& t) { return lsgan_g_loss(t); }, x)},
        {"l1", grad_rel_err([&](const torch::Tensor& t) { return l1_recon_loss(t, y); }, x)},
        {"bce", grad_rel_err([&](const torch::Tensor& t) { return bce_loss(t, mask); }, probs)},
        {"l1l2", grad_rel_err([&](const torch::Tensor& t) { return regression_loss(t, y); }, x)},
    };
    double worst = 0;
    for (const auto& c : checks) {
        if (c.err >= 1e-3)
            return {false, std::string("gradient check ") + c.name + " rel err " + std::to_string(c.err)};
        worst = std::max(worst, c.err);
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "4 hand values within 1e-6, 5 gradient checks worst rel err %.2e", worst);
    return {true, buf};
}

// ---------------------------------------------------------------------------
// 3. dice oracle

Outcome criterion_dice() {
    for (int a = 0; a < 16; ++a) {
        for (int b = 0; b < 16; ++b) {
            auto pred = torch::zeros({2, 2});
            auto gt = torch::zeros({2, 2});
            int inter = 0, na = 0, nb = 0;
            for (int bit = 0; bit < 4; ++bit) {
                int pa = (a >> bit) & 1, pb = (b >> bit) & 1;
                pred[bit / 2][bit % 2] = pa;
                gt[bit / 2][bit % 2] = pb;
                inter += pa & pb;
                na += pa;
                nb += pb;
            }
            double expected = (na + nb) == 0 ? 1.0 : 2.0 * inter / (na + nb);
            if (dice(pred, gt) != expected)
                return {false, "mismatch at pair (" + std::to_string(a) + "," + std::to_string(b) + ")"};
        }
    }
    return {true, "all 256 2x2 mask pairs match brute-force set counting exactly"};
}

// ---------------------------------------------------------------------------
// 4. pretext learnability (shared with criteria 5 and 7)

SynthParams corpus64_params() {
    SynthParams p;
    p.count = 72;  // 64 train + 8 validation
    p.image_size = 64;
    p.radius_lo = 8;
    p.radius_hi = 16;
    return p;
}

PretrainRun learnability_run(const fs::path& out) {
    static SynthCorpus corpus(corpus64_params(), 4242);
    PretrainRun run;
    run.generator = preset("U-Net_2_44");
    run.discriminator = make_discriminator_spec();
    run.hyper.epochs = 10;
    run.hyper.batch_size = 8;
    run.hyper.checkpoint_interval = 5;
    run.hyper.seed = 4242;
    run.train = corpus.dataset(Task::pretext).take(64);
    run.val = corpus.dataset(Task::pretext).select({64, 65, 66, 67, 68, 69, 70, 71});
    run.out_dir = out;
    return run;
}

TrainResult g_pretrain_result;  // reused by criteria 5 and 7

Outcome criterion_learnability() {
    auto out = fresh_dir("learnability");
    g_pretrain_result = pretrain(learnability_run(out));
    double initial = g_pretrain_result.initial_val;
    double final_val = g_pretrain_result.val_metric.points.back().second;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "val L1 %.4f -> %.4f (need < %.4f)", initial, final_val,
                  0.5 * initial);
    return {final_val < 0.5 * initial, buf};
}

// ---------------------------------------------------------------------------
// 5. transfer benefit trend

Outcome criterion_transfer() {
    if (g_pretrain_result.checkpoints.empty())
        return {false, "no pretext checkpoint available (criterion 4 did not run)"};
    SynthCorpus corpus(corpus64_params(), 777);
    auto seg = corpus.dataset(Task::segmentation);
    const int cap = 20;

    auto run_one = [&](bool warm, uint64_t seed) {
        FinetuneRun run;
        run.task = Task::segmentation;
        run.spec = preset("U-Net_2_44");
        run.hyper.epochs = cap;
        run.hyper.batch_size = 8;
        run.hyper.seed = seed;
        run.hyper.adam_betas = {0.9, 0.999};
        run.augment.flip = false;
        run.train = seg.take(32);
        run.val = seg.select({64, 65, 66, 67, 68, 69, 70, 71});
        run.out_dir = fresh_dir("transfer_" + std::to_string(seed) + (warm ? "_p" : "_r"));
        if (warm) run.init_checkpoint = g_pretrain_result.checkpoints.back();
        auto result = finetune(run);
        int first_hit = cap + 1;
        double dice5 = 0;
        for (const auto& [epoch, value] : result.val_metric.points) {
            if (value >= 0.8 && epoch < first_hit) first_hit = epoch;
            if (epoch == 5) dice5 = value;
        }
        return std::make_pair(first_hit, dice5);
    };

    std::vector<int> hits_r, hits_p;
    int wins5 = 0;
    std::string detail;
    for (uint64_t seed : {11u, 22u, 33u}) {
        auto [hr, d5r] = run_one(false, seed);
        auto [hp, d5p] = run_one(true, seed);
        hits_r.push_back(hr);
        hits_p.push_back(hp);
        if (d5p >= d5r) ++wins5;
        char buf[96];
        std::snprintf(buf, sizeof(buf), " seed%llu[R:%d/%.3f P:%d/%.3f]",
                      static_cast<unsigned long long>(seed), hr, d5r, hp, d5p);
        detail += buf;
    }
    std::sort(hits_r.begin(), hits_r.end());
    std::sort(hits_p.begin(), hits_p.end());
    bool pass = hits_p[1] <= hits_r[1] && wins5 >= 2;
    return {pass, "median epochs to dice>=0.8: pretrained " + std::to_string(hits_p[1]) +
                      " vs random " + std::to_string(hits_r[1]) + "; epoch-5 wins " +
                      std::to_string(wins5) + "/3;" + detail};
}

// ---------------------------------------------------------------------------
// 6. checkpoint protocol

Outcome criterion_checkpoint_protocol() {
    SynthParams p;
    p.count = 10;
    p.image_size = 32;
    p.radius_lo = 4;
    p.radius_hi = 8;
    SynthCorpus corpus(p, 606);
    FinetuneRun run;
    run.task = Task::denoise;
    run.spec = preset("U-Net_2_44", 4);
    run.hyper.epochs = 60;
    run.hyper.batch_size = 8;
    run.hyper.checkpoint_interval = 5;
    run.hyper.seed = 6;
    run.augment.flip = false;
    run.train = corpus.dataset(Task::denoise).take(6);
    run.val = corpus.dataset(Task::denoise).select({6, 7});
    run.out_dir = fresh_dir("protocol");
    auto result = finetune(run);

    if (result.checkpoints.size() != 12)
        return {false, "expected 12 checkpoints, got " + std::to_string(result.checkpoints.size())};
    for (int i = 0; i < 12; ++i) {
        int expect_epoch = 5 * (i + 1);
        auto rec = load_checkpoint(result.checkpoints[static_cast<size_t>(i)]);
        if (rec.epoch != expect_epoch)
            return {false, "checkpoint " + std::to_string(i) + " stores epoch " +
                               std::to_string(rec.epoch) + ", expected " + std::to_string(expect_epoch)};
    }
    auto test_set = corpus.dataset(Task::denoise).select({8, 9});
    auto row = evaluate_checkpoints(result.checkpoints, test_set, MetricKind::l1);
    if (row.epochs.size() != 12 || row.values.size() != 12)
        return {false, "evaluated row has " + std::to_string(row.values.size()) + " columns"};
    if (row.epochs.front() != 5 || row.epochs.back() != 60)
        return {false, "evaluated row spans epochs " + std::to_string(row.epochs.front()) + ".." +
                           std::to_string(row.epochs.back())};
    MetricTable table;
    table.metric = "l1";
    table.epochs = row.epochs;
    table.rows.push_back({row.spec, row.init, row.values});
    emit_table(table, run.out_dir / "table.csv", TableFormat::csv);
    auto parsed = parse_table(run.out_dir / "table.csv");
    if (parsed.epochs.size() != 12)
        return {false, "emitted table has " + std::to_string(parsed.epochs.size()) + " epoch columns"};
    return {true, "12 checkpoints at epochs 5..60; evaluated row and table carry 12 columns"};
}

// ---------------------------------------------------------------------------
// 7. determinism

Outcome criterion_determinism() {
    auto out_b = fresh_dir("determinism");
    pretrain(learnability_run(out_b));
    auto csv_a = slurp(g_work / "learnability" / "U-Net_2_44_pretext_full_val_l1.csv");
    auto csv_b = slurp(out_b / "U-Net_2_44_pretext_full_val_l1.csv");
    if (csv_a.empty()) return {false, "first run produced no CSV"};
    if (csv_a != csv_b) return {false, "metric CSVs differ between identical seeded runs"};
    return {true, "repeated criterion-4 run reproduced the metric CSV byte for byte"};
}

// ---------------------------------------------------------------------------
// 8. round-trips

Outcome criterion_roundtrips() {
    auto dir = fresh_dir("roundtrip");
    auto net = build_generator(preset("U-Net_2_44", 8), 808, HeadKind::image);
    save_checkpoint(make_checkpoint(net, Task::pretext, 10, 0.3, "full", "l1"), dir / "a.ckpt");
    auto restored = restore_network(load_checkpoint(dir / "a.ckpt"));
    torch::manual_seed(0);
    auto x = torch::randn({1, 1, 64, 64});
    double diff = (net.forward(x) - restored.forward(x)).abs().max().item<double>();
    if (diff > 1e-7)
        return {false, "restored forward differs by " + std::to_string(diff)};

    torch::manual_seed(88);
    MetricTable t;
    t.metric = "dice";
    for (int e = 5; e <= 60; e += 5) t.epochs.push_back(e);
    for (int r = 0; r < 2; ++r) {
        std::vector<double> vals;
        for (size_t c = 0; c < t.epochs.size(); ++c)
            vals.push_back(torch::rand({1}).item<double>());
        t.rows.push_back({"U-Net_2_44", r ? "P(full)" : "R", vals});
    }
    emit_table(t, dir / "t.csv", TableFormat::csv);
    auto back = parse_table(dir / "t.csv");
    emit_table(back, dir / "t2.csv", TableFormat::csv);
    if (slurp(dir / "t.csv") != slurp(dir / "t2.csv"))
        return {false, "CSV parse-then-emit is not the identity"};
    char buf[96];
    std::snprintf(buf, sizeof(buf), "checkpoint forward diff %.1e; CSV parse/emit identity holds", diff);
    return {true, buf};
}

}  // namespace

int main() {
    g_work = fs::temp_directory_path() / "emss_acceptance";
    fs::remove_all(g_work);
    fs::create_directories(g_work);

    struct Criterion {
        const char* name;
        std::function<Outcome()> fn;
    };
    std::vector<Criterion> criteria = {
        {"receptive-field fidelity", criterion_rf},
        {"loss correctness", criterion_losses},
        {"dice oracle", criterion_dice},
        {"pretext learnability", criterion_learnability},
        {"transfer benefit trend", criterion_transfer},
        {"checkpoint protocol", criterion_checkpoint_protocol},
        {"determinism", criterion_determinism},
        {"round-trips", criterion_roundtrips},
    };

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = criteria[i].fn();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        if (!out.pass) ++failures;
        std::printf("[%s] %zu. %s: %s (%.1fs)\n", out.pass ? "PASS" : "FAIL", i + 1,
                    criteria[i].name, out.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
