#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <sstream>

#include "hiernas/segsearch.hpp"

using namespace hiernas;

namespace {

SearchConfig small_search_config() {
    SearchConfig cfg;
    cfg.L = 3;
    cfg.B = 2;
    cfg.F = 2;
    cfg.epochs = 3;
    cfg.arch_delay_epochs = 1;
    cfg.seed = 11;
    return cfg;
}

// One image split into two boundary-aligned halves; the only label structure
// the head can represent exactly at its output stride.
Dataset half_split_image() {
    Dataset ds;
    ds.num_images = 1;
    ds.height = 64;
    ds.width = 64;
    ds.num_classes = 2;
    ds.images.assign(3 * 64 * 64, 0.0);
    ds.labels.assign(64 * 64, 0);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const int cls = x >= 32 ? 1 : 0;
            ds.labels[y * 64 + x] = cls;
            for (int c = 0; c < 3; ++c) ds.images[(c * 64 + y) * 64 + x] = cls ? 0.9 : 0.1;
        }
    return ds;
}

}  // namespace

TEST_CASE("gen_toy_dataset determinism and value ranges") {
    ToyDatasetSpec spec;
    spec.num_images = 8;
    spec.seed = 4;
    auto a = gen_toy_dataset(spec);
    auto b = gen_toy_dataset(spec);
    REQUIRE(a.images == b.images);
    REQUIRE(a.labels == b.labels);

    for (double v : a.images) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    for (int l : a.labels) {
        REQUIRE(l >= 0);
        REQUIRE(l < spec.num_classes);
    }

    spec.seed = 5;
    auto c = gen_toy_dataset(spec);
    REQUIRE(a.images != c.images);
}

TEST_CASE("gen_toy_dataset rejects bad specs") {
    ToyDatasetSpec spec;
    spec.image_size = 48;
    REQUIRE_THROWS_AS(gen_toy_dataset(spec), InvalidArgumentError);
    spec = {};
    spec.num_images = 0;
    REQUIRE_THROWS_AS(gen_toy_dataset(spec), InvalidArgumentError);
    spec = {};
    spec.num_classes = 5;
    REQUIRE_THROWS_AS(gen_toy_dataset(spec), InvalidArgumentError);
}

TEST_CASE("degenerate spec with no shapes yields all-background labels") {
    ToyDatasetSpec spec;
    spec.num_images = 3;
    spec.num_classes = 2;
    spec.rectangles = spec.disks = spec.stripes = false;
    auto ds = gen_toy_dataset(spec);
    for (int l : ds.labels) REQUIRE(l == 0);
}

TEST_CASE("default dataset covers every class with sane pixel shares") {
    ToyDatasetSpec spec;  // 100 images, 4 classes
    auto ds = gen_toy_dataset(spec);
    std::vector<std::int64_t> freq(4, 0);
    for (int l : ds.labels) ++freq[l];
    const double total = static_cast<double>(ds.labels.size());
    for (int c = 0; c < 4; ++c) {
        const double share = freq[c] / total;
        REQUIRE(share >= 0.01);
        REQUIRE(share <= 0.97);
    }
}

TEST_CASE("dataset directory round trip") {
    ToyDatasetSpec spec;
    spec.num_images = 5;
    spec.seed = 9;
    auto ds = gen_toy_dataset(spec);
    auto dir = std::filesystem::temp_directory_path() / "hiernas_ds_test";
    std::filesystem::remove_all(dir);
    save_dataset(ds, dir);
    auto ds2 = load_dataset(dir);
    REQUIRE(ds2.images == ds.images);
    REQUIRE(ds2.labels == ds.labels);
    REQUIRE(ds2.num_classes == ds.num_classes);

    // Truncated payload must be detected.
    std::filesystem::resize_file(dir / "images.bin", 128);
    REQUIRE_THROWS_AS(load_dataset(dir), ValidationError);
    std::filesystem::remove_all(dir);
    REQUIRE_THROWS_AS(load_dataset(dir), IoError);
}

TEST_CASE("split_train halves are disjoint and exhaustive") {
    ToyDatasetSpec spec;
    spec.num_images = 10;
    auto ds = gen_toy_dataset(spec);
    auto [a, b] = split_train(ds, 3);
    REQUIRE(a.size() == 5);
    REQUIRE(b.size() == 5);
    std::set<int> all(a.begin(), a.end());
    all.insert(b.begin(), b.end());
    REQUIRE(all.size() == 10);

    spec.num_images = 11;
    auto ds11 = gen_toy_dataset(spec);
    auto [a11, b11] = split_train(ds11, 3);
    REQUIRE(a11.size() == 6);
    REQUIRE(b11.size() == 5);

    auto [a2, b2] = split_train(ds, 3);
    REQUIRE(a == a2);
    REQUIRE(b == b2);

    spec.num_images = 1;
    auto ds1 = gen_toy_dataset(spec);
    REQUIRE_THROWS_AS(split_train(ds1, 0), InvalidArgumentError);
}

TEST_CASE("cosine_lr endpoints and midpoint") {
    REQUIRE(cosine_lr(0, 100) == 0.025);
    REQUIRE(cosine_lr(100, 100) == 0.001);
    REQUIRE_THAT(cosine_lr(50, 100), Catch::Matchers::WithinAbs(0.013, 1e-15));
    REQUIRE_THROWS_AS(cosine_lr(101, 100), InvalidArgumentError);
    REQUIRE_THROWS_AS(cosine_lr(-1, 100), InvalidArgumentError);
    REQUIRE_THROWS_AS(cosine_lr(0, 0), InvalidArgumentError);
}

TEST_CASE("miou on hand-checked cases") {
    mt::LabelMap gt{1, 2, 2, {0, 0, 1, 1}};
    REQUIRE(miou(gt, gt, 2) == 1.0);

    // gt=[0,0;1,1], pred=[0,1;1,1]: class 0 has IoU 1/2, class 1 has 2/3.
    mt::LabelMap pred{1, 2, 2, {0, 1, 1, 1}};
    REQUIRE_THAT(miou(pred, gt, 2), Catch::Matchers::WithinAbs(7.0 / 12.0, 1e-15));

    mt::LabelMap flipped{1, 2, 2, {1, 1, 0, 0}};
    REQUIRE(miou(flipped, gt, 2) == 0.0);

    // Ignored pixels contribute to neither intersections nor unions.
    mt::LabelMap ignored{1, 2, 2, {0, -1, 1, 1}};
    mt::LabelMap pred2{1, 2, 2, {1, 0, 1, 0}};
    REQUIRE_THAT(miou(pred2, ignored, 2, -1), Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-15));

    mt::LabelMap bad{1, 1, 2, {0, 0}};
    REQUIRE_THROWS_AS(miou(bad, gt, 2), ShapeError);
    REQUIRE_THROWS_AS(miou(gt, gt, 1), ValidationError);  // label 1 out of range
}

TEST_CASE("majority baseline reflects class imbalance") {
    ToyDatasetSpec spec;
    spec.num_images = 10;
    auto ds = gen_toy_dataset(spec);
    std::vector<int> idx(ds.num_images);
    std::iota(idx.begin(), idx.end(), 0);
    const double base = majority_baseline_miou(ds, idx);
    REQUIRE(base > 0.0);
    REQUIRE(base < 0.5);  // background dominates but minority classes drag the mean down
}

TEST_CASE("search config text round trip and validation") {
    SearchConfig cfg = small_search_config();
    cfg.clip_gradients = false;
    std::istringstream in(format_search_config(cfg));
    auto cfg2 = parse_search_config(in);
    REQUIRE(format_search_config(cfg2) == format_search_config(cfg));

    std::istringstream partial("epochs = 7\narch_delay_epochs = 3\n# comment\n\nF = 9\n");
    auto cfg3 = parse_search_config(partial);
    REQUIRE(cfg3.epochs == 7);
    REQUIRE(cfg3.F == 9);
    REQUIRE(cfg3.B == 3);  // untouched default

    std::istringstream unknown("bogus = 1\n");
    REQUIRE_THROWS_AS(parse_search_config(unknown), ValidationError);
    std::istringstream badval("epochs = soon\n");
    REQUIRE_THROWS_AS(parse_search_config(badval), ValidationError);
    std::istringstream invariant("arch_delay_epochs = 50\nepochs = 10\n");
    REQUIRE_THROWS_AS(parse_search_config(invariant), ValidationError);
}

TEST_CASE("run_search produces a full deterministic trace") {
    ToyDatasetSpec spec;
    spec.num_images = 8;
    spec.seed = 21;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();

    auto r1 = run_search(cfg, ds);
    auto r2 = run_search(cfg, ds);
    REQUIRE(r1.trace.epochs.size() == static_cast<std::size_t>(cfg.epochs));
    REQUIRE(r1.trace.to_csv() == r2.trace.to_csv());
    REQUIRE(snapshot_to_json(r1.snapshot).dump() == snapshot_to_json(r2.snapshot).dump());

    const std::string csv = r1.trace.to_csv();
    REQUIRE(csv.rfind("epoch,lossA,lossB,miou,lr,alpha_entropy,beta_entropy\n", 0) == 0);
    for (const auto& e : r1.trace.epochs) {
        REQUIRE(std::isfinite(e.lossA));
        REQUIRE(std::isfinite(e.lossB));
        REQUIRE(e.miou >= 0.0);
        REQUIRE(e.miou <= 1.0);
        REQUIRE(e.alpha_entropy >= 0.0);
        REQUIRE(e.beta_entropy >= 0.0);
    }
}

TEST_CASE("optimizers never cross the trainA/trainB boundary") {
    ToyDatasetSpec spec;
    spec.num_images = 8;
    spec.seed = 22;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();
    auto res = run_search(cfg, ds);
    REQUIRE(res.counters.w_updates_from_trainB == 0);
    REQUIRE(res.counters.arch_updates_from_trainA == 0);
    REQUIRE(res.counters.w_updates_from_trainA > 0);
    REQUIRE(res.counters.arch_updates_from_trainB > 0);
    std::set<int> a(res.trainA.begin(), res.trainA.end());
    for (int i : res.trainB) REQUIRE(a.count(i) == 0);
}

TEST_CASE("architecture logits stay at initialization until the delay epoch") {
    ToyDatasetSpec spec;
    spec.num_images = 6;
    spec.seed = 23;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();
    cfg.epochs = 2;
    cfg.arch_delay_epochs = 2;  // never activates
    auto res = run_search(cfg, ds);
    REQUIRE(res.counters.arch_updates_from_trainB == 0);

    // Bit-identical to a freshly initialized supernet with the same seed.
    RelaxConfig rc;
    rc.num_layers = cfg.L;
    rc.num_blocks = cfg.B;
    rc.filter_multiplier = cfg.F;
    rc.num_classes = ds.num_classes;
    rc.seed = cfg.seed;
    SuperNet fresh(rc);
    auto init = fresh.snapshot();
    REQUIRE(snapshot_to_json(res.snapshot).dump() == snapshot_to_json(init).dump());

    // With the delay inside the horizon the logits must move.
    cfg.arch_delay_epochs = 0;
    auto res2 = run_search(cfg, ds);
    REQUIRE(snapshot_to_json(res2.snapshot).dump() != snapshot_to_json(init).dump());
}

TEST_CASE("weight steps on one fixed minibatch drive the loss down") {
    // One minibatch per epoch: the per-epoch lossA is the loss right before
    // each weight update, so consecutive records track single SGD steps.
    ToyDatasetSpec spec;
    spec.num_images = 2;
    spec.seed = 24;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();
    cfg.epochs = 50;
    cfg.arch_delay_epochs = 50;
    cfg.batch_size = 2;
    auto res = run_search(cfg, ds);
    int decreases = 0;
    for (int e = 1; e < 50; ++e)
        if (res.trace.epochs[e].lossA < res.trace.epochs[e - 1].lossA) ++decreases;
    REQUIRE(decreases >= 45);
}

TEST_CASE("non-finite loss aborts with epoch and minibatch diagnostics") {
    ToyDatasetSpec spec;
    spec.num_images = 4;
    spec.seed = 25;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();
    cfg.epochs = 4;
    cfg.arch_delay_epochs = 0;
    cfg.use_batch_norm = false;  // batch norm renormalizes away any blow-up
    cfg.clip_gradients = false;
    cfg.w_lr_max = cfg.w_lr_min = 1e18;
    try {
        run_search(cfg, ds);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("epoch 1") != std::string::npos);
        REQUIRE(msg.find("minibatch") != std::string::npos);
    }
}

TEST_CASE("run_search validates config against dataset") {
    ToyDatasetSpec spec;
    spec.num_images = 4;
    spec.image_size = 32;
    auto ds = gen_toy_dataset(spec);
    SearchConfig cfg = small_search_config();  // crop_size 64
    REQUIRE_THROWS_AS(run_search(cfg, ds), ValidationError);
}

TEST_CASE("retrain memorizes a single boundary-aligned image") {
    auto ds = half_split_image();
    auto t = build_trellis(4);
    auto [cell, unused] = random_genotype(2, t, 5);
    NetworkPath path{{4, 4, 4, 4}};
    RetrainConfig rc;
    rc.batch_size = 1;
    rc.seed = 7;
    rc.epochs = 200;
    rc.lr_max = 0.05;
    auto res = retrain_decoded(cell, path, 4, ds, rc);
    REQUIRE(res.final_train_loss < 1e-2);
}

TEST_CASE("retrain is deterministic and beats the majority baseline") {
    ToyDatasetSpec spec;
    spec.num_images = 12;
    spec.seed = 26;
    auto ds = gen_toy_dataset(spec);
    auto t = build_trellis(3);
    auto [cell, path] = random_genotype(2, t, 8);
    RetrainConfig rc;
    rc.epochs = 8;
    rc.seed = 5;
    auto r1 = retrain_decoded(cell, path, 2, ds, rc);
    auto r2 = retrain_decoded(cell, path, 2, ds, rc);
    REQUIRE(r1.miou == r2.miou);
    REQUIRE(r1.epoch_losses == r2.epoch_losses);

    auto [trainA, trainB] = split_train(ds, rc.seed);
    REQUIRE(r1.miou >= majority_baseline_miou(ds, trainB));

    CellGenotype malformed = cell;
    malformed.blocks[0].input2 = malformed.blocks[0].input1;
    REQUIRE_THROWS_AS(retrain_decoded(malformed, path, 2, ds, rc), ValidationError);
}
