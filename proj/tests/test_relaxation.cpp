#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "hiernas/relaxation.hpp"

using namespace hiernas;

namespace {

mt::NodePtr random_image(mt::Shape4 shape, std::uint64_t seed) {
    auto x = mt::make_leaf(shape);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : x->value) v = u(rng);
    return x;
}

RelaxConfig tiny_config() {
    RelaxConfig c;
    c.num_layers = 3;
    c.num_blocks = 2;
    c.filter_multiplier = 2;
    c.num_classes = 4;
    c.seed = 17;
    return c;
}

}  // namespace

TEST_CASE("beta direction masks follow the trellis") {
    auto t = build_trellis(4);

    // Virtual stem node at factor 4 can stay at 4 or descend to 8.
    REQUIRE(beta_direction_mask(t, 0, 4) == std::vector<bool>{false, true, true});

    // Interior node: all three directions.
    REQUIRE(beta_direction_mask(t, 2, 8) == std::vector<bool>{true, true, true});

    // Top of the trellis cannot ascend, bottom cannot descend.
    REQUIRE(beta_direction_mask(t, 3, 4) == std::vector<bool>{false, true, true});
    REQUIRE(beta_direction_mask(t, 3, 32) == std::vector<bool>{true, true, false});

    // A node that does not exist at this layer has no outgoing directions.
    REQUIRE(beta_direction_mask(t, 1, 32) == std::vector<bool>{false, false, false});
}

TEST_CASE("normalize_alpha and normalize_beta produce proper distributions") {
    auto t = build_trellis(5);
    auto alpha = AlphaLogits::zeros(3);
    auto beta = BetaLogits::zeros(t);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 2.0);
    for (auto& block : alpha.v)
        for (auto& group : block)
            for (auto& v : group) v = g(rng);
    for (auto& [key, logits] : beta.v)
        for (auto& v : logits) v = g(rng);

    auto ap = normalize_alpha(alpha);
    for (const auto& block : ap)
        for (const auto& group : block) {
            double s = 0.0;
            for (double p : group) {
                REQUIRE(p > 0.0);
                s += p;
            }
            REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-14));
        }

    auto bp = normalize_beta(beta, t);
    for (const auto& [key, p] : bp) {
        auto mask = beta_direction_mask(t, key.first, key.second);
        double s = 0.0;
        for (int d = 0; d < 3; ++d) {
            if (!mask[d]) REQUIRE(p[d] == 0.0);
            s += p[d];
        }
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-14));
    }
}

TEST_CASE("normalize rejects non-finite logits") {
    auto alpha = AlphaLogits::zeros(1);
    alpha.v[0][0][3] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(normalize_alpha(alpha), NumericError);
}

TEST_CASE("one-hot alpha logits select exactly the genotype edges") {
    auto t = build_trellis(4);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto [cell, path] = random_genotype(3, t, seed);
        auto probs = normalize_alpha(alpha_logits_from_genotype(cell));
        for (int i = 0; i < cell.num_blocks(); ++i) {
            for (int j = 0; j < i + 2; ++j) {
                int expect = static_cast<int>(OperatorKind::zero);
                if (j == cell.blocks[i].input1) expect = static_cast<int>(cell.blocks[i].op1);
                if (j == cell.blocks[i].input2) expect = static_cast<int>(cell.blocks[i].op2);
                for (int k = 0; k < kNumOperators; ++k)
                    REQUIRE(probs[i][j][k] == (k == expect ? 1.0 : 0.0));
            }
        }
    }
}

TEST_CASE("one-hot beta logits route exactly along the path") {
    auto t = build_trellis(6);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto [cell, path] = random_genotype(2, t, 100 + seed);
        auto probs = normalize_beta(beta_logits_from_path(path, t), t);
        // The on-path source at each layer sends all mass to the next
        // on-path factor; no other source sends any mass there.
        for (int l = 0; l < t.num_layers; ++l) {
            const int src_on = l == 0 ? 4 : path.resolutions[l - 1];
            const int next = path.resolutions[l];
            for (const auto& [key, p] : probs) {
                if (key.first != l) continue;
                for (int d = 0; d < 3; ++d) {
                    if (p[d] == 0.0) continue;
                    REQUIRE(p[d] == 1.0);
                    if (key.second == src_on)
                        REQUIRE(direction_target(key.second, d) == next);
                    else
                        REQUIRE(direction_target(key.second, d) != next);
                }
            }
        }
    }
    NetworkPath bad{{16, 16, 16, 16, 16, 16}};
    REQUIRE_THROWS_AS(beta_logits_from_path(bad, t), ValidationError);
}

TEST_CASE("snapshot json round trip") {
    RelaxConfig c = tiny_config();
    SuperNet net(c);
    auto snap = net.snapshot();
    auto j = snapshot_to_json(snap);
    REQUIRE(j.begin().key() == "meta");
    auto snap2 = snapshot_from_json(j);
    REQUIRE(snapshot_to_json(snap2).dump() == j.dump());

    // Infeasible directions serialize as null.
    REQUIRE(j["beta"][0]["4"][0].is_null());

    nlohmann::json bad = j;
    bad["alpha"].erase(0);
    REQUIRE_THROWS_AS(snapshot_from_json(bad), ValidationError);
    bad = j;
    bad["beta"][0]["4"][1] = nullptr;
    REQUIRE_THROWS_AS(snapshot_from_json(bad), ValidationError);
    bad = j;
    bad["meta"]["L"] = 0;
    REQUIRE_THROWS_AS(snapshot_from_json(bad), ValidationError);
}

TEST_CASE("supernet parameter creation is deterministic") {
    RelaxConfig c = tiny_config();
    SuperNet a(c), b(c);
    REQUIRE(a.params().all().size() == b.params().all().size());
    for (const auto& [name, p] : a.params().all()) {
        auto q = b.params().get(name);
        REQUIRE(p->value == q->value);
    }
    RelaxConfig c2 = c;
    c2.seed = 18;
    SuperNet d(c2);
    bool any_diff = false;
    for (const auto& [name, p] : a.params().all())
        if (p->value != d.params().get(name)->value) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("supernet arch logits start near zero") {
    SuperNet net(tiny_config());
    for (const auto& name : net.arch_param_names()) {
        for (double v : net.params().get(name)->value) REQUIRE(std::abs(v) < 0.01);
    }
    REQUIRE(net.arch_param_names().size() + net.weight_param_names().size() ==
            net.params().all().size());
}

TEST_CASE("supernet forward shape contract and input validation") {
    RelaxConfig c = tiny_config();
    SuperNet net(c);
    auto img = random_image({2, 3, 32, 64}, 1);
    auto fw = net.forward(img);
    REQUIRE(fw.logits->shape == mt::Shape4{2, c.num_classes, 32, 64});
    for (double v : fw.logits->value) REQUIRE(std::isfinite(v));

    auto bad = random_image({1, 3, 48, 48}, 2);
    REQUIRE_THROWS_AS(net.forward(bad), InvalidArgumentError);
}

TEST_CASE("softmax groups stay normalized after logit perturbation") {
    SuperNet net(tiny_config());
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 5.0);
    for (const auto& name : net.arch_param_names())
        for (auto& v : net.params().get(name)->value) v += g(rng);
    auto [sum_err, mask_err] = net.normalization_errors();
    REQUIRE(sum_err < 1e-12);
    REQUIRE(mask_err == 0.0);
}

TEST_CASE("mixed operator equals the explicit weighted sum of operators") {
    // Oracle: run each candidate operator separately through the same
    // parameters and combine with softmax weights by hand.
    RelaxConfig c = tiny_config();
    SuperNet net(c);
    detail::ParamFactory factory(net.params(), nullptr);
    detail::NetPieces pieces(c, factory);

    auto h = random_image({1, c.block_channels(4), 8, 8}, 3);
    auto alpha = net.alpha_node(0, 0);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : alpha->value) v = g(rng);
    auto prob = mt::softmax_vec(alpha);

    auto mixed = pieces.mixed_operator(1, 4, 0, 0, h, prob);
    std::vector<double> expect(mixed->value.size(), 0.0);
    for (int k = 0; k < kNumOperators; ++k) {
        auto yk = pieces.apply_operator(1, 4, 0, 0, static_cast<OperatorKind>(k), h);
        for (std::size_t i = 0; i < expect.size(); ++i)
            expect[i] += prob->value[k] * yk->value[i];
    }
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE_THAT(mixed->value[i], Catch::Matchers::WithinAbs(expect[i], 1e-12));
}

TEST_CASE("alpha gradients accumulate from every cell in the network") {
    // The same alpha group parameterizes every cell; its gradient must
    // collect contributions across layers and resolutions.
    RelaxConfig c = tiny_config();
    SuperNet net(c);
    auto img = random_image({1, 3, 32, 32}, 5);
    auto fw = net.forward(img);
    net.params().zero_grad();
    mt::backward(mt::sum(fw.logits));
    for (const auto& name : net.arch_param_names()) {
        auto p = net.params().get(name);
        double norm = 0.0;
        for (double gv : p->grad) norm += gv * gv;
        REQUIRE(norm > 0.0);
    }
}

TEST_CASE("one-hot collapse matches the discrete network") {
    RelaxConfig c = tiny_config();
    SuperNet net(c);
    auto img = random_image({1, 3, 32, 32}, 6);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto [cell, path] = random_genotype(c.num_blocks, net.trellis(), 50 + seed);
        auto snap = net.snapshot();
        snap.alpha = alpha_logits_from_genotype(cell);
        snap.beta = beta_logits_from_path(path, net.trellis());
        net.load_snapshot(snap);
        auto fw = net.forward(img);

        DiscreteNet discrete(c, cell, path, net.params());
        auto logits = discrete.forward(img);
        REQUIRE(logits->shape == fw.logits->shape);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < logits->value.size(); ++i)
            max_diff = std::max(max_diff, std::abs(logits->value[i] - fw.logits->value[i]));
        REQUIRE(max_diff <= 1e-12);
    }
}

TEST_CASE("discrete network with its own parameters trains standalone") {
    RelaxConfig c = tiny_config();
    auto t = build_trellis(c.num_layers);
    auto [cell, path] = random_genotype(c.num_blocks, t, 77);
    DiscreteNet net(c, cell, path);
    auto img = random_image({1, 3, 32, 32}, 7);
    auto logits = net.forward(img);
    REQUIRE(logits->shape == mt::Shape4{1, c.num_classes, 32, 32});

    // One SGD step on a dummy target reduces the loss.
    mt::LabelMap labels{1, 32, 32, std::vector<int>(32 * 32, 1)};
    auto names = net.weight_param_names();
    mt::SgdMomentum opt(net.params(), names, 0.9, 0.0);
    double first = 0.0;
    for (int step = 0; step < 4; ++step) {
        auto loss = mt::cross_entropy_spatial(net.forward(img), labels);
        if (step == 0) first = loss->value[0];
        net.params().zero_grad();
        mt::backward(loss);
        opt.step(0.05);
    }
    auto loss = mt::cross_entropy_spatial(net.forward(img), labels);
    REQUIRE(loss->value[0] < first);
}

TEST_CASE("discrete network rejects mismatched architectures") {
    RelaxConfig c = tiny_config();
    auto t = build_trellis(c.num_layers);
    auto [cell, path] = random_genotype(c.num_blocks, t, 1);
    auto [big_cell, big_path] = random_genotype(c.num_blocks + 1, t, 1);
    REQUIRE_THROWS_AS(DiscreteNet(c, big_cell, path), ValidationError);
    NetworkPath bad{{16, 16, 16}};
    REQUIRE_THROWS_AS(DiscreteNet(c, cell, bad), ValidationError);
}

TEST_CASE("supernet gradients agree with finite differences") {
    RelaxConfig c = tiny_config();
    c.use_batch_norm = false;  // avoid minibatch-statistics stiffness at n=1
    SuperNet net(c);
    auto img = random_image({1, 3, 32, 32}, 8);
    mt::LabelMap labels{1, 32, 32, {}};
    std::mt19937_64 rng(10);
    labels.v.resize(32 * 32);
    for (auto& l : labels.v) l = static_cast<int>(rng() % c.num_classes);

    auto build = [&]() {
        auto fw = net.forward(img);
        return mt::cross_entropy_spatial(fw.logits, labels);
    };
    std::vector<std::pair<std::string, mt::NodePtr>> checked;
    for (const auto& name : net.arch_param_names())
        checked.emplace_back(name, net.params().get(name));
    // A spread of weight tensors across depth: stem, a cell op, a connector,
    // a preprocess conv and the classifier.
    for (const auto& [name, p] : net.params().all()) {
        if (name == "stem.1.conv.w" || name.find("cls.w") != std::string::npos ||
            name == "conn.l2.4to8.conv.w" ||
            name.find("l2.s8.pre0.conv.w") != std::string::npos ||
            name.find("l1.s4.b0.j0.sep_conv_3x3.dw.w") != std::string::npos)
            checked.emplace_back(name, p);
    }
    REQUIRE(checked.size() > net.arch_param_names().size() + 3);
    auto report = mt::gradient_check(build, checked, 1e-5, 1e-4, 7);
    INFO("max rel error " << report.max_rel_error());
    REQUIRE(report.passed());
}

TEST_CASE("mean entropies decrease as logits sharpen") {
    auto t = build_trellis(4);
    auto alpha = AlphaLogits::zeros(2);
    auto beta = BetaLogits::zeros(t);
    const double flat_a = mean_alpha_entropy(alpha);
    const double flat_b = mean_beta_entropy(beta, t);
    REQUIRE_THAT(flat_a, Catch::Matchers::WithinAbs(std::log(8.0), 1e-12));
    for (auto& block : alpha.v)
        for (auto& group : block) group[2] = 6.0;
    for (auto& [key, logits] : beta.v) logits[1] = 6.0;
    REQUIRE(mean_alpha_entropy(alpha) < flat_a);
    REQUIRE(mean_beta_entropy(beta, t) < flat_b);
}
