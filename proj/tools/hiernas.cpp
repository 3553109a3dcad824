// Command-line front end: counting, data generation, architecture search,
// decoding, retraining, analytics and a built-in oracle selftest.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hiernas/analytics.hpp"
#include "hiernas/decoder.hpp"
#include "hiernas/relaxation.hpp"
#include "hiernas/search_space.hpp"
#include "hiernas/segsearch.hpp"

namespace fs = std::filesystem;
using namespace hiernas;

namespace {

class Stopwatch {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string hex_hash(const std::string& bytes) {
    std::ostringstream ss;
    ss << std::hex << fnv1a(bytes);
    return ss.str();
}

// One manifest per writing command, describing what was produced.
void write_manifest(const fs::path& path, const std::string& command,
                    const std::string& config_hash, std::uint64_t seed,
                    const std::vector<fs::path>& artifacts, const Stopwatch& watch) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["artifacts"] = nlohmann::ordered_json::array();
    for (const auto& a : artifacts) j["artifacts"].push_back(a.string());
    j["engine_version"] = kEngineVersion;
    j["duration_seconds"] = watch.seconds();
    write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// selftest suites: fast oracle cross-checks runnable from a clean install
// ---------------------------------------------------------------------------

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

SuiteResult suite_counting() {
    SuiteResult r{"counting"};
    try {
        bool ok = count_cell_genotypes(5, 8) == 556627761561600ull &&
                  count_paths(12, StartConvention::first_layer_4) == 28657 &&
                  count_paths(12, StartConvention::first_layer_4_or_8) == 75025;
        for (int L = 1; L <= 10 && ok; ++L) {
            auto t = build_trellis(L);
            std::uint64_t seen = 0;
            enumerate_paths(t, [&](const NetworkPath&) { ++seen; });
            ok = seen == count_paths(L, StartConvention::first_layer_4_or_8);
        }
        r.passed = ok;
        if (!ok) r.detail = "count mismatch";
    } catch (const std::exception& e) {
        r.detail = e.what();
    }
    return r;
}

SuiteResult suite_viterbi() {
    SuiteResult r{"viterbi"};
    try {
        auto t = build_trellis(12);
        bool ok = true;
        for (int seed = 0; seed < 25 && ok; ++seed) {
            auto beta = BetaLogits::zeros(t);
            std::mt19937_64 rng(seed);
            std::normal_distribution<double> g(0.0, 1.0);
            for (auto& [key, logits] : beta.v)
                for (auto& v : logits) v = g(rng);
            auto probs = normalize_beta(beta, t);
            ok = decode_path_viterbi(probs, t) == brute_force_best_path(probs, t);
        }
        r.passed = ok;
        if (!ok) r.detail = "viterbi disagrees with enumeration";
    } catch (const std::exception& e) {
        r.detail = e.what();
    }
    return r;
}

SuiteResult suite_gradients() {
    SuiteResult r{"gradients"};
    try {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> g(0.0, 0.5);
        auto x = mt::make_leaf({2, 3, 6, 6}, true);
        auto w = mt::make_leaf({4, 3, 3, 3}, true);
        auto gamma = mt::make_leaf({1, 4, 1, 1}, true);
        auto beta = mt::make_leaf({1, 4, 1, 1}, true);
        for (auto* n : {&x, &w, &gamma, &beta})
            for (auto& v : (*n)->value) v = g(rng);
        for (auto& v : gamma->value) v = 1.0 + 0.1 * g(rng);
        auto build = [&]() {
            auto y = mt::batch_norm(mt::conv2d(x, w, nullptr, 1, 2, 1), gamma, beta);
            return mt::sum(mt::mul(mt::relu(y), y));
        };
        auto report = mt::gradient_check(
            build, {{"x", x}, {"w", w}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1e-4, 3);
        r.passed = report.passed();
        if (!r.passed) {
            std::ostringstream ss;
            ss << "max rel error " << report.max_rel_error();
            r.detail = ss.str();
        }
    } catch (const std::exception& e) {
        r.detail = e.what();
    }
    return r;
}

SuiteResult suite_collapse() {
    SuiteResult r{"one-hot collapse"};
    try {
        RelaxConfig c;
        c.num_layers = 3;
        c.num_blocks = 2;
        c.filter_multiplier = 2;
        c.seed = 9;
        SuperNet net(c);
        auto img = mt::make_leaf({1, 3, 32, 32});
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& v : img->value) v = u(rng);
        bool ok = true;
        for (std::uint64_t seed = 0; seed < 3 && ok; ++seed) {
            auto [cell, path] = random_genotype(c.num_blocks, net.trellis(), seed);
            auto snap = net.snapshot();
            snap.alpha = alpha_logits_from_genotype(cell);
            snap.beta = beta_logits_from_path(path, net.trellis());
            net.load_snapshot(snap);
            auto fw = net.forward(img);
            DiscreteNet dn(c, cell, path, net.params());
            auto logits = dn.forward(img);
            for (std::size_t i = 0; i < logits->value.size() && ok; ++i)
                ok = std::abs(logits->value[i] - fw.logits->value[i]) <= 1e-9;
        }
        r.passed = ok;
        if (!ok) r.detail = "supernet/discrete mismatch";
    } catch (const std::exception& e) {
        r.detail = e.what();
    }
    return r;
}

int run_selftest() {
    std::vector<SuiteResult (*)()> suites = {suite_counting, suite_viterbi, suite_gradients,
                                             suite_collapse};
    unsigned threads = std::thread::hardware_concurrency();
    if (const char* env = std::getenv("HIERNAS_THREADS")) {
        const long parsed = std::strtol(env, nullptr, 10);
        if (parsed >= 1) threads = static_cast<unsigned>(parsed);
    }
    threads = std::max(1u, std::min<unsigned>(threads, suites.size()));

    std::vector<SuiteResult> results(suites.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < suites.size(); i = next.fetch_add(1))
            results[i] = suites[i]();
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    bool all = true;
    for (const auto& r : results) {
        std::cout << (r.passed ? "PASS" : "FAIL") << " " << r.name;
        if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
        std::cout << "\n";
        all = all && r.passed;
    }
    return all ? 0 : 1;
}

std::pair<int, int> parse_input_size(const std::string& text) {
    const auto x = text.find('x');
    if (x == std::string::npos) throw ValidationError("input size must look like HxW, got " + text);
    int h = 0, w = 0;
    try {
        h = std::stoi(text.substr(0, x));
        w = std::stoi(text.substr(x + 1));
    } catch (const std::exception&) {
        throw ValidationError("input size must look like HxW, got " + text);
    }
    return {h, w};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical architecture search engine"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::simple);

    // count-paths
    auto* cmd_paths = app.add_subcommand("count-paths", "count trellis paths");
    int layers = 12;
    std::string convention = "both";
    cmd_paths->add_option("--layers", layers, "number of trellis layers")->required();
    cmd_paths->add_option("--convention", convention, "first4 | first4or8 | both")
        ->check(CLI::IsMember({"first4", "first4or8", "both"}));

    // count-cells
    auto* cmd_cells = app.add_subcommand("count-cells", "count cell genotypes");
    int blocks = 5, ops = 8;
    cmd_cells->add_option("--blocks", blocks, "blocks per cell")->required();
    cmd_cells->add_option("--ops", ops, "operator vocabulary size");

    // gen-data
    auto* cmd_gen = app.add_subcommand("gen-data", "generate a toy segmentation dataset");
    std::string spec_file, out_dir;
    cmd_gen->add_option("--spec", spec_file, "dataset spec file (key = value)")->required();
    cmd_gen->add_option("--out", out_dir, "output directory")->required();

    // search
    auto* cmd_search = app.add_subcommand("search", "run bi-level architecture search");
    std::string config_file, data_dir, search_out;
    cmd_search->add_option("--config", config_file, "search config file")->required();
    cmd_search->add_option("--data", data_dir, "dataset directory")->required();
    cmd_search->add_option("--out", search_out, "output directory")->required();

    // decode
    auto* cmd_decode = app.add_subcommand("decode", "decode a snapshot into a genotype");
    std::string snapshot_file, genotype_out;
    cmd_decode->add_option("--snapshot", snapshot_file, "architecture snapshot JSON")->required();
    cmd_decode->add_option("--out", genotype_out, "genotype JSON output path")->required();

    // retrain
    auto* cmd_retrain = app.add_subcommand("retrain", "train a decoded architecture from scratch");
    std::string genotype_file, retrain_data, retrain_out;
    int retrain_F = 4, retrain_epochs = 40, retrain_batch = 2;
    std::uint64_t retrain_seed = 0;
    cmd_retrain->add_option("--genotype", genotype_file, "genotype JSON")->required();
    cmd_retrain->add_option("--data", retrain_data, "dataset directory")->required();
    cmd_retrain->add_option("--out", retrain_out, "output directory")->required();
    cmd_retrain->add_option("--filter-multiplier", retrain_F, "filter multiplier F");
    cmd_retrain->add_option("--epochs", retrain_epochs, "training epochs");
    cmd_retrain->add_option("--batch-size", retrain_batch, "minibatch size");
    cmd_retrain->add_option("--seed", retrain_seed, "training seed");

    // analyze
    auto* cmd_analyze = app.add_subcommand("analyze", "parameter and multiply-add accounting");
    std::string analyze_genotype, input_size = "64x64", analyze_out;
    int analyze_F = 4, analyze_classes = 19;
    bool five_branch = false, decoder_stub = false;
    cmd_analyze->add_option("--genotype", analyze_genotype, "genotype JSON")->required();
    cmd_analyze->add_option("--filter-multiplier", analyze_F, "filter multiplier F")->required();
    cmd_analyze->add_option("--input", input_size, "input size as HxW");
    cmd_analyze->add_option("--num-classes", analyze_classes, "classifier width");
    cmd_analyze->add_flag("--five-branch-aspp", five_branch, "use the five-branch head");
    cmd_analyze->add_flag("--decoder-stub", decoder_stub, "add the low-level decoder stub");
    cmd_analyze->add_option("--out", analyze_out, "also write stats JSON here");

    // selftest
    app.add_subcommand("selftest", "run built-in oracle cross-checks");

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
            std::cerr << "ERR 2: " << e.what() << "\n";
            return static_cast<int>(ExitCode::usage);
        }

        if (app.got_subcommand(cmd_paths)) {
            if (convention == "first4" || convention == "both")
                std::cout << count_paths(layers, StartConvention::first_layer_4) << "\n";
            if (convention == "first4or8" || convention == "both")
                std::cout << count_paths(layers, StartConvention::first_layer_4_or_8) << "\n";
        } else if (app.got_subcommand(cmd_cells)) {
            std::cout << count_cell_genotypes(blocks, ops) << "\n";
        } else if (app.got_subcommand(cmd_gen)) {
            Stopwatch watch;
            const std::string spec_text = read_text(spec_file);
            std::istringstream in(spec_text);
            auto spec = parse_toy_dataset_spec(in);
            auto ds = gen_toy_dataset(spec);
            const fs::path out(out_dir);
            save_dataset(ds, out);
            write_manifest(out / "manifest.json", "gen-data", hex_hash(spec_text), spec.seed,
                           {out / "images.bin", out / "labels.bin", out / "index.json"}, watch);
        } else if (app.got_subcommand(cmd_search)) {
            Stopwatch watch;
            const std::string config_text = read_text(config_file);
            std::istringstream in(config_text);
            auto cfg = parse_search_config(in);
            auto ds = load_dataset(data_dir);
            auto result = run_search(cfg, ds);
            const fs::path out(search_out);
            fs::create_directories(out);
            write_text(out / "trace.csv", result.trace.to_csv());
            write_text(out / "snapshot.json", snapshot_to_json(result.snapshot).dump(2) + "\n");
            result.net->params().save((out / "checkpoint.bin").string());
            write_manifest(out / "manifest.json", "search", hex_hash(config_text), cfg.seed,
                           {out / "trace.csv", out / "snapshot.json", out / "checkpoint.bin"},
                           watch);
        } else if (app.got_subcommand(cmd_decode)) {
            Stopwatch watch;
            const std::string snap_text = read_text(snapshot_file);
            auto snap = snapshot_from_json(nlohmann::json::parse(snap_text, nullptr, true));
            auto decoded = decode_snapshot(snap);
            auto j = genotype_to_json(decoded.cell, decoded.path);
            j["provenance"] = decoded.provenance;
            const fs::path out(genotype_out);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            write_text(out, j.dump(2) + "\n");
            write_manifest(out.string() + ".manifest.json", "decode", hex_hash(snap_text), 0,
                           {out}, watch);
        } else if (app.got_subcommand(cmd_retrain)) {
            Stopwatch watch;
            const std::string geno_text = read_text(genotype_file);
            auto [cell, path] = genotype_from_json(read_json(genotype_file));
            auto ds = load_dataset(retrain_data);
            RetrainConfig cfg;
            cfg.epochs = retrain_epochs;
            cfg.batch_size = retrain_batch;
            cfg.seed = retrain_seed;
            auto result = retrain_decoded(cell, path, retrain_F, ds, cfg);
            const fs::path out(retrain_out);
            fs::create_directories(out);
            result.net->params().save((out / "checkpoint.bin").string());
            nlohmann::ordered_json report;
            report["miou"] = result.miou;
            report["pixel_acc"] = result.pixel_acc;
            report["final_train_loss"] = result.final_train_loss;
            report["epochs"] = cfg.epochs;
            report["filter_multiplier"] = retrain_F;
            write_text(out / "report.json", report.dump(2) + "\n");
            std::cout << "miou " << result.miou << "\n";
            write_manifest(out / "manifest.json", "retrain", hex_hash(geno_text), cfg.seed,
                           {out / "checkpoint.bin", out / "report.json"}, watch);
        } else if (app.got_subcommand(cmd_analyze)) {
            Stopwatch watch;
            const std::string geno_text = read_text(analyze_genotype);
            auto [cell, path] = genotype_from_json(read_json(analyze_genotype));
            auto [h, w] = parse_input_size(input_size);
            auto plan = build_final_plan(cell, path, analyze_F, analyze_classes, five_branch,
                                         decoder_stub);
            auto stats = model_stats(plan, h, w);
            std::cout << stats_to_table(stats);
            if (!analyze_out.empty()) {
                const fs::path out(analyze_out);
                if (out.has_parent_path()) fs::create_directories(out.parent_path());
                write_text(out, stats_to_json(stats).dump(2) + "\n");
                write_manifest(out.string() + ".manifest.json", "analyze", hex_hash(geno_text), 0,
                               {out}, watch);
            }
        } else {  // selftest
            return run_selftest();
        }
        return static_cast<int>(ExitCode::ok);
    } catch (const NumericError& e) {
        std::cerr << "ERR 4: " << e.what() << "\n";
        return static_cast<int>(ExitCode::numeric);
    } catch (const std::exception& e) {
        std::cerr << "ERR 3: " << e.what() << "\n";
        return static_cast<int>(ExitCode::validation);
    }
}
