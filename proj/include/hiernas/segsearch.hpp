#pragma once

// Bi-level architecture search on a synthetic segmentation task: toy data
// generation, trainA/trainB splitting, alternating weight/architecture
// updates with cosine and adaptive schedules, and mIoU evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiernas/common.hpp"
#include "hiernas/microtensor.hpp"
#include "hiernas/relaxation.hpp"

namespace hiernas {

// ---------------------------------------------------------------------------
// toy dataset
// ---------------------------------------------------------------------------

struct ToyDatasetSpec {
    int num_images = 100;
    int image_size = 64;  // square, must be divisible by 32
    int num_classes = 4;  // 0 background, 1 rectangles, 2 disks, 3 stripes
    bool rectangles = true;
    bool disks = true;
    bool stripes = true;
    double noise = 0.05;
    std::uint64_t seed = 0;
};

struct Dataset {
    int num_images = 0;
    int channels = 3;
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::uint64_t seed = 0;
    std::vector<double> images;  // num_images * channels * height * width
    std::vector<int> labels;     // num_images * height * width

    std::int64_t image_stride() const {
        return static_cast<std::int64_t>(channels) * height * width;
    }
    std::int64_t label_stride() const { return static_cast<std::int64_t>(height) * width; }
};

inline Dataset gen_toy_dataset(const ToyDatasetSpec& spec) {
    if (spec.num_images < 1) throw InvalidArgumentError("gen_toy_dataset: num_images must be >= 1");
    if (spec.image_size < 32 || spec.image_size % 32 != 0)
        throw InvalidArgumentError("gen_toy_dataset: image size must be a positive multiple of 32");
    if (spec.num_classes < 2 || spec.num_classes > 4)
        throw InvalidArgumentError("gen_toy_dataset: num_classes must be in [2, 4]");
    if (spec.noise < 0.0) throw InvalidArgumentError("gen_toy_dataset: noise must be >= 0");

    const int H = spec.image_size, W = spec.image_size;
    Dataset ds;
    ds.num_images = spec.num_images;
    ds.height = H;
    ds.width = W;
    ds.num_classes = spec.num_classes;
    ds.seed = spec.seed;
    ds.images.assign(static_cast<std::size_t>(spec.num_images) * 3 * H * W, 0.0);
    ds.labels.assign(static_cast<std::size_t>(spec.num_images) * H * W, 0);

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // Class-correlated base colors (r, g, b); shapes are recognizable by a
    // dominant channel, the background stays muted.
    const double palette[4][3] = {
        {0.35, 0.35, 0.35}, {0.85, 0.20, 0.20}, {0.20, 0.85, 0.20}, {0.20, 0.20, 0.85}};

    auto put = [&](int img, int cls, int y, int x) {
        const std::int64_t base = img * ds.image_stride();
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        for (int ch = 0; ch < 3; ++ch)
            ds.images[base + ch * hw + static_cast<std::int64_t>(y) * W + x] = palette[cls][ch];
        ds.labels[img * ds.label_stride() + static_cast<std::int64_t>(y) * W + x] = cls;
    };

    for (int img = 0; img < spec.num_images; ++img) {
        // Background: gentle per-image gradient around the base gray.
        const double gx = (u01(rng) - 0.5) * 0.2, gy = (u01(rng) - 0.5) * 0.2;
        const std::int64_t base = img * ds.image_stride();
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    ds.images[base + ch * hw + static_cast<std::int64_t>(y) * W + x] =
                        palette[0][ch] + gx * (static_cast<double>(x) / W - 0.5) +
                        gy * (static_cast<double>(y) / H - 0.5);

        if (spec.rectangles && spec.num_classes > 1) {
            const int count = 1 + static_cast<int>(rng() % 3);
            for (int r = 0; r < count; ++r) {
                const int rh = 4 + static_cast<int>(rng() % (H / 4));
                const int rw = 4 + static_cast<int>(rng() % (W / 4));
                const int y0 = static_cast<int>(rng() % (H - rh));
                const int x0 = static_cast<int>(rng() % (W - rw));
                for (int y = y0; y < y0 + rh; ++y)
                    for (int x = x0; x < x0 + rw; ++x) put(img, 1, y, x);
            }
        }
        if (spec.disks && spec.num_classes > 2) {
            const int count = 1 + static_cast<int>(rng() % 2);
            for (int d = 0; d < count; ++d) {
                const int rad = 3 + static_cast<int>(rng() % (H / 6));
                const int cy = rad + static_cast<int>(rng() % (H - 2 * rad));
                const int cx = rad + static_cast<int>(rng() % (W - 2 * rad));
                for (int y = cy - rad; y <= cy + rad; ++y)
                    for (int x = cx - rad; x <= cx + rad; ++x)
                        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad)
                            put(img, 2, y, x);
            }
        }
        if (spec.stripes && spec.num_classes > 3) {
            // A diagonal band of alternating stripes.
            const int band = 6 + static_cast<int>(rng() % (H / 6));
            const int offset = static_cast<int>(rng() % (H + W));
            const int period = 3 + static_cast<int>(rng() % 3);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int d = x + y - offset;
                    if (d >= 0 && d < band && (d / period) % 2 == 0) put(img, 3, y, x);
                }
        }

        for (std::int64_t i = 0; i < ds.image_stride(); ++i) {
            double& v = ds.images[base + i];
            v = std::clamp(v + spec.noise * (u01(rng) * 2.0 - 1.0), 0.0, 1.0);
        }
    }
    return ds;
}

namespace detail {

// Shared flat "key = value" reader; '#' starts a comment.
inline void read_kv_lines(
    std::istream& in,
    const std::map<std::string, std::function<void(const std::string&)>>& setters,
    const char* what) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(std::string(what) + " line " + std::to_string(lineno) +
                                  ": expected key = value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end())
            throw ValidationError(std::string(what) + " line " + std::to_string(lineno) +
                                  ": unknown key '" + key + "'");
        it->second(value);
    }
}

template <typename T>
void parse_number(const std::string& v, T& field, const char* what) {
    std::istringstream ss(v);
    ss >> field;
    if (ss.fail() || !ss.eof())
        throw ValidationError(std::string(what) + ": bad value '" + v + "'");
}

inline void parse_bool(const std::string& v, bool& field, const char* what) {
    if (v == "true" || v == "1") field = true;
    else if (v == "false" || v == "0") field = false;
    else throw ValidationError(std::string(what) + ": bad boolean '" + v + "'");
}

}  // namespace detail

inline ToyDatasetSpec parse_toy_dataset_spec(std::istream& in) {
    ToyDatasetSpec spec;
    const char* what = "dataset spec";
    std::map<std::string, std::function<void(const std::string&)>> setters;
    setters["num_images"] = [&](const std::string& v) { detail::parse_number(v, spec.num_images, what); };
    setters["image_size"] = [&](const std::string& v) { detail::parse_number(v, spec.image_size, what); };
    setters["num_classes"] = [&](const std::string& v) { detail::parse_number(v, spec.num_classes, what); };
    setters["rectangles"] = [&](const std::string& v) { detail::parse_bool(v, spec.rectangles, what); };
    setters["disks"] = [&](const std::string& v) { detail::parse_bool(v, spec.disks, what); };
    setters["stripes"] = [&](const std::string& v) { detail::parse_bool(v, spec.stripes, what); };
    setters["noise"] = [&](const std::string& v) { detail::parse_number(v, spec.noise, what); };
    setters["seed"] = [&](const std::string& v) { detail::parse_number(v, spec.seed, what); };
    detail::read_kv_lines(in, setters, what);
    return spec;
}

inline std::string format_toy_dataset_spec(const ToyDatasetSpec& spec) {
    std::ostringstream out;
    out << "num_images = " << spec.num_images << "\n"
        << "image_size = " << spec.image_size << "\n"
        << "num_classes = " << spec.num_classes << "\n"
        << "rectangles = " << (spec.rectangles ? "true" : "false") << "\n"
        << "disks = " << (spec.disks ? "true" : "false") << "\n"
        << "stripes = " << (spec.stripes ? "true" : "false") << "\n"
        << "noise = " << spec.noise << "\n"
        << "seed = " << spec.seed << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// dataset directory io: images.bin (f64 LE) + labels.bin (i32 LE) + index.json
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "images.bin", std::ios::binary);
        if (!f) throw IoError("save_dataset: cannot write " + (dir / "images.bin").string());
        f.write(reinterpret_cast<const char*>(ds.images.data()),
                static_cast<std::streamsize>(ds.images.size() * sizeof(double)));
    }
    {
        std::ofstream f(dir / "labels.bin", std::ios::binary);
        if (!f) throw IoError("save_dataset: cannot write " + (dir / "labels.bin").string());
        std::vector<std::int32_t> l(ds.labels.begin(), ds.labels.end());
        f.write(reinterpret_cast<const char*>(l.data()),
                static_cast<std::streamsize>(l.size() * sizeof(std::int32_t)));
    }
    nlohmann::ordered_json j;
    j["num_images"] = ds.num_images;
    j["channels"] = ds.channels;
    j["height"] = ds.height;
    j["width"] = ds.width;
    j["num_classes"] = ds.num_classes;
    j["seed"] = ds.seed;
    std::ofstream f(dir / "index.json");
    if (!f) throw IoError("save_dataset: cannot write " + (dir / "index.json").string());
    f << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream idx(dir / "index.json");
    if (!idx) throw IoError("load_dataset: cannot read " + (dir / "index.json").string());
    nlohmann::json j;
    try {
        idx >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("load_dataset: bad index.json: ") + e.what());
    }
    Dataset ds;
    try {
        ds.num_images = j.at("num_images").get<int>();
        ds.channels = j.at("channels").get<int>();
        ds.height = j.at("height").get<int>();
        ds.width = j.at("width").get<int>();
        ds.num_classes = j.at("num_classes").get<int>();
        ds.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("load_dataset: bad index.json: ") + e.what());
    }
    if (ds.num_images < 1 || ds.channels != 3 || ds.height < 1 || ds.width < 1)
        throw ValidationError("load_dataset: implausible index.json");

    const std::size_t n_img = static_cast<std::size_t>(ds.num_images) * ds.image_stride();
    const std::size_t n_lab = static_cast<std::size_t>(ds.num_images) * ds.label_stride();
    {
        std::ifstream f(dir / "images.bin", std::ios::binary);
        if (!f) throw IoError("load_dataset: cannot read " + (dir / "images.bin").string());
        ds.images.resize(n_img);
        f.read(reinterpret_cast<char*>(ds.images.data()),
               static_cast<std::streamsize>(n_img * sizeof(double)));
        if (static_cast<std::size_t>(f.gcount()) != n_img * sizeof(double))
            throw ValidationError("load_dataset: images.bin truncated");
    }
    {
        std::ifstream f(dir / "labels.bin", std::ios::binary);
        if (!f) throw IoError("load_dataset: cannot read " + (dir / "labels.bin").string());
        std::vector<std::int32_t> l(n_lab);
        f.read(reinterpret_cast<char*>(l.data()),
               static_cast<std::streamsize>(n_lab * sizeof(std::int32_t)));
        if (static_cast<std::size_t>(f.gcount()) != n_lab * sizeof(std::int32_t))
            throw ValidationError("load_dataset: labels.bin truncated");
        ds.labels.assign(l.begin(), l.end());
    }
    return ds;
}

// Disjoint shuffled halves; when the size is odd the first half gets the
// extra element.
inline std::pair<std::vector<int>, std::vector<int>> split_train(const Dataset& ds,
                                                                 std::uint64_t seed) {
    if (ds.num_images < 2) throw InvalidArgumentError("split_train: need at least 2 images");
    std::vector<int> idx(ds.num_images);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const int half = (ds.num_images + 1) / 2;
    return {std::vector<int>(idx.begin(), idx.begin() + half),
            std::vector<int>(idx.begin() + half, idx.end())};
}

inline mt::NodePtr make_batch_images(const Dataset& ds, const std::vector<int>& indices) {
    if (indices.empty()) throw InvalidArgumentError("make_batch_images: empty batch");
    auto x = mt::make_leaf({static_cast<int>(indices.size()), ds.channels, ds.height, ds.width});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] < 0 || indices[b] >= ds.num_images)
            throw InvalidArgumentError("make_batch_images: index out of range");
        std::copy_n(ds.images.begin() + indices[b] * ds.image_stride(), ds.image_stride(),
                    x->value.begin() + static_cast<std::int64_t>(b) * ds.image_stride());
    }
    return x;
}

inline mt::LabelMap make_batch_labels(const Dataset& ds, const std::vector<int>& indices) {
    mt::LabelMap lm;
    lm.n = static_cast<int>(indices.size());
    lm.h = ds.height;
    lm.w = ds.width;
    lm.v.resize(static_cast<std::size_t>(lm.n) * ds.label_stride());
    for (std::size_t b = 0; b < indices.size(); ++b)
        std::copy_n(ds.labels.begin() + indices[b] * ds.label_stride(), ds.label_stride(),
                    lm.v.begin() + static_cast<std::int64_t>(b) * ds.label_stride());
    return lm;
}

// ---------------------------------------------------------------------------
// schedules and metrics
// ---------------------------------------------------------------------------

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max = 0.025,
                        double lr_min = 0.001) {
    if (total_steps < 1) throw InvalidArgumentError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw InvalidArgumentError("cosine_lr: step must be in [0, total_steps]");
    return lr_min + 0.5 * (lr_max - lr_min) *
                        (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

// Mean over classes present in gt of |intersection| / |union|.
inline double miou(const mt::LabelMap& pred, const mt::LabelMap& gt, int num_classes,
                   int ignore_index = -1) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("miou: prediction/ground-truth shape mismatch");
    if (num_classes < 1) throw InvalidArgumentError("miou: num_classes must be >= 1");
    std::vector<std::int64_t> inter(num_classes, 0), uni(num_classes, 0), present(num_classes, 0);
    for (std::size_t i = 0; i < gt.v.size(); ++i) {
        const int g = gt.v[i], p = pred.v[i];
        if (g == ignore_index) continue;
        if (g < 0 || g >= num_classes || p < 0 || p >= num_classes)
            throw ValidationError("miou: label outside [0, num_classes)");
        present[g] = 1;
        if (g == p) {
            ++inter[g];
            ++uni[g];
        } else {
            ++uni[g];
            ++uni[p];
        }
    }
    double acc = 0.0;
    int classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (!present[c]) continue;
        acc += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        ++classes;
    }
    if (classes == 0) throw ValidationError("miou: no labeled pixels");
    return acc / classes;
}

inline mt::LabelMap argmax_labels(const mt::NodePtr& logits) {
    mt::LabelMap lm;
    lm.n = logits->shape.n;
    lm.h = logits->shape.h;
    lm.w = logits->shape.w;
    lm.v.resize(static_cast<std::size_t>(lm.n) * lm.h * lm.w);
    const int c = logits->shape.c;
    const std::int64_t hw = static_cast<std::int64_t>(lm.h) * lm.w;
    for (int n = 0; n < lm.n; ++n)
        for (std::int64_t i = 0; i < hw; ++i) {
            int best = 0;
            double bv = logits->value[static_cast<std::int64_t>(n) * c * hw + i];
            for (int k = 1; k < c; ++k) {
                const double v = logits->value[(static_cast<std::int64_t>(n) * c + k) * hw + i];
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            lm.v[n * hw + i] = best;
        }
    return lm;
}

// mIoU of always predicting the most frequent class of the evaluated images.
inline double majority_baseline_miou(const Dataset& ds, const std::vector<int>& indices) {
    std::vector<std::int64_t> freq(ds.num_classes, 0);
    for (int i : indices)
        for (std::int64_t p = 0; p < ds.label_stride(); ++p)
            ++freq[ds.labels[i * ds.label_stride() + p]];
    const int top = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
    auto gt = make_batch_labels(ds, indices);
    mt::LabelMap pred = gt;
    std::fill(pred.v.begin(), pred.v.end(), top);
    return miou(pred, gt, ds.num_classes);
}

// ---------------------------------------------------------------------------
// search configuration
// ---------------------------------------------------------------------------

struct SearchConfig {
    int L = 6;
    int B = 3;
    int F = 4;
    int epochs = 40;
    int batch_size = 2;
    double w_lr_max = 0.025;
    double w_lr_min = 0.001;
    double w_momentum = 0.9;
    double w_weight_decay = 0.0003;
    double arch_lr = 0.003;
    double arch_weight_decay = 0.001;
    int arch_delay_epochs = 20;
    std::uint64_t seed = 0;
    int crop_size = 64;  // network input size, fixed to the dataset size here
    bool use_batch_norm = true;
    bool clip_gradients = true;
    double clip_norm = 5.0;

    void validate() const {
        if (L < 1 || B < 1 || F < 1) throw ValidationError("search config: L, B, F must be >= 1");
        if (epochs < 1 || batch_size < 1)
            throw ValidationError("search config: epochs and batch_size must be >= 1");
        if (arch_delay_epochs < 0 || arch_delay_epochs > epochs)
            throw ValidationError("search config: arch_delay_epochs must be in [0, epochs]");
        if (w_lr_max <= 0 || w_lr_min <= 0 || arch_lr <= 0)
            throw ValidationError("search config: learning rates must be positive");
        if (w_weight_decay < 0 || arch_weight_decay < 0)
            throw ValidationError("search config: weight decay must be >= 0");
        if (w_momentum < 0 || w_momentum >= 1)
            throw ValidationError("search config: momentum must be in [0, 1)");
        if (crop_size < 32 || crop_size % 32 != 0)
            throw ValidationError("search config: crop_size must be a positive multiple of 32");
        if (clip_gradients && clip_norm <= 0)
            throw ValidationError("search config: clip_norm must be positive");
    }
};

// Flat "key = value" config text, one pair per line; '#' starts a comment.
inline SearchConfig parse_search_config(std::istream& in) {
    SearchConfig cfg;
    const char* what = "search config";
    std::map<std::string, std::function<void(const std::string&)>> setters;
    auto num = [what](const std::string& v, auto& field) { detail::parse_number(v, field, what); };
    auto boolean = [what](const std::string& v, bool& field) { detail::parse_bool(v, field, what); };
    setters["L"] = [&](const std::string& v) { num(v, cfg.L); };
    setters["B"] = [&](const std::string& v) { num(v, cfg.B); };
    setters["F"] = [&](const std::string& v) { num(v, cfg.F); };
    setters["epochs"] = [&](const std::string& v) { num(v, cfg.epochs); };
    setters["batch_size"] = [&](const std::string& v) { num(v, cfg.batch_size); };
    setters["w_lr_max"] = [&](const std::string& v) { num(v, cfg.w_lr_max); };
    setters["w_lr_min"] = [&](const std::string& v) { num(v, cfg.w_lr_min); };
    setters["w_momentum"] = [&](const std::string& v) { num(v, cfg.w_momentum); };
    setters["w_weight_decay"] = [&](const std::string& v) { num(v, cfg.w_weight_decay); };
    setters["arch_lr"] = [&](const std::string& v) { num(v, cfg.arch_lr); };
    setters["arch_weight_decay"] = [&](const std::string& v) { num(v, cfg.arch_weight_decay); };
    setters["arch_delay_epochs"] = [&](const std::string& v) { num(v, cfg.arch_delay_epochs); };
    setters["seed"] = [&](const std::string& v) { num(v, cfg.seed); };
    setters["crop_size"] = [&](const std::string& v) { num(v, cfg.crop_size); };
    setters["use_batch_norm"] = [&](const std::string& v) { boolean(v, cfg.use_batch_norm); };
    setters["clip_gradients"] = [&](const std::string& v) { boolean(v, cfg.clip_gradients); };
    setters["clip_norm"] = [&](const std::string& v) { num(v, cfg.clip_norm); };

    detail::read_kv_lines(in, setters, what);
    cfg.validate();
    return cfg;
}

inline std::string format_search_config(const SearchConfig& cfg) {
    std::ostringstream out;
    out << "L = " << cfg.L << "\n"
        << "B = " << cfg.B << "\n"
        << "F = " << cfg.F << "\n"
        << "epochs = " << cfg.epochs << "\n"
        << "batch_size = " << cfg.batch_size << "\n"
        << "w_lr_max = " << cfg.w_lr_max << "\n"
        << "w_lr_min = " << cfg.w_lr_min << "\n"
        << "w_momentum = " << cfg.w_momentum << "\n"
        << "w_weight_decay = " << cfg.w_weight_decay << "\n"
        << "arch_lr = " << cfg.arch_lr << "\n"
        << "arch_weight_decay = " << cfg.arch_weight_decay << "\n"
        << "arch_delay_epochs = " << cfg.arch_delay_epochs << "\n"
        << "seed = " << cfg.seed << "\n"
        << "crop_size = " << cfg.crop_size << "\n"
        << "use_batch_norm = " << (cfg.use_batch_norm ? "true" : "false") << "\n"
        << "clip_gradients = " << (cfg.clip_gradients ? "true" : "false") << "\n"
        << "clip_norm = " << cfg.clip_norm << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// search runner
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;  // 1-based
    double lossA = 0.0;
    double lossB = 0.0;
    double miou = 0.0;
    double pixel_acc = 0.0;  // recorded alongside mIoU, not part of the CSV
    double lr = 0.0;
    double alpha_entropy = 0.0;
    double beta_entropy = 0.0;
};

struct SearchTrace {
    std::vector<EpochRecord> epochs;

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "epoch,lossA,lossB,miou,lr,alpha_entropy,beta_entropy\n";
        for (const auto& e : epochs)
            out << e.epoch << ',' << e.lossA << ',' << e.lossB << ',' << e.miou << ',' << e.lr
                << ',' << e.alpha_entropy << ',' << e.beta_entropy << "\n";
        return out.str();
    }
};

// Which split each computed loss came from and which optimizer consumed it.
struct SearchCounters {
    std::int64_t w_updates_from_trainA = 0;
    std::int64_t w_updates_from_trainB = 0;
    std::int64_t arch_updates_from_trainA = 0;
    std::int64_t arch_updates_from_trainB = 0;
    std::int64_t eval_losses = 0;
};

struct SearchResult {
    SearchTrace trace;
    ArchSnapshot snapshot;
    std::unique_ptr<SuperNet> net;
    SearchCounters counters;
    std::vector<int> trainA;
    std::vector<int> trainB;
};

namespace detail {

struct EvalMetrics {
    double loss = 0.0;
    double miou = 0.0;
    double pixel_acc = 0.0;
};

template <typename Forward>
EvalMetrics evaluate_split(Forward&& forward, const Dataset& ds, const std::vector<int>& split,
                           int batch_size, SearchCounters* counters) {
    double loss_sum = 0.0;
    std::int64_t batches = 0, correct = 0, total = 0;
    std::vector<std::int64_t> inter(ds.num_classes, 0), uni(ds.num_classes, 0),
        present(ds.num_classes, 0);
    for (std::size_t off = 0; off < split.size(); off += batch_size) {
        std::vector<int> batch(split.begin() + off,
                               split.begin() + std::min(off + batch_size, split.size()));
        auto images = make_batch_images(ds, batch);
        auto labels = make_batch_labels(ds, batch);
        auto logits = forward(images);
        auto loss = mt::cross_entropy_spatial(logits, labels);
        loss_sum += loss->value[0];
        ++batches;
        if (counters) ++counters->eval_losses;
        auto pred = argmax_labels(logits);
        for (std::size_t i = 0; i < labels.v.size(); ++i) {
            const int g = labels.v[i], p = pred.v[i];
            present[g] = 1;
            ++total;
            if (g == p) {
                ++correct;
                ++inter[g];
                ++uni[g];
            } else {
                ++uni[g];
                ++uni[p];
            }
        }
    }
    EvalMetrics m;
    m.loss = loss_sum / static_cast<double>(batches);
    m.pixel_acc = static_cast<double>(correct) / static_cast<double>(total);
    double acc = 0.0;
    int classes = 0;
    for (int c = 0; c < ds.num_classes; ++c) {
        if (!present[c]) continue;
        acc += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        ++classes;
    }
    m.miou = acc / classes;
    return m;
}

inline std::vector<mt::NodePtr> lookup_params(mt::ParamStore& store,
                                              const std::vector<std::string>& names) {
    std::vector<mt::NodePtr> out;
    out.reserve(names.size());
    for (const auto& n : names) out.push_back(store.get(n));
    return out;
}

}  // namespace detail

inline SearchResult run_search(const SearchConfig& cfg, const Dataset& ds) {
    cfg.validate();
    if (ds.height != cfg.crop_size || ds.width != cfg.crop_size)
        throw ValidationError("run_search: dataset size does not match crop_size");

    SearchResult res;
    RelaxConfig rc;
    rc.num_layers = cfg.L;
    rc.num_blocks = cfg.B;
    rc.filter_multiplier = cfg.F;
    rc.in_channels = ds.channels;
    rc.num_classes = ds.num_classes;
    rc.use_batch_norm = cfg.use_batch_norm;
    rc.seed = cfg.seed;
    res.net = std::make_unique<SuperNet>(rc);
    SuperNet& net = *res.net;

    std::tie(res.trainA, res.trainB) = split_train(ds, cfg.seed);
    const auto& trainA = res.trainA;
    const auto& trainB = res.trainB;

    mt::SgdMomentum w_opt(net.params(), net.weight_param_names(), cfg.w_momentum,
                          cfg.w_weight_decay);
    mt::Adam arch_opt(net.params(), net.arch_param_names(), cfg.arch_lr, cfg.arch_weight_decay);
    auto w_params = detail::lookup_params(net.params(), net.weight_param_names());
    auto arch_params = detail::lookup_params(net.params(), net.arch_param_names());

    const std::int64_t batches_per_epoch =
        (static_cast<std::int64_t>(trainA.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_w_steps = batches_per_epoch * cfg.epochs;

    std::mt19937_64 order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<int> orderA = trainA, orderB = trainB;
    std::size_t cursorB = 0;
    std::int64_t w_step = 0;

    auto next_arch_batch = [&]() {
        std::vector<int> batch;
        for (int i = 0; i < cfg.batch_size && i < static_cast<int>(orderB.size()); ++i) {
            if (cursorB == orderB.size()) {
                std::shuffle(orderB.begin(), orderB.end(), order_rng);
                cursorB = 0;
            }
            batch.push_back(orderB[cursorB++]);
        }
        return batch;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool arch_active = epoch >= cfg.arch_delay_epochs;
        std::shuffle(orderA.begin(), orderA.end(), order_rng);
        if (arch_active) std::shuffle(orderB.begin(), orderB.end(), order_rng), cursorB = 0;

        double lossA_sum = 0.0;
        std::int64_t lossA_batches = 0;
        double lr = cfg.w_lr_max;
        for (std::size_t off = 0; off < orderA.size(); off += cfg.batch_size) {
            const std::int64_t minibatch = static_cast<std::int64_t>(off) / cfg.batch_size;
            std::vector<int> batchA(orderA.begin() + off,
                                    orderA.begin() + std::min(off + cfg.batch_size, orderA.size()));

            // Step 1: weight update on a trainA loss.
            auto fwA = net.forward(make_batch_images(ds, batchA));
            auto lossA = mt::cross_entropy_spatial(fwA.logits, make_batch_labels(ds, batchA));
            if (!std::isfinite(lossA->value[0]))
                throw NumericError("search diverged: non-finite trainA loss at epoch " +
                                   std::to_string(epoch + 1) + ", minibatch " +
                                   std::to_string(minibatch));
            lossA_sum += lossA->value[0];
            ++lossA_batches;
            net.params().zero_grad();
            mt::backward(lossA);
            if (cfg.clip_gradients) mt::clip_grad_norm(w_params, cfg.clip_norm);
            lr = cosine_lr(w_step, total_w_steps, cfg.w_lr_max, cfg.w_lr_min);
            w_opt.step(lr);
            ++w_step;
            ++res.counters.w_updates_from_trainA;

            // Step 2: architecture update on a trainB loss.
            if (arch_active) {
                auto batchB = next_arch_batch();
                auto fwB = net.forward(make_batch_images(ds, batchB));
                auto lossB = mt::cross_entropy_spatial(fwB.logits, make_batch_labels(ds, batchB));
                if (!std::isfinite(lossB->value[0]))
                    throw NumericError("search diverged: non-finite trainB loss at epoch " +
                                       std::to_string(epoch + 1) + ", minibatch " +
                                       std::to_string(minibatch));
                net.params().zero_grad();
                mt::backward(lossB);
                if (cfg.clip_gradients) mt::clip_grad_norm(arch_params, cfg.clip_norm);
                arch_opt.step();
                ++res.counters.arch_updates_from_trainB;
            }
        }

        auto snap = net.snapshot();
        auto metrics = detail::evaluate_split(
            [&](const mt::NodePtr& images) { return net.forward(images).logits; }, ds, trainB,
            cfg.batch_size, &res.counters);
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lossA = lossA_sum / static_cast<double>(lossA_batches);
        rec.lossB = metrics.loss;
        rec.miou = metrics.miou;
        rec.pixel_acc = metrics.pixel_acc;
        rec.lr = lr;
        rec.alpha_entropy = mean_alpha_entropy(snap.alpha);
        rec.beta_entropy = mean_beta_entropy(snap.beta, net.trellis());
        res.trace.epochs.push_back(rec);
    }
    res.snapshot = net.snapshot();
    return res;
}

// ---------------------------------------------------------------------------
// retraining a decoded architecture from scratch
// ---------------------------------------------------------------------------

struct RetrainConfig {
    int epochs = 40;
    int batch_size = 2;
    double lr_max = 0.025;
    double lr_min = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0003;
    std::uint64_t seed = 0;
    bool use_batch_norm = true;
    bool clip_gradients = true;
    double clip_norm = 5.0;

    void validate() const {
        if (epochs < 1 || batch_size < 1)
            throw ValidationError("retrain config: epochs and batch_size must be >= 1");
        if (lr_max <= 0 || lr_min <= 0) throw ValidationError("retrain config: rates must be positive");
        if (weight_decay < 0) throw ValidationError("retrain config: weight decay must be >= 0");
    }
};

struct RetrainResult {
    std::unique_ptr<DiscreteNet> net;
    double miou = 0.0;
    double pixel_acc = 0.0;
    double final_train_loss = 0.0;
    std::vector<double> epoch_losses;
};

inline RetrainResult retrain_decoded(const CellGenotype& cell, const NetworkPath& path, int F,
                                     const Dataset& ds, const RetrainConfig& cfg) {
    cfg.validate();
    RelaxConfig rc;
    rc.num_layers = static_cast<int>(path.resolutions.size());
    rc.num_blocks = cell.num_blocks();
    rc.filter_multiplier = F;
    rc.in_channels = ds.channels;
    rc.num_classes = ds.num_classes;
    rc.use_batch_norm = cfg.use_batch_norm;
    rc.seed = cfg.seed;

    RetrainResult res;
    res.net = std::make_unique<DiscreteNet>(rc, cell, path);
    DiscreteNet& net = *res.net;

    std::vector<int> train, val;
    if (ds.num_images >= 2) {
        std::tie(train, val) = split_train(ds, cfg.seed);
    } else {
        train = {0};
        val = {0};
    }

    auto names = net.weight_param_names();
    mt::SgdMomentum opt(net.params(), names, cfg.momentum, cfg.weight_decay);
    auto params = detail::lookup_params(net.params(), names);
    const std::int64_t batches_per_epoch =
        (static_cast<std::int64_t>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = batches_per_epoch * cfg.epochs;

    std::mt19937_64 order_rng(cfg.seed ^ 0x517cc1b727220a95ull);
    std::vector<int> order = train;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        std::int64_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<int> batch(order.begin() + off,
                                   order.begin() + std::min(off + cfg.batch_size, order.size()));
            auto logits = net.forward(make_batch_images(ds, batch));
            auto loss = mt::cross_entropy_spatial(logits, make_batch_labels(ds, batch));
            if (!std::isfinite(loss->value[0]))
                throw NumericError("retrain diverged: non-finite loss at epoch " +
                                   std::to_string(epoch + 1) + ", minibatch " +
                                   std::to_string(batches));
            loss_sum += loss->value[0];
            ++batches;
            net.params().zero_grad();
            mt::backward(loss);
            if (cfg.clip_gradients) mt::clip_grad_norm(params, cfg.clip_norm);
            opt.step(cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min));
            ++step;
        }
        res.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }
    res.final_train_loss = res.epoch_losses.back();
    auto metrics = detail::evaluate_split(
        [&](const mt::NodePtr& images) { return net.forward(images); }, ds, val, cfg.batch_size,
        nullptr);
    res.miou = metrics.miou;
    res.pixel_acc = metrics.pixel_acc;
    return res;
}

}  // namespace hiernas
