#pragma once

// Continuous relaxation of the hierarchical space: alpha-mixed cell
// computation and beta-weighted trellis computation with per-resolution
// segmentation heads at the last layer.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiernas/common.hpp"
#include "hiernas/microtensor.hpp"
#include "hiernas/search_space.hpp"

namespace hiernas {

// Transition direction order, fixed everywhere: to s/2, to s, to 2s.
inline constexpr int kDirUp = 0;    // halve the downsample factor
inline constexpr int kDirSame = 1;
inline constexpr int kDirDown = 2;  // double the downsample factor

inline int direction_target(int s, int dir) {
    switch (dir) {
        case kDirUp: return s / 2;
        case kDirSame: return s;
        case kDirDown: return s * 2;
    }
    throw InvalidArgumentError("direction_target: bad direction");
}

// Feasible outgoing directions of source node (layer, s). Layer 0 is the
// virtual stem node at factor 4; layers 1..L-1 are trellis nodes.
inline std::vector<bool> beta_direction_mask(const Trellis& trellis, int layer, int s) {
    std::vector<bool> mask(3, false);
    for (int d = 0; d < 3; ++d) {
        const int t = direction_target(s, d);
        if (!is_downsample_factor(t)) continue;
        if (layer >= 1 && !trellis.node_feasible(layer, s)) continue;
        if (trellis.node_feasible(layer + 1, t)) mask[d] = true;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// plain logits containers (snapshot surface shared with the decoder)
// ---------------------------------------------------------------------------

struct AlphaLogits {
    // v[block i][input j][operator k]; j ranges over i+2 candidates.
    std::vector<std::vector<std::array<double, kNumOperators>>> v;

    int num_blocks() const { return static_cast<int>(v.size()); }

    static AlphaLogits zeros(int num_blocks) {
        AlphaLogits a;
        a.v.resize(num_blocks);
        for (int i = 0; i < num_blocks; ++i)
            a.v[i].assign(i + 2, std::array<double, kNumOperators>{});
        return a;
    }
};

struct BetaLogits {
    int num_layers = 0;  // L; source groups live at layers 0..L-1
    // v[(layer, factor)] = 3 direction logits; infeasible directions unused.
    std::map<std::pair<int, int>, std::array<double, 3>> v;

    static BetaLogits zeros(const Trellis& trellis) {
        BetaLogits b;
        b.num_layers = trellis.num_layers;
        b.v[{0, 4}] = {};
        for (int l = 1; l < trellis.num_layers; ++l)
            for (int s : trellis.layer_nodes[l - 1]) b.v[{l, s}] = {};
        return b;
    }
};

struct ArchSnapshot {
    int num_layers = 0;
    int num_blocks = 0;
    AlphaLogits alpha;
    BetaLogits beta;
};

using AlphaProbs = std::vector<std::vector<std::array<double, kNumOperators>>>;
using BetaProbs = std::map<std::pair<int, int>, std::array<double, 3>>;

namespace detail {

template <std::size_t N>
inline std::array<double, N> masked_softmax(const std::array<double, N>& logits,
                                            const std::vector<bool>& mask) {
    std::array<double, N> out{};
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        if (!std::isfinite(logits[i])) throw NumericError("softmax: non-finite logit");
        mx = std::max(mx, logits[i]);
    }
    if (mx == -std::numeric_limits<double>::infinity())
        throw InvalidArgumentError("softmax: all entries masked");
    double z = 0.0;
    for (std::size_t i = 0; i < N; ++i)
        if (mask[i]) z += std::exp(logits[i] - mx);
    for (std::size_t i = 0; i < N; ++i)
        if (mask[i]) out[i] = std::exp(logits[i] - mx) / z;
    return out;
}

}  // namespace detail

inline AlphaProbs normalize_alpha(const AlphaLogits& alpha) {
    AlphaProbs probs;
    const std::vector<bool> all(kNumOperators, true);
    for (const auto& block : alpha.v) {
        probs.emplace_back();
        for (const auto& group : block) probs.back().push_back(detail::masked_softmax(group, all));
    }
    return probs;
}

inline BetaProbs normalize_beta(const BetaLogits& beta, const Trellis& trellis) {
    BetaProbs probs;
    for (const auto& [key, logits] : beta.v) {
        auto mask = beta_direction_mask(trellis, key.first, key.second);
        if (mask == std::vector<bool>(3, false))
            throw InvalidArgumentError("normalize_beta: node (" + std::to_string(key.first) + "," +
                                       std::to_string(key.second) + ") has no feasible direction");
        probs[key] = detail::masked_softmax(logits, mask);
    }
    return probs;
}

// One-hot logits for a discrete architecture. A magnitude-1e4 logit gap
// underflows the softmax to exact 0/1 in double precision.
inline constexpr double kOneHotLogit = 1e4;

inline AlphaLogits alpha_logits_from_genotype(const CellGenotype& cell) {
    validate_genotype(cell);
    AlphaLogits a = AlphaLogits::zeros(cell.num_blocks());
    for (int i = 0; i < cell.num_blocks(); ++i) {
        for (int j = 0; j < i + 2; ++j) {
            int chosen = static_cast<int>(OperatorKind::zero);
            if (j == cell.blocks[i].input1) chosen = static_cast<int>(cell.blocks[i].op1);
            if (j == cell.blocks[i].input2) chosen = static_cast<int>(cell.blocks[i].op2);
            for (int k = 0; k < kNumOperators; ++k)
                a.v[i][j][k] = (k == chosen) ? 0.0 : -kOneHotLogit;
        }
    }
    return a;
}

// One-hot beta along `path`; every off-path node routes its mass to a
// neighbor that is not the on-path node of the next layer, so no off-path
// state ever feeds the selected path.
inline BetaLogits beta_logits_from_path(const NetworkPath& path, const Trellis& trellis) {
    auto report = validate_path(path, trellis);
    if (!report.valid()) throw ValidationError("beta_logits_from_path: " + report.violations[0]);
    BetaLogits b = BetaLogits::zeros(trellis);
    for (auto& [key, logits] : b.v) {
        const auto [layer, s] = key;
        const auto mask = beta_direction_mask(trellis, layer, s);
        const int on_path_src = layer == 0 ? 4 : path.resolutions[layer - 1];
        const int next = layer < trellis.num_layers ? path.resolutions[layer] : 0;
        int chosen = -1;
        if (s == on_path_src) {
            for (int d = 0; d < 3; ++d)
                if (mask[d] && direction_target(s, d) == next) chosen = d;
        } else {
            // Off-path: avoid the next on-path factor; prefer staying level.
            for (int d : {kDirSame, kDirDown, kDirUp})
                if (mask[d] && direction_target(s, d) != next) {
                    chosen = d;
                    break;
                }
        }
        if (chosen < 0) throw ValidationError("beta_logits_from_path: no feasible routing");
        for (int d = 0; d < 3; ++d) logits[d] = (d == chosen) ? 0.0 : -kOneHotLogit;
    }
    return b;
}

inline double entropy(const double* p, int n) {
    double h = 0.0;
    for (int i = 0; i < n; ++i)
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
}

inline double mean_alpha_entropy(const AlphaLogits& alpha) {
    auto probs = normalize_alpha(alpha);
    double acc = 0.0;
    int groups = 0;
    for (const auto& block : probs)
        for (const auto& g : block) {
            acc += entropy(g.data(), kNumOperators);
            ++groups;
        }
    return acc / groups;
}

inline double mean_beta_entropy(const BetaLogits& beta, const Trellis& trellis) {
    auto probs = normalize_beta(beta, trellis);
    double acc = 0.0;
    for (const auto& [key, p] : probs) acc += entropy(p.data(), 3);
    return acc / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// snapshot JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json snapshot_to_json(const ArchSnapshot& snap) {
    nlohmann::ordered_json j;
    j["meta"] = {{"L", snap.num_layers}, {"B", snap.num_blocks}};
    j["alpha"] = nlohmann::ordered_json::array();
    for (const auto& block : snap.alpha.v) {
        nlohmann::ordered_json jb = nlohmann::ordered_json::array();
        for (const auto& group : block) jb.push_back(group);
        j["alpha"].push_back(jb);
    }
    j["beta"] = nlohmann::ordered_json::array();
    Trellis trellis = build_trellis(snap.num_layers);
    for (int l = 0; l < snap.num_layers; ++l) {
        nlohmann::ordered_json layer = nlohmann::ordered_json::object();
        for (const auto& [key, logits] : snap.beta.v) {
            if (key.first != l) continue;
            auto mask = beta_direction_mask(trellis, l, key.second);
            nlohmann::ordered_json group = nlohmann::ordered_json::array();
            for (int d = 0; d < 3; ++d) {
                if (mask[d])
                    group.push_back(logits[d]);
                else
                    group.push_back(nullptr);
            }
            layer[std::to_string(key.second)] = group;
        }
        j["beta"].push_back(layer);
    }
    return j;
}

inline ArchSnapshot snapshot_from_json(const nlohmann::json& j) {
    ArchSnapshot snap;
    try {
        snap.num_layers = j.at("meta").at("L").get<int>();
        snap.num_blocks = j.at("meta").at("B").get<int>();
        if (snap.num_layers < 1 || snap.num_blocks < 1)
            throw ValidationError("snapshot: bad meta");
        Trellis trellis = build_trellis(snap.num_layers);
        snap.alpha = AlphaLogits::zeros(snap.num_blocks);
        const auto& ja = j.at("alpha");
        if (static_cast<int>(ja.size()) != snap.num_blocks)
            throw ValidationError("snapshot: alpha block count mismatch");
        for (int i = 0; i < snap.num_blocks; ++i) {
            if (static_cast<int>(ja[i].size()) != i + 2)
                throw ValidationError("snapshot: alpha input count mismatch at block " +
                                      std::to_string(i));
            for (int jj = 0; jj < i + 2; ++jj)
                snap.alpha.v[i][jj] = ja[i][jj].get<std::array<double, kNumOperators>>();
        }
        snap.beta = BetaLogits::zeros(trellis);
        const auto& jb = j.at("beta");
        if (static_cast<int>(jb.size()) != snap.num_layers)
            throw ValidationError("snapshot: beta layer count mismatch");
        for (auto& [key, logits] : snap.beta.v) {
            const auto& group = jb[key.first].at(std::to_string(key.second));
            auto mask = beta_direction_mask(trellis, key.first, key.second);
            for (int d = 0; d < 3; ++d) {
                if (!mask[d]) continue;
                if (group[d].is_null()) throw ValidationError("snapshot: feasible beta entry null");
                logits[d] = group[d].get<double>();
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("snapshot json: ") + e.what());
    }
    return snap;
}

// ---------------------------------------------------------------------------
// parameter factory shared by the supernet and discrete instantiations
// ---------------------------------------------------------------------------

namespace detail {

class ParamFactory {
  public:
    ParamFactory(mt::ParamStore& store, std::mt19937_64* rng) : store_(store), rng_(rng) {}

    // He-normal initialized convolution weight.
    mt::NodePtr conv_weight(const std::string& name, mt::Shape4 shape) {
        if (store_.has(name)) return store_.get(name);
        require_rng(name);
        auto p = store_.create(name, shape);
        const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& v : p->value) v = dist(*rng_);
        return p;
    }

    mt::NodePtr constant(const std::string& name, mt::Shape4 shape, double value) {
        if (store_.has(name)) return store_.get(name);
        require_rng(name);
        auto p = store_.create(name, shape);
        std::fill(p->value.begin(), p->value.end(), value);
        return p;
    }

    mt::ParamStore& store() { return store_; }

  private:
    void require_rng(const std::string& name) {
        if (!rng_) throw InvalidArgumentError("missing parameter in frozen store: " + name);
    }

    mt::ParamStore& store_;
    std::mt19937_64* rng_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// shared network primitives (stem, cell, connectors, head)
// ---------------------------------------------------------------------------

struct RelaxConfig {
    int num_layers = 6;
    int num_blocks = 3;
    int filter_multiplier = 4;
    int in_channels = 3;
    int num_classes = 4;
    bool use_batch_norm = true;
    std::uint64_t seed = 0;

    // Channel law: a node at factor s carries B*F*s/4 channels.
    int node_channels(int s) const { return num_blocks * filter_multiplier * s / 4; }
    int block_channels(int s) const { return filter_multiplier * s / 4; }
    int stem1_channels() const { return (num_blocks * filter_multiplier + 1) / 2; }
    int stem2_channels() const { return num_blocks * filter_multiplier; }
};

namespace detail {

// Builds the pieces of the relaxed network against a ParamStore; every piece
// is addressed by name, so a discrete instantiation over the same store
// reuses the supernet's weights exactly.
class NetPieces {
  public:
    NetPieces(const RelaxConfig& cfg, ParamFactory factory) : cfg_(cfg), f_(factory) {}

    mt::NodePtr conv_bn(const std::string& prefix, const mt::NodePtr& x, int c_out, int k,
                        int stride, int dilation) {
        auto w = f_.conv_weight(prefix + ".conv.w", {c_out, x->shape.c, k, k});
        auto y = mt::conv2d(x, w, nullptr, stride, dilation, 1);
        return maybe_bn(prefix, y, c_out);
    }

    mt::NodePtr maybe_bn(const std::string& prefix, const mt::NodePtr& x, int c) {
        if (!cfg_.use_batch_norm) return x;
        auto g = f_.constant(prefix + ".bn.g", {1, c, 1, 1}, 1.0);
        auto b = f_.constant(prefix + ".bn.b", {1, c, 1, 1}, 0.0);
        return mt::batch_norm(x, g, b);
    }

    // Two-layer search stem, each conv reducing resolution by 2.
    mt::NodePtr stem(const mt::NodePtr& images) {
        auto x = mt::relu(conv_bn("stem.1", images, cfg_.stem1_channels(), 3, 2, 1));
        return mt::relu(conv_bn("stem.2", x, cfg_.stem2_channels(), 3, 2, 1));
    }

    // Resolution connector for an adjacent-layer edge src -> s.
    mt::NodePtr connect(int layer, int src, int s, const mt::NodePtr& x) {
        if (src == s) return x;
        const std::string prefix =
            "conn.l" + std::to_string(layer) + "." + std::to_string(src) + "to" + std::to_string(s);
        if (src * 2 == s)  // descend: stride-2 conv doubles the filters
            return conv_bn(prefix, x, cfg_.node_channels(s), 1, 2, 1);
        if (src == s * 2)  // ascend: bilinear upsample then 1x1 conv
            return conv_bn(prefix, mt::bilinear_upsample_x2(x), cfg_.node_channels(s), 1, 1, 1);
        throw InvalidArgumentError("connect: non-adjacent factors");
    }

    // Chained connector adapting a layer-(l-2) state at factor `from` to
    // factor `s`, used when the exact-factor state does not exist.
    mt::NodePtr adapt_prevprev(int layer, int s, int from, const mt::NodePtr& x) {
        auto cur = x;
        int c = from, step = 0;
        while (c != s) {
            const int next = c < s ? c * 2 : c / 2;
            const std::string prefix = "pp.l" + std::to_string(layer) + ".s" + std::to_string(s) +
                                       ".from" + std::to_string(from) + ".step" +
                                       std::to_string(step++);
            if (next == c * 2)
                cur = conv_bn(prefix, cur, cfg_.node_channels(next), 1, 2, 1);
            else
                cur = conv_bn(prefix, mt::bilinear_upsample_x2(cur), cfg_.node_channels(next), 1, 1, 1);
            c = next;
        }
        return cur;
    }

    std::string op_prefix(int layer, int s, int block, int input, OperatorKind k) const {
        return "cell.l" + std::to_string(layer) + ".s" + std::to_string(s) + ".b" +
               std::to_string(block) + ".j" + std::to_string(input) + "." + operator_name(k);
    }

    mt::NodePtr apply_operator(int layer, int s, int block, int input, OperatorKind kind,
                               const mt::NodePtr& h) {
        const int c = h->shape.c;
        const std::string prefix = op_prefix(layer, s, block, input, kind);
        switch (kind) {
            case OperatorKind::sep_conv_3x3:
            case OperatorKind::sep_conv_5x5: {
                const int k = kind == OperatorKind::sep_conv_3x3 ? 3 : 5;
                auto dw = f_.conv_weight(prefix + ".dw.w", {c, 1, k, k});
                auto pw = f_.conv_weight(prefix + ".pw.w", {c, c, 1, 1});
                auto y = mt::separable_conv(mt::relu(h), dw, pw, nullptr, 1, 1);
                return maybe_bn(prefix, y, c);
            }
            case OperatorKind::atrous_conv_3x3_rate2:
            case OperatorKind::atrous_conv_5x5_rate2: {
                const int k = kind == OperatorKind::atrous_conv_3x3_rate2 ? 3 : 5;
                auto w = f_.conv_weight(prefix + ".conv.w", {c, c, k, k});
                auto y = mt::conv2d(mt::relu(h), w, nullptr, 1, 2, 1);
                return maybe_bn(prefix, y, c);
            }
            case OperatorKind::avg_pool_3x3: return mt::avg_pool_3x3(h);
            case OperatorKind::max_pool_3x3: return mt::max_pool_3x3(h);
            case OperatorKind::skip_connect: return mt::identity(h);
            case OperatorKind::zero: return mt::zero_op(h);
        }
        throw InvalidArgumentError("apply_operator: unknown kind");
    }

    // Cell input preprocessing: 1x1 conv from node width down to block width.
    mt::NodePtr preprocess(int layer, int s, int which, const mt::NodePtr& h) {
        const std::string prefix =
            "cell.l" + std::to_string(layer) + ".s" + std::to_string(s) + ".pre" + std::to_string(which);
        return conv_bn(prefix, mt::relu(h), cfg_.block_channels(s), 1, 1, 1);
    }

    // Continuous cell: every block sums alpha-mixed operators over all of its
    // candidate inputs; the output is the concatenation of block outputs.
    // alpha_probs[i] holds the softmaxed (1,8,1,1) graph node per input j.
    mt::NodePtr cell_forward(int layer, int s, const mt::NodePtr& h_prev,
                             const mt::NodePtr& h_prevprev,
                             const std::vector<std::vector<mt::NodePtr>>& alpha_probs) {
        if (h_prev->shape.h != h_prevprev->shape.h || h_prev->shape.w != h_prevprev->shape.w)
            mt::shape_error("cell_forward", h_prev->shape, h_prevprev->shape);
        std::vector<mt::NodePtr> hs = {preprocess(layer, s, 0, h_prevprev),
                                       preprocess(layer, s, 1, h_prev)};
        std::vector<mt::NodePtr> block_outputs;
        for (int i = 0; i < cfg_.num_blocks; ++i) {
            std::vector<mt::NodePtr> mixed;
            for (int j = 0; j < i + 2; ++j)
                mixed.push_back(mixed_operator(layer, s, i, j, hs[j], alpha_probs[i][j]));
            auto out = mt::add_n(mixed);
            block_outputs.push_back(out);
            hs.push_back(out);
        }
        return mt::concat_channels(block_outputs);
    }

    // Sum over operators weighted by the softmaxed alpha group; operators
    // whose probability underflowed to exactly 0 are not instantiated.
    mt::NodePtr mixed_operator(int layer, int s, int block, int input, const mt::NodePtr& h,
                               const mt::NodePtr& alpha_prob) {
        std::vector<mt::NodePtr> ops;
        std::vector<int> idx;
        for (int k = 0; k < kNumOperators; ++k) {
            if (alpha_prob->value[k] == 0.0) continue;
            ops.push_back(apply_operator(layer, s, block, input, static_cast<OperatorKind>(k), h));
            idx.push_back(k);
        }
        return mt::mix(ops, alpha_prob, idx);
    }

    // Discrete cell: only the two chosen edges per block.
    mt::NodePtr cell_forward_discrete(int layer, int s, const mt::NodePtr& h_prev,
                                      const mt::NodePtr& h_prevprev, const CellGenotype& cell) {
        std::vector<mt::NodePtr> hs = {preprocess(layer, s, 0, h_prevprev),
                                       preprocess(layer, s, 1, h_prev)};
        std::vector<mt::NodePtr> block_outputs;
        for (int i = 0; i < cfg_.num_blocks; ++i) {
            const auto& b = cell.blocks[i];
            auto o1 = apply_operator(layer, s, i, b.input1, b.op1, hs[b.input1]);
            auto o2 = apply_operator(layer, s, i, b.input2, b.op2, hs[b.input2]);
            auto out = mt::add(o1, o2);
            block_outputs.push_back(out);
            hs.push_back(out);
        }
        return mt::concat_channels(block_outputs);
    }

    // Simplified 3-branch ASPP head at factor s, ending in class logits.
    mt::NodePtr head(int s, const mt::NodePtr& x) {
        const int c = cfg_.node_channels(s);
        const int rate = 96 / s;
        const std::string prefix = "aspp.s" + std::to_string(s);
        auto b1 = mt::relu(conv_bn(prefix + ".b1", x, c, 1, 1, 1));
        auto b2 = mt::relu(conv_bn(prefix + ".b2", x, c, 3, 1, rate));
        auto pw = f_.conv_weight(prefix + ".pool.conv.w", {c, c, 1, 1});
        auto pb = f_.constant(prefix + ".pool.conv.b", {1, c, 1, 1}, 0.0);
        auto pooled = mt::relu(mt::conv2d(mt::global_avg_pool(x), pw, pb, 1, 1, 1));
        auto b3 = mt::bilinear_resize(pooled, x->shape.h, x->shape.w);
        auto cat = mt::concat_channels({b1, b2, b3});
        auto cw = f_.conv_weight(prefix + ".cls.w", {cfg_.num_classes, 3 * c, 1, 1});
        auto cb = f_.constant(prefix + ".cls.b", {1, cfg_.num_classes, 1, 1}, 0.0);
        return mt::conv2d(cat, cw, cb, 1, 1, 1);
    }

  private:
    RelaxConfig cfg_;
    ParamFactory f_;
};

// Nearest existing factor by log distance, ties toward the lower factor.
inline int nearest_factor(const std::map<int, mt::NodePtr>& states, int s) {
    int best = -1;
    double best_dist = 1e9;
    for (const auto& [a, node] : states) {
        const double dist = std::abs(std::log2(static_cast<double>(a)) -
                                     std::log2(static_cast<double>(s)));
        if (dist < best_dist) {
            best_dist = dist;
            best = a;
        }
    }
    if (best < 0) throw InvalidArgumentError("nearest_factor: no states");
    return best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SuperNet
// ---------------------------------------------------------------------------

struct SuperNetForward {
    mt::NodePtr logits;
    // Softmaxed alpha graph nodes, shared by every cell in the network.
    std::vector<std::vector<mt::NodePtr>> alpha_probs;
    std::map<std::pair<int, int>, mt::NodePtr> beta_probs;
};

class SuperNet {
  public:
    explicit SuperNet(const RelaxConfig& cfg)
        : cfg_(cfg), trellis_(build_trellis(cfg.num_layers)), rng_(cfg.seed) {
        create_parameters();
    }

    const RelaxConfig& config() const { return cfg_; }
    const Trellis& trellis() const { return trellis_; }
    mt::ParamStore& params() { return store_; }
    const std::vector<std::string>& weight_param_names() const { return weight_names_; }
    const std::vector<std::string>& arch_param_names() const { return arch_names_; }

    // beta group node for source (layer, s); layer 0 is the stem node.
    mt::NodePtr beta_node(int layer, int s) const {
        return store_.get("beta.l" + std::to_string(layer) + ".s" + std::to_string(s));
    }
    mt::NodePtr alpha_node(int block, int input) const {
        return store_.get("alpha.b" + std::to_string(block) + ".j" + std::to_string(input));
    }

    SuperNetForward forward(const mt::NodePtr& images) {
        if (images->shape.h % 32 != 0 || images->shape.w % 32 != 0)
            throw InvalidArgumentError("supernet forward: input size must be divisible by 32, got " +
                                       images->shape.str());
        detail::NetPieces net(cfg_, {store_, nullptr});
        SuperNetForward fw;

        for (int i = 0; i < cfg_.num_blocks; ++i) {
            fw.alpha_probs.emplace_back();
            for (int j = 0; j < i + 2; ++j)
                fw.alpha_probs.back().push_back(mt::softmax_vec(alpha_node(i, j)));
        }
        for (int l = 0; l < cfg_.num_layers; ++l) {
            if (l == 0) {
                fw.beta_probs[{0, 4}] =
                    mt::masked_softmax_vec(beta_node(0, 4), beta_direction_mask(trellis_, 0, 4));
            } else {
                for (int s : trellis_.layer_nodes[l - 1])
                    fw.beta_probs[{l, s}] =
                        mt::masked_softmax_vec(beta_node(l, s), beta_direction_mask(trellis_, l, s));
            }
        }

        auto stem_out = net.stem(images);
        std::map<int, mt::NodePtr> prev = {{4, stem_out}};
        std::map<int, mt::NodePtr> prevprev = {{4, stem_out}};
        for (int l = 1; l <= cfg_.num_layers; ++l) {
            std::map<int, mt::NodePtr> cur;
            for (int s : trellis_.layer_nodes[l - 1]) {
                // Layer-(l-2) state at this factor, or nearest existing state
                // adapted through connectors.
                mt::NodePtr h_pp;
                if (auto it = prevprev.find(s); it != prevprev.end()) {
                    h_pp = it->second;
                } else {
                    const int a = detail::nearest_factor(prevprev, s);
                    h_pp = net.adapt_prevprev(l, s, a, prevprev.at(a));
                }
                std::vector<mt::MixTerm> terms;
                for (int src : {s / 2, s, 2 * s}) {
                    auto it = prev.find(src);
                    if (it == prev.end()) continue;
                    const int src_layer = l - 1;
                    const int group_s = src_layer == 0 ? 4 : src;
                    if (src_layer == 0 && src != 4) continue;
                    auto beta = fw.beta_probs.at({src_layer, group_s});
                    int dir = src == s ? kDirSame : (src < s ? kDirDown : kDirUp);
                    if (beta->value[dir] == 0.0) continue;  // one-hot collapse prunes here
                    auto h_prev = net.connect(l, src, s, it->second);
                    auto cell = net.cell_forward(l, s, h_prev, h_pp, fw.alpha_probs);
                    terms.push_back({cell, beta, dir});
                }
                if (!terms.empty()) cur[s] = mt::mix_terms(terms);
            }
            prevprev = std::move(prev);
            prev = std::move(cur);
        }

        std::vector<mt::NodePtr> head_logits;
        for (int s : trellis_.layer_nodes[cfg_.num_layers - 1]) {
            auto it = prev.find(s);
            if (it == prev.end()) continue;
            auto h = net.head(s, it->second);
            head_logits.push_back(mt::bilinear_resize(h, images->shape.h, images->shape.w));
        }
        fw.logits = head_logits.size() == 1 ? head_logits[0] : mt::add_n(head_logits);
        return fw;
    }

    ArchSnapshot snapshot() const {
        ArchSnapshot snap;
        snap.num_layers = cfg_.num_layers;
        snap.num_blocks = cfg_.num_blocks;
        snap.alpha = AlphaLogits::zeros(cfg_.num_blocks);
        for (int i = 0; i < cfg_.num_blocks; ++i)
            for (int j = 0; j < i + 2; ++j) {
                auto n = alpha_node(i, j);
                for (int k = 0; k < kNumOperators; ++k) snap.alpha.v[i][j][k] = n->value[k];
            }
        snap.beta = BetaLogits::zeros(trellis_);
        for (auto& [key, logits] : snap.beta.v) {
            auto n = beta_node(key.first, key.second);
            for (int d = 0; d < 3; ++d) logits[d] = n->value[d];
        }
        return snap;
    }

    void load_snapshot(const ArchSnapshot& snap) {
        if (snap.num_layers != cfg_.num_layers || snap.num_blocks != cfg_.num_blocks)
            throw ValidationError("load_snapshot: L/B mismatch");
        for (int i = 0; i < cfg_.num_blocks; ++i)
            for (int j = 0; j < i + 2; ++j) {
                auto n = alpha_node(i, j);
                for (int k = 0; k < kNumOperators; ++k) n->value[k] = snap.alpha.v[i][j][k];
            }
        for (const auto& [key, logits] : snap.beta.v) {
            auto n = beta_node(key.first, key.second);
            for (int d = 0; d < 3; ++d) n->value[d] = logits[d];
        }
    }

    // Max |sum - 1| over all softmax groups plus max |masked entry|,
    // recomputed from the current logits.
    std::pair<double, double> normalization_errors() const {
        double sum_err = 0.0, mask_err = 0.0;
        auto snap = snapshot();
        auto ap = normalize_alpha(snap.alpha);
        for (const auto& block : ap)
            for (const auto& g : block) {
                double s = 0.0;
                for (double v : g) s += v;
                sum_err = std::max(sum_err, std::abs(s - 1.0));
            }
        auto bp = normalize_beta(snap.beta, trellis_);
        for (const auto& [key, p] : bp) {
            auto mask = beta_direction_mask(trellis_, key.first, key.second);
            double s = 0.0;
            for (int d = 0; d < 3; ++d) {
                s += p[d];
                if (!mask[d]) mask_err = std::max(mask_err, std::abs(p[d]));
            }
            sum_err = std::max(sum_err, std::abs(s - 1.0));
        }
        return {sum_err, mask_err};
    }

  private:
    void create_parameters() {
        detail::ParamFactory f(store_, &rng_);
        detail::NetPieces net(cfg_, f);
        // Architecture logits: standard Gaussian times 0.001.
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int i = 0; i < cfg_.num_blocks; ++i)
            for (int j = 0; j < i + 2; ++j) {
                auto n = store_.create("alpha.b" + std::to_string(i) + ".j" + std::to_string(j),
                                       {1, kNumOperators, 1, 1});
                for (auto& v : n->value) v = gauss(rng_) * 0.001;
                arch_names_.push_back("alpha.b" + std::to_string(i) + ".j" + std::to_string(j));
            }
        auto make_beta = [&](int l, int s) {
            auto n =
                store_.create("beta.l" + std::to_string(l) + ".s" + std::to_string(s), {1, 3, 1, 1});
            for (auto& v : n->value) v = gauss(rng_) * 0.001;
            arch_names_.push_back("beta.l" + std::to_string(l) + ".s" + std::to_string(s));
        };
        make_beta(0, 4);
        for (int l = 1; l < cfg_.num_layers; ++l)
            for (int s : trellis_.layer_nodes[l - 1]) make_beta(l, s);

        // Weight parameters: run every builder once on dummy shapes via
        // explicit creation order instead; simplest is to trace the forward
        // graph once on a minimal input, creating parameters on first use.
        auto images = mt::make_leaf({1, cfg_.in_channels, 32, 32});
        trace_create(net, images);
        for (const auto& [name, p] : store_.all())
            if (name.rfind("alpha.", 0) != 0 && name.rfind("beta.", 0) != 0)
                weight_names_.push_back(name);
    }

    // Builds the full graph once with parameter creation enabled so that
    // every reachable parameter exists afterwards, including connectors and
    // adapters that a pruned forward might skip.
    void trace_create(detail::NetPieces& net, const mt::NodePtr& images) {
        std::vector<std::vector<mt::NodePtr>> alpha_probs;
        for (int i = 0; i < cfg_.num_blocks; ++i) {
            alpha_probs.emplace_back();
            for (int j = 0; j < i + 2; ++j) alpha_probs.back().push_back(mt::softmax_vec(alpha_node(i, j)));
        }
        auto stem_out = net.stem(images);
        std::map<int, mt::NodePtr> prev = {{4, stem_out}};
        std::map<int, mt::NodePtr> prevprev = {{4, stem_out}};
        for (int l = 1; l <= cfg_.num_layers; ++l) {
            std::map<int, mt::NodePtr> cur;
            for (int s : trellis_.layer_nodes[l - 1]) {
                // Create adapters from every possible source factor so a
                // pruned forward always finds its parameters.
                for (const auto& [a, state] : prevprev)
                    if (a != s) net.adapt_prevprev(l, s, a, state);
                mt::NodePtr h_pp;
                if (auto it = prevprev.find(s); it != prevprev.end()) {
                    h_pp = it->second;
                } else {
                    const int a = detail::nearest_factor(prevprev, s);
                    h_pp = net.adapt_prevprev(l, s, a, prevprev.at(a));
                }
                std::vector<mt::NodePtr> cells;
                for (int src : {s / 2, s, 2 * s}) {
                    auto it = prev.find(src);
                    if (it == prev.end()) continue;
                    auto h_prev = net.connect(l, src, s, it->second);
                    cells.push_back(net.cell_forward(l, s, h_prev, h_pp, alpha_probs));
                }
                cur[s] = cells.size() == 1 ? cells[0] : mt::add_n(cells);
            }
            prevprev = std::move(prev);
            prev = std::move(cur);
        }
        for (int s : trellis_.layer_nodes[cfg_.num_layers - 1])
            if (prev.count(s)) net.head(s, prev.at(s));
    }

    RelaxConfig cfg_;
    Trellis trellis_;
    std::mt19937_64 rng_;
    mt::ParamStore store_;
    std::vector<std::string> weight_names_;
    std::vector<std::string> arch_names_;
};

// ---------------------------------------------------------------------------
// discrete instantiation (collapse oracle and retraining)
// ---------------------------------------------------------------------------

class DiscreteNet {
  public:
    // Owns its parameters; fresh random initialization.
    DiscreteNet(const RelaxConfig& cfg, CellGenotype cell, NetworkPath path)
        : cfg_(cfg), cell_(std::move(cell)), path_(std::move(path)),
          trellis_(build_trellis(cfg.num_layers)), own_store_(std::make_unique<mt::ParamStore>()),
          store_(own_store_.get()), rng_(cfg.seed) {
        check_architecture();
        // Build once to create all parameters deterministically.
        auto images = mt::make_leaf({1, cfg_.in_channels, 32, 32});
        build(images, &rng_);
    }

    // Reads parameters from an existing (e.g. supernet) store; nothing is
    // created or initialized.
    DiscreteNet(const RelaxConfig& cfg, CellGenotype cell, NetworkPath path, mt::ParamStore& store)
        : cfg_(cfg), cell_(std::move(cell)), path_(std::move(path)),
          trellis_(build_trellis(cfg.num_layers)), store_(&store), rng_(0) {
        check_architecture();
    }

    mt::ParamStore& params() { return *store_; }
    const CellGenotype& genotype() const { return cell_; }
    const NetworkPath& path() const { return path_; }

    std::vector<std::string> weight_param_names() const {
        std::vector<std::string> names;
        for (const auto& [name, p] : store_->all()) names.push_back(name);
        return names;
    }

    mt::NodePtr forward(const mt::NodePtr& images) { return build(images, nullptr); }

  private:
    void check_architecture() {
        if (cell_.num_blocks() != cfg_.num_blocks)
            throw ValidationError("DiscreteNet: genotype block count mismatch");
        validate_genotype(cell_);
        auto rep = validate_path(path_, trellis_);
        if (!rep.valid()) throw ValidationError("DiscreteNet: " + rep.violations[0]);
    }

    mt::NodePtr build(const mt::NodePtr& images, std::mt19937_64* rng) {
        if (images->shape.h % 32 != 0 || images->shape.w % 32 != 0)
            throw InvalidArgumentError("discrete forward: input size must be divisible by 32");
        detail::NetPieces net(cfg_, {*store_, rng});
        auto stem_out = net.stem(images);
        mt::NodePtr prev = stem_out;
        int prev_factor = 4, pp_factor = 4;
        mt::NodePtr pp_source = stem_out;
        for (int l = 1; l <= cfg_.num_layers; ++l) {
            const int s = path_.resolutions[l - 1];
            mt::NodePtr h_pp =
                pp_factor == s ? pp_source : net.adapt_prevprev(l, s, pp_factor, pp_source);
            auto h_prev = net.connect(l, prev_factor, s, prev);
            auto cell = net.cell_forward_discrete(l, s, h_prev, h_pp, cell_);
            pp_source = prev;
            pp_factor = prev_factor;
            prev = cell;
            prev_factor = s;
        }
        auto head = net.head(prev_factor, prev);
        return mt::bilinear_resize(head, images->shape.h, images->shape.w);
    }

    RelaxConfig cfg_;
    CellGenotype cell_;
    NetworkPath path_;
    Trellis trellis_;
    std::unique_ptr<mt::ParamStore> own_store_;
    mt::ParamStore* store_;
    std::mt19937_64 rng_;
};

}  // namespace hiernas
