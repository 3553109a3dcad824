#pragma once

// Discretization of the continuous architecture encoding: greedy cell
// decoding (two strongest non-zero inputs per block) and Viterbi path
// decoding over the trellis transition probabilities, plus an exhaustive
// oracle for the latter.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "hiernas/common.hpp"
#include "hiernas/relaxation.hpp"
#include "hiernas/search_space.hpp"

namespace hiernas {

namespace detail {

inline void check_alpha_probs(const AlphaProbs& probs, int num_blocks) {
    if (num_blocks < 1) throw ValidationError("decode_cell: B must be >= 1");
    if (static_cast<int>(probs.size()) != num_blocks)
        throw ValidationError("decode_cell: expected " + std::to_string(num_blocks) + " blocks, got " +
                              std::to_string(probs.size()));
    for (int i = 0; i < num_blocks; ++i) {
        if (static_cast<int>(probs[i].size()) != i + 2)
            throw ValidationError("decode_cell: block " + std::to_string(i) + " needs " +
                                  std::to_string(i + 2) + " input groups");
        for (const auto& group : probs[i]) {
            double sum = 0.0;
            for (double p : group) {
                if (!(p >= 0.0 && p <= 1.0))
                    throw ValidationError("decode_cell: probability outside [0, 1]");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw ValidationError("decode_cell: input group does not sum to 1");
        }
    }
}

// Strongest non-zero operator of a group: strength and argmax index, ties
// resolved by operator list order.
inline std::pair<double, int> best_nonzero_op(const std::array<double, kNumOperators>& group) {
    double best = -1.0;
    int arg = -1;
    for (int k = 0; k < kNumOperators; ++k) {
        if (static_cast<OperatorKind>(k) == OperatorKind::zero) continue;
        if (group[k] > best) {
            best = group[k];
            arg = k;
        }
    }
    return {best, arg};
}

}  // namespace detail

inline CellGenotype decode_cell(const AlphaProbs& probs, int num_blocks) {
    detail::check_alpha_probs(probs, num_blocks);
    CellGenotype cell;
    for (int i = 0; i < num_blocks; ++i) {
        // Rank candidate inputs by edge strength; ties go to the lower index.
        std::vector<std::pair<double, int>> strength;
        for (int j = 0; j < i + 2; ++j)
            strength.emplace_back(detail::best_nonzero_op(probs[i][j]).first, j);
        std::stable_sort(strength.begin(), strength.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        int in1 = strength[0].second, in2 = strength[1].second;
        if (in1 > in2) std::swap(in1, in2);
        BlockGenotype b;
        b.input1 = in1;
        b.input2 = in2;
        b.op1 = static_cast<OperatorKind>(detail::best_nonzero_op(probs[i][in1]).second);
        b.op2 = static_cast<OperatorKind>(detail::best_nonzero_op(probs[i][in2]).second);
        cell.blocks.push_back(b);
    }
    validate_genotype(cell);
    return cell;
}

namespace detail {

inline void check_beta_probs(const BetaProbs& probs, const Trellis& trellis) {
    for (int l = 0; l < trellis.num_layers; ++l) {
        const std::vector<int> sources =
            l == 0 ? std::vector<int>{4} : trellis.layer_nodes[l - 1];
        for (int s : sources) {
            auto it = probs.find({l, s});
            if (it == probs.end())
                throw ValidationError("path decode: missing transition group (" + std::to_string(l) +
                                      "," + std::to_string(s) + ")");
            auto mask = beta_direction_mask(trellis, l, s);
            double sum = 0.0;
            for (int d = 0; d < 3; ++d) {
                const double p = it->second[d];
                if (!(p >= 0.0 && p <= 1.0))
                    throw ValidationError("path decode: probability outside [0, 1]");
                if (!mask[d] && p != 0.0)
                    throw ValidationError("path decode: infeasible direction has nonzero mass");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw ValidationError("path decode: transition group does not sum to 1");
        }
    }
}

inline double transition_logp(const BetaProbs& probs, int layer, int src, int dst) {
    const auto& group = probs.at({layer, src});
    int dir = dst == src ? kDirSame : (dst == src * 2 ? kDirDown : kDirUp);
    const double p = group[dir];
    return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

}  // namespace detail

// Maximum-product path through the trellis; ties broken toward the lower
// factor at the earliest divergence (lexicographically smallest argmax).
inline NetworkPath decode_path_viterbi(const BetaProbs& probs, const Trellis& trellis) {
    detail::check_beta_probs(probs, trellis);
    const int L = trellis.num_layers;

    // Backward pass: best[l][s] = best log-probability of completing the
    // path from node (l, s) to the final layer.
    std::vector<std::map<int, double>> best(L + 1);
    for (int s : trellis.layer_nodes[L - 1]) best[L][s] = 0.0;
    for (int l = L - 1; l >= 1; --l) {
        for (int s : trellis.layer_nodes[l - 1]) {
            double b = -std::numeric_limits<double>::infinity();
            for (int t : {s / 2, s, 2 * s}) {
                if (!trellis.node_feasible(l + 1, t)) continue;
                b = std::max(b, detail::transition_logp(probs, l, s, t) + best[l + 1][t]);
            }
            best[l][s] = b;
        }
    }

    // Forward reconstruction from the virtual stem node at factor 4,
    // preferring the lower factor whenever scores tie.
    NetworkPath path;
    int src = 4;
    for (int l = 0; l < L; ++l) {
        double bound = -std::numeric_limits<double>::infinity();
        int chosen = -1;
        for (int t : {src / 2, src, 2 * src}) {
            if (!is_downsample_factor(t) || !trellis.node_feasible(l + 1, t)) continue;
            const double score = detail::transition_logp(probs, l, src, t) + best[l + 1][t];
            if (score > bound) {
                bound = score;
                chosen = t;
            }
        }
        if (chosen < 0) throw ValidationError("path decode: no feasible continuation");
        path.resolutions.push_back(chosen);
        src = chosen;
    }
    return path;
}

// Exhaustive argmax over all paths with the same scoring and tie-breaking;
// paths are enumerated lexicographically and only strict improvements are
// kept, so the first optimum (lowest factors) wins ties.
inline NetworkPath brute_force_best_path(const BetaProbs& probs, const Trellis& trellis,
                                         std::uint64_t cap = 1000000) {
    detail::check_beta_probs(probs, trellis);
    NetworkPath best;
    double best_logp = -std::numeric_limits<double>::infinity();
    enumerate_paths(
        trellis,
        [&](const NetworkPath& p) {
            double logp = 0.0;
            int src = 4;
            for (int l = 0; l < trellis.num_layers; ++l) {
                logp += detail::transition_logp(probs, l, src, p.resolutions[l]);
                src = p.resolutions[l];
            }
            if (logp > best_logp) {
                best_logp = logp;
                best = p;
            }
        },
        cap);
    if (best.resolutions.empty()) throw ValidationError("brute_force_best_path: empty trellis");
    return best;
}

struct DecodedArchitecture {
    CellGenotype cell;
    NetworkPath path;
    std::string provenance;
};

inline DecodedArchitecture decode_snapshot(const ArchSnapshot& snap) {
    if (snap.num_layers < 1 || snap.num_blocks < 1)
        throw ValidationError("decode_snapshot: bad dimensions");
    Trellis trellis = build_trellis(snap.num_layers);
    DecodedArchitecture out;
    out.cell = decode_cell(normalize_alpha(snap.alpha), snap.num_blocks);
    out.path = decode_path_viterbi(normalize_beta(snap.beta, trellis), trellis);
    std::ostringstream prov;
    prov << "snapshot-fnv1a=" << std::hex << fnv1a(snapshot_to_json(snap).dump())
         << " cell=greedy-top2 path=viterbi";
    out.provenance = prov.str();
    return out;
}

}  // namespace hiernas
