#pragma once

// Static analysis of decoded architectures: construction plans for the final
// model (redesigned stem + searched body + ASPP head) and exact parameter /
// multiply-add accounting with a per-layer breakdown.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiernas/common.hpp"
#include "hiernas/search_space.hpp"

namespace hiernas {

// One countable unit of the plan. `out_factor` is the downsample factor of
// the unit's output map, used to derive spatial size at a stated input size.
struct PlanOp {
    enum class Kind { conv, sep_conv, batch_norm, pool, upsample, add, none };

    std::string name;
    Kind kind = Kind::none;
    int k = 1;
    int c_in = 0;
    int c_out = 0;
    int groups = 1;
    int out_factor = 1;
    bool bias = false;
};

inline std::int64_t op_params(const PlanOp& op) {
    switch (op.kind) {
        case PlanOp::Kind::conv: {
            std::int64_t p = static_cast<std::int64_t>(op.k) * op.k * (op.c_in / op.groups) *
                             op.c_out;
            if (op.bias) p += op.c_out;
            return p;
        }
        case PlanOp::Kind::sep_conv: {
            std::int64_t p = static_cast<std::int64_t>(op.k) * op.k * op.c_in +
                             static_cast<std::int64_t>(op.c_in) * op.c_out;
            if (op.bias) p += op.c_out;
            return p;
        }
        case PlanOp::Kind::batch_norm: return 2ll * op.c_out;
        default: return 0;
    }
}

inline std::int64_t op_multiply_adds(const PlanOp& op, int input_h, int input_w) {
    const std::int64_t hw = (static_cast<std::int64_t>(input_h) / op.out_factor) *
                            (input_w / op.out_factor);
    switch (op.kind) {
        case PlanOp::Kind::conv:
            return static_cast<std::int64_t>(op.k) * op.k * (op.c_in / op.groups) * op.c_out * hw;
        case PlanOp::Kind::sep_conv:
            // depthwise (groups = c_in) plus pointwise
            return (static_cast<std::int64_t>(op.k) * op.k * op.c_in +
                    static_cast<std::int64_t>(op.c_in) * op.c_out) *
                   hw;
        default: return 0;  // pooling, upsampling, additions, normalization
    }
}

struct BodyNode {
    int layer = 0;  // 1-based
    int factor = 0;
    int channels = 0;
};

struct FinalModelPlan {
    CellGenotype cell;
    NetworkPath path;
    int filter_multiplier = 0;
    int num_classes = 0;
    bool five_branch_aspp = false;
    bool decoder_stub = false;

    std::array<int, 3> stem_filters{64, 64, 128};
    std::array<int, 3> stem_strides{2, 1, 2};
    int head_upsample = 0;  // final path factor
    std::vector<BodyNode> body;
    std::vector<PlanOp> ops;
};

struct LayerStat {
    std::string name;
    std::int64_t params = 0;
    std::int64_t multiply_adds = 0;
};

struct ModelStats {
    std::int64_t params = 0;
    std::int64_t multiply_adds = 0;
    int input_h = 0;
    int input_w = 0;
    std::vector<LayerStat> rows;
};

namespace detail {

class PlanBuilder {
  public:
    PlanBuilder(FinalModelPlan& plan) : plan_(plan) {}

    void conv(const std::string& name, int k, int c_in, int c_out, int out_factor, bool bias,
              bool bn) {
        plan_.ops.push_back({name, PlanOp::Kind::conv, k, c_in, c_out, 1, out_factor, bias});
        if (bn) plan_.ops.push_back({name + ".bn", PlanOp::Kind::batch_norm, 1, c_out, c_out, 1,
                                     out_factor, false});
    }

    void sep_conv(const std::string& name, int k, int c, int out_factor) {
        plan_.ops.push_back({name, PlanOp::Kind::sep_conv, k, c, c, 1, out_factor, false});
        plan_.ops.push_back(
            {name + ".bn", PlanOp::Kind::batch_norm, 1, c, c, 1, out_factor, false});
    }

    void passthrough(const std::string& name, PlanOp::Kind kind, int c, int out_factor) {
        plan_.ops.push_back({name, kind, 1, c, c, 1, out_factor, false});
    }

    void edge_op(const std::string& name, OperatorKind op, int c, int s) {
        switch (op) {
            case OperatorKind::sep_conv_3x3: sep_conv(name, 3, c, s); break;
            case OperatorKind::sep_conv_5x5: sep_conv(name, 5, c, s); break;
            case OperatorKind::atrous_conv_3x3_rate2: conv(name, 3, c, c, s, false, true); break;
            case OperatorKind::atrous_conv_5x5_rate2: conv(name, 5, c, c, s, false, true); break;
            case OperatorKind::avg_pool_3x3:
            case OperatorKind::max_pool_3x3: passthrough(name, PlanOp::Kind::pool, c, s); break;
            case OperatorKind::skip_connect:
            case OperatorKind::zero: passthrough(name, PlanOp::Kind::none, c, s); break;
        }
    }

  private:
    FinalModelPlan& plan_;
};

}  // namespace detail

inline FinalModelPlan build_final_plan(const CellGenotype& cell, const NetworkPath& path, int F,
                                       int num_classes, bool five_branch_aspp = false,
                                       bool decoder_stub = false) {
    if (F < 1) throw ValidationError("build_final_plan: F must be >= 1");
    if (num_classes < 2) throw ValidationError("build_final_plan: need at least 2 classes");
    validate_genotype(cell);
    Trellis trellis = build_trellis(static_cast<int>(path.resolutions.size()));
    auto report = validate_path(path, trellis);
    if (!report.valid()) throw ValidationError("build_final_plan: " + report.violations[0]);

    FinalModelPlan plan;
    plan.cell = cell;
    plan.path = path;
    plan.filter_multiplier = F;
    plan.num_classes = num_classes;
    plan.five_branch_aspp = five_branch_aspp;
    plan.decoder_stub = decoder_stub;
    plan.head_upsample = path.resolutions.back();

    const int B = cell.num_blocks();
    auto node_channels = [&](int s) { return B * F * s / 4; };
    auto block_channels = [&](int s) { return F * s / 4; };
    detail::PlanBuilder b(plan);

    // Redesigned stem: three 3x3 convolutions, strides (2, 1, 2),
    // filters (64, 64, 128).
    b.conv("stem.1", 3, 3, plan.stem_filters[0], 2, false, true);
    b.conv("stem.2", 3, plan.stem_filters[0], plan.stem_filters[1], 2, false, true);
    b.conv("stem.3", 3, plan.stem_filters[1], plan.stem_filters[2], 4, false, true);

    // Body: one cell per layer along the path.
    int prev_c = plan.stem_filters[2], prev_s = 4;
    int prevprev_c = plan.stem_filters[2], prevprev_s = 4;
    for (std::size_t l = 1; l <= path.resolutions.size(); ++l) {
        const int s = path.resolutions[l - 1];
        const std::string cp = "cell." + std::to_string(l);
        plan.body.push_back({static_cast<int>(l), s, node_channels(s)});

        // Resolution connector for the previous-layer state.
        int in_prev_c = prev_c;
        if (prev_s != s) {
            b.conv(cp + ".connect", 1, prev_c, node_channels(s), s, false, true);
            in_prev_c = node_channels(s);
        }
        // Stepwise adapter for the state two layers back.
        int in_pp_c = prevprev_c;
        int c_factor = prevprev_s, step = 0;
        while (c_factor != s) {
            c_factor = c_factor < s ? c_factor * 2 : c_factor / 2;
            b.conv(cp + ".adapt." + std::to_string(step++), 1, in_pp_c, node_channels(c_factor),
                   c_factor, false, true);
            in_pp_c = node_channels(c_factor);
        }

        const int bc = block_channels(s);
        b.conv(cp + ".pre0", 1, in_pp_c, bc, s, false, true);
        b.conv(cp + ".pre1", 1, in_prev_c, bc, s, false, true);
        for (int i = 0; i < B; ++i) {
            const auto& blk = cell.blocks[i];
            const std::string bp = cp + ".block" + std::to_string(i);
            b.edge_op(bp + ".edge0." + operator_name(blk.op1), blk.op1, bc, s);
            b.edge_op(bp + ".edge1." + operator_name(blk.op2), blk.op2, bc, s);
            b.passthrough(bp + ".sum", PlanOp::Kind::add, bc, s);
        }

        prevprev_c = prev_c;
        prevprev_s = prev_s;
        prev_c = node_channels(s);
        prev_s = s;
    }

    // ASPP head at the final factor.
    const int s = prev_s, C = prev_c;
    b.conv("aspp.branch1", 1, C, C, s, false, true);
    const int atrous_branches = five_branch_aspp ? 3 : 1;
    for (int i = 0; i < atrous_branches; ++i)
        b.conv("aspp.atrous" + std::to_string(i + 1), 3, C, C, s, false, true);
    b.conv("aspp.pool", 1, C, C, s, true, false);
    b.passthrough("aspp.pool.resize", PlanOp::Kind::upsample, C, s);
    const int concat_c = C * (2 + atrous_branches);

    if (decoder_stub) {
        // DeepLabv3+-style refinement, counted only: upsample to factor 4,
        // concatenate reduced low-level stem features, refine, classify.
        b.passthrough("decoder.upsample", PlanOp::Kind::upsample, concat_c, 4);
        b.conv("decoder.low_level", 1, plan.stem_filters[2], 48, 4, false, true);
        b.conv("decoder.refine1", 3, concat_c + 48, 256, 4, false, true);
        b.conv("decoder.refine2", 3, 256, 256, 4, false, true);
        b.conv("classifier", 1, 256, num_classes, 4, true, false);
        b.passthrough("head.upsample", PlanOp::Kind::upsample, num_classes, 1);
    } else {
        b.conv("classifier", 1, concat_c, num_classes, s, true, false);
        b.passthrough("head.upsample", PlanOp::Kind::upsample, num_classes, 1);
    }
    return plan;
}

inline std::int64_t count_params(const FinalModelPlan& plan) {
    std::int64_t total = 0;
    for (const auto& op : plan.ops) total += op_params(op);
    return total;
}

inline std::int64_t count_multiply_adds(const FinalModelPlan& plan, int input_h, int input_w) {
    if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
        throw InvalidArgumentError("count_multiply_adds: input size must be a multiple of 32");
    std::int64_t total = 0;
    for (const auto& op : plan.ops) total += op_multiply_adds(op, input_h, input_w);
    return total;
}

inline ModelStats model_stats(const FinalModelPlan& plan, int input_h, int input_w) {
    ModelStats stats;
    stats.input_h = input_h;
    stats.input_w = input_w;
    if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
        throw InvalidArgumentError("model_stats: input size must be a multiple of 32");
    for (const auto& op : plan.ops) {
        LayerStat row;
        row.name = op.name;
        row.params = op_params(op);
        row.multiply_adds = op_multiply_adds(op, input_h, input_w);
        stats.params += row.params;
        stats.multiply_adds += row.multiply_adds;
        stats.rows.push_back(row);
    }
    return stats;
}

inline nlohmann::ordered_json stats_to_json(const ModelStats& stats) {
    nlohmann::ordered_json j;
    j["params"] = stats.params;
    j["multiply_adds"] = stats.multiply_adds;
    j["input"] = {{"h", stats.input_h}, {"w", stats.input_w}};
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& row : stats.rows)
        j["layers"].push_back(
            {{"name", row.name}, {"params", row.params}, {"multiply_adds", row.multiply_adds}});
    return j;
}

inline std::string stats_to_table(const ModelStats& stats) {
    std::size_t name_w = 5;
    for (const auto& row : stats.rows) name_w = std::max(name_w, row.name.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(name_w)) << "layer" << "  " << std::right
        << std::setw(14) << "params" << "  " << std::setw(16) << "multiply_adds" << "\n";
    out << std::string(name_w + 34, '-') << "\n";
    for (const auto& row : stats.rows)
        out << std::left << std::setw(static_cast<int>(name_w)) << row.name << "  " << std::right
            << std::setw(14) << row.params << "  " << std::setw(16) << row.multiply_adds << "\n";
    out << std::string(name_w + 34, '-') << "\n";
    out << std::left << std::setw(static_cast<int>(name_w)) << "total" << "  " << std::right
        << std::setw(14) << stats.params << "  " << std::setw(16) << stats.multiply_adds << "\n";
    return out.str();
}

}  // namespace hiernas
