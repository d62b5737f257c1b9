// SPDX-License-Identifier: Apache-2.0
// damoc: command-line driver for the pipeline stages.
//
// Exit codes: 0 success, 2 configuration error, 3 any other failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "damoc/pipeline.hpp"

namespace {

using namespace damoc;
namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
    auto* opt = sub->add_option("--config", c.config, "pipeline config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--stage-overrides", c.overrides, "key.path=value overrides (repeatable)");
}

void print_manifest(const corpus::Manifest& m) {
    std::printf("%s: digest %s\n", std::string(corpus::to_string(m.stage)).c_str(), m.digest().c_str());
    for (const auto& [k, v] : m.stats) std::printf("  %s = %.6g\n", k.c_str(), v);
}

// Standalone prune: archive paths on the command line, no pipeline state.
int standalone_prune(const std::string& archive, const std::string& pre, const std::string& trace_path,
                     double thr, double keep, const std::string& out) {
    const auto arch = tensor::read_archive(archive, fs::path(pre));
    const auto trace = tensor::read_trace(trace_path);
    const auto is = prune::layer_importance(trace);
    const auto plan = prune::plan_prune(is, thr, keep);
    const auto merged = prune::merge_layers(arch, plan, is, {});
    const fs::path dir(out);
    tensor::write_archive(merged, dir / "pruned.safetensors");
    auto pj = plan.to_json();
    pj["importance"] = is.scores;
    io::write_file(dir / "plan.json", pj.dump(2) + "\n");
    std::printf("pruned %zu of %zu layers -> %s\n", plan.pruned_indices.size(), arch.layers.size(),
                (dir / "pruned.safetensors").c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"damoc: data, token and layer reduction for fine-tuning model selection"};
    app.require_subcommand(1);

    Common common;
    std::optional<std::string> f_method;
    std::optional<double> f_ratio, f_lambda;
    std::optional<std::uint64_t> f_seed;
    std::string p_archive, p_pre, p_trace, p_out;
    std::optional<double> p_thr, p_keep;
    std::string fixtures_dir;

    auto* ingest = app.add_subcommand("ingest", "load dataset, score channels and embeddings");
    add_common(ingest, common);
    auto* filt = app.add_subcommand("filter", "select a subset of samples");
    add_common(filt, common);
    filt->add_option("--method", f_method, "selection method");
    filt->add_option("--ratio", f_ratio, "fraction of samples to keep");
    filt->add_option("--seed", f_seed, "selection seed");
    filt->add_option("--lambda", f_lambda, "graphcut diversity weight");
    auto* comp = app.add_subcommand("compress", "token-level compression with fidelity gate");
    add_common(comp, common);
    auto* prn = app.add_subcommand("prune", "layer pruning and merging");
    add_common(prn, common, false);
    prn->add_option("--archive", p_archive, "fine-tuned safetensors archive (standalone mode)");
    prn->add_option("--pre", p_pre, "pretrained safetensors archive");
    prn->add_option("--trace", p_trace, "activation trace (DMCACT1)");
    prn->add_option("--sim-threshold", p_thr, "importance threshold");
    prn->add_option("--keep-rate", p_keep, "sparsify keep rate");
    prn->add_option("--out", p_out, "output directory (standalone mode)");
    auto* ev = app.add_subcommand("evaluate", "rank tables, agreement and speedup report");
    add_common(ev, common);
    auto* all = app.add_subcommand("run-all", "run every stage in order");
    add_common(all, common);
    auto* bench = app.add_subcommand("bench", "synthetic ranking-preservation bench");
    add_common(bench, common);
    auto* fx = app.add_subcommand("fixtures", "write a toy project (dataset, tiny model, config)");
    fx->add_option("dir", fixtures_dir, "target directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (fx->parsed()) {
            std::printf("%s\n", pipeline::write_toy_fixtures(fixtures_dir).c_str());
            return 0;
        }
        if (prn->parsed() && common.config.empty()) {
            if (p_archive.empty() || p_pre.empty() || p_trace.empty() || p_out.empty())
                throw ConfigError("prune without --config needs --archive, --pre, --trace and --out");
            return standalone_prune(p_archive, p_pre, p_trace, p_thr.value_or(0.85), p_keep.value_or(0.20), p_out);
        }
        auto ov = common.overrides;
        auto num = [](double v) {
            char b[64];
            std::snprintf(b, sizeof b, "%.17g", v);
            return std::string(b);
        };
        if (f_method) ov.push_back("filter.method=\"" + *f_method + "\"");
        if (f_ratio) ov.push_back("filter.ratio=" + num(*f_ratio));
        if (f_seed) ov.push_back("filter.seed=" + std::to_string(*f_seed));
        if (f_lambda) ov.push_back("filter.method_params.lambda=" + num(*f_lambda));
        if (!p_archive.empty()) ov.push_back("prune.archive=\"" + p_archive + "\"");
        if (!p_pre.empty()) ov.push_back("prune.pre_archive=\"" + p_pre + "\"");
        if (!p_trace.empty()) ov.push_back("prune.trace=\"" + p_trace + "\"");
        if (p_thr) ov.push_back("prune.sim_threshold=" + num(*p_thr));
        if (p_keep) ov.push_back("prune.keep_rate=" + num(*p_keep));
        const auto cfg = pipeline::load_config(common.config, ov);

        using corpus::Stage;
        if (ingest->parsed()) print_manifest(pipeline::run_stage(cfg, Stage::ingest));
        if (filt->parsed()) print_manifest(pipeline::run_stage(cfg, Stage::filter));
        if (comp->parsed()) print_manifest(pipeline::run_stage(cfg, Stage::compress));
        if (prn->parsed()) print_manifest(pipeline::run_stage(cfg, Stage::prune));
        if (ev->parsed()) print_manifest(pipeline::run_stage(cfg, Stage::evaluate));
        if (all->parsed()) {
            if (!cfg.evaluate) throw ConfigError("run-all needs an evaluate section");
            for (Stage s : pipeline::kStageOrder) print_manifest(pipeline::run_stage(cfg, s));
        }
        if (bench->parsed()) std::printf("%s\n", pipeline::run_bench(cfg).dump(2).c_str());
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
