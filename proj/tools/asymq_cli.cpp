// Copyright 2026 The asymq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// asymq: command-line driver for float pretraining, calibration, QAT, experiment
// sweeps, offset folding and folded-model verification.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
// 3 verification failure.

#include <asymq/harness.hpp>
#include <asymq/integer_inference.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace asymq;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonOptions {
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string bits;
    std::string configs;
    std::string seeds;
    std::string schemes;
    std::string dataset;
    std::string arch;
    std::string checkpoint;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> pretrain_epochs;
    std::optional<std::size_t> jobs;
};

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("--config", o.config_file, "Experiment config file ([section] / key = value)");
    app->add_option("--seed", o.seed, "Random seed (single run) or first seed");
    app->add_option("--out", o.out, "Output file or directory");
    app->add_option("--bits", o.bits, "Bit-widths, e.g. 4 or W2A2,W4A4");
    app->add_option("--configs", o.configs, "Activation configurations 1-4, comma separated");
    app->add_option("--seeds", o.seeds, "Comma-separated seeds");
    app->add_option("--schemes", o.schemes, "Init schemes: minmax, lsq, lsqplus");
    app->add_option("--dataset", o.dataset, "digits or spiral");
    app->add_option("--arch", o.arch, "Conv-net activation (swish, relu, ...) or mlp-<activation>");
    app->add_option("--checkpoint", o.checkpoint, "Checkpoint to read");
    app->add_option("--epochs", o.epochs, "QAT epochs");
    app->add_option("--pretrain-epochs", o.pretrain_epochs, "Float pretraining epochs");
    app->add_option("--jobs", o.jobs, "Worker threads for sweeps");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& s, F parse) {
    std::vector<T> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto pos = s.find(',', start);
        const std::string item = s.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
        if (!item.empty()) out.push_back(parse(item));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

// Config file first, then command-line overrides.
ExperimentConfig resolve(const CommonOptions& o, ExperimentConfig base) {
    ExperimentConfig c = o.config_file.empty() ? std::move(base) : load_experiment_config(o.config_file, std::move(base));
    try {
        if (!o.bits.empty()) c.bits = parse_list<BitWidths>(o.bits, [](const std::string& s) { return parse_bits(s); });
        if (!o.configs.empty()) c.configs = parse_list<int>(o.configs, [](const std::string& s) { return std::stoi(s); });
        if (!o.seeds.empty()) c.seeds = parse_list<std::uint64_t>(o.seeds, [](const std::string& s) { return std::stoull(s); });
        if (!o.schemes.empty()) c.schemes = parse_list<InitScheme>(o.schemes, [](const std::string& s) { return parse_init_scheme(s); });
        if (o.seed && o.seeds.empty()) c.seeds = {*o.seed};
        if (!o.dataset.empty()) c.dataset = o.dataset;
        if (!o.arch.empty()) c.architecture = o.arch;
        if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
        if (!o.out.empty()) c.output_dir = o.out;
        if (o.epochs) c.qat.epochs = *o.epochs;
        if (o.pretrain_epochs) c.pretrain.epochs = *o.pretrain_epochs;
        if (o.jobs) c.jobs = *o.jobs;
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    } catch (const std::out_of_range& e) {
        throw UsageError(std::string("value out of range: ") + e.what());
    }
    return c;
}

void write_trace(const fs::path& path, const TrainTrace& trace) {
    write_text_file(path, [&](std::ostream& os) { write_trace_csv(os, trace); });
}

int cmd_pretrain(const CommonOptions& o) {
    ExperimentConfig c = resolve(o, {});
    if (o.seed) c.pretrain_seed = *o.seed;
    c.checkpoint.clear();
    const DataSplit data = load_dataset(c.dataset);
    TrainTrace trace;
    Network net = shared_float_network(c, data, &trace);
    const fs::path out = o.out.empty() ? fs::path("float.ckpt") : fs::path(o.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_checkpoint(out.string(), net);
    write_trace(fs::path(out).replace_extension(".trace.csv"), trace);
    std::cout << "float network: " << net.parameter_count() << " parameters, train acc "
              << trace.epochs.back().train_acc << ", val acc " << trace.final_val_acc() << '\n'
              << "checkpoint: " << out.string() << '\n';
    return 0;
}

Network float_network(const ExperimentConfig& c, const DataSplit& data) {
    return shared_float_network(c, data);
}

int cmd_calibrate(const CommonOptions& o, const std::string& scheme) {
    ExperimentConfig c = resolve(o, {});
    const DataSplit data = load_dataset(c.dataset);
    Network net = float_network(c, data);
    QuantPlan plan{c.bits.front().weights, c.bits.front().activations, c.configs.front()};
    plan.grad_scale = c.grad_scale;
    Network q = net.with_quantizers(plan);
    CalibrationOptions calib = c.calibration;
    calib.seed = c.seeds.front();
    auto batches = calibration_batches(data.train, calib);
    InitReport report = initialize_quantizers(q, batches, parse_init_scheme(scheme), calib.mse);
    const fs::path out = o.out.empty() ? fs::path("init_report.csv") : fs::path(o.out);
    write_text_file(out, [&](std::ostream& os) { write_init_report_csv(os, report); });
    write_init_report_csv(std::cout, report);
    std::cout << "calibrated accuracy before training: " << accuracy(q, data.validation) << '\n';
    return 0;
}

int cmd_train_qat(const CommonOptions& o, const std::string& offset_mode) {
    ExperimentConfig c = resolve(o, {});
    const DataSplit data = load_dataset(c.dataset);
    Network net = float_network(c, data);
    RunSpec spec{c.bits.front(), c.configs.front(), c.schemes.front(), parse_offset_mode(offset_mode), c.seeds.front()};
    RunOutcome r = run_single(c, net, data, spec);
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);
    save_checkpoint((dir / "qat.ckpt").string(), r.net);
    write_trace(dir / "qat.trace.csv", r.trace);
    std::vector<RunRecord> records{r.record};
    write_text_file(dir / "runs.csv", [&](std::ostream& os) { write_run_csv(os, records); });
    std::cout << bits_label(spec.bits) << " config " << spec.config << " (" << r.record.scheme << ", offset "
              << r.record.offset_mode << ", seed " << spec.seed << "): val acc " << r.record.final_val_acc << '\n'
              << "checkpoint: " << (dir / "qat.ckpt").string() << '\n';
    return 0;
}

int cmd_study(const CommonOptions& o, ExperimentKind kind) {
    ExperimentConfig base;
    base.kind = kind;
    if (kind == ExperimentKind::init_stability) {
        base.configs = {4};
        base.bits = {{2, 2}};
        base.schemes = {InitScheme::minmax, InitScheme::lsq, InitScheme::lsqplus};
        base.seeds = {1, 2, 3, 4, 5};
    } else if (kind == ExperimentKind::fixed_offset) {
        base.configs = {4};
        base.bits = {{4, 4}};
    }
    ExperimentConfig c = resolve(o, base);
    c.kind = kind;
    const DataSplit data = load_dataset(c.dataset);
    Network net = float_network(c, data);
    std::vector<RunSpec> specs = kind == ExperimentKind::config_sweep     ? config_sweep_specs(c)
                                 : kind == ExperimentKind::init_stability ? init_stability_specs(c)
                                                                          : fixed_offset_specs(c);
    std::cout << experiment_kind_name(kind) << ": " << specs.size() << " training runs\n";
    auto outcomes = run_all(c, net, data, specs);
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);
    std::vector<RunRecord> records;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        RunRecord rec = outcomes[i].record;
        const std::string trace = "trace_" + std::to_string(i) + ".csv";
        write_trace(dir / trace, outcomes[i].trace);
        rec.trace = trace;
        records.push_back(std::move(rec));
    }
    write_text_file(dir / "runs.csv", [&](std::ostream& os) { write_run_csv(os, records); });
    write_text_file(dir / "summary.csv", [&](std::ostream& os) { write_summary_csv(os, records); });
    write_text_file(dir / "table.txt", [&](std::ostream& os) { write_table(os, records, kind); });
    write_table(std::cout, records, kind);
    std::cout << "results: " << (dir / "runs.csv").string() << '\n';
    return 0;
}

Network load_quantized(const std::string& path) {
    if (path.empty()) throw UsageError("--checkpoint is required");
    Network net = load_checkpoint(path);
    if (!net.has_quantizers()) throw UsageError("checkpoint '" + path + "' has no quantizers");
    return net;
}

int cmd_fold(const CommonOptions& o) {
    Network net = load_quantized(o.checkpoint);
    FoldedNetwork f = fold(net);
    const std::string out = o.out.empty() ? "folded.bin" : o.out;
    save_folded(out, f);
    std::cout << "folded model: " << out << '\n' << "accumulator audit (step, bound, bits incl. sign):\n";
    for (const auto& a : accumulator_audit(f)) {
        std::cout << "  " << a.step << ": " << a.bound << ", " << a.signed_bits << (a.fits_int32 ? "" : "  (exceeds int32)")
                  << '\n';
    }
    return 0;
}

int cmd_verify_fold(const CommonOptions& o, const std::string& folded_path, std::size_t samples, double tolerance) {
    Network net = load_quantized(o.checkpoint);
    FoldedNetwork f = folded_path.empty() ? fold(net) : load_folded(folded_path);
    const DataSplit data = load_dataset(o.dataset.empty() ? "digits" : o.dataset);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(samples, data.validation.size()); ++i) idx.push_back(i);
    Tensor x = data.validation.batch(idx);
    auto integer = integer_forward(f, x);
    auto simulated = simulated_forward(net, x);
    FoldComparison cmp = compare_paths(integer, simulated);
    std::cout << "samples: " << idx.size() << ", logits: " << cmp.elements << '\n'
              << "max abs deviation: " << cmp.max_abs << '\n'
              << "max relative deviation: " << cmp.max_relative << " (tolerance " << tolerance << ")\n";
    if (!(cmp.max_relative <= tolerance)) {
        std::cout << "verification FAILED\n";
        return kExitVerify;
    }
    std::cout << "verification passed\n";
    return 0;
}

int cmd_beta_report(const CommonOptions& o) {
    Network net = load_quantized(o.checkpoint);
    const DataSplit data = load_dataset(o.dataset.empty() ? "digits" : o.dataset);
    auto batches = calibration_batches(data.train, CalibrationOptions{});
    BetaReport report = run_beta_report(net, batches);
    const fs::path dir = o.out.empty() ? fs::path("beta_report") : fs::path(o.out);
    write_text_file(dir / "beta.csv", [&](std::ostream& os) { write_beta_csv(os, report); });
    write_text_file(dir / "beta.svg", [&](std::ostream& os) { write_beta_svg(os, report); });
    write_beta_csv(std::cout, report);
    std::cout << report.negative << " of " << report.rows.size() << " offsets negative; " << report.flagged()
              << " below x_min\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"asymq: quantization-aware training with learnable scale and offset"};
    app.require_subcommand(1);
    CommonOptions o;
    std::string scheme = "lsqplus";
    std::string offset_mode = "learned";
    std::string folded_path;
    std::size_t samples = 256;
    double tolerance = 1e-5;

    auto* pretrain = app.add_subcommand("pretrain-float", "Train the float network and write a checkpoint");
    auto* calibrate = app.add_subcommand("calibrate", "Initialize quantizers and write the init report");
    auto* train = app.add_subcommand("train-qat", "Quantization-aware training of one configuration");
    auto* sweep = app.add_subcommand("sweep", "Bit-width x configuration x seed sweep");
    auto* stability = app.add_subcommand("stability", "Initialization-stability sweep");
    auto* fixed = app.add_subcommand("fixed-offset", "Learned vs fixed offsets");
    auto* fold_cmd = app.add_subcommand("fold", "Fold offsets into biases and export the integer model");
    auto* verify = app.add_subcommand("verify-fold", "Compare the integer path against the simulated path");
    auto* beta = app.add_subcommand("beta-report", "Per-layer learned offsets versus x_min");
    for (auto* sub : {pretrain, calibrate, train, sweep, stability, fixed, fold_cmd, verify, beta}) add_common(sub, o);
    calibrate->add_option("--scheme", scheme, "minmax, lsq or lsqplus");
    train->add_option("--offset-mode", offset_mode, "learned, fixed_zero or fixed_xmin");
    verify->add_option("--folded", folded_path, "Folded model to verify (folds the checkpoint when omitted)");
    verify->add_option("--samples", samples, "Validation samples to compare");
    verify->add_option("--tolerance", tolerance, "Relative tolerance |int - sim| / (1 + |sim|)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*pretrain) return cmd_pretrain(o);
        if (*calibrate) return cmd_calibrate(o, scheme);
        if (*train) return cmd_train_qat(o, offset_mode);
        if (*sweep) return cmd_study(o, ExperimentKind::config_sweep);
        if (*stability) return cmd_study(o, ExperimentKind::init_stability);
        if (*fixed) return cmd_study(o, ExperimentKind::fixed_offset);
        if (*fold_cmd) return cmd_fold(o);
        if (*verify) return cmd_verify_fold(o, folded_path, samples, tolerance);
        if (*beta) return cmd_beta_report(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitConfig;
}
