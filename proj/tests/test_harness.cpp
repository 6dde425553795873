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

#include <asymq/harness.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace asymq;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.dataset = "spiral";
    c.architecture = "mlp-swish";
    c.pretrain.epochs = 3;
    c.qat.epochs = 1;
    c.calibration.batches = 2;
    c.calibration.batch_size = 64;
    return c;
}

const DataSplit& spiral() {
    static const DataSplit d = load_dataset("spiral");
    return d;
}

}  // namespace

TEST(ConfigParser, BitsSyntax) {
    EXPECT_EQ(parse_bits("W2A2"), (BitWidths{2, 2}));
    EXPECT_EQ(parse_bits("w4a8"), (BitWidths{4, 8}));
    EXPECT_EQ(parse_bits("3"), (BitWidths{3, 3}));
    EXPECT_THROW(parse_bits("W2"), std::invalid_argument);
    EXPECT_THROW(parse_bits("1"), std::invalid_argument);
    EXPECT_EQ(bits_label({2, 4}), "W2A4");
}

TEST(ConfigParser, ParsesSectionsAndComments) {
    std::istringstream is(R"(# study
[experiment]
kind = init_stability
dataset = spiral        ; inline comment
bits = W2A2, W4A4
configs = 4
schemes = minmax, lsq, lsqplus
seeds = 1, 2, 3, 4, 5
jobs = 2
[train]
epochs = 3
lr = 0.02
offset_lr_mult = 0.5
[pretrain]
epochs = 7
[calibration]
batches = 3
)");
    ExperimentConfig c = parse_experiment_config(is);
    EXPECT_EQ(c.kind, ExperimentKind::init_stability);
    EXPECT_EQ(c.dataset, "spiral");
    EXPECT_EQ(c.bits.size(), 2u);
    EXPECT_EQ(c.schemes.size(), 3u);
    EXPECT_EQ(c.seeds.size(), 5u);
    EXPECT_EQ(c.jobs, 2u);
    EXPECT_EQ(c.qat.epochs, 3u);
    EXPECT_FLOAT_EQ(c.qat.lr, 0.02f);
    EXPECT_FLOAT_EQ(c.qat.offset_lr_mult, 0.5f);
    EXPECT_EQ(c.pretrain.epochs, 7u);
    EXPECT_EQ(c.calibration.batches, 3u);
}

TEST(ConfigParser, ErrorsCarryLineNumbers) {
    auto line_of = [](const std::string& text) -> std::size_t {
        std::istringstream is(text);
        try {
            parse_experiment_config(is);
        } catch (const ConfigError& e) {
            return e.line();
        }
        return 0;
    };
    EXPECT_EQ(line_of("[experiment]\nbits = 4\nnonsense\n"), 3u);
    EXPECT_EQ(line_of("[experiment]\nunknown_key = 1\n"), 2u);
    EXPECT_EQ(line_of("[nope]\n"), 1u);
    EXPECT_EQ(line_of("[train]\nepochs = many\n"), 2u);
    EXPECT_EQ(line_of("configs = 9\n"), 1u);
    EXPECT_EQ(line_of("[experiment\n"), 1u);
    EXPECT_GT(line_of("seeds = 1, 1\n"), 0u);
    EXPECT_THROW(load_experiment_config("/nonexistent/asymq.ini"), ConfigError);
}

TEST(Sweeps, Cardinalities) {
    ExperimentConfig c;
    c.bits = {{2, 2}, {4, 4}};
    c.configs = {1, 2, 3, 4};
    c.seeds = {1};
    EXPECT_EQ(config_sweep_specs(c).size(), 8u);
    c.bits = {{2, 2}};
    c.configs = {4};
    c.schemes = {InitScheme::minmax, InitScheme::lsq, InitScheme::lsqplus};
    c.seeds = {1, 2, 3, 4, 5};
    EXPECT_EQ(init_stability_specs(c).size(), 15u);
    c.schemes = {InitScheme::lsqplus};
    EXPECT_EQ(fixed_offset_specs(c).size(), 15u);
    c.configs = {1, 2};
    EXPECT_THROW(fixed_offset_specs(c), std::invalid_argument);
    c.kind = ExperimentKind::init_stability;
    c.seeds = {1};
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Stats, HalfRange) {
    std::vector<double> v{0.9, 0.8, 0.95, 0.85};
    auto s = accuracy_stats(v);
    EXPECT_NEAR(s.mean, 0.875, 1e-12);
    EXPECT_EQ(s.best, 0.95);
    EXPECT_NEAR(s.half_range, 0.075, 1e-12);
    EXPECT_EQ(s.runs, 4u);
}

TEST(RunTable, CsvRoundTrip) {
    RunRecord a;
    a.experiment = "config_sweep";
    a.dataset = "digits";
    a.architecture = "swish";
    a.bits = {2, 2};
    a.config = 3;
    a.scheme = "lsqplus";
    a.offset_mode = "learned";
    a.seed = 42;
    a.final_val_acc = 0.9387186629526463;
    a.best_val_acc = 0.9415041782729805;
    a.trace = "trace_0.csv";
    a.layers = {{"input", 0.0039215689f, 0.0f, 0.0f}, {"layer1.act0", 0.123456791f, -0.278464556f, -0.2784646f}};
    a.wall_seconds = 1.2345678901234567;
    RunRecord b = a;
    b.config = 4;
    b.layers.clear();
    std::vector<RunRecord> recs{a, b};
    std::stringstream ss;
    write_run_csv(ss, recs);
    auto back = read_run_csv(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], a);
    EXPECT_EQ(back[1], b);
    std::stringstream bad("not,a,header\n");
    EXPECT_THROW(read_run_csv(bad), FormatError);
}

TEST(Runs, ReproducibleAndOrderIndependent) {
    ExperimentConfig c = tiny_config();
    c.bits = {{4, 4}};
    c.configs = {1, 4};
    c.seeds = {1, 2};
    Network fp = shared_float_network(c, spiral());
    auto first = run_config_sweep(c, fp, spiral());
    c.jobs = 2;
    auto second = run_config_sweep(c, fp, spiral());
    ASSERT_EQ(first.size(), 4u);
    ASSERT_EQ(second.size(), 4u);
    for (std::size_t i = 0; i < first.size(); ++i) {
        EXPECT_EQ(first[i].config, second[i].config);
        EXPECT_EQ(first[i].seed, second[i].seed);
        EXPECT_EQ(first[i].final_val_acc, second[i].final_val_acc);
        EXPECT_EQ(first[i].layers, second[i].layers);
        EXPECT_GE(first[i].final_val_acc, 0.0);
        EXPECT_LE(first[i].final_val_acc, 1.0);
    }
    std::ostringstream table;
    write_table(table, first, ExperimentKind::config_sweep);
    EXPECT_NE(table.str().find("config 4"), std::string::npos);
    EXPECT_NE(table.str().find("±"), std::string::npos);
}

TEST(Runs, MissingCheckpointIsAnError) {
    ExperimentConfig c = tiny_config();
    c.checkpoint = "/nonexistent/float.ckpt";
    EXPECT_THROW(shared_float_network(c, spiral()), std::runtime_error);
}

TEST(BetaReport, RowsAndPreconditions) {
    ExperimentConfig c = tiny_config();
    Network fp = shared_float_network(c, spiral());
    auto batches = calibration_batches(spiral().train, c.calibration);

    Network c1 = fp.with_quantizers({4, 4, 1});
    initialize_quantizers(c1, batches, InitScheme::minmax);
    EXPECT_THROW(run_beta_report(c1, batches), std::invalid_argument);

    auto run = run_single(c, fp, spiral(), RunSpec{{4, 4}, 4, InitScheme::lsqplus, OffsetMode::learned, 1});
    BetaReport rep = run_beta_report(run.net, batches);
    ASSERT_EQ(rep.rows.size(), 2u);
    for (const auto& r : rep.rows) {
        EXPECT_EQ(r.activation, "swish");
        EXPECT_EQ(r.below_min, r.beta < r.x_min);
    }
    std::ostringstream csv, svg;
    write_beta_csv(csv, rep);
    write_beta_svg(svg, rep);
    EXPECT_EQ(csv.str().substr(0, 38), "layer,activation,beta,x_min,beta_below");
    EXPECT_NE(svg.str().find("<svg"), std::string::npos);
    EXPECT_NE(svg.str().find("</svg>"), std::string::npos);
}

TEST(ParallelFor, PropagatesErrors) {
    EXPECT_THROW(parallel_for(4, 2, [](std::size_t i) { if (i == 2) throw std::runtime_error("boom"); }),
                 std::runtime_error);
    std::vector<int> slots(10, 0);
    parallel_for(10, 3, [&](std::size_t i) { slots[i] = static_cast<int>(i); });
    for (int i = 0; i < 10; ++i) EXPECT_EQ(slots[static_cast<std::size_t>(i)], i);
}
